"""Density layouts (CSV, 8-bit PGM) and FRC / SN tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fe_model import Mesh


def _grid(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size != mesh.n_elements:
        raise ValueError(f"{v.size} densities do not match {mesh.n_elements} elements")
    return v.reshape(mesh.ny, mesh.nx)


def write_density_csv(path, mesh: Mesh, values) -> None:
    """One row per element row, top row first (image orientation)."""
    np.savetxt(path, _grid(mesh, values)[::-1], delimiter=",", fmt="%.17g")


def read_density_csv(path, mesh: Mesh | None = None) -> np.ndarray:
    g = np.atleast_2d(np.loadtxt(path, delimiter=","))
    v = g[::-1].ravel()
    if mesh is not None and v.size != mesh.n_elements:
        raise ValueError(f"density file has {v.size} entries, mesh has {mesh.n_elements} elements")
    return v


def write_pgm(path, mesh: Mesh, values) -> None:
    """Binary 8-bit PGM; solid material is black."""
    g = np.clip(_grid(mesh, values)[::-1], 0.0, 1.0)
    img = np.round(255 * (1.0 - g)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mesh.nx} {mesh.ny}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Densities (element order) from a PGM written by :func:`write_pgm`."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM file")
    w, h, vmax = map(int, tokens[1:])
    img = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return (1.0 - img.astype(float) / vmax)[::-1].ravel()


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def read_rows(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(v) for v in r] for r in rd]
    return header, np.array(rows).reshape(-1, len(header))


def write_frc(path, samples, n_out: int = 0) -> None:
    header = ["Omega", "rho", "theta", "stable"] + [f"amp_out{k}" for k in range(n_out)]
    rows = []
    for s in samples:
        amp = [] if s.physical_amp is None else list(s.physical_amp)
        rows.append([s.Omega, s.rho, s.theta, int(s.stable)] + amp)
    write_rows(path, header, rows)


def write_sn(path, rows) -> None:
    """Rows of (eps, rho_SN, Omega_SN, b)."""
    write_rows(path, ["eps", "rho_sn", "Omega_sn", "b"], rows)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"not serializable: {type(o)}")
