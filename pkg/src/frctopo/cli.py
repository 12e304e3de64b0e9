"""Command-line entry point: ``frctopo <command> --config run.yaml [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("frctopo")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="frctopo", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--out-dir", type=Path, default=Path("runs/out"), help="output directory")
        p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
        p.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("optimize", help="run the topology optimization")
    common(p)
    p.add_argument("--max-iters", type=int, default=None, help="override schedule.max_iters")
    p.add_argument("--resume", action="store_true", help="continue from the state saved in --out-dir")

    p = sub.add_parser("analyze-frc", help="FRC, peak and SN points of a layout")
    common(p)
    p.add_argument("--density", type=Path, help="density CSV (default: uniform initial design)")
    p.add_argument("--levels", type=float, nargs="*", help="force amplitudes (ng*um/ms^2)")

    p = sub.add_parser("check-gradients", help="finite-difference check of all sensitivities")
    common(p)
    p.add_argument("--density", type=Path)
    p.add_argument("--count", type=int, default=10, help="number of random design variables")
    p.add_argument("--step", type=float, default=5e-3)

    p = sub.add_parser("sweep-sn", help="SN points over a grid of force scales")
    common(p)
    p.add_argument("--density", type=Path)

    p = sub.add_parser("export-layout", help="write a density file as PGM and CSV")
    common(p)
    p.add_argument("--density", type=Path, required=True)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads:
        for v in THREAD_VARS:
            os.environ[v] = str(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .config import ConfigError, load_config  # after thread settings

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.out_dir.mkdir(parents=True, exist_ok=True)
    cmd = {"optimize": _optimize, "analyze-frc": _analyze_frc, "check-gradients": _check_gradients,
           "sweep-sn": _sweep_sn, "export-layout": _export_layout}[args.command]
    try:
        return cmd(cfg, args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _design(cfg, pl, x0, path):
    """Design variables from a density CSV (full element field or design-only)."""
    import numpy as np

    from . import io

    if path is None:
        return x0
    v = io.read_density_csv(path)
    if v.size == pl.mesh.n_elements:
        return v[pl.design]
    if v.size == pl.n_design:
        return v
    raise ValueError(f"density file has {v.size} entries; mesh has {pl.mesh.n_elements} elements "
                     f"({pl.n_design} designable)")


def _manifest(cfg, args, st):
    from . import __version__

    return {
        "command": args.command,
        "version": __version__,
        "units": {"mass": "ng", "length": "um", "time": "ms", "frequency": "rad/ms (kHz inputs x 2 pi)"},
        "config": cfg.raw,
        "damping": {"alpha": st.alpha, "beta": st.beta},
        "schedule": {**vars(cfg.schedule), "stages": cfg.schedule.stages()},
        "free_dofs": int(st.mesh.n_free),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def _frc_outputs(cfg, st, pl, x, out: Path, levels=None):
    """FRC and SN tables of a layout at each force level; returns summary records."""
    import dataclasses

    import numpy as np

    from . import frc, io
    from .analysis import analyze
    from .ssm import nonautonomous_x0, reconstruct

    levels = levels or cfg.forcing.levels or [st.force]
    base = st.force
    records = []
    try:
        for F in levels:
            st.force = F
            res = analyze(st, pl, x, cusp=True)
            rom, model, eps = res.rom, res.model, st.eps
            hw = cfg.outputs.frc_halfwidth * rom.lam.imag
            lo = min(rom.lam.imag - hw, res.Omega_max - hw)
            hi = max(rom.lam.imag + hw, res.Omega_max + hw)
            grid = np.linspace(lo, hi, cfg.outputs.frc_points)
            samples = []
            for W in grid:
                x0 = nonautonomous_x0(model, W, rom)
                for s in frc.frc_at(W, rom, eps):
                    amp = reconstruct(s.rho, s.theta, W, rom, x0, eps, dofs=model.output_dofs)
                    samples.append(dataclasses.replace(s, physical_amp=amp))
            tag = f"{F:.3g}".replace("+", "")
            io.write_frc(out / f"frc_F{tag}.csv", samples, n_out=len(model.output_dofs))
            sn = frc.sn_points(rom, eps)
            io.write_sn(out / f"sn_F{tag}.csv",
                        [(eps, p.rho, p.Omega, frc.cusp_coefficient(p, rom).b) for p in sn])
            records.append({"force": F, "rho_max": res.rho_max, "Omega_max": res.Omega_max,
                            "omega1": res.omega1, "omega2": res.omega2, "gamma": rom.gamma,
                            "ftilde": rom.ftilde, "lam": rom.lam, "n_sn": len(sn), "b": res.b,
                            "sn": [(p.rho, p.Omega) for p in sn]})
    finally:
        st.force = base
    return records


def _optimize(cfg, args) -> int:
    import numpy as np

    from . import io
    from .mma import MmaState
    from .optimize import run

    if cfg.problem is None:
        raise ValueError("optimize needs a 'problem' section")
    st, pl, x0 = cfg.setup()
    out = args.out_dir
    if args.max_iters is not None:
        cfg.schedule.max_iters = args.max_iters
    state, stage = None, 0
    state_file = out / "state.npz"
    if args.resume:
        if not state_file.exists():
            raise ValueError(f"--resume: no saved state in {out}")
        z = np.load(state_file)
        state = MmaState(x=z["x"], xmin=z["xmin"], xmax=z["xmax"], iteration=int(z["iteration"]),
                         xold1=z["xold1"], xold2=z["xold2"], low=z["low"] if z["low"].size else None,
                         upp=z["upp"] if z["upp"].size else None, move=float(z["move"]), stage=int(z["stage"]))
        stage = state.stage
        st.alpha, st.beta = float(z["alpha"]), float(z["beta"])
        log.info("resuming at iteration %d, stage %d", state.iteration, stage)
    else:
        (out / "config.yaml").write_text(args.config.read_text())
        io.write_json(out / "manifest.json", _manifest(cfg, args, st))
        (out / "log.jsonl").write_text("")
    snaps = cfg.outputs.snapshot_every

    def save_state(s, stage_now):
        empty = np.zeros(0)
        np.savez(state_file, x=s.x, xmin=s.xmin, xmax=s.xmax, iteration=s.iteration, xold1=s.xold1,
                 xold2=s.xold2, low=empty if s.low is None else s.low, upp=empty if s.upp is None else s.upp,
                 move=s.move, stage=stage_now, alpha=st.alpha, beta=st.beta)

    def callback(rec, x, s):
        log.info("it %d stage %d obj %.6g change %.3g %s", rec["iteration"], rec["stage"], rec["objective"],
                 rec["max_change"], {k: round(v, 6) for k, v in rec["constraints"].items()})
        if snaps and rec["iteration"] % snaps == 0:
            io.write_density_csv(out / f"density_{rec['iteration']:04d}.csv", pl.mesh,
                                 pl.forward(x).projected)
        save_state(s, s.stage)

    t0 = time.perf_counter()
    result = run(cfg.problem, st, pl, x0, cfg.schedule, callback=callback, log_path=out / "log.jsonl",
                 state=state, stage=stage)
    save_state(result.state, result.state.stage)
    field = pl.forward(result.x)
    io.write_density_csv(out / "density.csv", pl.mesh, field.projected)
    io.write_density_csv(out / "design.csv", pl.mesh, pl.expand(result.x))
    io.write_pgm(out / "layout.pgm", pl.mesh, field.projected)
    summary = {
        "converged": result.converged,
        "iterations": result.iterations,
        "failures": result.failures,
        "seconds_total": time.perf_counter() - t0,
        "seconds_per_iteration": result.seconds_per_iteration,
        "final": result.history[-1] if result.history else None,
    }
    try:
        summary["frc"] = _frc_outputs(cfg, st, pl, result.x, out)
    except Exception as exc:  # analysis of the final layout is reported, not fatal
        log.error("final FRC analysis failed: %s", exc)
        summary["frc_error"] = str(exc)
    io.write_json(out / "summary.json", summary)
    log.info("done: converged=%s after %d iterations (%.2f s/iteration)", result.converged,
             result.iterations, result.seconds_per_iteration)
    return 0


def _analyze_frc(cfg, args) -> int:
    from . import io

    st, pl, x0 = cfg.setup()
    x = _design(cfg, pl, x0, args.density)
    recs = _frc_outputs(cfg, st, pl, x, args.out_dir, levels=args.levels)
    io.write_json(args.out_dir / "frc_summary.json", recs)
    for r in recs:
        print(f"F={r['force']:.4g}: rho_max={r['rho_max']:.6g} Omega_max={r['Omega_max']:.6g} "
              f"SN points={r['n_sn']}")
    return 0


def _check_gradients(cfg, args) -> int:
    import numpy as np

    from . import io
    from .sensitivities import check_gradients

    st, pl, x0 = cfg.setup()
    x = _design(cfg, pl, x0, args.density)
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(pl.n_design, size=min(args.count, pl.n_design), replace=False))
    rows = check_gradients(st, pl, x, idx, step=args.step)
    io.write_rows(args.out_dir / "gradient_check.csv", ["quantity", "element", "analytic", "fd", "rel_error"],
                  [(r.quantity, r.element, r.analytic, r.fd, r.rel_error) for r in rows])
    worst = {}
    for r in rows:
        worst[r.quantity] = max(worst.get(r.quantity, 0.0), r.rel_error)
    for k, v in worst.items():
        print(f"{k:12s} max rel. error {v:.2e}")
    return 0


def _sweep_sn(cfg, args) -> int:
    import numpy as np

    from . import frc, io
    from .analysis import analyze

    st, pl, x0 = cfg.setup()
    x = _design(cfg, pl, x0, args.density)
    res = analyze(st, pl, x, peak=False)
    lo, hi = cfg.outputs.sn_eps_range
    grid = np.linspace(lo, hi, cfg.outputs.sn_points) * st.eps
    rows = frc.sn_sweep(res.rom, grid)
    io.write_rows(args.out_dir / "sn_curve.csv", ["eps", "rho_sn", "Omega_sn", "branch"], rows)
    print(f"{len(rows)} SN points over {len(grid)} force scales")
    return 0


def _export_layout(cfg, args) -> int:
    from . import io

    st, pl, x0 = cfg.setup()
    x = _design(cfg, pl, x0, args.density)
    field = pl.forward(x)
    stem = args.density.stem
    io.write_pgm(args.out_dir / f"{stem}.pgm", pl.mesh, field.projected)
    io.write_density_csv(args.out_dir / f"{stem}_projected.csv", pl.mesh, field.projected)
    print(f"wrote {stem}.pgm and {stem}_projected.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
