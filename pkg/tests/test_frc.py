import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frctopo import frc
from frctopo.ssm import ReducedDynamics

from conftest import random_rom, upper_branch_max

SEEDS = st.integers(0, 2**32 - 1)


def peak_residual(rom, eps, rho):
    a, b, F = rom.lam.real, rom.gamma.real, eps * abs(rom.ftilde)
    return abs(a * rho + b * rho**3 + F) / (abs(a * rho) + abs(b * rho**3) + F)


@settings(max_examples=60, deadline=None)
@given(SEEDS)
def test_frc_roots_satisfy_amplitude_equation(seed):
    rng = np.random.default_rng(seed)
    rom, eps = random_rom(rng)
    for W in rom.lam.imag + np.linspace(-5, 5, 7) * abs(rom.lam.real):
        roots = frc.frc_at(W, rom, eps)
        assert 1 <= len(roots) <= 3
        for s in roots:
            assert frc.frc_residual(s.rho, W, rom, eps) <= 1e-8
            # the reported phase makes the full polar vector field vanish
            rdot, tdot = frc.vector_field(s.rho, s.theta, W, rom, eps)
            assert abs(rdot) <= 1e-7 * eps * abs(rom.ftilde)
            assert abs(tdot) * s.rho <= 1e-7 * eps * abs(rom.ftilde) + 1e-9 * abs(W) * s.rho


@settings(max_examples=40, deadline=None)
@given(SEEDS)
def test_peak_is_frc_maximum(seed):
    rng = np.random.default_rng(seed)
    rom, eps = random_rom(rng)
    rho, W = frc.peak(rom, eps)
    assert peak_residual(rom, eps, rho) <= 1e-12
    assert W == pytest.approx(rom.lam.imag + rom.gamma.imag * rho**2, rel=1e-14)
    assert upper_branch_max(rom, eps, W) == pytest.approx(rho, rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(SEEDS)
def test_sn_points_are_folds(seed):
    rng = np.random.default_rng(seed)
    rom, eps = random_rom(rng)
    pts = frc.sn_points(rom, eps)
    assert len(pts) in (0, 2, 4)
    for p in pts:
        assert frc.frc_residual(p.rho, p.Omega, rom, eps) <= 1e-8
        assert frc.det_residual(p.rho, p.Omega, rom) <= 1e-8
        J = frc.jacobian(p.rho, p.Omega, rom)
        assert abs(np.linalg.det(J)) <= 1e-7 * np.abs(J).max() ** 2


def test_root_count_changes_at_sn_points():
    rom = ReducedDynamics(complex(-0.01, 1.0), complex(0.0, 0.5), complex(1.0, 0.0))
    eps = 0.05
    pts = frc.sn_points(rom, eps)
    assert len(pts) == 2
    lo, hi = pts[0].Omega, pts[1].Omega
    mid = 0.5 * (lo + hi)
    assert len(frc.frc_at(mid, rom, eps)) == 3
    assert len(frc.frc_at(lo - 1e-3, rom, eps)) == 1
    assert len(frc.frc_at(hi + 1e-3, rom, eps)) == 1
    # the middle branch is the unstable one
    assert [s.stable for s in frc.frc_at(mid, rom, eps)] == [True, False, True]


def test_no_fold_below_cusp():
    rom = ReducedDynamics(complex(-0.01, 1.0), complex(0.0, 0.5), complex(1.0, 0.0))
    assert frc.sn_points(rom, 1e-4) == []
    assert frc.governing_cusp(rom, 1e-4) is None


def test_linear_peak_and_errors():
    rom = ReducedDynamics(complex(-0.02, 2.0), 0j, complex(0.0, 0.5))
    rho, W = frc.peak(rom, 0.1)
    assert rho == pytest.approx(0.1 * 0.5 / 0.02) and W == 2.0
    with pytest.raises(frc.PeakError):
        frc.peak(ReducedDynamics(complex(0.01, 1.0), 0j, 1 + 0j), 0.1)
    # strong nonlinear anti-damping: no finite peak
    with pytest.raises(frc.PeakError):
        frc.peak(ReducedDynamics(complex(-0.01, 1.0), complex(1.0, 0.0), 1 + 0j), 1.0)
    with pytest.raises(ValueError):
        frc.frc_at(1.0, rom, 0.0)


def test_null_vector_normalization():
    rom = ReducedDynamics(complex(-0.01, 1.0), complex(-0.002, 0.5), complex(1.0, 0.3))
    for p in frc.sn_points(rom, 0.05):
        c = frc.cusp_coefficient(p, rom)
        assert c.psi @ c.psi == pytest.approx(1.0)
        assert c.psi @ c.phi == pytest.approx(1.0)
        assert np.linalg.norm(c.A @ c.phi) <= 1e-6 * np.abs(c.A).max() * np.linalg.norm(c.phi)


def test_sn_sweep_labels_branches():
    rom = ReducedDynamics(complex(-0.01, 1.0), complex(0.0, 0.5), complex(1.0, 0.0))
    rows = frc.sn_sweep(rom, np.linspace(0.001, 0.05, 40))
    assert rows and {r[3] for r in rows} == {0, 1}
    eps_first = min(r[0] for r in rows)
    assert eps_first > 0.001
