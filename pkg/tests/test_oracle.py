import pytest

from frctopo import frc
from frctopo.modal import modal_analysis
from frctopo.oracle import OracleError, duffing_cusp_eps, integrate_full, integrate_rom, locate_cusp, sn_count
from frctopo.ssm import ReducedDynamics, build_rom

from conftest import duffing


def test_rom_integration_lands_on_an_frc_branch():
    rom = ReducedDynamics(complex(-0.02, 1.0), complex(0.0, 0.5), 0.3 + 0.1j)
    eps = 0.05
    for Om in (0.97, 1.0, 1.02):
        ss = integrate_rom(rom, eps, Om, rho0=0.01)
        assert ss.converged
        stable = [s.rho for s in frc.frc_at(Om, rom, eps) if s.stable]
        assert min(abs(ss.rho - r) for r in stable) <= 1e-7 * max(stable)


def test_rom_integration_rejects_unstable_linear_part():
    with pytest.raises(OracleError):
        integrate_rom(ReducedDynamics(0.01 + 1j, 0j, 1.0), 0.1, 1.0, 0.1)


def test_full_integration_of_linear_oscillator():
    m = duffing(xi=0.05, kappa=0.0, force=1.0)
    out = integrate_full(m, 0.1, 0.8, tol=1e-8)
    exact = 0.1 / abs(1 - 0.8**2 + 2j * 0.05 * 0.8)
    assert out.converged
    assert out.amplitude[0] == pytest.approx(exact, rel=1e-4)  # time-discretization error


def test_full_integration_matches_rom_for_weak_duffing():
    m = duffing(xi=0.02, kappa=1.0, force=1.0)
    rom = build_rom(m, modal_analysis(m, count=1))
    eps, Om = 0.004, 1.01
    full = integrate_full(m, eps, Om, tol=1e-8)
    branch = [s for s in frc.frc_at(Om, rom, eps) if s.stable]
    assert len(branch) == 1
    # unit mass: the mass-normalized mode is 1, so the amplitude is 2 rho
    assert full.amplitude[0] == pytest.approx(2 * branch[0].rho, rel=2e-2)


def test_size_limit():
    class Big:
        n = 10_000

    with pytest.raises(OracleError, match="limited"):
        integrate_full(Big(), 0.1, 1.0)


def test_sn_count_and_duffing_cusp():
    m = duffing(xi=0.01, kappa=1.0, force=1.0)
    rom = build_rom(m, modal_analysis(m, count=1))
    e_c = duffing_cusp_eps(rom)
    assert sn_count(rom, 0.9 * e_c) == 0
    assert sn_count(rom, 1.1 * e_c) == 2
    loc = locate_cusp(rom, 0.5 * e_c, 2 * e_c)
    assert loc.eps == pytest.approx(e_c, rel=1e-9)
    assert loc.b <= 1e-3 * abs(rom.gamma.imag)  # b vanishes at the cusp
    loc2 = locate_cusp(rom, 0.5 * e_c, 2 * e_c, rtol=1e-3, count=lambda e: sn_count(rom, e))
    # the sweep misses folds narrower than its grid spacing, so the counted cusp lands a bit late
    assert e_c <= loc2.eps <= 1.02 * e_c


def test_locate_cusp_bracket_checks():
    rom = ReducedDynamics(complex(-0.01, 1.0), complex(0.0, 1.0), 1.0)
    e_c = duffing_cusp_eps(rom)
    with pytest.raises(ValueError, match="bracket"):
        locate_cusp(rom, 1.5 * e_c, 2 * e_c)
    with pytest.raises(ValueError):
        locate_cusp(rom, 0.0, e_c)
