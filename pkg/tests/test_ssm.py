import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frctopo.fe_model import AssembledModel
from frctopo.modal import modal_analysis
from frctopo.ssm import (InternalResonanceError, W11_FACTOR, build_rom, left_vector, nonautonomous_x0, reconstruct,
                         solve_w20)

from conftest import duffing


def _one_dof(a2=0.0, k3=0.0, xi=0.0, force=0.0):
    parts = [{"M": [[1.0]], "K": [[1.0]], "F2": a2 * np.ones((1, 1, 1)), "F3": k3 * np.ones((1, 1, 1, 1))}]
    return AssembledModel.from_parts(parts, 1, f_ext=[force], alpha=2 * xi, beta=0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(1e-4, 0.05))
def test_duffing_backbone_coefficient(kappa, xi):
    m = duffing(xi=xi, kappa=kappa, force=2.0)
    rom = build_rom(m, modal_analysis(m, count=1))
    wd = np.sqrt(1 - xi**2)
    assert abs(rom.gamma.real) <= 1e-12 * kappa
    assert rom.gamma.imag == pytest.approx(3 * kappa / (2 * wd), rel=1e-10)
    assert abs(rom.ftilde) == pytest.approx(2.0 / (4 * wd), rel=1e-12)


def test_quadratic_oscillator_frequency_shift():
    # x'' + x + a x^2: amplitude A = 2 rho shifts the frequency by -5 a^2 A^2 / 12
    a = 0.7
    rom = build_rom(_one_dof(a2=a), modal_analysis(_one_dof(a2=a), count=1))
    assert W11_FACTOR == 2.0
    assert rom.gamma.imag == pytest.approx(-5 * a**2 / 3, rel=1e-12)  # shift Im(gamma) rho^2
    assert rom.gamma.real == pytest.approx(0.0, abs=1e-14)


def test_w20_residual():
    rng = np.random.default_rng(2)
    n = 4
    F2 = rng.normal(size=(n, n, n))
    m = AssembledModel.from_parts([{"M": np.eye(n), "K": np.diag([1.0, 2.3, 3.5, 5.1]) ** 2, "F2": F2}], n,
                                  alpha=0.01, beta=1e-3)
    md = modal_analysis(m)
    lam, phi = md.lam, md.phi
    W20 = solve_w20(m, phi, lam)
    A = 4 * lam**2 * m.M + 2 * lam * m.C + m.K
    assert np.allclose(A @ W20, -m.f2(phi, phi), atol=1e-12)


def test_one_to_two_resonance_detected():
    n = 2
    F2 = np.zeros((2, 2, 2))
    F2[1, 0, 0] = 1.0
    m = AssembledModel.from_parts([{"M": np.eye(2), "K": np.diag([1.0, 4.0]), "F2": F2}], n)
    with pytest.raises(InternalResonanceError):
        build_rom(m, modal_analysis(m))


def test_left_vector_normalization():
    psi, kappa = left_vector(np.array([1.0, 2.0]), 3.0, 0.1)
    assert kappa == pytest.approx(-1j / (6 * np.sqrt(0.99)))
    assert np.allclose(psi, kappa * np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        left_vector(np.ones(2), 1.0, 1.0)


def test_linear_reconstruction_is_exact():
    # with no nonlinearity the ROM plus the forced correction is the harmonic response
    rng = np.random.default_rng(5)
    n = 3
    K = np.diag([1.0, 2.7, 4.1]) ** 2
    f = rng.normal(size=n)
    m = AssembledModel.from_parts([{"M": np.eye(n), "K": K}], n, f_ext=f, alpha=0.02, beta=0.001,
                                  output_dofs=[0, 2])
    rom = build_rom(m, modal_analysis(m))
    eps = 0.3
    for Om in (0.8, 1.0, 1.3):
        q = eps * rom.ftilde / (1j * Om - rom.lam)  # steady state of q' = lam q + eps f~ e^{i W t}
        amp = reconstruct(abs(q), np.angle(q), Om, rom, nonautonomous_x0(m, Om, rom), eps, dofs=[0, 2],
                          samples=2048)
        U = np.linalg.solve(K + 1j * Om * m.C.toarray() - Om**2 * np.eye(n), eps * f)
        assert np.allclose(amp, np.abs(U[[0, 2]]), rtol=1e-5)
