import json

import numpy as np
import pytest

from frctopo import optimize as O
from frctopo.frc import PeakError
from frctopo.optimize import OptProblemSpec, Schedule, evaluate, run

from conftest import small_beam


@pytest.mark.parametrize("kw, msg", [
    (dict(kind="nope"), "unknown problem kind"),
    (dict(kind="peak_min", area_max=0.5), "gamma_target"),
    (dict(kind="backbone_only", gamma_target=0.0, area_max=0.5), "gamma_target"),
    (dict(kind="sn_control", area_target=0.4), "b_target"),
    (dict(kind="sn_control", b_target=1.0), "area_target"),
    (dict(kind="linear_ref"), "area_max"),
    (dict(kind="peak_min", gamma_target=1e-3, area_max=0.5, omega_y_target=1.0, omega_x_target=3.0),
     "internal resonance"),
    (dict(kind="linear_ref", area_max=0.5, tol=0.0), "tol"),
])
def test_spec_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        OptProblemSpec(**kw)


def test_schedule_stages():
    s = Schedule(p_values=(1.0, 3.0), sigma_start=10.0, sigma_max=50.0)
    assert s.stages() == [(1.0, 10.0), (3.0, 10.0), (3.0, 20.0), (3.0, 40.0), (3.0, 50.0)]
    assert Schedule(p_values=(3.0,), sigma_fixed=True).stages() == [(3.0, 10.0)]


def _gim(beam_tuple):
    st, pl, x = beam_tuple
    return O.an.analyze(st, pl, x).rom.gamma.imag


def test_constraint_values_and_scaling(beam):
    st, pl, x = beam
    gim = _gim(beam)
    prob = OptProblemSpec("peak_min", gamma_target=1.1 * gim, area_max=0.5, omega_y_target=None)
    ev = evaluate(prob, st, pl, x)
    names = [c.name for c in ev.constraints]
    assert names == ["gamma", "area"]
    gamma, area = ev.constraints
    q = gim / (1.1 * gim) - 1
    assert gamma.value == pytest.approx(q**2 - 0.02**2, rel=1e-12)
    assert gamma.scale == pytest.approx(0.02**2)
    assert area.value == pytest.approx(ev.result.area / 0.5 - 1)
    assert not gamma.satisfied  # 9% off target
    assert ev.objective == pytest.approx(ev.result.rho_max)

    one = OptProblemSpec("peak_min", gamma_target=0.9 * gim, area_max=0.5, one_sided_gamma=True)
    c = evaluate(one, st, pl, x).constraints[0]
    assert c.value == pytest.approx(1 - 1 / 0.9) and c.satisfied  # exceeding the target is fine


def test_backbone_objective_gradient(beam):
    st, pl, x = beam
    prob = OptProblemSpec("backbone_only", gamma_target=2 * _gim(beam), area_max=0.9)
    ev = evaluate(prob, st, pl, x)
    i, h = 7, 1e-4
    xp, xm = x.copy(), x.copy()
    xp[i] += h
    xm[i] -= h
    fd = (evaluate(prob, st, pl, xp).objective - evaluate(prob, st, pl, xm).objective) / (2 * h)
    assert ev.d_objective[i] == pytest.approx(fd, rel=1e-5)


def test_sn_control_constraints(beam):
    st, pl, x = beam
    prob = OptProblemSpec("sn_control", b_target=1.0, area_target=0.6)
    ev = evaluate(prob, st, pl, x)
    assert [c.name for c in ev.constraints] == ["b", "area"]
    assert ev.objective == pytest.approx(-ev.result.rho_max)
    if ev.result.n_sn == 0:
        assert ev.constraints[0].value == -1.0  # b = 0 without folds


def test_short_run_logs_and_calls_back(tmp_path, beam):
    st, pl, x = beam
    prob = OptProblemSpec("linear_ref", area_max=0.5)
    seen = []
    log = tmp_path / "log.jsonl"
    res = run(prob, st, pl, x, Schedule(p_values=(3.0,), sigma_fixed=True, sigma_start=4.0, max_iters=4,
                                        move=0.1),
              callback=lambda rec, xx, s: seen.append((rec["iteration"], s.iteration)), log_path=log)
    assert res.iterations == len(res.history) == 4
    assert seen == [(k, k + 1) for k in range(4)]
    lines = [json.loads(s) for s in log.read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [0, 1, 2, 3]
    assert all(r["max_change"] <= 0.1 + 1e-12 for r in lines)
    # area is pushed toward its bound
    assert lines[-1]["area"] < lines[0]["area"]
    assert res.evaluation is not None and res.failures == 0


def test_rollback_after_analysis_failure(monkeypatch):
    st, pl, x = small_beam()
    prob = OptProblemSpec("linear_ref", area_max=0.5)
    real = O.evaluate
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 3:
            raise PeakError("injected")
        return real(*a, **k)

    monkeypatch.setattr(O, "evaluate", flaky)
    res = run(prob, st, pl, x, Schedule(p_values=(3.0,), sigma_fixed=True, sigma_start=4.0, max_iters=5,
                                        move=0.2))
    assert res.failures == 1
    assert res.history[2]["move"] == pytest.approx(0.1)  # halved after the failure
    assert res.state.iteration == 5


def test_failure_without_good_state_stops(monkeypatch):
    st, pl, x = small_beam()

    def broken(*a, **k):
        raise PeakError("always")

    monkeypatch.setattr(O, "evaluate", broken)
    res = run(OptProblemSpec("linear_ref", area_max=0.5), st, pl, x, Schedule(max_iters=3))
    assert res.iterations == 0 and not res.converged and res.evaluation is None
    assert np.array_equal(res.x, x)


def test_stage_advance_on_iteration_budget(beam):
    st, pl, x = beam
    sched = Schedule(p_values=(1.0, 2.0), sigma_start=4.0, sigma_fixed=True, stage_iters=2, max_iters=4)
    res = run(OptProblemSpec("linear_ref", area_max=0.5), st, pl, x, sched)
    assert [r["p"] for r in res.history] == [1.0, 1.0, 2.0, 2.0]
    assert res.state.stage == 1
