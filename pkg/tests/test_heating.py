import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prethermal.heating import (
    GOLDEN, SQRT2, IntegratorConfig, NoHeating, TrajectoryRecord, build_scenario, convergents,
    detect_heating_time, effective_magnetization, estimate_steps, evolve, gauge_hamiltonian,
    lab_hamiltonian, full_rate_rotation_magnetization, sample_grid, scaling_fit,
)

CS = convergents(GOLDEN, 20)


@pytest.fixture(scope="module")
def sc3():
    return build_scenario(CS, 3)


@pytest.fixture(scope="module")
def traj3(sc3):
    return evolve(sc3)


# ---------------------------------------------------------------------------
# continued fractions


def fib(n):
    a, b = 1, 1
    out = []
    for _ in range(n):
        out.append(b)
        a, b = b, a + b
    return out


def test_golden_fibonacci():
    f = [1] + fib(12)
    assert CS.pairs[:10] == tuple((f[i + 2], f[i + 1]) for i in range(10))
    assert CS[1] == (2, 1) and CS[4] == (8, 5)


def test_sqrt2():
    cs = convergents(SQRT2, 8)
    assert cs.pairs[:5] == ((1, 1), (3, 2), (7, 5), (17, 12), (41, 29))


def test_convergent_properties():
    for cs in (CS, convergents(SQRT2, 20), convergents(math.pi, 10), convergents(math.e, 15)):
        qs = [q for _, q in cs.pairs]
        assert all(b > a for a, b in zip(qs, qs[1:]))
        for (p, q), err in zip(cs.pairs, cs.errors):
            assert abs(cs.alpha * q - p) <= 1.0 / q
            assert abs(cs.alpha - p / q) <= 1.0 / q ** 2
            assert err == pytest.approx(abs(cs.alpha * q - p), abs=1e-15)


def test_convergents_reject():
    with pytest.raises(ValueError):
        convergents(1.5, 10)
    with pytest.raises(ValueError):
        convergents(GOLDEN, 26)
    with pytest.raises(IndexError):
        CS[0]


# ---------------------------------------------------------------------------
# scenarios


def test_scenario_8_5():
    sc = build_scenario(CS, 4)
    assert sc.pq == (8, 5) and sc.k == (5, -8) and sc.k_norm == 13
    assert abs(sc.nu_dot_k) == pytest.approx(abs(5 * GOLDEN - 8), rel=1e-15)
    assert abs(sc.nu_dot_k) == pytest.approx(0.0901699, abs=1e-7)
    assert sc.lambda_m == pytest.approx(22.18034, abs=1e-5)
    assert sc.t_star == pytest.approx(math.pi / 4 * 13 ** 3)


@pytest.mark.parametrize("m", range(3, 12))
def test_scenario_invariants(m):
    sc = build_scenario(CS, m, p=3, tau=1.2, gamma=1.0)
    assert abs(sc.nu_dot_k) * sc.lambda_m == pytest.approx(2.0, rel=1e-15)
    assert sc.omega_plus - sc.omega_minus == 4.0
    assert sc.checks["opposite_signs"]
    assert sc.checks["lambda_lower"] and sc.checks["lambda_upper"]
    assert sc.checks["k_components"] and sc.checks["omega_lower"]
    g = sc.gamma
    assert sc.C1 == pytest.approx(math.pi / 4 * (g / 2) ** (3 / 1.2))
    assert sc.C2 == pytest.approx(math.pi / 4 * (GOLDEN + 1) ** (6 / 1.2))
    lo, hi = sc.window
    assert lo == pytest.approx(sc.C1 * sc.lambda_m ** 2.5)
    assert hi == pytest.approx(sc.C2 * sc.lambda_m ** 2.7)
    # desk-scale scenarios sit below the lemma floors
    assert not sc.above_floor
    assert sc.floors["remainder"] > sc.lambda_m


def test_scenario_validation():
    with pytest.raises(ValueError):
        build_scenario(CS, 3, p=2)
    with pytest.raises(ValueError):
        build_scenario(CS, 3, tau=1.0)
    with pytest.raises(ValueError):
        build_scenario(CS, 3, gamma=0)


def test_gauge_hamiltonian_static_part(sc3):
    hs = gauge_hamiltonian(sc3)
    static = hs.mats[hs.freqs == 0]
    assert static.shape[0] == 1
    assert np.allclose(static[0], np.array([[0, 1], [1, 0]]) / (2 * sc3.K))
    # the lab Hamiltonian is Hermitian at random times
    lab = lab_hamiltonian(sc3)
    for t in (0.3, 17.0, 1e3):
        h = lab(t)
        assert np.allclose(h, h.conj().T)


def test_sample_grid(sc3):
    ts = sample_grid(sc3.t_star)
    assert ts[0] == 0 and np.all(np.diff(ts) > 0)
    assert (ts <= sc3.t_star).sum() >= 500
    assert ts[-1] == pytest.approx(2 * sc3.t_star)


# ---------------------------------------------------------------------------
# integration


def test_initial_magnetization(traj3):
    assert traj3.times[0] == 0 and traj3.magnetization[0] == pytest.approx(-1.0)


def test_norm_drift(traj3):
    assert traj3.complete
    assert traj3.norm_drift <= 10 * traj3.config.rel_tol


def test_remainder_bound(traj3, sc3):
    upto = traj3.times <= sc3.t_star
    assert upto.sum() >= 500
    assert traj3.remainder_check[upto].all()


def test_closed_form_reference(traj3, sc3):
    # the rotating-frame static term sigma1/(2K) gives M = -cos(t/K)
    err = np.abs(traj3.magnetization - effective_magnetization(sc3, traj3.times))
    assert err.max() <= 9.0 / sc3.K


def test_rotation_identity():
    t = np.linspace(0, 50, 11)
    assert np.allclose(full_rate_rotation_magnetization(t, 7.0), -np.cos(2 * t / 7.0), atol=1e-14)


def test_amplitude_zero(sc3):
    ts = np.linspace(0, 20, 41)
    tr = evolve(sc3, times=ts, frame="lab", amplitude=0.0)
    expect = np.stack([np.zeros_like(ts), np.exp(1j * ts)], 1)
    assert np.allclose(tr.states, expect, atol=1e-10)
    assert np.allclose(tr.magnetization, -1.0, atol=1e-14)


def test_frame_consistency(sc3):
    cfg = IntegratorConfig(rel_tol=1e-10)
    ts = np.linspace(0, 10, 51)
    g = evolve(sc3, cfg=cfg, times=ts)
    lab = evolve(sc3, cfg=cfg, times=ts, frame="lab")
    diff = np.linalg.norm(g.states_in("lab") - lab.states, axis=1).max()
    assert diff <= 100 * cfg.rel_tol
    back = np.linalg.norm(lab.states_in("gauge") - g.states, axis=1).max()
    assert back <= 100 * cfg.rel_tol
    assert np.allclose(g.states_in("xi"), lab.states_in("xi"), atol=100 * cfg.rel_tol)


def test_dop853_agrees(sc3):
    ts = np.linspace(0, 10, 21)
    a = evolve(sc3, times=ts, frame="lab")
    b = evolve(sc3, times=ts, frame="lab", cfg=IntegratorConfig("dop853", 1e-11, 1e-13))
    assert np.abs(a.states - b.states).max() <= 1e-8


def test_integrator_config():
    assert IntegratorConfig().order == 4 and IntegratorConfig("dop853").order == 8
    for bad in ({"method": "euler"}, {"rel_tol": 0.0}, {"abs_tol": -1.0}, {"max_steps": 0}):
        with pytest.raises(ValueError):
            IntegratorConfig(**bad)


def test_budget_and_horizon(sc3):
    with pytest.raises(ValueError):
        evolve(sc3, t_end=5 * sc3.t_star)
    with pytest.raises(ValueError):
        evolve(sc3, max_estimated_steps=10)
    assert estimate_steps(sc3, sc3.t_star) < estimate_steps(sc3, sc3.t_star, frame="lab")


def test_step_budget_marks_incomplete(sc3):
    tr = evolve(sc3, cfg=IntegratorConfig(max_steps=20))
    assert not tr.complete
    assert len(tr.times) < len(sample_grid(sc3.t_star))


def test_csv_columns(sc3):
    tr = evolve(sc3, times=np.linspace(0, 1, 3))
    lines = tr.csv().splitlines()
    assert lines[0] == "t,re0,im0,re1,im1,M,remainder_lhs,remainder_rhs"
    assert len(lines) == 4


# ---------------------------------------------------------------------------
# heating time and scaling


@pytest.mark.parametrize("K", [512.0, 2197.0, 1e5])
def test_reference_crossing(K):
    ts = np.linspace(0, 2 * K, 401)
    tr = TrajectoryRecord.from_magnetization(ts, lambda t: -np.cos(2 * np.asarray(t) / K))
    t = detect_heating_time(tr, rtol=1e-10)
    assert t == pytest.approx(math.pi / 6 * K, rel=1e-9)


def test_no_heating():
    tr = TrajectoryRecord.from_magnetization(np.linspace(0, 10, 11), lambda t: -np.ones_like(t))
    with pytest.raises(NoHeating) as ei:
        detect_heating_time(tr)
    assert ei.value.max_excursion == 0.0


def test_detected_time_refined(traj3, sc3):
    t = detect_heating_time(traj3)
    i = np.searchsorted(traj3.times, t)
    assert traj3.times[i - 1] <= t <= traj3.times[i]
    assert traj3.magnetization_at(t * (1 + 2e-3)) - traj3.magnetization[0] >= 0.5
    assert traj3.magnetization_at(t * (1 - 2e-3)) - traj3.magnetization[0] < 0.5
    assert t / sc3.K == pytest.approx(math.pi / 3, rel=0.05)


def test_scaling_fit_power_law():
    lams = np.geomspace(10, 1e4, 6)
    s, c, r = scaling_fit(lams, 0.7 * lams ** 3)
    assert abs(s - 3.0) <= 1e-12
    assert c == pytest.approx(math.log(0.7))
    assert r <= 1e-12


def test_scaling_fit_preconditions():
    with pytest.raises(ValueError):
        scaling_fit([10, 1e4], [1, 2])
    with pytest.raises(ValueError):
        scaling_fit([10, 20, 30, 40], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        scaling_fit([10, 100, 1e3, 1e4], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 5), st.floats(1e-3, 1e3), st.integers(4, 12))
def test_scaling_fit_recovers_exponent(expo, pref, npts):
    lams = np.geomspace(5, 5e3, npts)
    s, _, _ = scaling_fit(lams, pref * lams ** expo)
    assert s == pytest.approx(expo, abs=1e-9)
