import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmguard.model import ModelDims, ModelState, WorldModel, init_params, zero_params
from wmguard.monitor import (
    MODEL_DIVERGENCE,
    THRESHOLD,
    ErrorReport,
    Monitor,
    MonitorConfig,
    Scorer,
    Thresholds,
    calibrate_threshold,
    compute_obs_error,
    compute_reward_error,
    image_error,
    rank_per_dim_errors,
    rescore,
    smooth,
)

DIMS = ModelDims(d_obs=6, d_act=2, d_h=8, d_z=3, d_hidden=8, n_horizon=16)


def brute_obs_error(pred, act):
    n, d = len(pred), len(pred[0])
    total = 0.0
    for j in range(d):
        col = 0.0
        for i in range(n):
            col += abs(pred[i][j] - act[i][j])
        total += col / n
    return total / d


def brute_rew_error(pred, act):
    return sum(abs(p - a) for p, a in zip(pred, act)) / len(pred)


# --- error definitions ------------------------------------------------------


def test_obs_error_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, a = rng.normal(size=(16, 10)), rng.normal(size=(16, 10))
        e, per_dim = compute_obs_error(p, a)
        assert abs(e - brute_obs_error(p.tolist(), a.tolist())) < 1e-12
        assert abs(e - per_dim.mean()) <= 1e-15
        r_p, r_a = rng.normal(size=16), rng.normal(size=16)
        assert abs(compute_reward_error(r_p, r_a) - brute_rew_error(r_p, r_a)) < 1e-12


def test_error_shape_and_nan_checks():
    with pytest.raises(ValueError):
        compute_obs_error(np.zeros((16, 3)), np.zeros((15, 3)))
    with pytest.raises(ValueError):
        compute_obs_error(np.full((2, 2), np.nan), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        compute_reward_error(np.zeros(3), np.zeros(4))


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_image_error_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((8, 9, 3)), rng.random((8, 9, 3))
    assert np.array_equal(image_error(a, b), image_error(b, a))
    assert np.all(image_error(a, a) == 0)


# --- smoothing and calibration ----------------------------------------------


def test_smooth_alpha_one_is_identity():
    s = None
    for v in [3.0, -1.0, 7.5]:
        s = smooth(s, v, 1.0)
        assert s == v


def test_smooth_constant_fixed_point():
    s = None
    for _ in range(100):
        s = smooth(s, 0.37, 0.05)
        assert s == 0.37


def test_smooth_step_response_closed_form():
    alpha, s = 0.05, None
    for _ in range(10):
        s = smooth(s, 0.0, alpha)
    for k in range(1, 200):
        s = smooth(s, 1.0, alpha)
        assert s == pytest.approx(1.0 - (1.0 - alpha) ** k, abs=1e-14)


def test_smooth_rejects_bad_alpha():
    with pytest.raises(ValueError):
        smooth(None, 1.0, 0.0)


def test_calibrate_constant_series():
    for q in (0.5, 0.9, 0.995):
        assert calibrate_threshold([2.5] * 100, q) == 2.5


def test_calibrate_linear_interpolation():
    assert calibrate_threshold(np.arange(1, 101), 0.995) == pytest.approx(99.505, abs=1e-12)
    # order-statistics formula: position q (N-1) between sorted values
    rng = np.random.default_rng(1)
    x = rng.normal(size=257)
    q = 0.93
    s, pos = np.sort(x), q * 256
    lo = int(math.floor(pos))
    assert calibrate_threshold(x, q) == pytest.approx(s[lo] + (pos - lo) * (s[lo + 1] - s[lo]), abs=1e-12)


def test_calibrate_needs_enough_values():
    with pytest.raises(ValueError):
        calibrate_threshold(np.ones(99), 0.995)


@settings(max_examples=100)
@given(st.lists(st.floats(-1e6, 1e6), min_size=100, max_size=300), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_threshold_monotone_in_quantile(series, q1, q2):
    lo, hi = sorted((q1, q2))
    assert calibrate_threshold(series, lo) <= calibrate_threshold(series, hi)


# --- scorer -----------------------------------------------------------------


@settings(max_examples=100)
@given(st.integers(0, 200), st.integers(2, 8), st.floats(1.0, 100.0))
def test_isolated_exceedance_never_triggers(pos, m, spike):
    cfg = MonitorConfig(warmup_steps=0, debounce_m=m, smoothing_alpha=1.0)
    e = np.zeros(201)
    e[pos] = spike
    rows, events = rescore(range(201), e, np.zeros(201), cfg, Thresholds(obs=0.5))
    assert events == [] and not any(r.triggered for r in rows)


def test_debounce_counts_consecutive_exceedances():
    cfg = MonitorConfig(warmup_steps=0, debounce_m=4, smoothing_alpha=1.0)
    e = [0, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0]
    rows, events = rescore(range(len(e)), e, [0] * len(e), cfg, Thresholds(obs=0.5))
    assert [r.triggered for r in rows] == [False] * 8 + [True, True, False]
    assert [ev.step for ev in events] == [8]
    assert events[0].kind == THRESHOLD


def test_threshold_comparison_is_strict():
    cfg = MonitorConfig(warmup_steps=0, debounce_m=1, smoothing_alpha=1.0)
    _, events = rescore([0, 1], [0.5, 0.5], [0, 0], cfg, Thresholds(obs=0.5))
    assert events == []


def test_reward_gate_is_opt_in():
    e_rew = [5.0] * 10
    off = MonitorConfig(warmup_steps=0, debounce_m=1, smoothing_alpha=1.0)
    on = MonitorConfig(warmup_steps=0, debounce_m=1, smoothing_alpha=1.0, reward_gates_trigger=True)
    th = Thresholds(obs=1.0, rew=1.0)
    assert rescore(range(10), [0.0] * 10, e_rew, off, th)[1] == []
    assert rescore(range(10), [0.0] * 10, e_rew, on, th)[1][0].step == 0


def test_warmup_reports_are_not_scored():
    cfg = MonitorConfig(warmup_steps=5, debounce_m=1, smoothing_alpha=0.5)
    e = [9.0] * 5 + [0.2, 0.4]
    rows, events = rescore(range(7), e, [0.0] * 7, cfg, Thresholds(obs=1.0))
    assert all(math.isnan(r.e_obs_smooth) and not r.triggered for r in rows[:5])
    assert [r.e_obs_smooth for r in rows[5:]] == [0.2, 0.5 * 0.2 + 0.5 * 0.4]
    assert events == []


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=80), st.integers(0, 40))
def test_warmup_equals_scoring_the_suffix(errors, w):
    th = Thresholds(obs=0.8)
    warm = MonitorConfig(warmup_steps=w, debounce_m=2, smoothing_alpha=0.3)
    cold = MonitorConfig(warmup_steps=0, debounce_m=2, smoothing_alpha=0.3)
    steps = range(len(errors))
    rows, ev = rescore(steps, errors, [0.0] * len(errors), warm, th)
    tail, ev_tail = rescore(steps[w:], errors[w:], [0.0] * len(errors[w:]), cold, th)
    assert [r.e_obs_smooth for r in rows[w:]] == [r.e_obs_smooth for r in tail]
    assert [e.step for e in ev] == [e.step for e in ev_tail]


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 2.0), min_size=20, max_size=120), st.integers(1, 6))
def test_lower_debounce_never_triggers_later(errors, m):
    th = Thresholds(obs=0.8)
    base = MonitorConfig(warmup_steps=0, debounce_m=m, smoothing_alpha=0.3)
    one = MonitorConfig(warmup_steps=0, debounce_m=1, smoothing_alpha=0.3)
    _, ev_m = rescore(range(len(errors)), errors, [0.0] * len(errors), base, th)
    _, ev_1 = rescore(range(len(errors)), errors, [0.0] * len(errors), one, th)
    if ev_m:
        assert ev_1 and ev_1[0].step <= ev_m[0].step


@pytest.mark.parametrize(
    "kwargs",
    [{"n_horizon": 0}, {"smoothing_alpha": 0.0}, {"calibration_quantile": 1.0}, {"debounce_m": 0}, {"stride": 0}, {"actor_mode": "x"}, {"warmup_steps": -1}],
)
def test_monitor_config_validation(kwargs):
    with pytest.raises(ValueError):
        MonitorConfig(**kwargs).validate()


# --- online monitor ---------------------------------------------------------


def random_model(seed=0):
    params = init_params(DIMS, np.random.default_rng(seed))
    return WorldModel(DIMS, params, np.zeros(6), np.ones(6), env_kind="test")


def zero_actor(s: ModelState) -> np.ndarray:
    return np.zeros(s.h.shape[:-1] + (2,))


def drive(monitor, steps, seed=0):
    rng = np.random.default_rng(seed)
    reports, events, pending = [], [], []
    for t in range(steps):
        action = None if t == 0 else rng.uniform(-1, 1, size=2)
        rep, ev = monitor.step(rng.normal(size=6), None if t == 0 else float(rng.normal()), action)
        pending.append(len(monitor.state.pending))
        if rep is not None:
            reports.append(rep)
        events.extend(ev)
    return reports, events, pending


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 24), st.integers(1, 3))
def test_maturation_latency(seed, n, stride):
    dims = ModelDims(6, 2, 8, 3, 8, n_horizon=n)
    model = WorldModel(dims, init_params(dims, np.random.default_rng(seed)), np.zeros(6), np.ones(6))
    monitor = Monitor(model, zero_actor, MonitorConfig(n_horizon=n, stride=stride))
    reports, _, pending = drive(monitor, 3 * n + 10, seed)
    assert reports[0].t == n
    assert all(r.t == r.t0 + n for r in reports)
    assert [r.t0 for r in reports] == list(range(0, 2 * n + 10, stride))
    assert max(pending) <= n


def test_nothing_matures_before_n():
    monitor = Monitor(random_model(), zero_actor)
    for t in range(16):
        rep, _ = monitor.step(np.ones(6), 0.0, None if t == 0 else np.zeros(2))
        assert rep is None
    rep, _ = monitor.step(np.ones(6), 0.0, np.zeros(2))
    assert rep is not None and rep.t == 16 and rep.t0 == 0


def test_report_errors_use_reality_window():
    model = random_model(3)
    monitor = Monitor(model, zero_actor)
    rng = np.random.default_rng(4)
    xs, rs = rng.normal(size=(40, 6)), rng.normal(size=40)
    for t in range(40):
        rep, _ = monitor.step(xs[t], rs[t] if t else None, np.zeros(2) if t else None)
        if rep is None:
            continue
        e, per_dim = compute_obs_error(rep.record.predicted_obs, xs[rep.t0 + 1 : rep.t0 + 17])
        assert rep.e_obs == e and np.array_equal(rep.per_dim_e_obs, per_dim)
        assert rep.e_rew == compute_reward_error(rep.record.predicted_rewards, rs[rep.t0 + 1 : rep.t0 + 17])


def test_perfect_model_never_triggers():
    dims = DIMS
    model = WorldModel(dims, zero_params(dims), np.full(6, 2.0), np.ones(6))
    events_seen = []
    monitor = Monitor(model, zero_actor, thresholds=Thresholds(1e-12, 1e-12), on_trigger=events_seen.append)
    for t in range(300):
        rep, ev = monitor.step(np.full(6, 2.0), 0.0, None if t == 0 else np.zeros(2))
        if rep is not None:
            assert rep.e_obs == 0.0 and rep.e_rew == 0.0 and not rep.triggered
    assert events_seen == []


def test_callback_receives_trigger():
    seen = []
    monitor = Monitor(random_model(), zero_actor, MonitorConfig(warmup_steps=0, debounce_m=1), Thresholds(0.0, 0.0), on_trigger=seen.append)
    _, events, _ = drive(monitor, 20)
    assert seen == events and seen[0].kind == THRESHOLD and seen[0].step == 16


def test_divergence_is_reported_and_run_continues():
    model = random_model()
    model.params["dec_b2"] = np.array([np.inf, 0, 0, 0, 0, 0])
    seen = []
    monitor = Monitor(model, zero_actor, on_trigger=seen.append)
    reports, events, _ = drive(monitor, 40)
    assert events and all(e.kind == MODEL_DIVERGENCE for e in events)
    assert reports == []
    assert monitor.state.step == 40


def test_rescore_reproduces_online_decisions():
    monitor = Monitor(random_model(7), zero_actor, MonitorConfig(warmup_steps=0, debounce_m=3), Thresholds(1.1, 5.0))
    reports, events, _ = drive(monitor, 200, seed=7)
    rows, replay_events = rescore(
        [r.t for r in reports], [r.e_obs for r in reports], [r.e_rew for r in reports], monitor.config, monitor.thresholds
    )
    assert [r.e_obs_smooth for r in rows] == [r.e_obs_smooth for r in reports]
    assert [r.triggered for r in rows] == [r.triggered for r in reports]
    assert [e.step for e in replay_events] == [e.step for e in events if e.kind == THRESHOLD]


def test_rescore_reproduces_online_decisions_with_warmup():
    monitor = Monitor(random_model(7), zero_actor, MonitorConfig(debounce_m=3), Thresholds(1.1, 5.0))
    reports, events, _ = drive(monitor, 200, seed=7)
    assert math.isnan(reports[0].e_obs_smooth) and reports[0].t == 16
    rows, replay_events = rescore(
        [r.t for r in reports], [r.e_obs for r in reports], [r.e_rew for r in reports], monitor.config, monitor.thresholds
    )
    np.testing.assert_array_equal([r.e_obs_smooth for r in rows], [r.e_obs_smooth for r in reports])
    assert [e.step for e in replay_events] == [e.step for e in events if e.kind == THRESHOLD]


def test_non_finite_observation_rejected():
    monitor = Monitor(random_model(), zero_actor)
    with pytest.raises(ValueError):
        monitor.step(np.full(6, np.nan))


def test_latent_sampling_is_seeded():
    a = Monitor(random_model(), zero_actor, rng=np.random.default_rng(1))
    b = Monitor(random_model(), zero_actor, rng=np.random.default_rng(1))
    ra, _, _ = drive(a, 30)
    rb, _, _ = drive(b, 30)
    assert [r.e_obs for r in ra] == [r.e_obs for r in rb]


# --- per-dimension ranking --------------------------------------------------


def synthetic_reports(per_dim_before, per_dim_after, onset=50, total=100):
    out = []
    for t in range(total):
        vec = np.asarray(per_dim_before if t < onset else per_dim_after, dtype=float)
        out.append(ErrorReport(t, float(vec.mean()), 0.0, vec, 0.0, 0.0, 1.0, False))
    return out


def test_rank_no_change_keeps_index_order():
    ranking = rank_per_dim_errors(synthetic_reports([0.2] * 5, [0.2] * 5), 50)
    assert [j for j, _ in ranking] == [0, 1, 2, 3, 4]
    assert all(r == pytest.approx(1.0) for _, r in ranking)


def test_rank_tripled_dimension_first():
    before = [0.1, 0.2, 0.3, 0.2, 0.1]
    after = list(before)
    after[3] *= 3
    ranking = rank_per_dim_errors(synthetic_reports(before, after), 50)
    assert ranking[0][0] == 3 and ranking[0][1] == pytest.approx(3.0)


def test_rank_window_and_empty_side():
    reps = synthetic_reports([1.0, 1.0], [1.0, 2.0])
    assert rank_per_dim_errors(reps, 50, window=10)[0][0] == 1
    with pytest.raises(ValueError):
        rank_per_dim_errors(reps, 0)
    with pytest.raises(ValueError):
        rank_per_dim_errors(reps, 500)
