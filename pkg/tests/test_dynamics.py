"""Integrator contract: closed forms, event logs, oracles, invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import latcoarse._engine as _engine
from latcoarse import (
    HalfLifeMonitor,
    NumericError,
    ParticleSystem,
    StepControl,
    advance_to,
    reference_advance,
)
from latcoarse.dynamics import (
    Y_FLOOR,
    half_life_deadline,
    rhs,
    rhs_regularized,
    write_events_csv,
)
from latcoarse.lattice import PERIODIC

TIGHT = StepControl(rel_tol=1e-11, abs_tol=1e-15, event_tol=1e-12)


def lone_vanish_time(beta, x0):
    """Closed form: a particle with no neighbours loses y at rate 2(beta+1)."""
    return x0 ** (beta + 1.0) / (2.0 * (beta + 1.0))


def pair_vanish_time(beta, a):
    """Closed form for an equal pair: each loses y at rate beta+1."""
    return a ** (beta + 1.0) / (beta + 1.0)


# ---------------------------------------------------------------------------
# velocity fields


def test_rhs_free_chain_hand_example():
    # [1, 2, 1] with beta = 1: g = (1, 1/2, 1)
    s = ParticleSystem(1.0, [1.0, 2.0, 1.0])
    np.testing.assert_allclose(rhs(s), [-1.5, 1.0, -1.5], rtol=1e-15)


def test_rhs_ring_hand_example():
    s = ParticleSystem(1.0, [1.0, 2.0, 1.0], boundary=PERIODIC)
    v = rhs(s)
    np.testing.assert_allclose(v, [-0.5, 1.0, -0.5], rtol=1e-15)
    assert abs(v.sum()) < 1e-15  # exact conservation on the ring


def test_rhs_zero_at_vanished_sites():
    s = ParticleSystem(0.5, [1.0, 0.0, 4.0])
    v = rhs(s)
    assert v[1] == 0.0
    # the two survivors are now adjacent: g = (1, 1/2)
    np.testing.assert_allclose(v[[0, 2]], [0.5 - 2.0, 1.0 - 1.0], rtol=1e-14)


def test_rhs_single_ring_survivor_is_stationary():
    s = ParticleSystem(0.7, [0.0, 2.0], boundary=PERIODIC)
    assert rhs(s)[1] == 0.0
    assert rhs_regularized(s)[1] == 0.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 12), beta=st.floats(0.1, 2.0),
       periodic=st.booleans(), seed=st.integers(0, 10_000))
def test_rhs_regularized_is_chain_rule_image(n, beta, periodic, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.uniform(0.2, 2.0, size=n)
    s = ParticleSystem(beta, sizes, boundary=PERIODIC if periodic else "free")
    expected = (beta + 1.0) * sizes ** beta * rhs(s)
    np.testing.assert_allclose(rhs_regularized(s), expected, rtol=1e-12, atol=1e-12)


def test_rhs_regularized_lone_particle_constant():
    s = ParticleSystem(0.8, [0.0, 0.37, 0.0])
    assert rhs_regularized(s)[1] == pytest.approx(-2.0 * 1.8, rel=1e-15)


# ---------------------------------------------------------------------------
# step control validation


def test_step_control_rejects_nonpositive_fields():
    for kw in ({"rel_tol": 0.0}, {"abs_tol": -1e-9}, {"dt_init": 0.0},
               {"dt_max": -1.0}, {"event_tol": 0.0},
               {"simultaneity_window": 0.0}):
        with pytest.raises(ValueError):
            StepControl(**kw)
    with pytest.raises(ValueError):
        StepControl(event_tol=10.0, dt_max=1.0)


def test_sim_window_defaults_to_event_tol():
    assert StepControl(event_tol=1e-9).sim_window == 1e-9
    assert StepControl(event_tol=1e-9, simultaneity_window=1e-7).sim_window == 1e-7


# ---------------------------------------------------------------------------
# closed-form trajectories


def test_lone_particle_trajectory_and_vanish_time():
    beta, x0 = 0.5, 0.9
    tau = lone_vanish_time(beta, x0)
    s = ParticleSystem(beta, [x0])
    t_mid = 0.6 * tau
    advance_to(s, t_mid, TIGHT)
    exact = (x0 ** 1.5 - 3.0 * t_mid) ** (1.0 / 1.5)
    assert s.sizes[0] == pytest.approx(exact, abs=10 * TIGHT.rel_tol)

    events = advance_to(s, 2.0 * tau, TIGHT)
    assert [e.index for e in events] == [0]
    assert events[0].tau == pytest.approx(tau, abs=10 * TIGHT.event_tol)
    assert events[0].left is None and events[0].right is None
    assert s.living_count == 0
    assert s.vanish_times[0] == events[0].tau


def test_equal_pair_vanishes_simultaneously():
    beta, a = 1.0, 0.7
    tau = pair_vanish_time(beta, a)
    s = ParticleSystem(beta, [a, a])
    events = advance_to(s, 1.0, TIGHT)
    assert len(events) == 2
    assert {e.index for e in events} == {0, 1}
    for e in events:
        assert e.tau == pytest.approx(tau, abs=10 * TIGHT.event_tol)
    # co-vanishing pair is committed as one batch at one time
    assert abs(events[0].tau - events[1].tau) <= TIGHT.sim_window
    # neighbour records are taken before the batch splice
    assert events[0].right == 1 and events[1].left == 0


def test_lone_particle_halves_exactly_at_deadline():
    beta, x0 = 0.8, 1.1
    s = ParticleSystem(beta, [x0])
    advance_to(s, float(half_life_deadline(beta, x0)), TIGHT)
    assert s.sizes[0] == pytest.approx(x0 / 2.0, rel=1e-8)


def test_advance_rejects_backwards_target():
    s = ParticleSystem(1.0, [1.0])
    advance_to(s, 0.1, TIGHT)
    with pytest.raises(ValueError):
        advance_to(s, 0.05, TIGHT)


# ---------------------------------------------------------------------------
# event-log invariants


def run_and_check_events(s, t_end, ctrl):
    before = s.copy()
    events = advance_to(s, t_end, ctrl)
    taus = [e.tau for e in events]
    assert taus == sorted(taus)
    assert len({e.index for e in events}) == len(events)
    for e in events:
        assert before.alive[e.index]           # no-undead: was alive at start
        assert not s.alive[e.index]            # and is dead at the end
        assert s.vanish_times[e.index] == e.tau
        assert 0.0 <= e.tau <= t_end
    assert s.living_count == before.living_count - len(events)
    return events


def test_event_log_invariants_random_chain():
    rng = np.random.default_rng(11)
    s = ParticleSystem(0.5, rng.uniform(0.1, 1.0, size=50), boundary=PERIODIC)
    ctrl = StepControl(rel_tol=1e-8, abs_tol=1e-12, event_tol=1e-10)
    events = run_and_check_events(s, 0.35, ctrl)
    assert len(events) >= 10  # the window is long enough to be interesting


def test_events_record_contemporary_neighbours():
    # 0.2 vanishes first; 0.3 vanishes later and must name the splice result
    s = ParticleSystem(1.0, [2.0, 0.2, 0.3, 2.0])
    events = advance_to(s, 0.2, TIGHT)
    assert [e.index for e in events] == [1, 2]
    assert events[0].left == 0 and events[0].right == 2
    assert events[1].left == 0 and events[1].right == 3


def test_two_leg_advance_matches_single_leg():
    rng = np.random.default_rng(23)
    x0 = rng.uniform(0.2, 1.2, size=30)
    ctrl = StepControl(rel_tol=1e-9, abs_tol=1e-13, event_tol=1e-11)
    one = ParticleSystem(0.5, x0.copy(), boundary=PERIODIC)
    ev_one = advance_to(one, 0.4, ctrl)
    two = ParticleSystem(0.5, x0.copy(), boundary=PERIODIC)
    ev_two = advance_to(two, 0.17, ctrl) + advance_to(two, 0.4, ctrl)
    assert [e.index for e in ev_one] == [e.index for e in ev_two]
    # Restarting at t=0.17 resets the adaptive step sequence, so the two runs
    # are distinct rel_tol-accurate realizations of the same trajectory; the
    # vanishing times inherit that trajectory-level spread, not event_tol.
    assert max(abs(a.tau - b.tau) for a, b in zip(ev_one, ev_two)) <= 50 * ctrl.rel_tol
    np.testing.assert_allclose(one.sizes, two.sizes, atol=100 * ctrl.rel_tol)


def test_events_csv(tmp_path):
    s = ParticleSystem(1.0, [2.0, 0.2, 2.0])
    events = advance_to(s, 0.1, TIGHT)
    path = tmp_path / "events.csv"
    write_events_csv(events, path)
    text = path.read_text().splitlines()
    assert text[0] == "index,tau,left,right"
    idx, tau, left, right = text[1].split(",")
    assert (int(idx), int(left), int(right)) == (1, 0, 2)
    assert float(tau) == events[0].tau


# ---------------------------------------------------------------------------
# reference oracle


def make_random_system(seed, beta=0.5, n=10, periodic=False):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.3, 1.2, size=n)
    return x0, ParticleSystem(beta, x0, boundary=PERIODIC if periodic else "free")


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_adaptive_matches_reference_on_smooth_window(seed):
    beta = 0.5
    x0, sa = make_random_system(seed, beta)
    _, sr = make_random_system(seed, beta)
    t_safe = 0.9 * float(np.min(half_life_deadline(beta, x0)))
    ctrl = StepControl(rel_tol=1e-8, abs_tol=1e-12, event_tol=1e-10)
    advance_to(sa, t_safe, ctrl)
    reference_advance(sr, t_safe, dt=t_safe / 4000)
    assert np.max(np.abs(sa.sizes - sr.sizes)) <= 10 * ctrl.rel_tol * x0.max()


@pytest.mark.parametrize("seed,periodic", [(0, False), (5, True)])
def test_adaptive_matches_reference_through_events(seed, periodic):
    beta = 0.5
    x0, sa = make_random_system(seed, beta, periodic=periodic)
    _, sr = make_random_system(seed, beta, periodic=periodic)
    ctrl = StepControl(rel_tol=1e-9, abs_tol=1e-13, event_tol=1e-11)
    dt = 1e-4
    ev_a = advance_to(sa, 0.4, ctrl)
    ev_r = reference_advance(sr, 0.4, dt=dt)
    assert len(ev_a) >= 2
    assert [e.index for e in ev_a] == [e.index for e in ev_r]
    worst = max(abs(a.tau - b.tau) for a, b in zip(ev_a, ev_r))
    assert worst <= max(ctrl.event_tol, 10 * dt)


def test_reference_advance_validation():
    s = ParticleSystem(1.0, [1.0])
    with pytest.raises(ValueError):
        reference_advance(s, 0.1, dt=0.0)
    advance_to(s, 0.05, TIGHT)
    with pytest.raises(ValueError):
        reference_advance(s, 0.0, dt=1e-3)


def test_reference_advance_converges_at_fourth_order():
    beta = 0.5
    x0, _ = make_random_system(9, beta)
    t_safe = 0.9 * float(np.min(half_life_deadline(beta, x0)))

    def err(dt):
        s = ParticleSystem(beta, x0.copy())
        reference_advance(s, t_safe, dt=dt)
        ref = ParticleSystem(beta, x0.copy())
        advance_to(ref, t_safe, TIGHT)
        return np.max(np.abs(s.sizes - ref.sizes))

    e1, e2 = err(t_safe / 8), err(t_safe / 16)
    assert e1 > 50 * e2 / 16  # at least crudely 4th order
    assert 8 < e1 / e2 < 40   # ratio straddles 2**4


def test_embedded_pair_is_third_order():
    # One local step of the embedded pair on y' = cos(t) y.
    def f(y, t):
        return np.cos(t) * y

    t0 = 0.4
    y0 = np.array([math.exp(math.sin(t0))])
    errs = []
    for dt in (0.2, 0.1):
        ynew, _, _ = _engine._bs23_stages(f, t0, y0, dt, f(y0, t0))
        errs.append(abs(ynew[0] - math.exp(math.sin(t0 + dt))))
    ratio = errs[0] / errs[1]
    assert 9 < ratio < 30  # local error ~ dt**4


# ---------------------------------------------------------------------------
# structural invariants of the flow


def test_symmetric_data_stays_symmetric():
    rng = np.random.default_rng(4)
    half = rng.uniform(0.2, 1.0, size=10)
    x0 = np.concatenate([half, [1.7], half[::-1]])
    s = ParticleSystem(0.5, x0)
    ctrl = StepControl(rel_tol=1e-11, abs_tol=1e-15, event_tol=1e-12)
    events = advance_to(s, 0.25, ctrl)
    assert len(events) >= 2
    assert np.max(np.abs(s.sizes - s.sizes[::-1])) <= 1e-10
    # mirrored partners vanish together
    gone = sorted(e.index for e in events)
    assert sorted(s.n - 1 - j for j in gone) == gone


def test_ring_mass_drift_small_between_events():
    rng = np.random.default_rng(15)
    x0 = rng.uniform(0.5, 1.5, size=12)
    s = ParticleSystem(0.5, x0, boundary=PERIODIC)
    ctrl = StepControl(rel_tol=1e-10, abs_tol=1e-14, event_tol=1e-12)
    m0 = s.sizes.sum()
    events = advance_to(s, 1.0, ctrl)
    assert events  # exercises removal residuals too
    assert abs(s.sizes.sum() - m0) <= 1e-7 * m0


def test_half_life_monitor_accepts_true_flow():
    rng = np.random.default_rng(21)
    s = ParticleSystem(0.5, rng.uniform(0.1, 1.0, size=30), boundary=PERIODIC)
    mon = HalfLifeMonitor(0.5)
    ctrl = StepControl(rel_tol=1e-9, abs_tol=1e-13, event_tol=1e-11)
    mon.observe(s)
    for t in np.linspace(0.02, 0.4, 20):
        advance_to(s, float(t), ctrl)
        mon.observe(s)
    assert mon.violations == []


def test_half_life_monitor_flags_corrupted_trajectory():
    s = ParticleSystem(0.5, [1.0, 1.0, 1.0])
    mon = HalfLifeMonitor(0.5)
    mon.observe(s)
    s.time = 1e-6            # far inside every deadline
    s.sizes[1] = 0.4         # illegal: halved almost instantly
    bad = mon.observe(s)
    assert [v[0] for v in bad] == [1]
    assert mon.violations == bad


def test_step_underflow_raises_numeric_error():
    # Poisoned forcing makes every trial step fail its error test, so the
    # step collapses to the underflow threshold and must raise.
    y = np.array([1.0])
    ids = np.array([0])
    ctrl = StepControl(event_tol=1e-10)
    with pytest.raises(NumericError) as info:
        _engine.integrate_block(
            y, ids, 0.0, 1.0, 0.5, ctrl,
            forcing=lambda t: np.array([np.nan]))
    diag = info.value.diagnostics
    assert {"t", "dt", "living"} <= set(diag)
    assert diag["dt"] < 1e-10


# ---------------------------------------------------------------------------
# multirate path (long chains)


def test_multirate_matches_reference_events():
    n, beta = 200, 0.5
    rng = np.random.default_rng(42)
    x0 = rng.uniform(0.3, 1.2, size=n)
    sa = ParticleSystem(beta, x0.copy(), boundary=PERIODIC)
    sr = ParticleSystem(beta, x0.copy(), boundary=PERIODIC)
    ctrl = StepControl(rel_tol=1e-9, abs_tol=1e-13, event_tol=1e-11)
    dt = 2e-5
    t_end = 0.25
    ev_a = advance_to(sa, t_end, ctrl)
    ev_r = reference_advance(sr, t_end, dt=dt)
    assert len(ev_a) >= 5
    assert [e.index for e in ev_a] == [e.index for e in ev_r]
    worst = max(abs(a.tau - b.tau) for a, b in zip(ev_a, ev_r))
    assert worst <= max(ctrl.event_tol, 10 * dt)
    live = sa.alive
    # The reference resolves each vanishing time only to O(dt); the flanking
    # rows integrate a diverging pull through the plunge, so an O(dt) timing
    # error smears into their sizes as O(dt**(1/(beta+1))) per event.
    assert np.max(np.abs(sa.sizes[live] - sr.sizes[live])) <= 10 * dt ** (1.0 / (beta + 1.0))


def test_windowed_equals_whole_block(monkeypatch):
    rng = np.random.default_rng(31)
    x0 = rng.uniform(0.2, 1.1, size=60)
    ctrl = StepControl(rel_tol=1e-10, abs_tol=1e-14, event_tol=1e-12)
    plain = ParticleSystem(0.5, x0.copy(), boundary=PERIODIC)
    ev_plain = advance_to(plain, 0.25, ctrl)
    monkeypatch.setattr(_engine, "SMALL_N", 8)  # force the windowed path
    windowed = ParticleSystem(0.5, x0.copy(), boundary=PERIODIC)
    ev_win = advance_to(windowed, 0.25, ctrl)
    assert [e.index for e in ev_plain] == [e.index for e in ev_win]
    worst = max(abs(a.tau - b.tau) for a, b in zip(ev_plain, ev_win))
    assert worst <= 10 * ctrl.event_tol
    np.testing.assert_allclose(plain.sizes, windowed.sizes, atol=1e-7)


def test_half_life_monitor_on_multirate_run():
    rng = np.random.default_rng(77)
    s = ParticleSystem(0.5, rng.uniform(0.1, 1.0, size=400), boundary=PERIODIC)
    mon = HalfLifeMonitor(0.5)
    ctrl = StepControl(rel_tol=1e-7, abs_tol=1e-11, event_tol=1e-9)
    mon.observe(s)
    total_events = 0
    for t in np.linspace(0.01, 0.2, 8):
        total_events += len(advance_to(s, float(t), ctrl))
        mon.observe(s)
    assert total_events >= 30
    assert mon.violations == []
