"""Adaptive integration engine in regularized coordinates.

Everything here operates on packed arrays of the *living* chain in
traversal order: row i of ``y`` holds the regularized size
y = x**(beta+1) of the i-th living particle, and rows i-1, i+1 are its
current chain neighbours.  In these coordinates trajectories are locally
linear at vanishing, so an explicit embedded pair with step rejection
handles the singularity.

Scheme: Bogacki-Shampine 3(2) pair (first-same-as-last), error norm
``max|e_i| / (abs_tol + rel_tol * max(y))``, step factor
``0.9 * err**(-1/3)`` clipped to [0.2, 5].  Event handling follows the
protocol documented on :func:`latcoarse.dynamics.advance_to`.

:func:`integrate_block` is the full-semantics core, used directly for
small systems and for the two-particle local problems (which add forcing
terms and reversed time).  :class:`Engine` wraps it in a multirate outer
loop for long chains: particles within a few predicted lifetimes of
vanishing are grouped into small windows (plus a halo of neighbours) and
integrated with full event semantics, while the remaining far field takes
one long embedded step per outer iteration; the two regions couple
through linear-in-time boundary predictions.  Windowing changes cost, not
semantics - events can only occur inside windows, and the far field is
stepped well below both its own error cap and half of its shortest
predicted lifetime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

#: Regularized sizes at or below this value count as vanished.
Y_FLOOR = 1e-14

#: Chains up to this length are integrated as a single block (no windows).
SMALL_N = 128

#: Neighbours kept on each side of a near-vanishing core inside a window.
HALO = 10

_ORDER_EXP = -1.0 / 3.0  # step-factor exponent for a 3rd-order pair
_TINY = 1e-300


@dataclass
class StepControl:
    """Tolerances and limits for the adaptive integrator.

    ``rel_tol``/``abs_tol`` control the embedded-pair error test in
    regularized coordinates; ``event_tol`` is the time tolerance for
    locating vanishing events, optionally widened in proportion to the
    clock by ``event_tol_rel`` (see :meth:`etol_at`); events closer
    together than ``simultaneity_window`` (default: ``event_tol``) are
    committed as one batch.  ``y_floor`` is the regularized size at or
    below which a particle counts as vanished; lowering it (together with
    a relative event tolerance) lets runs resolve structure far below the
    default commit scale.  ``dt_init`` seeds the first step, ``dt_max``
    caps all steps.  ``multirate_min_n`` overrides the chain length at
    which the driver switches from single-block to multirate integration
    (default ``SMALL_N + 1``); raise it to force whole-chain integration
    when window-boundary approximations must not perturb sensitive
    dynamics.
    """

    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    dt_init: float = 1e-3
    dt_max: float = 1e6
    event_tol: float = 1e-10
    event_tol_rel: float = 0.0
    y_floor: float = Y_FLOOR
    simultaneity_window: float | None = None
    multirate_min_n: int | None = None

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "dt_init", "dt_max", "event_tol",
                     "y_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"StepControl.{name} must be positive")
        if self.event_tol_rel < 0:
            raise ValueError("StepControl.event_tol_rel must be non-negative")
        if self.simultaneity_window is not None and self.simultaneity_window <= 0:
            raise ValueError("StepControl.simultaneity_window must be positive")
        if self.event_tol > self.dt_max:
            raise ValueError("StepControl.event_tol must not exceed dt_max")
        if self.multirate_min_n is not None and self.multirate_min_n < 2:
            raise ValueError("StepControl.multirate_min_n must be at least 2")

    def etol_at(self, t):
        """Event-location tolerance in effect at time ``t``.

        With ``event_tol_rel > 0`` the bracketing width scales with the
        clock, so events at very different epochs are all resolved to the
        same relative precision; ``event_tol`` remains the absolute floor.
        """
        return max(self.event_tol, self.event_tol_rel * abs(t))

    @property
    def direct_cap(self):
        """Largest chain length integrated as a single block."""
        return SMALL_N if self.multirate_min_n is None else self.multirate_min_n - 1

    @property
    def sim_window(self):
        return self.event_tol if self.simultaneity_window is None else self.simultaneity_window


def chain_rhs(y, q, bp1, *, periodic=False, yl=None, yr=None, f=None, sign=1.0,
              floor=Y_FLOOR):
    """Velocity of packed regularized sizes.

    ``yl``/``yr`` are virtual neighbour values beyond the block ends
    (None = open end, missing neighbour contributes nothing).  ``f`` is an
    optional per-particle forcing in physical-size units.  ``sign=-1``
    integrates the time-reversed field.  Inputs are guarded (at a fraction
    of the vanishing threshold ``floor``) so that trial stages which dip
    to non-positive values stay finite (such steps get rejected by the
    caller).
    """
    n = y.size
    yg = np.maximum(y, 0.25 * floor)
    v = np.full(n, -2.0)
    if n > 1:
        w = (yg[1:] / yg[:-1]) ** q
        v[:-1] += 1.0 / w
        v[1:] += w
    if periodic:
        if n == 1:
            v[0] = 0.0  # lone survivor on a ring: self-coupled terms cancel
        else:
            w0 = (yg[0] / yg[-1]) ** q
            v[0] += w0
            v[-1] += 1.0 / w0
    else:
        if yl is not None:
            v[0] += (yg[0] / max(yl, floor)) ** q
        if yr is not None:
            v[-1] += (yg[-1] / max(yr, floor)) ** q
    if f is not None:
        v += yg ** q * f
    return (sign * bp1) * v


def _bs23_stages(rhs, t, y, dt, k1):
    """One Bogacki-Shampine 3(2) trial step; returns (y_new, k4, err_vec)."""
    k2 = rhs(y + (0.5 * dt) * k1, t + 0.5 * dt)
    k3 = rhs(y + (0.75 * dt) * k2, t + 0.75 * dt)
    ynew = y + dt * ((2.0 / 9.0) * k1 + (1.0 / 3.0) * k2 + (4.0 / 9.0) * k3)
    k4 = rhs(ynew, t + dt)
    evec = dt * ((-5.0 / 72.0) * k1 + (1.0 / 12.0) * k2
                 + (1.0 / 9.0) * k3 - 0.125 * k4)
    return ynew, k4, evec


def _step_factor(err):
    return min(5.0, max(0.2, 0.9 * (max(err, 1e-16)) ** _ORDER_EXP))


class BlockResult:
    """Outcome of :func:`integrate_block`."""

    __slots__ = ("y", "ids", "events", "removed_rows", "dt_last", "t_stop")

    def __init__(self, y, ids, events, removed_rows, dt_last, t_stop):
        self.y = y
        self.ids = ids
        self.events = events            # list of (id, tau, left_id, right_id)
        self.removed_rows = removed_rows  # input-row positions removed
        self.dt_last = dt_last
        self.t_stop = t_stop            # < t1 when an edge_guard stop fired


def integrate_block(y, ids, t0, t1, beta, ctrl, *, periodic=False,
                    left_bc=None, right_bc=None, edge_ids=(None, None),
                    forcing=None, direction=1.0, locate_events=True,
                    dt_hint=None, sample_times=None, on_sample=None,
                    edge_guard=0):
    """Integrate one contiguous block of the chain from t0 to t1.

    ``left_bc``/``right_bc`` are ``(value, slope, t_ref)`` linear
    predictions of the neighbouring regularized size just outside the
    block (None = open end); ``edge_ids`` gives those neighbours' original
    indices for event records.  ``forcing`` is a callable ``t -> array``
    in physical-size units.  With ``direction=-1`` the time-reversed field
    is integrated and event location must be disabled.

    Vanished rows are spliced out of the local arrays immediately;
    removals are reported through ``BlockResult`` for the caller to commit
    to the owning system in batch order.

    ``edge_guard > 0`` makes the block stop early (at the commit time,
    reported as ``t_stop``) when a vanishing lands within that many rows
    of a frozen-prediction edge: the linear predictions are about to turn
    stale, so the caller must rebuild the partition before continuing.
    Not meaningful together with ``sample_times``.
    """
    bp1 = beta + 1.0
    q = beta / bp1
    sim = ctrl.sim_window
    y = np.array(y, dtype=float)
    ids = np.array(ids, dtype=np.int64)
    rows = np.arange(y.size)  # positions in the caller's block
    events = []
    removed = []

    def bc_val(bc, t):
        if bc is None:
            return None
        return bc[0] + bc[1] * (t - bc[2])

    def rhs(yv, tv):
        fv = forcing(tv) if forcing is not None else None
        return chain_rhs(yv, q, bp1, periodic=periodic,
                         yl=bc_val(left_bc, tv), yr=bc_val(right_bc, tv),
                         f=fv, sign=direction, floor=ctrl.y_floor)

    def neighbor_ids(row):
        left = ids[row - 1] if row > 0 else (
            ids[-1] if periodic and ids.size > 1 else edge_ids[0])
        right = ids[row + 1] if row < ids.size - 1 else (
            ids[0] if periodic and ids.size > 1 else edge_ids[1])
        return (None if left is None else int(left),
                None if right is None else int(right))

    def nearest_survivors(batch_set, r):
        """Rows flanking r that are alive and outside the vanishing batch."""
        n = y.size
        left = right = None
        for k in range(r - 1, -1, -1):
            if k not in batch_set:
                left = k
                break
        for k in range(r + 1, n):
            if k not in batch_set:
                right = k
                break
        if periodic and n > len(batch_set):
            if left is None:
                for k in range(n - 1, r, -1):
                    if k not in batch_set:
                        left = k
                        break
            if right is None:
                for k in range(0, r):
                    if k not in batch_set:
                        right = k
                        break
        return [k for k in (left, right) if k is not None]

    left_guarded = edge_guard > 0 and not periodic and left_bc is not None
    right_guarded = edge_guard > 0 and not periodic and right_bc is not None
    edge_stop = None

    def commit(local_rows, tau):
        # Record neighbours before splicing the batch out, then delete all
        # batch rows at once so co-vanishing particles never see each
        # other's removal (no order artifact within a batch).
        nonlocal y, ids, rows, k1, edge_stop
        batch = sorted(int(r) for r in local_rows)
        batch_set = set(batch)
        if (left_guarded or right_guarded) and edge_stop is None:
            n_pre = y.size
            for r in batch:
                if (left_guarded and r < edge_guard) or \
                        (right_guarded and r >= n_pre - edge_guard):
                    edge_stop = float(tau)
                    break
        # Mass conservation across removals: the true flow drains the
        # (sub-event_tol) residual into the flanking survivors during the
        # last instants of the particle's life; hand it over symmetrically
        # at removal instead of discarding it.
        for r in batch:
            if y[r] <= 0.0:
                continue
            x_res = y[r] ** (1.0 / bp1)
            targets = nearest_survivors(batch_set, r)
            if not targets:
                continue  # nobody left to receive it (chain dies out)
            share = x_res / len(targets)
            for k in targets:
                y[k] = (y[k] ** (1.0 / bp1) + share) ** bp1
        for r in batch:
            left, right = neighbor_ids(r)
            events.append((int(ids[r]), float(tau), left, right))
            removed.append(int(rows[r]))
        keep = np.ones(y.size, dtype=bool)
        keep[batch] = False
        y = y[keep]
        ids = ids[keep]
        rows = rows[keep]
        k1 = None

    span = t1 - t0
    t_edge = 4e-16 * max(1.0, abs(t0), abs(t1))
    stops = []
    if sample_times is not None:
        stops = [float(s) for s in sample_times if t0 < s <= t1]
    stops.append(t1)
    underflow = max(1e-3 * ctrl.event_tol, 64 * np.finfo(float).eps * abs(t1))

    t = t0
    dt = min(ctrl.dt_max, dt_hint if dt_hint else ctrl.dt_init, max(span, _TINY))
    k1 = None
    stop_i = 0
    iterations = 0
    while stop_i < len(stops):
        if edge_stop is not None:
            break
        t_stop = stops[stop_i]
        if t_stop - t <= t_edge:
            if on_sample is not None and stop_i < len(stops) - 1:
                on_sample(t_stop, y, ids)
            stop_i += 1
            continue
        if y.size == 0:
            t = t_stop
            continue
        iterations += 1
        if iterations > 20_000_000:
            raise NumericError("integration did not terminate",
                               {"t": t, "dt": dt, "living": int(y.size)})
        if k1 is None:
            k1 = rhs(y, t)
        event_bound = False
        et = ctrl.etol_at(t)
        if locate_events:
            neg = k1 < 0
            if neg.any():
                t2z = float(np.min(y[neg] / -k1[neg]))
                dt = min(dt, max(0.5 * t2z, 0.25 * et))
                if t2z <= 8.0 * et:
                    # Event-bound regime: a vanishing is within reach of the
                    # bracketing resolution.  The survivors' pull diverges
                    # here, so no fixed error target is attainable, and tau
                    # itself only resolves to the event tolerance -- step at
                    # the bracketing scale instead of strangling dt.  (The
                    # raise stays below that tolerance, so a crossing trial
                    # at this size commits at once rather than re-entering
                    # bisection.)
                    event_bound = True
                    # Floor keeps the step representable at the current t
                    # when the tolerance sits near the 64*eps*t underflow
                    # scale.
                    dt = max(dt, 0.25 * et,
                             32.0 * np.finfo(float).eps * abs(t))
        dt = min(dt, t_stop - t, ctrl.dt_max)
        ynew, k4, evec = _bs23_stages(rhs, t, y, dt, k1)
        # Crossing trials are handled before the error test: their stage
        # values are clamped near zero, which poisons the error estimate,
        # and the protocol bisects them towards the crossing regardless.
        if locate_events:
            crossed = ynew <= 0.0
            if crossed.any():
                if dt > et:
                    dt *= 0.5  # bisect towards the first crossing
                    continue
                # Crossing bracketed to within the event tolerance: commit
                # at the bracket midpoint without taking the (unusable) step.
                commit(np.flatnonzero(crossed), t + 0.5 * dt)
                continue
        if event_bound and np.all(np.isfinite(ynew)):
            # Accept unconditionally at the bracketing scale; the local
            # error here is of the same order as the inherent commit
            # discard, and only a bounded number of such steps occur.
            t += dt
            y = ynew
            landed = y <= ctrl.y_floor
            if landed.any():
                commit(np.flatnonzero(landed), t)
            else:
                k1 = k4
            continue
        scale = ctrl.abs_tol + ctrl.rel_tol * max(float(np.max(y)), _TINY)
        emax = float(np.max(np.abs(evec)))
        err = emax / scale if np.isfinite(emax) else np.inf
        if err > 1.0:
            dt *= _step_factor(err)
            # Only repeated rejection is a genuine death spiral; floors on
            # the event paths keep accepted steps representable.
            if dt < underflow:
                worst = int(np.argmin(y))
                raise NumericError(
                    f"step size underflow at t={t!r} (dt={dt!r})",
                    {"t": t, "dt": dt, "index": int(ids[worst]),
                     "y_min": float(y[worst]), "living": int(y.size)})
            continue
        t += dt
        y = ynew
        dt = min(dt * _step_factor(err), ctrl.dt_max)
        if locate_events:
            landed = y <= ctrl.y_floor
            if landed.any():
                commit(np.flatnonzero(landed), t)
                continue
        k1 = k4  # first-same-as-last

    # Group events closer than the simultaneity window and order each
    # batch by (tau, index); bracket jitter within a batch is below
    # event_tol by construction, so this only normalises the log order.
    if events:
        events.sort(key=lambda e: e[1])
        out = []
        i = 0
        while i < len(events):
            j = i + 1
            while j < len(events) and events[j][1] - events[i][1] <= sim:
                j += 1
            out.extend(sorted(events[i:j], key=lambda e: (e[1], e[0])))
            i = j
        events = out
    return BlockResult(y, ids, events, np.asarray(removed, dtype=np.int64), dt,
                       t1 if edge_stop is None else edge_stop)


class Engine:
    """Multirate driver advancing a :class:`~latcoarse.lattice.ParticleSystem`."""

    def __init__(self, system, ctrl):
        self.sys = system
        self.ctrl = ctrl
        self.beta = system.beta
        self.bp1 = system.beta + 1.0
        self.q = system.beta / self.bp1
        self.periodic = system.boundary == "periodic"
        live = system.living_indices()
        self.ids = live.astype(np.int64)
        self.y = system.sizes[live] ** self.bp1
        hints = getattr(system, "_engine_hints", None) or {}
        self.dt_block = hints.get("dt_block")
        self.h_far = hints.get("h_far")
        self.theta = hints.get("theta")

    # -- helpers ---------------------------------------------------------

    def _commit_events(self, raw_events, out_events):
        """Commit (id, tau, left, right) tuples to the system, sorted."""
        from .dynamics import VanishEvent  # local import to avoid a cycle

        for pid, tau, left, right in sorted(raw_events, key=lambda e: (e[1], e[0])):
            # Bracket midpoints of distinct batches can disagree by less
            # than event_tol; keep the recorded log monotone.
            tau = max(tau, self.sys._last_tau)
            self.sys.remove_particle(pid, tau)
            out_events.append(VanishEvent(index=pid, tau=tau, left=left, right=right))

    def _whole_block(self, t, t_stop, out_events):
        res = integrate_block(self.y, self.ids, t, t_stop, self.beta, self.ctrl,
                              periodic=self.periodic, dt_hint=self.dt_block)
        self._commit_events(res.events, out_events)
        self.y, self.ids = res.y, res.ids
        self.dt_block = res.dt_last

    def _windows(self, r):
        """Merged index windows [a, b] (inclusive, possibly wrapping) around
        particles with predicted lifetime below the horizon."""
        n = self.y.size
        hot = np.flatnonzero(r < self.theta)
        if hot.size == 0:
            return [], None
        covered = np.zeros(n, dtype=bool)
        for h in hot:
            lo, hi = h - HALO, h + HALO
            if self.periodic:
                idx = np.arange(lo, hi + 1) % n
                covered[idx] = True
            else:
                covered[max(lo, 0):min(hi, n - 1) + 1] = True
        runs = []
        idx = np.flatnonzero(covered)
        start = prev = idx[0]
        for k in idx[1:]:
            if k == prev + 1:
                prev = k
            else:
                runs.append([start, prev])
                start = prev = k
        runs.append([start, prev])
        if self.periodic and len(runs) > 1 and runs[0][0] == 0 and runs[-1][1] == n - 1:
            runs[0][0] = runs.pop()[0]  # wrap-around window (a > b)
        return runs, covered

    # -- main loop -------------------------------------------------------

    def run(self, t_end, out_events):
        sys = self.sys
        t = sys.time
        ctrl = self.ctrl
        t_edge = 4e-16 * max(1.0, abs(t_end))
        while t_end - t > t_edge and self.y.size:
            n = self.y.size
            if n <= ctrl.direct_cap:
                self._whole_block(t, t_end, out_events)
                t = t_end
                break
            k1 = chain_rhs(self.y, self.q, self.bp1, periodic=self.periodic,
                           floor=ctrl.y_floor)
            r = np.full(n, np.inf)
            neg = k1 < 0
            r[neg] = self.y[neg] / -k1[neg]
            rmin = float(r.min())
            if self.theta is None:
                self.theta = max(8 * ctrl.event_tol, 4 * min(rmin, ctrl.dt_max))
            windows, covered = self._windows(r)
            if covered is not None and covered.sum() > 0.5 * n:
                # Near-vanishing particles dominate: fall back to the plain
                # single-block path for a bounded span.
                self._whole_block(t, min(t_end, t + 8 * self.theta), out_events)
                t = min(t_end, t + 8 * self.theta)
                self.theta *= 0.7
                continue

            far_rmin = float(r[~covered].min()) if covered is not None else rmin
            h_nominal = min(self.h_far if self.h_far else ctrl.dt_init,
                            0.45 * far_rmin, ctrl.dt_max, t_end - t)
            if windows:
                h_nominal = min(h_nominal, 0.25 * self.theta)

            if windows:
                rows_w = np.concatenate(
                    [np.arange(a, b + 1 + n) % n if a > b else np.arange(a, b + 1)
                     for a, b in windows])
                yw0 = self.y[rows_w]
                vw0 = k1[rows_w]
            else:
                rows_w = None

            def stage_override(yv, tv):
                if rows_w is None:
                    return yv
                yv = yv.copy()
                yv[rows_w] = np.maximum(yw0 + vw0 * (tv - t),
                                        0.25 * ctrl.y_floor)
                return yv

            def far_rhs(yv, tv):
                return chain_rhs(stage_override(yv, tv), self.q, self.bp1,
                                 periodic=self.periodic, floor=ctrl.y_floor)

            # A window's frozen edge predictions only stay valid while the
            # vanishing front keeps clear of its rim.  Window blocks stop
            # early when a vanishing lands near their edge (edge_guard);
            # then the whole step -- far field included -- is redone to
            # that stop time so the partition can be rebuilt while it is
            # still meaningful.  Without this, a cascade of removals can
            # march through the halo inside one long step and stall against
            # the frozen far field.
            for _attempt in range(4):
                h = h_nominal
                # Far-field trial step (windows enter through frozen
                # predictions).
                while True:
                    if h < max(1e-3 * ctrl.event_tol, 64 * np.finfo(float).eps * max(1.0, abs(t_end))):
                        raise NumericError(f"far-field step underflow at t={t!r}",
                                           {"t": t, "dt": h, "living": int(n)})
                    ynew, _k4, evec = _bs23_stages(far_rhs, t, self.y, h, k1)
                    scale = ctrl.abs_tol + ctrl.rel_tol * max(float(np.max(self.y)), _TINY)
                    if rows_w is not None:
                        evec[rows_w] = 0.0
                    emax = float(np.max(np.abs(evec)))
                    err = emax / scale if np.isfinite(emax) else np.inf
                    far_ok = np.delete(ynew, rows_w) if rows_w is not None else ynew
                    if err <= 1.0 and float(far_ok.min(initial=np.inf)) > 4 * ctrl.y_floor:
                        break
                    h *= _step_factor(max(err, 1.26))  # shrink; never grow here

                removed_rows = []
                raw_events = []
                dt_block_new = self.dt_block
                t_sync = t + h
                for a, b in windows:
                    win = np.arange(a, b + 1 + n) % n if a > b else np.arange(a, b + 1)
                    left_bc = right_bc = None
                    left_id = right_id = None
                    bl, br = (a - 1) % n, (b + 1) % n
                    if self.periodic or a > 0:
                        left_bc = (self.y[bl], k1[bl], t)
                        left_id = int(self.ids[bl])
                    if self.periodic or b < n - 1:
                        right_bc = (self.y[br], k1[br], t)
                        right_id = int(self.ids[br])
                    res = integrate_block(
                        self.y[win], self.ids[win], t, t + h, self.beta, ctrl,
                        periodic=False, left_bc=left_bc, right_bc=right_bc,
                        edge_ids=(left_id, right_id), dt_hint=self.dt_block,
                        edge_guard=2)
                    raw_events.extend(res.events)
                    kept = np.delete(win, res.removed_rows)
                    ynew[kept] = res.y
                    removed_rows.extend(win[res.removed_rows].tolist())
                    dt_block_new = res.dt_last
                    t_sync = min(t_sync, res.t_stop)
                if t_sync >= t + h - max(4 * ctrl.event_tol,
                                         4e-16 * max(1.0, abs(t + h))):
                    break
                # An edge stop fired strictly inside the step: shorten the
                # step to the stop time and redo far field and windows so
                # every row lands on the same clock.  The repeat replays
                # the same deterministic trajectory over a prefix span, so
                # it terminates at the stop (retry cap is a safety net).
                h_nominal = t_sync - t
            self.h_far = h * _step_factor(err)
            self.dt_block = dt_block_new

            if raw_events:
                self._commit_events(raw_events, out_events)
            if removed_rows:
                self.y = np.delete(ynew, removed_rows)
                self.ids = np.delete(self.ids, removed_rows)
            else:
                self.y = ynew
            t += h

            # Horizon feedback: pull more particles into windows when the
            # far step is the binding constraint, shed some when windows bloat.
            if windows:
                if h < 0.125 * self.theta:
                    self.theta = min(self.theta * 1.3, ctrl.dt_max)
                hot_count = int((r < self.theta).sum())
                if hot_count > 0.25 * n:
                    self.theta *= 0.7
            elif self.h_far is not None:
                self.theta = max(8 * ctrl.event_tol, min(4 * self.h_far, ctrl.dt_max))
        sys.time = t_end

    def writeback(self):
        sys = self.sys
        if self.ids.size:
            sys.sizes[self.ids] = self.y ** (1.0 / self.bp1)
        sys._engine_hints = {"dt_block": self.dt_block, "h_far": self.h_far,
                             "theta": self.theta}
