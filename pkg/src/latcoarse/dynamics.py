"""Time integration with vanishing-event detection.

The chain evolves by ``dx_j/dt = g(x_l) - 2 g(x_j) + g(x_r)`` with
``g(s) = s**(-beta)`` and l, r the nearest living neighbours; a particle
is removed the moment its size reaches zero.  Integration happens in the
regularized variable ``y = x**(beta+1)``, in which trajectories are
locally linear at vanishing, using an embedded Bogacki-Shampine 3(2)
pair.

Event protocol (see also :mod:`latcoarse._engine`):

* the step size never exceeds half of the shortest predicted time to
  zero (``y_j / |dy_j/dt|`` over shrinking particles), so events are
  approached, not jumped;
* once the shortest predicted time to zero falls within a few
  ``event_tol`` of the present, steps are pinned at ``event_tol / 4``
  and accepted without the smooth error test: the survivors' pull
  diverges there, which makes any fixed error target unattainable,
  while the committed time only resolves to ``event_tol`` anyway;
* a trial step that drives some ``y_j <= 0`` is rejected and the step
  is bisected until the crossing is bracketed within ``event_tol``; the
  vanishing time is the final bracket midpoint and the crossing step
  itself is never taken;
* values in ``(0, 1e-14]`` at an accepted step count as vanished at
  that step's end time;
* at removal the vanisher's residual size is handed to its surviving
  flanks (half each; everything to one side at a chain end), the mass
  the true flow would have drained out of it during its last sub-
  ``event_tol`` instants -- total mass on a ring is conserved to the
  integrator tolerance across events;
* events closer together than ``simultaneity_window`` form one batch:
  they are spliced out together and logged in (tau, index) order, so
  exactly simultaneous pairs produce no order-dependent artifacts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _engine
from ._engine import StepControl, Y_FLOOR  # re-exported API  # noqa: F401
from .errors import NumericError  # noqa: F401
from .lattice import PERIODIC, g


@dataclass
class VanishEvent:
    """One removal: particle ``index`` vanished at time ``tau``.

    ``left``/``right`` are the original indices of its chain neighbours at
    the event (None at a free end).
    """

    index: int
    tau: float
    left: int | None
    right: int | None


def rhs(system):
    """Velocities dx_j/dt for every index; exactly 0 at vanished sites."""
    out = np.zeros(system.n)
    live = system.living_indices()
    if live.size == 0:
        return out
    gx = system.sizes[live] ** -system.beta
    lap = -2.0 * gx
    if live.size > 1:
        lap[:-1] += gx[1:]
        lap[1:] += gx[:-1]
    if system.boundary == PERIODIC:
        if live.size == 1:
            lap[0] = 0.0
        else:
            lap[0] += gx[-1]
            lap[-1] += gx[0]
    out[live] = lap
    return out


def rhs_regularized(system):
    """Velocities dy_j/dt of y = x**(beta+1); 0 at vanished sites.

    Equals ``(beta+1) * x**beta * rhs``, but stays bounded as x_j -> 0
    while the neighbours stay away from zero.
    """
    out = np.zeros(system.n)
    live = system.living_indices()
    if live.size == 0:
        return out
    bp1 = system.beta + 1.0
    y = system.sizes[live] ** bp1
    out[live] = _engine.chain_rhs(y, system.beta / bp1, bp1,
                                  periodic=system.boundary == PERIODIC)
    return out


def advance_to(system, t_end, ctrl=None):
    """Advance the system to exactly ``t_end``; return the new events.

    Every vanishing is located to within the event tolerance in effect at
    its epoch (``ctrl.etol_at``) and committed to the system (splice, zero
    size, permanent vanishing time) in non-decreasing tau order.  Raises
    :class:`NumericError` with a diagnostic state on step-size underflow.
    """
    ctrl = ctrl or StepControl()
    if t_end < system.time:
        raise ValueError(f"t_end={t_end} lies before system.time={system.time}")
    events = []
    if t_end == system.time:
        return events
    if system.living_count == 0:
        system.time = t_end
        return events
    eng = _engine.Engine(system, ctrl)
    eng.run(t_end, events)
    eng.writeback()
    return events


def reference_advance(system, t_end, dt):
    """Fixed-step classical RK4 oracle in the regularized variable.

    Deliberately independent of the adaptive engine: full steps of ``dt``,
    removal when y crosses the vanished threshold with the time found by
    linear interpolation inside the step.  Trajectory error is O(dt**4)
    away from events and O(dt) in the located times; intended for small
    systems (n <= 100).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < system.time:
        raise ValueError(f"t_end={t_end} lies before system.time={system.time}")
    beta = system.beta
    bp1 = beta + 1.0
    q = beta / bp1
    periodic = system.boundary == PERIODIC

    def f(y):
        # Stage values at or below the vanished threshold are treated as
        # already removed: they exert no pull and feel none.  Their real
        # removal (splice + event record) happens at the step end.
        up = y > Y_FLOOR
        if periodic and y.size == 1:
            return np.zeros(1)
        yg = np.where(up, y, 1.0)
        tl = (yg / np.roll(yg, 1)) ** q
        tr = (yg / np.roll(yg, -1)) ** q
        tl[~np.roll(up, 1)] = 0.0
        tr[~np.roll(up, -1)] = 0.0
        if not periodic:
            tl[0] = 0.0
            tr[-1] = 0.0
        out = bp1 * (tl + tr - 2.0)
        out[~up] = 0.0
        return out

    live = system.living_indices()
    ids = live.astype(np.int64)
    y = system.sizes[live] ** bp1
    t = system.time
    events = []
    while t_end - t > 4e-16 * max(1.0, abs(t_end)) and y.size:
        h = min(dt, t_end - t)
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        ynew = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
        gone = np.flatnonzero(ynew <= Y_FLOOR)
        if gone.size:
            batch = set(int(r) for r in gone)
            # Same mass bookkeeping as the adaptive engine: the residual of
            # each vanisher is handed to its surviving flank(s).
            for r in sorted(batch):
                if ynew[r] <= 0.0:
                    continue
                x_res = ynew[r] ** (1.0 / bp1)
                left = next((k for k in range(r - 1, -1, -1) if k not in batch),
                            None)
                right = next((k for k in range(r + 1, ynew.size) if k not in batch),
                             None)
                if periodic and ynew.size > len(batch):
                    if left is None:
                        left = next((k for k in range(ynew.size - 1, r, -1)
                                     if k not in batch), None)
                    if right is None:
                        right = next((k for k in range(0, r) if k not in batch),
                                     None)
                targets = [k for k in (left, right) if k is not None]
                if targets:
                    share = x_res / len(targets)
                    for k in targets:
                        ynew[k] = (ynew[k] ** (1.0 / bp1) + share) ** bp1
            frac = np.clip(y[gone] / np.maximum(y[gone] - ynew[gone], _engine._TINY),
                           0.0, 1.0)
            taus = t - h + h * frac
            for pos in np.argsort(taus, kind="stable"):
                row = int(gone[pos])
                left = int(ids[row - 1]) if (row > 0 or periodic) and ids.size > 1 else None
                right = (int(ids[(row + 1) % ids.size])
                         if (row < ids.size - 1 or periodic) and ids.size > 1 else None)
                tau = max(float(taus[pos]), system._last_tau)
                system.remove_particle(int(ids[row]), tau)
                events.append(VanishEvent(int(ids[row]), tau, left, right))
            y = np.delete(ynew, gone)
            ids = np.delete(ids, gone)
        else:
            y = ynew
    if ids.size:
        system.sizes[ids] = y ** (1.0 / bp1)
    system.time = t_end
    return events


def half_life_deadline(beta, x):
    """Time before which a particle of size x cannot have halved.

    The regularized size loses at most 2*(beta+1) per unit time, so
    reaching (x/2)**(beta+1) takes at least
    ``(1 - 2**-(beta+1)) * x**(beta+1) / (2 (beta+1))``.
    """
    bp1 = beta + 1.0
    return (1.0 - 2.0 ** -bp1) * np.asarray(x) ** bp1 / (2.0 * bp1)


class HalfLifeMonitor:
    """Checks the halving lower bound along a sampled run.

    Feed states through :meth:`observe`; any particle found below half of
    an earlier observed size before that size's deadline (see
    :func:`half_life_deadline`) is recorded as a violation ``(index, t1,
    t)``.  Violations signal integrator bugs - the bound is a theorem of
    the dynamics.
    """

    def __init__(self, beta, slack=1e-9):
        self.beta = float(beta)
        self.slack = float(slack)
        self.violations = []
        self._snaps = []  # (t1, sizes, deadlines)

    def observe(self, system):
        """Record the current state; returns violations new to this call."""
        t = system.time
        x = system.sizes
        new = []
        kept = []
        for t1, x1, deadline in self._snaps:
            active = (t <= deadline) & (x1 > 0)
            bad = active & (x < 0.5 * x1 * (1.0 - self.slack))
            for j in np.flatnonzero(bad):
                new.append((int(j), t1, t))
            if bool(np.any(deadline > t)):
                kept.append((t1, x1, deadline))
        self._snaps = kept
        self._snaps.append((t, x.copy(), t + half_life_deadline(self.beta, x)))
        self.violations.extend(new)
        return new


def write_events_csv(events, path):
    """Write an event log as CSV rows (index, tau, left, right)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "tau", "left", "right"])
        for ev in events:
            writer.writerow([ev.index, repr(float(ev.tau)),
                             "" if ev.left is None else ev.left,
                             "" if ev.right is None else ev.right])
