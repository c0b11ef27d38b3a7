"""Coarsening statistics and self-similarity diagnostics.

Reductions over chain snapshots (mean/max living size, vanished-mass
bookkeeping, size histograms rescaled by the instantaneous mean),
least-squares growth-law fits, the half-mass transport time with its
provable lower bound, a Hölder modulus-of-continuity fit, and a
free-boundary truncation-stability probe.

Snapshot reductions (`collect_stats`, `rescaled_density`, ...) never
mutate their input.  The drivers `collect_series`, `sample_trajectories`
and `truncation_stability` advance systems themselves: the first two
mutate the system passed in, the last builds and runs its own copies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import advance_to
from .lattice import FREE, ParticleSystem

__all__ = [
    "SizeStats",
    "RescaledHistogram",
    "collect_stats",
    "rescaled_density",
    "histogram_l1",
    "fit_growth_exponent",
    "coarsening_times",
    "t_half_lower_bound",
    "holder_exponent",
    "truncation_stability",
    "collect_series",
    "sample_trajectories",
    "write_stats_csv",
    "write_histogram_csv",
]


@dataclass(frozen=True)
class SizeStats:
    """Statistics of a chain at one instant.

    ``vanished_mass_fraction`` is the sum of the *initial* sizes of the
    by-now-vanished particles divided by the total particle count; it is
    non-decreasing in time and bounded by the initial mean size.
    """

    time: float
    mean_size: float  # mean over living particles (0.0 once none remain)
    max_size: float  # largest living size (0.0 once none remain)
    living_count: int
    vanished_mass_fraction: float


@dataclass(frozen=True)
class RescaledHistogram:
    """Histogram of living sizes in units of the instantaneous mean.

    ``bin_edges`` has one more entry than ``densities``; the densities
    are normalized so that sum(density * bin_width) == 1 over the sizes
    that fall inside the range (empty tail bins are kept so histograms
    taken at different times remain directly comparable).
    """

    time: float
    mean: float
    bin_edges: np.ndarray
    densities: np.ndarray


# ---------------------------------------------------------------------------
# snapshot reductions


def collect_stats(system, initial_sizes=None):
    """Snapshot statistics of ``system``; see :class:`SizeStats`.

    ``initial_sizes`` overrides the initial data retained by the system
    (useful when a run was restarted from a snapshot).
    """
    if initial_sizes is None:
        initial = system.initial_sizes
    else:
        initial = np.asarray(initial_sizes, dtype=float)
        if initial.shape != (system.n,):
            raise ValueError(
                f"initial_sizes must have shape ({system.n},), got {initial.shape}")
    live = system.alive
    count = int(np.count_nonzero(live))
    if count:
        mean = float(system.sizes[live].mean())
        largest = float(system.sizes[live].max())
    else:
        mean = 0.0
        largest = 0.0
    vanished = float(initial[~live].sum()) / system.n
    return SizeStats(float(system.time), mean, largest, count, vanished)


def rescaled_density(system, bins=50, range_in_means=5.0):
    """Histogram of living sizes divided by their mean.

    Bins cover [0, ``range_in_means``] in units of the mean; sizes beyond
    the range are left out of the normalization.  Raises ``ValueError``
    when no particles are living or nothing lands inside the range.
    """
    bins = int(bins)
    if bins < 1:
        raise ValueError("bins must be a positive integer")
    if not range_in_means > 0:
        raise ValueError("range_in_means must be positive")
    live = system.alive
    if not live.any():
        raise ValueError("cannot rescale sizes: no living particles")
    mean = float(system.sizes[live].mean())
    values = system.sizes[live] / mean
    counts, edges = np.histogram(values, bins=bins, range=(0.0, float(range_in_means)))
    total = counts.sum()
    if total == 0:
        raise ValueError("no living sizes fall inside the histogram range")
    widths = np.diff(edges)
    densities = counts / (total * widths)
    return RescaledHistogram(float(system.time), mean, edges, densities)


def histogram_l1(a, b):
    """L1 distance sum(|d_a - d_b| * width) between histograms on equal bins."""
    if a.bin_edges.shape != b.bin_edges.shape or not np.allclose(
            a.bin_edges, b.bin_edges, rtol=0.0, atol=1e-12):
        raise ValueError("histograms were taken over different bins")
    widths = np.diff(a.bin_edges)
    return float(np.sum(np.abs(a.densities - b.densities) * widths))


# ---------------------------------------------------------------------------
# fits


def fit_growth_exponent(series, t_lo, t_hi, min_living=0):
    """Least-squares slope of log mean_size against log time.

    Uses the samples with ``t_lo <= time <= t_hi`` and at least
    ``min_living`` living particles (late samples of a finite run bend the
    log-log curve once few particles remain, so callers typically cut
    them).  Returns ``(slope, stderr)``.  Raises ``ValueError`` when fewer
    than 10 samples survive the cuts, when they span less than one decade
    in time, or when the mean sizes are constant (nothing to fit).
    """
    pts = [(s.time, s.mean_size) for s in series
           if t_lo <= s.time <= t_hi and s.time > 0 and s.mean_size > 0
           and s.living_count >= min_living]
    if len(pts) < 10:
        raise ValueError(
            f"need at least 10 usable samples in [{t_lo}, {t_hi}], got {len(pts)}")
    t = np.array([p[0] for p in pts])
    m = np.array([p[1] for p in pts])
    if t.max() < 10.0 * t.min():
        raise ValueError("samples must span at least one decade in time")
    log_t = np.log(t)
    log_m = np.log(m)
    if np.ptp(log_m) == 0.0:
        raise ValueError("mean size has zero variance over the window; nothing to fit")
    design = np.vstack([log_t, np.ones_like(log_t)]).T
    coef, _, _, _ = np.linalg.lstsq(design, log_m, rcond=None)
    slope = float(coef[0])
    resid = log_m - design @ coef
    dof = len(pts) - 2
    sigma2 = float(resid @ resid) / dof
    sxx = float(np.sum((log_t - log_t.mean()) ** 2))
    stderr = math.sqrt(sigma2 / sxx)
    return slope, stderr


def coarsening_times(series, initial_sizes, events=None):
    """First time the vanished initial mass reaches half the initial mean.

    The threshold is ``mean(initial_sizes) / 2`` in the same units as
    ``vanished_mass_fraction``.  Given only ``series`` the crossing is
    interpolated linearly between samples (the fraction starts at 0 at
    t=0).  Given ``events`` the crossing is located exactly: the fraction
    jumps at each vanishing, so the answer is the vanishing time that tips
    the running sum.  Returns ``None`` when the run never gets there.
    """
    initial = np.asarray(initial_sizes, dtype=float)
    n = initial.size
    x_bar = float(initial.mean())
    threshold = 0.5 * x_bar
    tie = 1e-12 * x_bar
    if events is not None:
        acc = 0.0
        for e in sorted(events, key=lambda e: e.tau):
            acc += initial[e.index] / n
            if acc + tie >= threshold:
                return float(e.tau)
        return None
    prev_t, prev_v = 0.0, 0.0
    for s in sorted(series, key=lambda s: s.time):
        if s.vanished_mass_fraction + tie >= threshold:
            dv = s.vanished_mass_fraction - prev_v
            if dv <= 0:
                return float(s.time)
            w = (threshold - prev_v) / dv
            return float(prev_t + w * (s.time - prev_t))
        prev_t, prev_v = s.time, s.vanished_mass_fraction
    return None


def t_half_lower_bound(beta, initial_sizes):
    """Provable lower bound on the half-mass time.

    No particle can lose x-mass faster than a lone one, so anything that
    vanished by t started no larger than (2(beta+1) t)^(1/(beta+1)); the
    vanished-mass fraction is at most that size, which pins the half-mass
    crossing to t >= (mean/2)^(beta+1) / (2(beta+1)).
    """
    x_bar = float(np.asarray(initial_sizes, dtype=float).mean())
    return (0.5 * x_bar) ** (beta + 1.0) / (2.0 * (beta + 1.0))


def holder_exponent(times, values, n_lags=10):
    """Fitted modulus-of-continuity exponent of a sampled trajectory.

    Computes omega(h) = max{|x(t2) - x(t1)| : |t2 - t1| <= h} over a
    geometric ladder of lags and returns the least-squares slope of
    log omega against log h.  Smooth trajectories come out near 1,
    power-law plunges t -> (tau - t)^a near a, and sampling noise near 0.
    A flat trajectory has no modulus to fit; returns ``math.inf``.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != x.shape or t.size < 8:
        raise ValueError("need matching 1-d arrays with at least 8 samples")
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise ValueError("times must be strictly increasing")
    span = float(t[-1] - t[0])
    lag_lo = max(2.0 * float(steps.min()), span / 256.0)
    lags = np.geomspace(lag_lo, 0.5 * span, int(n_lags))
    dt = np.abs(t[:, None] - t[None, :])
    dx = np.abs(x[:, None] - x[None, :])
    omegas = np.array([dx[dt <= h].max() for h in lags])
    keep = omegas > 0
    if np.count_nonzero(keep) < 4:
        return math.inf
    log_h = np.log(lags[keep])
    log_w = np.log(omegas[keep])
    design = np.vstack([log_h, np.ones_like(log_h)]).T
    coef, _, _, _ = np.linalg.lstsq(design, log_w, rcond=None)
    return float(coef[0])


# ---------------------------------------------------------------------------
# drivers


def truncation_stability(beta, sizes, n_small, n_large, t_end, window,
                         ctrl=None, samples=8):
    """Sup difference between two free-boundary truncations of centered data.

    ``sizes`` is odd-length data x_{-K..K} centered on index 0; the two
    runs keep indices [-n_small, n_small] and [-n_large, n_large] of it.
    ``window = (j_lo, j_hi)`` (inclusive, centered coordinates) selects
    the particles to compare; it must fit inside the smaller truncation
    and stay at least twice its own length away from the ends of the full
    data.  Returns the sup over the window and ``samples`` equally spaced
    times in (0, t_end] of |x_small_j(t) - x_large_j(t)|.
    """
    data = np.asarray(sizes, dtype=float)
    if data.ndim != 1 or data.size % 2 == 0:
        raise ValueError("sizes must be a 1-d array of odd length (centered data)")
    half = data.size // 2
    n_small = int(n_small)
    n_large = int(n_large)
    if not 0 < n_small <= n_large <= half:
        raise ValueError("need 0 < n_small <= n_large <= (len(sizes)-1)//2")
    j_lo, j_hi = int(window[0]), int(window[1])
    if j_lo > j_hi:
        raise ValueError("window must be (lo, hi) with lo <= hi")
    if j_lo < -n_small or j_hi > n_small:
        raise ValueError("window must lie inside the smaller truncation")
    length = j_hi - j_lo + 1
    if (j_lo + half) < 2 * length or (half - j_hi) < 2 * length:
        raise ValueError(
            f"window lies within {2 * length} indices of the data ends; supply wider data")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    small = ParticleSystem(beta, data[half - n_small:half + n_small + 1], boundary=FREE)
    large = ParticleSystem(beta, data[half - n_large:half + n_large + 1], boundary=FREE)
    rows_small = np.arange(j_lo + n_small, j_hi + n_small + 1)
    rows_large = np.arange(j_lo + n_large, j_hi + n_large + 1)
    worst = 0.0
    for t in np.linspace(t_end / samples, t_end, samples):
        advance_to(small, float(t), ctrl)
        advance_to(large, float(t), ctrl)
        gap = np.max(np.abs(small.sizes[rows_small] - large.sizes[rows_large]))
        worst = max(worst, float(gap))
    return worst


def collect_series(system, t_end, ctrl=None, cadence=1.2, t_first=None,
                   min_living=1, initial_sizes=None):
    """Advance ``system`` to ``t_end``, sampling statistics geometrically.

    Sample times run ``t_first, t_first*cadence, ...`` capped at ``t_end``
    (default ``t_first`` is a thousandth of the horizon).  Returns
    ``(series, events)``: the :class:`SizeStats` at the starting state and
    each sample, plus every vanishing seen.  Stops early once fewer than
    ``min_living`` particles remain.
    """
    if not cadence > 1.0:
        raise ValueError("cadence must exceed 1")
    t0 = system.time
    if not t_end > t0:
        raise ValueError("t_end must exceed the system's current time")
    if t_first is None:
        t_first = t0 + (t_end - t0) / 1000.0
    if not t0 < t_first <= t_end:
        raise ValueError("t_first must lie in (current time, t_end]")
    initial = system.initial_sizes if initial_sizes is None else \
        np.asarray(initial_sizes, dtype=float)
    series = [collect_stats(system, initial)]
    events = []
    t_next = float(t_first)
    while True:
        events.extend(advance_to(system, min(t_next, t_end), ctrl))
        series.append(collect_stats(system, initial))
        if t_next >= t_end or system.living_count < min_living:
            break
        t_next *= cadence
    return series, events


def sample_trajectories(system, times, ctrl=None):
    """Advance through ``times``, recording the full size array at each.

    Returns ``(matrix, events)`` with ``matrix[k, j]`` the size of
    particle j once time ``times[k]`` is reached (0 where vanished).
    """
    ts = np.asarray(times, dtype=float)
    if ts.ndim != 1 or ts.size == 0:
        raise ValueError("times must be a non-empty 1-d array")
    if np.any(np.diff(ts) <= 0) or not ts[0] > system.time:
        raise ValueError("times must be strictly increasing and after the current time")
    matrix = np.empty((ts.size, system.n))
    events = []
    for k, t in enumerate(ts):
        events.extend(advance_to(system, float(t), ctrl))
        matrix[k] = system.sizes
    return matrix, events


# ---------------------------------------------------------------------------
# file output


def write_stats_csv(series, path):
    """Write a statistics series as CSV (time, mean, max, living, vanished_fraction)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mean", "max", "living", "vanished_fraction"])
        for s in series:
            writer.writerow([repr(float(s.time)), repr(float(s.mean_size)),
                             repr(float(s.max_size)), int(s.living_count),
                             repr(float(s.vanished_mass_fraction))])


def write_histogram_csv(histograms, path):
    """Write one histogram or a list of them as CSV (t, bin_lo, bin_hi, density)."""
    if isinstance(histograms, RescaledHistogram):
        histograms = [histograms]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "bin_lo", "bin_hi", "density"])
        for h in histograms:
            for lo, hi, d in zip(h.bin_edges[:-1], h.bin_edges[1:], h.densities):
                writer.writerow([repr(float(h.time)), repr(float(lo)),
                                 repr(float(hi)), repr(float(d))])
