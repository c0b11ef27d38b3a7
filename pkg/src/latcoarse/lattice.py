"""Particle chain state for a singular coarsening lattice.

A system is a row of particles with sizes x_j >= 0, either free-ended or
closed into a ring.  A particle whose size reaches zero is removed for
good and its former neighbours become adjacent; every surviving particle
is driven by the second difference of g(x) = x**(-beta) taken over its
nearest *living* neighbours.  This module owns that bookkeeping: flat
size arrays plus integer neighbour links (indices are stable identifiers
for the whole run, nothing is ever compacted or relabelled), O(1)
removal, and the structural queries used by analysis code and tests.
"""

from __future__ import annotations

import csv

import numpy as np

#: Link value marking a missing neighbour (free end, or no living particle).
NO_NEIGHBOR = -1

FREE = "free"
PERIODIC = "periodic"


def g(x, beta):
    """Coupling function g(s) = s**(-beta) with the convention g(0) = 0.

    Accepts scalars or arrays; vanished particles (size 0) contribute 0,
    which also encodes the "empty space beyond a free end" convention.
    """
    arr = np.asarray(x, dtype=float)
    out = np.zeros_like(arr)
    np.power(arr, -beta, out=out, where=arr > 0)
    if out.ndim == 0:
        return float(out)
    return out


class ParticleSystem:
    """Mutable chain state: sizes, living links, removal bookkeeping.

    Parameters
    ----------
    beta : float
        Positive coupling exponent.
    sizes : array_like
        Initial particle sizes, all >= 0, at least one positive.  Zero
        entries are treated as vanished at time 0 and skipped by links.
    boundary : str
        ``"free"`` (missing neighbours act as empty space) or
        ``"periodic"`` (the chain closes into a ring).
    """

    def __init__(self, beta, sizes, boundary=FREE):
        if not np.isfinite(beta) or beta <= 0:
            raise ValueError(f"beta must be a positive real, got {beta!r}")
        sizes = np.array(sizes, dtype=float)
        if sizes.ndim != 1 or sizes.size == 0:
            raise ValueError("sizes must be a non-empty 1-d array")
        if np.any(sizes < 0) or not np.all(np.isfinite(sizes)):
            raise ValueError("sizes must be finite and non-negative")
        if not np.any(sizes > 0):
            raise ValueError("need at least one particle of positive size")
        boundary = str(boundary).lower()
        if boundary not in (FREE, PERIODIC):
            raise ValueError(f"boundary must be 'free' or 'periodic', got {boundary!r}")

        self.beta = float(beta)
        self.sizes = sizes
        self.initial_sizes = sizes.copy()
        self.n = sizes.size
        self.boundary = boundary
        self.time = 0.0
        self.alive = sizes > 0
        self.living_count = int(np.count_nonzero(self.alive))
        self.vanish_times = np.full(self.n, np.nan)
        self.vanish_times[~self.alive] = 0.0

        self.left_link = np.full(self.n, NO_NEIGHBOR, dtype=np.int64)
        self.right_link = np.full(self.n, NO_NEIGHBOR, dtype=np.int64)
        live = np.flatnonzero(self.alive)
        if boundary == PERIODIC:
            self.left_link[live] = np.roll(live, 1)
            self.right_link[live] = np.roll(live, -1)
        else:
            self.left_link[live[1:]] = live[:-1]
            self.right_link[live[:-1]] = live[1:]

        # Largest vanishing time recorded so far; removals must not go back.
        self._last_tau = 0.0

    # -- queries ---------------------------------------------------------

    def _check_index(self, j):
        if not 0 <= j < self.n:
            raise IndexError(f"particle index {j} out of range [0, {self.n})")

    def living_indices(self):
        """Indices of living particles in chain (= increasing) order."""
        return np.flatnonzero(self.alive)

    def sigma(self, j):
        """Nearest living neighbours ``(left, right)`` of index ``j``.

        ``None`` marks a missing neighbour (free boundary).  On a ring a
        single survivor is its own neighbour on both sides.  Works for
        vanished indices too (by scanning), since the definition "nearest
        living index on each side" does not require j itself to live.
        """
        self._check_index(j)
        if self.alive[j]:
            left, right = int(self.left_link[j]), int(self.right_link[j])
            return (None if left == NO_NEIGHBOR else left,
                    None if right == NO_NEIGHBOR else right)
        live = np.flatnonzero(self.alive)
        if live.size == 0:
            return (None, None)
        if self.boundary == PERIODIC:
            # walk outwards on the ring
            left = next((k % self.n for k in range(j - 1, j - 1 - self.n, -1)
                         if self.alive[k % self.n]), None)
            right = next((k % self.n for k in range(j + 1, j + 1 + self.n)
                          if self.alive[k % self.n]), None)
            return (left, right)
        smaller = live[live < j]
        larger = live[live > j]
        return (int(smaller[-1]) if smaller.size else None,
                int(larger[0]) if larger.size else None)

    def living_laplacian(self, j):
        """Second difference of g over living neighbours; 0 at vanished j."""
        self._check_index(j)
        if not self.alive[j]:
            return 0.0
        left, right = self.sigma(j)
        b = self.beta
        gl = self.sizes[left] ** -b if left is not None else 0.0
        gr = self.sizes[right] ** -b if right is not None else 0.0
        return gl - 2.0 * self.sizes[j] ** -b + gr

    def total_mass(self, m, n):
        """Sum of sizes over the inclusive index range [m, n]."""
        if not 0 <= m <= n < self.n:
            raise ValueError(f"invalid index range ({m}, {n}) for n={self.n}")
        return float(self.sizes[m:n + 1].sum())

    def density_check(self, L, d):
        """Blockwise density test.

        Partitions indices into consecutive blocks of length ``L`` (the
        last block may be shorter) and returns ``(satisfied, traps)``:
        ``satisfied`` iff every block has mean size >= ``d``; ``traps``
        lists, for each block that has one, the first index with size
        >= ``d``.
        """
        if L < 1:
            raise ValueError("block length L must be >= 1")
        if d <= 0:
            raise ValueError("density threshold d must be positive")
        satisfied = True
        traps = []
        for a in range(0, self.n, L):
            block = self.sizes[a:a + L]
            if block.mean() < d:
                satisfied = False
            hits = np.flatnonzero(block >= d)
            if hits.size:
                traps.append(a + int(hits[0]))
        return satisfied, traps

    def chain_order(self):
        """Living indices visited by following right links from the leftmost.

        Used by integrity tests; on an intact chain this equals
        ``living_indices()`` (and closes on itself for a ring).
        """
        live = np.flatnonzero(self.alive)
        if live.size == 0:
            return []
        start = int(live[0])
        out = [start]
        k = int(self.right_link[start])
        while k != NO_NEIGHBOR and k != start and len(out) <= self.n:
            out.append(k)
            k = int(self.right_link[k])
        return out

    # -- mutation --------------------------------------------------------

    def remove_particle(self, j, tau):
        """Remove particle ``j`` at vanishing time ``tau``.

        Splices the neighbour links in O(1), zeroes the size, and records
        ``tau`` permanently.  Vanishing times must be non-decreasing over
        the run; removing an already-vanished particle is an error.
        """
        self._check_index(j)
        if not self.alive[j]:
            raise ValueError(f"particle {j} was already removed")
        if not np.isfinite(tau) or tau < 0:
            raise ValueError(f"invalid vanishing time {tau!r}")
        if tau < self._last_tau:
            raise ValueError(
                f"vanishing time {tau} precedes last recorded event {self._last_tau}")
        left, right = self.left_link[j], self.right_link[j]
        if left != NO_NEIGHBOR and left != j:
            self.right_link[left] = right
        if right != NO_NEIGHBOR and right != j:
            self.left_link[right] = left
        self.sizes[j] = 0.0
        self.alive[j] = False
        self.vanish_times[j] = tau
        self.living_count -= 1
        self._last_tau = float(tau)

    def copy(self):
        """Independent deep copy (for perturbed/unperturbed twin runs)."""
        dup = object.__new__(ParticleSystem)
        dup.beta = self.beta
        dup.sizes = self.sizes.copy()
        dup.initial_sizes = self.initial_sizes.copy()
        dup.n = self.n
        dup.boundary = self.boundary
        dup.time = self.time
        dup.alive = self.alive.copy()
        dup.living_count = self.living_count
        dup.vanish_times = self.vanish_times.copy()
        dup.left_link = self.left_link.copy()
        dup.right_link = self.right_link.copy()
        dup._last_tau = self._last_tau
        return dup

    def __repr__(self):
        return (f"ParticleSystem(beta={self.beta}, n={self.n}, "
                f"boundary={self.boundary!r}, living={self.living_count}, "
                f"t={self.time:.6g})")


def new_system(beta, sizes, boundary=FREE):
    """Build a :class:`ParticleSystem` (functional alias for the constructor)."""
    return ParticleSystem(beta, sizes, boundary)


def write_snapshot_csv(system, path):
    """Write the system state as CSV rows (index, size, vanish_time).

    ``vanish_time`` is blank for living particles.  Floats are written in
    shortest round-trip form.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "size", "vanish_time"])
        for j in range(system.n):
            vt = system.vanish_times[j]
            writer.writerow([j, repr(float(system.sizes[j])),
                             "" if np.isnan(vt) else repr(float(vt))])
