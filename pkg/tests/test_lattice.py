"""Chain bookkeeping: coupling function, links, removal, structural queries."""

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latcoarse import ParticleSystem, new_system, write_snapshot_csv
from latcoarse.lattice import FREE, NO_NEIGHBOR, PERIODIC, g


# ---------------------------------------------------------------------------
# coupling function


def test_g_vanished_convention():
    assert g(0.0, 0.7) == 0.0
    assert g(2.0, 1.0) == pytest.approx(0.5, abs=0, rel=1e-15)
    assert g(4.0, 0.5) == pytest.approx(0.5, abs=0, rel=1e-15)


def test_g_vectorized_mixed_zeros():
    out = g(np.array([0.0, 1.0, 0.25, 0.0]), 0.5)
    np.testing.assert_allclose(out, [0.0, 1.0, 2.0, 0.0], rtol=1e-15)


def test_g_scalar_returns_float():
    assert isinstance(g(3.0, 0.5), float)


# ---------------------------------------------------------------------------
# construction


def test_constructor_rejects_bad_beta():
    for bad in (0.0, -1.0, np.nan, np.inf):
        with pytest.raises(ValueError):
            ParticleSystem(bad, [1.0, 2.0])


def test_constructor_rejects_bad_sizes():
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [])
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [[1.0, 2.0]])
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [1.0, -0.5])
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [1.0, np.nan])
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [0.0, 0.0])  # nobody alive


def test_constructor_rejects_bad_boundary():
    with pytest.raises(ValueError):
        ParticleSystem(1.0, [1.0], boundary="moebius")


def test_free_chain_links():
    s = ParticleSystem(0.5, [1.0, 2.0, 3.0])
    assert s.left_link[0] == NO_NEIGHBOR
    assert s.right_link[2] == NO_NEIGHBOR
    assert s.right_link[0] == 1 and s.left_link[1] == 0
    assert s.right_link[1] == 2 and s.left_link[2] == 1


def test_periodic_ring_closes():
    s = ParticleSystem(0.5, [1.0, 2.0, 3.0], boundary=PERIODIC)
    assert s.left_link[0] == 2 and s.right_link[2] == 0


def test_zero_initial_sizes_start_vanished():
    s = ParticleSystem(1.0, [1.0, 0.0, 2.0])
    assert not s.alive[1]
    assert s.vanish_times[1] == 0.0
    assert np.isnan(s.vanish_times[0])
    assert s.living_count == 2
    # links skip the dead site from the start
    assert s.right_link[0] == 2 and s.left_link[2] == 0


def test_single_survivor_ring_is_self_linked():
    s = ParticleSystem(1.0, [0.0, 3.0, 0.0], boundary=PERIODIC)
    assert s.left_link[1] == 1 and s.right_link[1] == 1


def test_new_system_alias():
    s = new_system(0.5, [1.0, 2.0], boundary=PERIODIC)
    assert isinstance(s, ParticleSystem)
    assert s.boundary == PERIODIC


# ---------------------------------------------------------------------------
# sigma: nearest living neighbours, checked against an independent scan


def scan_sigma(alive, j, boundary):
    """Reference neighbour search independent of the link arrays."""
    n = len(alive)
    if boundary == PERIODIC:
        left = right = None
        for d in range(1, n + 1):
            if left is None and alive[(j - d) % n]:
                left = (j - d) % n
            if right is None and alive[(j + d) % n]:
                right = (j + d) % n
        return left, right
    left = right = None
    for k in range(j - 1, -1, -1):
        if alive[k]:
            left = k
            break
    for k in range(j + 1, n):
        if alive[k]:
            right = k
            break
    return left, right


@settings(max_examples=150, deadline=None)
@given(data=st.data(),
       n=st.integers(min_value=1, max_value=24),
       boundary=st.sampled_from([FREE, PERIODIC]))
def test_sigma_matches_scan(data, n, boundary):
    alive = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    if not any(alive):
        alive[data.draw(st.integers(0, n - 1))] = True
    sizes = [1.0 if a else 0.0 for a in alive]
    s = ParticleSystem(0.7, sizes, boundary=boundary)
    for j in range(n):
        assert s.sigma(j) == scan_sigma(alive, j, boundary)


def test_sigma_out_of_range():
    s = ParticleSystem(1.0, [1.0, 2.0])
    with pytest.raises(IndexError):
        s.sigma(2)
    with pytest.raises(IndexError):
        s.sigma(-1)


# ---------------------------------------------------------------------------
# laplacian over living neighbours


def test_living_laplacian_hand_example():
    # free chain [1, 2, 1], beta = 1: g = (1, 1/2, 1)
    s = ParticleSystem(1.0, [1.0, 2.0, 1.0])
    assert s.living_laplacian(0) == pytest.approx(-1.5, rel=1e-15)
    assert s.living_laplacian(1) == pytest.approx(1.0, rel=1e-15)
    assert s.living_laplacian(2) == pytest.approx(-1.5, rel=1e-15)


def test_living_laplacian_zero_at_vanished():
    s = ParticleSystem(1.0, [1.0, 0.0, 2.0])
    assert s.living_laplacian(1) == 0.0


def test_ring_laplacian_telescopes():
    rng = np.random.default_rng(7)
    sizes = rng.uniform(0.2, 2.0, size=101)
    s = ParticleSystem(0.5, sizes, boundary=PERIODIC)
    total = sum(s.living_laplacian(j) for j in range(s.n))
    # every g-value enters once per neighbour side and -2 for itself
    assert abs(total) <= 1e-12 * s.n


def test_ring_laplacian_telescopes_after_removals():
    rng = np.random.default_rng(8)
    sizes = rng.uniform(0.2, 2.0, size=40)
    s = ParticleSystem(0.5, sizes, boundary=PERIODIC)
    for k, j in enumerate(rng.permutation(40)[:25]):
        s.remove_particle(int(j), float(k))
    total = sum(s.living_laplacian(j) for j in range(s.n))
    assert abs(total) <= 1e-12 * s.n


# ---------------------------------------------------------------------------
# mass and density queries


def test_total_mass_inclusive_range():
    s = ParticleSystem(1.0, [1.0, 2.0, 3.0, 4.0])
    assert s.total_mass(1, 2) == pytest.approx(5.0)
    assert s.total_mass(0, 3) == pytest.approx(10.0)
    assert s.total_mass(2, 2) == pytest.approx(3.0)


def test_total_mass_rejects_bad_range():
    s = ParticleSystem(1.0, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        s.total_mass(2, 1)
    with pytest.raises(ValueError):
        s.total_mass(0, 3)
    with pytest.raises(ValueError):
        s.total_mass(-1, 1)


def test_density_check_blocks_and_traps():
    s = ParticleSystem(1.0, [1.0, 1.0, 0.1, 0.1])
    ok, traps = s.density_check(2, 0.5)
    assert not ok            # second block mean 0.1 < 0.5
    assert traps == [0]      # only the first block holds a particle >= d

    ok, traps = s.density_check(2, 0.05)
    assert ok
    assert traps == [0, 2]


def test_density_check_ragged_tail_block():
    s = ParticleSystem(1.0, [1.0, 1.0, 1.0, 0.2, 0.2])
    ok, traps = s.density_check(3, 0.5)
    assert not ok            # tail block [0.2, 0.2] fails the mean test
    assert traps == [0]


def test_density_check_validation():
    s = ParticleSystem(1.0, [1.0])
    with pytest.raises(ValueError):
        s.density_check(0, 0.5)
    with pytest.raises(ValueError):
        s.density_check(2, 0.0)


# ---------------------------------------------------------------------------
# removal and chain integrity


def test_remove_particle_splices_neighbours():
    s = ParticleSystem(1.0, [1.0, 2.0, 3.0])
    s.remove_particle(1, 0.5)
    assert s.sizes[1] == 0.0
    assert not s.alive[1]
    assert s.vanish_times[1] == 0.5
    assert s.right_link[0] == 2 and s.left_link[2] == 0
    assert s.living_count == 2
    assert s.sigma(1) == (0, 2)


def test_remove_particle_rejects_double_removal():
    s = ParticleSystem(1.0, [1.0, 2.0])
    s.remove_particle(0, 0.1)
    with pytest.raises(ValueError):
        s.remove_particle(0, 0.2)


def test_remove_particle_rejects_decreasing_tau():
    s = ParticleSystem(1.0, [1.0, 2.0, 3.0])
    s.remove_particle(0, 1.0)
    with pytest.raises(ValueError):
        s.remove_particle(1, 0.5)
    s.remove_particle(1, 1.0)  # ties are allowed (simultaneous batch)


def test_remove_particle_rejects_bad_tau():
    s = ParticleSystem(1.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        s.remove_particle(0, -1.0)
    with pytest.raises(ValueError):
        s.remove_particle(0, np.nan)


def assert_chain_consistent(s):
    live = list(s.living_indices())
    assert s.living_count == len(live)
    assert s.chain_order() == live
    for pos, j in enumerate(live):
        left, right = s.sigma(j)
        if s.boundary == PERIODIC:
            assert left == live[pos - 1]
            assert right == live[(pos + 1) % len(live)]
        else:
            assert left == (live[pos - 1] if pos > 0 else None)
            assert right == (live[pos + 1] if pos < len(live) - 1 else None)


@settings(max_examples=60, deadline=None)
@given(data=st.data(),
       n=st.integers(min_value=2, max_value=40),
       boundary=st.sampled_from([FREE, PERIODIC]))
def test_chain_integrity_under_random_removals(data, n, boundary):
    s = ParticleSystem(0.9, np.ones(n), boundary=boundary)
    order = data.draw(st.permutations(range(n)))
    kill = order[: data.draw(st.integers(0, n - 1))]
    for k, j in enumerate(kill):
        s.remove_particle(j, float(k))
    assert_chain_consistent(s)


def test_chain_integrity_large_removal_sequence():
    n = 1000
    rng = np.random.default_rng(3)
    s = ParticleSystem(0.5, rng.uniform(0.5, 1.5, size=n), boundary=PERIODIC)
    order = rng.permutation(n)
    for k, j in enumerate(order[:-1]):
        s.remove_particle(int(j), float(k))
        if k % 100 == 0:
            assert_chain_consistent(s)
    assert_chain_consistent(s)
    last = int(order[-1])
    assert s.sigma(last) == (last, last)  # ring survivor is its own neighbour


def test_chain_order_on_ring_visits_every_living_site_once():
    s = ParticleSystem(1.0, np.ones(6), boundary=PERIODIC)
    s.remove_particle(2, 0.0)
    assert s.chain_order() == [0, 1, 3, 4, 5]


# ---------------------------------------------------------------------------
# copies and snapshots


def test_copy_is_independent():
    s = ParticleSystem(0.5, [1.0, 2.0, 3.0], boundary=PERIODIC)
    dup = s.copy()
    dup.remove_particle(1, 0.25)
    dup.sizes[0] = 9.0
    assert s.alive[1]
    assert s.sizes[0] == 1.0
    assert s.living_count == 3


def test_snapshot_csv_roundtrip(tmp_path):
    s = ParticleSystem(0.5, [0.1, 1.0 / 3.0, 2.0])
    s.remove_particle(0, 0.0123456789012345678)
    path = tmp_path / "snap.csv"
    write_snapshot_csv(s, path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert [r["index"] for r in rows] == ["0", "1", "2"]
    assert float(rows[1]["size"]) == s.sizes[1]  # exact round trip
    assert float(rows[0]["vanish_time"]) == s.vanish_times[0]
    assert rows[1]["vanish_time"] == ""
