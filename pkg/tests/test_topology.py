import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from htcsim.topology import Torus, circular_extent, place_transparent, torus_dims


def brute_volume(torus, ids):
    """Bounding volume by trying every window start on every axis."""
    vol = 1
    for axis, size in enumerate(torus.dims):
        used = {torus.coord(i)[axis] for i in ids}
        best = size
        for start in range(size):
            for length in range(1, size + 1):
                if all((c - start) % size < length for c in used):
                    best = min(best, length)
                    break
        vol *= best
    return vol


def brute_place(torus, free_ids, count, limit):
    best = None
    for combo in itertools.combinations(sorted(free_ids), count):
        key = (brute_volume(torus, combo), list(combo))
        if best is None or key < best:
            best = key
    if best is None or best[0] > limit * count:
        return None
    return best[1]


def test_torus_dims():
    assert torus_dims(8) == (2, 2, 2)
    assert torus_dims(500) == (10, 10, 5)
    assert torus_dims(20) == (5, 2, 2)
    assert torus_dims(7) == (7, 1, 1)
    with pytest.raises(ValueError):
        torus_dims(0)


def test_coordinates():
    t = Torus((3, 2, 2))
    assert t.coord(0) == (0, 0, 0)
    assert t.coord(4) == (1, 1, 0)
    assert t.coord(11) == (2, 1, 1)


def test_circular_extent_wraps():
    assert circular_extent([0, 9], 10) == 2
    assert circular_extent([0, 5], 10) == 6
    assert circular_extent([3], 10) == 1
    assert circular_extent([0, 1, 2], 3) == 3


def test_full_torus_request_four_gets_block():
    t = Torus((2, 2, 2))
    nodes = t.place_compact(np.ones(8, bool), 4, 2.0)
    assert nodes == [0, 1, 2, 3]
    assert t.bounding_volume(nodes) == 4


def test_scattered_corners_no_fit():
    t = Torus((4, 4, 4))
    free = np.zeros(64, bool)
    corners = [0, 2 + 4 * 2, 2 * 16 + 2, 2 * 16 + 2 * 4]  # pairwise far apart
    free[corners] = True
    assert t.place_compact(free, 4, 2.0) is None
    assert brute_place(t, corners, 4, 2.0) is None
    assert t.place_compact(free, 4, 100.0) == sorted(corners)


def test_transparent_lowest_ids():
    assert place_transparent([7, 2, 5, 3], 2) == [2, 3]
    assert place_transparent([1], 2) is None


@pytest.mark.parametrize("dims", [(2, 2, 2), (3, 2, 2), (4, 3, 1), (5, 2, 1)])
def test_place_compact_matches_brute_force(dims):
    t = Torus(dims)
    rng = np.random.default_rng(sum(dims))
    for _ in range(40):
        free = rng.random(t.size) < 0.6
        free_ids = np.flatnonzero(free).tolist()
        for count in range(1, min(len(free_ids), 5) + 1):
            for limit in (1.0, 2.0, 4.0):
                got = t.place_compact(free, count, limit)
                assert got == brute_place(t, free_ids, count, limit), (dims, free_ids, count, limit)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 23), min_size=1, max_size=10))
def test_bounding_volume_matches_brute(ids):
    t = Torus((4, 3, 2))
    assert t.bounding_volume(ids) == brute_volume(t, ids)


@pytest.mark.parametrize("dims", [(2, 2, 2), (3, 2, 1), (3, 3, 1), (5, 1, 1)])
@pytest.mark.parametrize("limit", [1.0, 1.1, 1.5, 2.0])
def test_fits_when_empty_matches_brute_force(dims, limit):
    t = Torus(dims)
    for count in range(1, t.size + 1):
        assert t.fits_when_empty(count, limit) == oracles.compact_fits(range(t.size), count, dims, limit)
    assert not t.fits_when_empty(t.size + 1, limit)
