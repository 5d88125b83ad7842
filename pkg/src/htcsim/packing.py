"""Packing independent single-core payloads into equal-capacity lanes.

All functions work on plain integer durations and return lane assignments
as lists of item indices, so they can be checked against brute force.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

# At or below this many items, feasibility falls back to exhaustive search
# when first-fit-decreasing cannot place everything.
EXACT_LIMIT = 12


def first_fit(durations: Sequence[int], order: Sequence[int], n_lanes: int, capacity: int) -> list[list[int]]:
    """First fit in the given order; items that fit nowhere are skipped."""
    loads = np.zeros(n_lanes, dtype=np.int64)
    lanes: list[list[int]] = [[] for _ in range(n_lanes)]
    for i in order:
        d = durations[i]
        if d > capacity:
            continue
        ok = loads <= capacity - d
        k = int(np.argmax(ok))
        if not ok[k]:
            continue
        loads[k] += d
        lanes[k].append(i)
    return [lane for lane in lanes if lane]


def ffd(durations: Sequence[int], n_lanes: int, capacity: int, items: Optional[Sequence[int]] = None) -> list[list[int]]:
    """First-fit-decreasing; ties keep the input order."""
    idx = range(len(durations)) if items is None else items
    order = sorted(idx, key=lambda i: -durations[i])
    return first_fit(durations, order, n_lanes, capacity)


def _exact_assign(durations: Sequence[int], items: Sequence[int], n_lanes: int, capacity: int) -> Optional[list[list[int]]]:
    """Exhaustive lane assignment of every item, or None if impossible."""
    order = sorted(items, key=lambda i: -durations[i])
    if any(durations[i] > capacity for i in order):
        return None
    used = min(n_lanes, len(order))
    loads = [0] * used
    lanes: list[list[int]] = [[] for _ in range(used)]

    def place(pos: int) -> bool:
        if pos == len(order):
            return True
        i = order[pos]
        d = durations[i]
        seen = set()
        for k in range(used):
            if loads[k] in seen or loads[k] + d > capacity:
                continue
            seen.add(loads[k])
            loads[k] += d
            lanes[k].append(i)
            if place(pos + 1):
                return True
            lanes[k].pop()
            loads[k] -= d
        return False

    return [lane for lane in lanes if lane] if place(0) else None


def _pack_all(durations: Sequence[int], items: Sequence[int], n_lanes: int, capacity: int) -> Optional[list[list[int]]]:
    lanes = ffd(durations, n_lanes, capacity, items)
    if sum(len(lane) for lane in lanes) == len(items):
        return lanes
    if len(items) <= EXACT_LIMIT:
        return _exact_assign(durations, items, n_lanes, capacity)
    return None


def pack_count_first(durations: Sequence[int], n_lanes: int, capacity: int) -> list[list[int]]:
    """Pack as many items as possible, lanes filled first-fit-decreasing.

    If any ``k`` items fit, the ``k`` shortest do too, so the search is over
    how many of the shortest items to take.  Ties in duration keep input
    order, so callers pass items in priority order.
    """
    if n_lanes <= 0 or capacity <= 0:
        return []
    asc = sorted((i for i in range(len(durations)) if durations[i] <= capacity),
                 key=lambda i: durations[i])
    if not asc:
        return []
    total = np.cumsum([durations[i] for i in asc])
    k_max = int(np.searchsorted(total, n_lanes * capacity, side="right"))
    k_max = min(k_max, len(asc))
    best = _pack_all(durations, asc[:k_max], n_lanes, capacity)
    if best is not None:
        return best
    lo, hi = 0, k_max - 1  # invariant: lo items packable
    best = []
    while lo < hi:
        mid = (lo + hi + 1) // 2
        lanes = _pack_all(durations, asc[:mid], n_lanes, capacity)
        if lanes is not None:
            lo, best = mid, lanes
        else:
            hi = mid - 1
    return best

