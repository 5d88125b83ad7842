"""Node placement on a 3D torus.

Node ``i`` sits at ``(i % X, (i // X) % Y, i // (X * Y))``.  Compactness of a
node set is the volume of its wraparound-aware bounding box: along each axis
the extent is the shortest circular arc covering every coordinate used.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Optional, Sequence

import numpy as np


def torus_dims(n: int) -> tuple[int, int, int]:
    """Most cube-like ``(X, Y, Z)`` with ``X >= Y >= Z`` and ``X*Y*Z == n``."""
    if n <= 0:
        raise ValueError("node count must be positive")
    best = (n, 1, 1)
    for z in range(1, int(round(n ** (1 / 3))) + 2):
        if n % z:
            continue
        rest = n // z
        for y in range(z, int(rest ** 0.5) + 1):
            if rest % y:
                continue
            x = rest // y
            if x < y:
                continue
            if x - z < best[0] - best[2]:
                best = (x, y, z)
    return best


def circular_extent(coords: Iterable[int], size: int) -> int:
    """Shortest arc on a ring of ``size`` positions covering all ``coords``."""
    pts = sorted(set(coords))
    if not pts:
        return 0
    if len(pts) == 1:
        return 1
    gaps = [pts[i + 1] - pts[i] - 1 for i in range(len(pts) - 1)]
    gaps.append(pts[0] + size - pts[-1] - 1)
    return size - max(gaps)


class Torus:
    def __init__(self, dims: Sequence[int]):
        X, Y, Z = (int(d) for d in dims)
        if min(X, Y, Z) <= 0:
            raise ValueError(f"torus dimensions must be positive, got {dims}")
        self.dims = (X, Y, Z)
        self.size = X * Y * Z
        ids = np.arange(self.size)
        self.coords = np.stack([ids % X, (ids // X) % Y, ids // (X * Y)], axis=1)
        groups: dict[int, list] = defaultdict(list)
        for dx in range(1, X + 1):
            for dy in range(1, Y + 1):
                for dz in range(1, Z + 1):
                    groups[dx * dy * dz].append((dx, dy, dz))
        self._groups = sorted(groups.items())

    def coord(self, node_id: int) -> tuple[int, int, int]:
        return tuple(int(c) for c in self.coords[node_id])

    def bounding_volume(self, node_ids: Iterable[int]) -> int:
        ids = list(node_ids)
        if not ids:
            return 0
        c = self.coords[ids]
        vol = 1
        for axis, size in enumerate(self.dims):
            vol *= circular_extent(c[:, axis].tolist(), size)
        return vol

    def fits_when_empty(self, count: int, compactness_limit: float) -> bool:
        """Whether ``count`` nodes can be placed compactly on an idle torus."""
        limit = compactness_limit * count
        return 0 < count <= self.size and any(count <= vol <= limit for vol, _ in self._groups)

    def _prefix(self, free: np.ndarray) -> np.ndarray:
        X, Y, Z = self.dims
        grid = free.reshape(Z, Y, X).transpose(2, 1, 0).astype(np.int32)
        wrapped = np.pad(grid, ((0, X), (0, Y), (0, Z)), mode="wrap")
        s = np.zeros((2 * X + 1, 2 * Y + 1, 2 * Z + 1), dtype=np.int32)
        s[1:, 1:, 1:] = wrapped.cumsum(0).cumsum(1).cumsum(2)
        return s

    def place_compact(self, free: np.ndarray, count: int, compactness_limit: float) -> Optional[list[int]]:
        """Free subset of ``count`` nodes with minimum bounding volume.

        Ties go to the lexicographically smallest sorted id list.  Returns
        ``None`` when fewer than ``count`` nodes are free or the best volume
        exceeds ``compactness_limit * count``.
        """
        if count <= 0 or int(free.sum()) < count:
            return None
        X, Y, Z = self.dims
        s = self._prefix(free)
        limit = compactness_limit * count
        for vol, extents in self._groups:
            if vol < count:
                continue
            if vol > limit:
                return None
            rows = []
            for dx, dy, dz in extents:
                nx = X if dx < X else 1
                ny = Y if dy < Y else 1
                nz = Z if dz < Z else 1
                counts = (s[dx:dx + nx, dy:dy + ny, dz:dz + nz]
                          - s[0:nx, dy:dy + ny, dz:dz + nz]
                          - s[dx:dx + nx, 0:ny, dz:dz + nz]
                          - s[dx:dx + nx, dy:dy + ny, 0:nz]
                          + s[0:nx, 0:ny, dz:dz + nz]
                          + s[0:nx, dy:dy + ny, 0:nz]
                          + s[dx:dx + nx, 0:ny, 0:nz]
                          - s[0:nx, 0:ny, 0:nz])
                starts = np.argwhere(counts >= count)
                if len(starts) == 0:
                    continue
                xs = (starts[:, 0:1] + np.arange(dx)) % X
                ys = (starts[:, 1:2] + np.arange(dy)) % Y
                zs = (starts[:, 2:3] + np.arange(dz)) % Z
                ids = (xs[:, :, None, None]
                       + X * (ys[:, None, :, None] + Y * zs[:, None, None, :])).reshape(len(starts), -1)
                keyed = np.where(free[ids], ids, self.size)
                keyed.sort(axis=1)
                rows.append(keyed[:, :count])
            if rows:
                cand = np.concatenate(rows)
                best = cand[np.lexsort(cand.T[::-1])[0]]
                return best.tolist()
        return None


def place_transparent(free_ids: Sequence[int], count: int) -> Optional[list[int]]:
    """Lowest-id free nodes; no locality requirement."""
    ids = sorted(free_ids)
    if len(ids) < count:
        return None
    return ids[:count]
