"""Spatial queries over point clouds.

All queries are exact and deterministic: distance ties are broken by the
lower point index, and results are independent of thread count because every
query is a pure function of an immutable grid index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud


@dataclass(frozen=True)
class SpatialIndex:
    """Uniform grid over a fixed set of positions.

    Each point lives in exactly one cell: cell(p) = floor(p / cell_size),
    componentwise. Cell lists are kept in ascending index order so that
    first-occurrence argmin scans break ties by lower index for free.
    """

    positions: np.ndarray
    cell_size: float
    cells: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.positions)


def build_index(cloud: PointCloud | np.ndarray, cell_size: float) -> SpatialIndex:
    """Build a uniform-grid index with the given cell size (meters)."""
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
        raise ValueError("positions must be a non-empty (N, 3) array")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions contain non-finite coordinates")
    if not (cell_size > 0):
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    keys = np.floor(positions / cell_size).astype(np.int64)
    cells: dict[tuple[int, int, int], list[int]] = {}
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    frozen = {k: np.asarray(v, dtype=np.int64) for k, v in cells.items()}
    return SpatialIndex(positions=positions, cell_size=float(cell_size), cells=frozen)


def _candidates(index: SpatialIndex, center: np.ndarray, radius: float) -> np.ndarray:
    """Indices of all points in grid cells overlapping the query ball, ascending."""
    cs = index.cell_size
    lo = np.floor((center - radius) / cs).astype(np.int64)
    hi = np.floor((center + radius) / cs).astype(np.int64)
    chunks = []
    for cx in range(lo[0], hi[0] + 1):
        for cy in range(lo[1], hi[1] + 1):
            for cz in range(lo[2], hi[2] + 1):
                hit = index.cells.get((cx, cy, cz))
                if hit is not None:
                    chunks.append(hit)
    if not chunks:
        return np.empty(0, dtype=np.int64)
    out = np.concatenate(chunks)
    out.sort()
    return out


@dataclass(frozen=True)
class OctantNeighborhood:
    """One neighbor per octant, ordered by octant code b2 b1 b0.

    Bit k of the code is 1 iff component k of (neighbor - query) is >= 0
    (x = bit 0, y = bit 1, z = bit 2). Octants with no in-radius point hold
    the query's own index with self_duplicated set.
    """

    neighbor_indices: np.ndarray  # (8,) int64
    self_duplicated: np.ndarray  # (8,) bool


def octant_codes(offsets: np.ndarray) -> np.ndarray:
    """Octant code per offset row; the zero offset maps to octant 7."""
    nonneg = offsets >= 0.0
    return (nonneg[..., 0].astype(np.int64)
            + 2 * nonneg[..., 1].astype(np.int64)
            + 4 * nonneg[..., 2].astype(np.int64))


def octant_search(index: SpatialIndex, cloud: PointCloud, query_index: int,
                  radius: float) -> OctantNeighborhood:
    """Nearest in-radius neighbor of the query point in each of the 8 octants.

    The query point itself is excluded from the search; empty octants
    duplicate the query's own index.
    """
    if not (radius > 0):
        raise ValueError(f"radius must be positive, got {radius}")
    positions = cloud.positions
    if not (0 <= query_index < len(positions)):
        raise ValueError(f"query_index {query_index} out of range")
    q = positions[query_index]
    cand = _candidates(index, q, radius)
    cand = cand[cand != query_index]
    neighbors = np.full(8, query_index, dtype=np.int64)
    duplicated = np.ones(8, dtype=bool)
    if len(cand):
        offsets = positions[cand] - q
        d2 = np.einsum("ij,ij->i", offsets, offsets)
        in_ball = d2 <= radius * radius
        cand, offsets, d2 = cand[in_ball], offsets[in_ball], d2[in_ball]
        codes = octant_codes(offsets)
        for o in range(8):
            sel = np.flatnonzero(codes == o)
            if len(sel):
                best = sel[np.argmin(d2[sel])]  # cand ascending: first min wins ties
                neighbors[o] = cand[best]
                duplicated[o] = False
    return OctantNeighborhood(neighbor_indices=neighbors, self_duplicated=duplicated)


@dataclass(frozen=True)
class NeighborList:
    """Fixed-width neighbor list padded by repeating the first found index."""

    indices: np.ndarray  # (max_k,) int64; all -1 when empty
    found_count: int

    @property
    def empty(self) -> bool:
        return self.found_count == 0


def ball_query(index: SpatialIndex, cloud: PointCloud, center: np.ndarray,
               radius: float, max_k: int) -> NeighborList:
    """Up to max_k in-radius indices, scanned in ascending point index."""
    if not (radius > 0):
        raise ValueError(f"radius must be positive, got {radius}")
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    center = np.asarray(center, dtype=np.float64)
    cand = _candidates(index, center, radius)
    if len(cand):
        offsets = cloud.positions[cand] - center
        d2 = np.einsum("ij,ij->i", offsets, offsets)
        cand = cand[d2 <= radius * radius]
    found = cand[:max_k]
    if len(found) == 0:
        return NeighborList(indices=np.full(max_k, -1, dtype=np.int64), found_count=0)
    out = np.full(max_k, found[0], dtype=np.int64)
    out[: len(found)] = found
    return NeighborList(indices=out, found_count=len(found))


def knn(index: SpatialIndex, cloud: PointCloud, query: np.ndarray, k: int) -> NeighborList:
    """The k nearest indices by Euclidean distance, ties by lower index."""
    positions = cloud.positions
    n = len(positions)
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    offsets = positions - query
    d2 = np.einsum("ij,ij->i", offsets, offsets)
    order = np.lexsort((np.arange(n), d2))[:k]
    return NeighborList(indices=order.astype(np.int64), found_count=k)


def farthest_point_sampling(cloud: PointCloud | np.ndarray, m: int,
                            seed: int | None = None, start: str = "seeded") -> np.ndarray:
    """Greedy max-min centroid selection.

    start="seeded": first centroid drawn uniformly with the given seed.
    start="canonical": first centroid is the lexicographically smallest
    (x, y, z) point, which makes the selection independent of input order
    up to index relabeling.
    """
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(positions)
    if not (1 <= m <= n):
        raise ValueError(f"m={m} must be in [1, {n}]")
    if start == "canonical":
        first = int(np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))[0])
    elif start == "seeded":
        rng = np.random.default_rng(seed)
        first = int(rng.integers(0, n))
    else:
        raise ValueError(f"unknown start mode {start!r}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = first
    diff = positions - positions[first]
    mind2 = np.einsum("ij,ij->i", diff, diff)
    for j in range(1, m):
        nxt = int(np.argmax(mind2))  # first max wins ties -> lower index
        chosen[j] = nxt
        diff = positions - positions[nxt]
        d2 = np.einsum("ij,ij->i", diff, diff)
        np.minimum(mind2, d2, out=mind2)
    return chosen


def interpolation_weights(known_positions: np.ndarray, query: np.ndarray,
                          k: int = 3, epsilon: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-squared-distance weights over the k nearest known points.

    Returns (indices, weights) with weights normalized to sum to 1. If fewer
    than k known points exist, all of them are used.
    """
    known_positions = np.asarray(known_positions, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    m = len(known_positions)
    kk = min(k, m)
    offsets = known_positions - query
    d2 = np.einsum("ij,ij->i", offsets, offsets)
    idx = np.lexsort((np.arange(m), d2))[:kk]
    raw = 1.0 / (d2[idx] + epsilon)
    return idx.astype(np.int64), raw / raw.sum()
