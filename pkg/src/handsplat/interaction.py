"""Interaction detection by neighbour-set change between canonical and posed
point sets, on top of an exact uniform-grid k-nearest-neighbour index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

TIE_BREAK = "ascending-index"


def _sqdist(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # shared by the grid index and the brute-force oracle so ties compare bitwise
    dx = points[..., 0] - q[..., 0]
    dy = points[..., 1] - q[..., 1]
    dz = points[..., 2] - q[..., 2]
    return dx * dx + dy * dy + dz * dz


@dataclass(frozen=True)
class DetectionConfig:
    n_canonical: int = 100
    n_posed: int = 100
    threshold: int = 90

    def validate(self, n_points: int) -> None:
        if not (0 < self.n_canonical <= n_points and 0 < self.n_posed <= n_points):
            raise ValueError(f"neighbour counts must lie in (0, {n_points}]")
        if not 0 <= self.threshold <= self.n_canonical + self.n_posed:
            raise ValueError("threshold outside [0, n_canonical + n_posed]")


@dataclass
class InteractionLabels:
    flags: np.ndarray          # (N,) uint8
    side: np.ndarray | None = None
    cross: np.ndarray | None = None   # (N,) bool, posed neighbours reach the other hand

    def __len__(self):
        return len(self.flags)

    @property
    def counts(self) -> dict:
        out = {"total": int(self.flags.sum())}
        if self.side is not None:
            out["left"] = int(self.flags[self.side == 0].sum())
            out["right"] = int(self.flags[self.side == 1].sum())
        if self.cross is not None:
            out["cross_hand"] = int(self.flags[self.cross].sum())
        return out

    def fractions(self) -> np.ndarray:
        """Fraction of flagged points per hand, (left, right)."""
        if self.side is None:
            f = self.flags.mean() if len(self.flags) else 0.0
            return np.array([f, f])
        return np.array([self.flags[self.side == h].mean() if np.any(self.side == h) else 0.0
                         for h in (0, 1)])


@njit(cache=True)
def _select_k(dist, idx, count, k, out_row):
    # k smallest (distance, index) pairs of the first ``count`` candidates, written in order
    d = dist[:count]
    kth = np.partition(d.copy(), k - 1)[k - 1]
    sel_d = np.empty(k)
    sel_i = np.empty(k, dtype=np.int64)
    m = 0
    for t in range(count):
        if d[t] < kth:
            sel_d[m] = d[t]
            sel_i[m] = idx[t]
            m += 1
    # fill the remaining slots with the lowest-index ties at the k-th distance
    ties = np.empty(count, dtype=np.int64)
    nt = 0
    for t in range(count):
        if d[t] == kth:
            ties[nt] = idx[t]
            nt += 1
    ties = np.sort(ties[:nt])
    for t in range(k - m):
        sel_d[m + t] = kth
        sel_i[m + t] = ties[t]
    # order by (distance, index)
    key = np.argsort(sel_i, kind="mergesort")
    key = key[np.argsort(sel_d[key], kind="mergesort")]
    for t in range(k):
        out_row[t] = sel_i[key[t]]
    return kth


@njit(cache=True, parallel=True)
def _grid_knn(points, cell_start, cell_items, lo, h, dims, queries, k, r0, out):
    for qi in prange(queries.shape[0]):
        qx, qy, qz = queries[qi, 0], queries[qi, 1], queries[qi, 2]
        c = np.empty(3, dtype=np.int64)
        for ax in range(3):
            v = int(np.floor((queries[qi, ax] - lo[ax]) / h))
            c[ax] = min(max(v, 0), dims[ax] - 1)
        r = r0
        lo_c = np.empty(3, dtype=np.int64)
        hi_c = np.empty(3, dtype=np.int64)
        while True:
            covers_all = True
            for ax in range(3):
                lo_c[ax] = max(c[ax] - r, 0)
                hi_c[ax] = min(c[ax] + r, dims[ax] - 1)
                if lo_c[ax] > 0 or hi_c[ax] < dims[ax] - 1:
                    covers_all = False
            count = 0
            for x in range(lo_c[0], hi_c[0] + 1):
                for y in range(lo_c[1], hi_c[1] + 1):
                    base = (x * dims[1] + y) * dims[2]
                    count += cell_start[base + hi_c[2] + 1] - cell_start[base + lo_c[2]]
            if count < k:
                r += max(1, r // 2)
                continue
            dist = np.empty(count)
            idx = np.empty(count, dtype=np.int64)
            n = 0
            for x in range(lo_c[0], hi_c[0] + 1):
                for y in range(lo_c[1], hi_c[1] + 1):
                    base = (x * dims[1] + y) * dims[2]
                    for t in range(cell_start[base + lo_c[2]], cell_start[base + hi_c[2] + 1]):
                        j = cell_items[t]
                        dx = points[j, 0] - qx
                        dy = points[j, 1] - qy
                        dz = points[j, 2] - qz
                        dist[n] = dx * dx + dy * dy + dz * dz
                        idx[n] = j
                        n += 1
            kth = _select_k(dist, idx, count, k, out[qi])
            if covers_all:
                break
            # every point outside the block is at least ``gap`` away
            gap = np.inf
            for ax in range(3):
                if lo_c[ax] > 0:
                    gap = min(gap, queries[qi, ax] - (lo[ax] + lo_c[ax] * h))
                if hi_c[ax] < dims[ax] - 1:
                    gap = min(gap, (lo[ax] + (hi_c[ax] + 1) * h) - queries[qi, ax])
            if gap > 0 and kth < gap * gap * (1.0 - 1e-12):
                break
            r += max(1, r // 2)


class NeighborIndex:
    """Exact k-NN over a fixed point set using a uniform grid.

    Each query scans a cube of cells around its own cell and only accepts
    the result once the k-th distance lies strictly inside the cube;
    otherwise the cube grows.  Ties are broken by ascending point index.
    """

    tie_break = TIE_BREAK

    def __init__(self, points: np.ndarray, cell_size: float | None = None,
                 target_per_cell: int = 8, max_cells: int = 1 << 22):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError("index needs a non-empty (N, 3) point array")
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite coordinates")
        self.points = points
        n = len(points)
        self.lo = points.min(axis=0)
        extent = np.maximum(points.max(axis=0) - self.lo, 1e-12)
        if cell_size is None:
            cell_size = float(np.cbrt(np.prod(np.maximum(extent, 1e-3 * extent.max())) * target_per_cell / n))
        while np.prod(np.floor(extent / cell_size) + 1) > max_cells:
            cell_size *= 1.5
        self.h = cell_size
        self.dims = (np.floor(extent / cell_size).astype(np.int64) + 1)
        c = np.clip(np.floor((points - self.lo) / self.h).astype(np.int64), 0, self.dims - 1)
        key = (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]
        self.cell_items = np.argsort(key, kind="stable")
        counts = np.bincount(key, minlength=int(np.prod(self.dims)))
        self.cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.occupancy = n / np.count_nonzero(counts)

    def query(self, queries: np.ndarray, k: int) -> np.ndarray:
        """k nearest indices for each query row, ordered by (distance, index)."""
        n = len(self.points)
        if k > n or k < 1:
            raise ValueError(f"k={k} outside [1, {n}]")
        queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        out = np.empty((len(queries), k), dtype=np.int64)
        # start with a block expected to hold about 2k points
        side_cells = (2.0 * k / self.occupancy) ** (1.0 / 3.0)
        r0 = max(1, int(np.ceil((side_cells - 1.0) / 2.0)))
        _grid_knn(self.points, self.cell_start, self.cell_items, self.lo, self.h, self.dims,
                  queries, k, r0, out)
        return out


def build_index(points: np.ndarray) -> NeighborIndex:
    return NeighborIndex(points)


def neighbor_set(index: NeighborIndex, q: np.ndarray, k: int) -> set[int]:
    return set(index.query(np.asarray(q, dtype=np.float64)[None], k)[0].tolist())


def brute_force_knn(points: np.ndarray, queries: np.ndarray, k: int, block: int = 256) -> np.ndarray:
    """O(N*M) k-NN with ties broken by ascending index; rows sorted by (distance, index)."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points) or k < 1:
        raise ValueError(f"k={k} outside [1, {len(points)}]")
    out = np.empty((len(queries), k), dtype=np.int64)
    for s in range(0, len(queries), block):
        qs = queries[s:s + block]
        d2 = _sqdist(points[None, :, :], qs[:, None, :])
        if k < len(points):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
            # rows with exactly k entries at or below the k-th distance have no boundary tie
            clean = (d2 <= kth[:, None]).sum(axis=1) == k
            part = np.sort(part, axis=1)
            dp = np.take_along_axis(d2, part, axis=1)
            out[s:s + len(qs)] = np.take_along_axis(part, np.argsort(dp, axis=1, kind="stable"), axis=1)
            for r in np.flatnonzero(~clean):
                row = d2[r]
                below = np.flatnonzero(row < kth[r])
                ties = np.flatnonzero(row == kth[r])[: k - len(below)]
                cand = np.concatenate([below, ties])
                out[s + r] = cand[np.lexsort((cand, row[cand]))]
        else:
            out[s:s + block] = np.argsort(d2, axis=1, kind="stable")
    return out


def _symmetric_difference_sizes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    both = np.sort(np.concatenate([a, b], axis=1), axis=1)
    shared = (both[:, 1:] == both[:, :-1]).sum(axis=1)
    return a.shape[1] + b.shape[1] - 2 * shared


def _labels_from_sets(omega_c, omega_p, cfg, side):
    sym = _symmetric_difference_sizes(omega_c, omega_p)
    flags = (sym > cfg.threshold).astype(np.uint8)
    if side is None:
        return InteractionLabels(flags)
    side = np.asarray(side)
    cross = np.any(side[omega_p] != side[:, None], axis=1)
    return InteractionLabels(flags, side, cross)


def _check_inputs(canonical, posed, cfg):
    canonical = np.asarray(canonical, dtype=np.float64)
    posed = np.asarray(posed, dtype=np.float64)
    if canonical.shape != posed.shape:
        raise ValueError(f"canonical {canonical.shape} and posed {posed.shape} points are misaligned")
    cfg.validate(len(canonical))
    return canonical, posed


def detect_interactions(canonical_pts, posed_pts, cfg: DetectionConfig = DetectionConfig(),
                        side=None) -> InteractionLabels:
    """Flag points whose canonical and posed neighbour sets differ by more than the threshold.

    Neighbour identity is the point index over the concatenated two-hand list;
    each point counts as its own neighbour in both sets.
    """
    canonical, posed = _check_inputs(canonical_pts, posed_pts, cfg)
    omega_c = NeighborIndex(canonical).query(canonical, cfg.n_canonical)
    omega_p = NeighborIndex(posed).query(posed, cfg.n_posed)
    return _labels_from_sets(omega_c, omega_p, cfg, side)


def brute_force_detect(canonical_pts, posed_pts, cfg: DetectionConfig = DetectionConfig(),
                       side=None) -> InteractionLabels:
    canonical, posed = _check_inputs(canonical_pts, posed_pts, cfg)
    omega_c = brute_force_knn(canonical, canonical, cfg.n_canonical)
    omega_p = brute_force_knn(posed, posed, cfg.n_posed)
    return _labels_from_sets(omega_c, omega_p, cfg, side)
