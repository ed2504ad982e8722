"""Point cloud primitives: kNN graphs, PCA normals, farthest point sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateNeighborhood,
    LengthMismatch,
    NonFiniteInput,
    SampleCountExceedsPoints,
    TooFewPoints,
    ValidationError,
)

IGNORE = -1
BRUTE_FORCE_LIMIT = 2_048
_NORMAL_TOL = 1e-5
_ROW_CHUNK = 256


@dataclass(frozen=True)
class PointCloud:
    """Points with optional unit normals and ground-truth class ids.

    ``gt_labels`` uses ``IGNORE`` (-1) for unlabeled points.
    """

    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    gt_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must have shape (N, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise NonFiniteInput("positions contain NaN or inf")
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pos.shape:
                raise LengthMismatch(f"normals shape {nrm.shape} != positions shape {pos.shape}")
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= _NORMAL_TOL):
                raise ValidationError("normals must have unit length (tolerance 1e-5)")
            object.__setattr__(self, "normals", nrm)
        if self.gt_labels is not None:
            lab = np.asarray(self.gt_labels, dtype=np.int64)
            if lab.shape != (len(pos),):
                raise LengthMismatch(f"gt_labels length {lab.shape} != point count {len(pos)}")
            if np.any(lab < IGNORE):
                raise ValidationError("gt_labels must be non-negative or IGNORE")
            object.__setattr__(self, "gt_labels", lab)

    def __len__(self):
        return len(self.positions)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return replace(self, normals=normals)


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted graph over point indices.

    ``edges`` is an (E, 2) array with ``i < j`` per row, sorted
    lexicographically; row order is the edge insertion order.
    """

    node_count: int
    edges: np.ndarray
    weights: np.ndarray
    _adjacency: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(weights) != len(edges):
            raise LengthMismatch("one weight per edge required")
        if len(edges):
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValidationError("edges must satisfy i < j (no self-loops)")
            if edges.min() < 0 or edges.max() >= self.node_count:
                raise ValidationError("edge endpoint out of range")
            if len(np.unique(edges, axis=0)) != len(edges):
                raise ValidationError("duplicate edges")
        if np.any((weights < 0) | (weights > 1)) or not np.all(np.isfinite(weights)):
            raise ValidationError("edge weights must lie in [0, 1]")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> np.ndarray:
        if self._adjacency is None:
            adj = [[] for _ in range(self.node_count)]
            for a, b in self.edges.tolist():
                adj[a].append(b)
                adj[b].append(a)
            object.__setattr__(self, "_adjacency", [np.array(sorted(x), dtype=np.int64) for x in adj])
        return self._adjacency[i]

    def with_weights(self, weights: np.ndarray) -> "NeighborGraph":
        return NeighborGraph(self.node_count, self.edges, weights)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValidationError(f"expected (N, 3) coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteInput("coordinates contain NaN or inf")
    return pts


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One fixed formula everywhere so both kNN paths see bit-identical distances.
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _select_k(d2: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """Pick the k smallest by (distance, index) from one row of candidates."""
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def _knn_brute(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    out = np.empty((n, k), dtype=np.int64)
    all_idx = np.arange(n)
    for start in range(0, n, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, n)
        rows = np.arange(start, stop)
        d2 = _sq_dist(pts[rows, None, :], pts[None, :, :])
        d2[rows - start, rows] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        part_d2 = np.take_along_axis(d2, part, axis=1)
        kth = part_d2.max(axis=1)
        # rows whose k-th distance is tied with unselected points need a full look
        tied = (d2 <= kth[:, None]).sum(axis=1) > k
        order = np.lexsort((part, part_d2), axis=-1)
        out[start:stop] = np.take_along_axis(part, order, axis=1)
        for r in np.flatnonzero(tied):
            cand = all_idx[d2[r] <= kth[r]]
            out[start + r] = _select_k(d2[r, cand], cand, k)
    return out


def _knn_tree(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k + 1)
    radius = dist[:, -1] * (1 + 1e-9) + 1e-12
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand = np.asarray(tree.query_ball_point(pts[i], radius[i]), dtype=np.int64)
        cand = cand[cand != i]
        out[i] = _select_k(_sq_dist(pts[cand], pts[i]), cand, k)
    return out


def knn_indices(points, k: int, method: str = "auto") -> np.ndarray:
    """Return an (N, k) array of each point's k nearest other points.

    Rows are ordered by ascending distance; equal distances are broken by
    lower point index. ``method`` is "brute", "tree" or "auto" (brute force
    up to 2048 points). Both methods return identical arrays.
    """
    pts = _as_points(points)
    n = len(pts)
    if k < 1:
        raise ValidationError("k must be positive")
    if n < 2 or n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    if method == "auto":
        method = "brute" if n <= BRUTE_FORCE_LIMIT else "tree"
    if method == "brute":
        return _knn_brute(pts, k)
    if method == "tree":
        return _knn_tree(pts, k)
    raise ValidationError(f"unknown kNN method {method!r}")


def knn_graph(cloud: PointCloud, k: int = 10, method: str = "auto") -> NeighborGraph:
    """Symmetrized kNN graph; every edge starts with weight 0."""
    nbrs = knn_indices(cloud.positions, k, method)
    n = len(nbrs)
    src = np.repeat(np.arange(n), k)
    dst = nbrs.reshape(-1)
    pairs = np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1)
    pairs = np.unique(pairs, axis=0)
    return NeighborGraph(n, pairs, np.zeros(len(pairs)))


def estimate_normals(cloud: PointCloud, k: int = 10, method: str = "auto") -> PointCloud:
    """Fill normals from PCA over each point and its k nearest neighbours.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    signed so that its largest-magnitude component is positive.
    """
    if k < 3:
        raise ValidationError("normal estimation needs k >= 3")
    pts = cloud.positions
    n = len(pts)
    if n < 3:
        raise TooFewPoints("normal estimation needs at least 3 points")
    k_eff = min(k, n - 1)
    nbrs = knn_indices(pts, k_eff, method)
    hood = np.concatenate([np.arange(n)[:, None], nbrs], axis=1)
    local = pts[hood]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    bad = (evals[:, 2] <= 1e-300) | (evals[:, 1] <= 1e-12 * scale)
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise DegenerateNeighborhood(
            f"{int(bad.sum())} neighbourhoods have covariance rank < 2 (first at point {first})"
        )
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    dominant = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(n), dominant])
    normals *= sign[:, None]
    return cloud.with_normals(normals)


def farthest_point_sampling(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling of ``m`` indices starting at ``seed_index``.

    Already chosen points are never picked again, even when every
    remaining point coincides with the selection; distance ties go to the
    lower index.
    """
    pts = _as_points(points)
    n = len(pts)
    if m < 1:
        raise ValidationError("m must be positive")
    if m > n:
        raise SampleCountExceedsPoints(f"cannot sample {m} of {n} points")
    if not 0 <= seed_index < n:
        raise ValidationError(f"seed_index {seed_index} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    min_d2 = _sq_dist(pts, pts[seed_index])
    min_d2[seed_index] = -np.inf
    for s in range(1, m):
        nxt = int(np.argmax(min_d2))
        chosen[s] = nxt
        min_d2 = np.minimum(min_d2, _sq_dist(pts, pts[nxt]))
        min_d2[chosen[: s + 1]] = -np.inf
    return chosen
