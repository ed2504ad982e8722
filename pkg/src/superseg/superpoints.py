"""Normal-based graph-cut over-segmentation into superpoints."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import EmptyGraph, NonUnitNormal, TooFewPoints, ValidationError
from .geometry import NeighborGraph, PointCloud, estimate_normals, knn_graph

_UNIT_TOL = 1e-3


@dataclass(frozen=True)
class CutParams:
    k_thresh: float = 0.05
    min_size: int = 20
    knn_k: int = 10

    def __post_init__(self):
        if not self.k_thresh > 0:
            raise ValidationError("k_thresh must be > 0")
        if self.min_size < 1:
            raise ValidationError("min_size must be >= 1")
        if self.knn_k < 1:
            raise ValidationError("knn_k must be >= 1")


@dataclass(frozen=True)
class SuperpointPartition:
    """Total, disjoint assignment of points to superpoints.

    Ids are dense in ``[0, superpoint_count)`` and numbered in order of the
    lowest point index of each superpoint.
    """

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        if len(a) == 0:
            raise ValidationError("empty partition")
        if a.min() < 0:
            raise ValidationError("superpoint ids must be non-negative")
        present = np.zeros(a.max() + 1, dtype=bool)
        present[a] = True
        if not present.all():
            raise ValidationError("superpoint ids must be dense")
        object.__setattr__(self, "assignment", a)
        order = np.argsort(a, kind="stable")
        bounds = np.cumsum(np.bincount(a))[:-1]
        object.__setattr__(self, "_members", np.split(order, bounds))

    @property
    def superpoint_count(self) -> int:
        return len(self._members)

    @property
    def members(self) -> List[np.ndarray]:
        return self._members

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment)

    def __len__(self):
        return len(self.assignment)

    @classmethod
    def from_labels(cls, labels) -> "SuperpointPartition":
        """Relabel arbitrary component ids into canonical dense ids."""
        labels = np.asarray(labels).reshape(-1)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        return cls(rank[inverse.reshape(-1)])


def normal_edge_weight(n_i, n_j) -> float:
    """1 - |n_i . n_j|: 0 for parallel normals, 1 for orthogonal ones."""
    n_i = np.asarray(n_i, dtype=np.float64)
    n_j = np.asarray(n_j, dtype=np.float64)
    for v in (n_i, n_j):
        if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
            raise NonUnitNormal(f"normal {v} is not unit length")
    return float(np.clip(1.0 - abs(float(n_i @ n_j)), 0.0, 1.0))


def normal_edge_weights(normals: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorised ``normal_edge_weight`` over an (E, 2) edge array."""
    normals = np.asarray(normals, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > _UNIT_TOL):
        raise NonUnitNormal("normals are not unit length")
    dots = np.einsum("ij,ij->i", normals[edges[:, 0]], normals[edges[:, 1]])
    return np.clip(1.0 - np.abs(dots), 0.0, 1.0)


class _DisjointSet:
    """Union-find with path compression and union by size.

    Equal sizes: the lower root id becomes the parent.
    """

    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b, weight):
        size = self.size
        if size[a] < size[b] or (size[a] == size[b] and b < a):
            a, b = b, a
        self.parent[b] = a
        size[a] += size[b]
        self.internal[a] = weight
        return a


def segment(graph: NeighborGraph, params: CutParams) -> SuperpointPartition:
    """Felzenszwalb-Huttenlocher segmentation of a weighted graph.

    Edges are visited by ascending weight (stable in insertion order). Two
    components merge when the edge weight does not exceed the smaller of
    ``Int(C) + k_thresh / |C|`` over both sides. A final pass over the same
    edge order joins any component still smaller than ``min_size`` to its
    neighbour. Components with no edge to the rest of the graph are kept
    as they are, whatever their size.
    """
    if graph.node_count == 0:
        raise EmptyGraph("graph has no nodes")
    order = np.argsort(graph.weights, kind="stable")
    edges = graph.edges[order].tolist()
    weights = graph.weights[order].tolist()
    ds = _DisjointSet(graph.node_count)
    k = float(params.k_thresh)

    for (a, b), w in zip(edges, weights):
        ra, rb = ds.find(a), ds.find(b)
        if ra == rb:
            continue
        thr_a = ds.internal[ra] + k / ds.size[ra]
        thr_b = ds.internal[rb] + k / ds.size[rb]
        if w <= min(thr_a, thr_b):
            ds.union(ra, rb, w)

    if params.min_size > 1:
        for (a, b), w in zip(edges, weights):
            ra, rb = ds.find(a), ds.find(b)
            if ra != rb and (ds.size[ra] < params.min_size or ds.size[rb] < params.min_size):
                ds.union(ra, rb, max(w, ds.internal[ra], ds.internal[rb]))

    roots = np.array([ds.find(i) for i in range(graph.node_count)])
    return SuperpointPartition.from_labels(roots)


def build_superpoints(cloud: PointCloud, params: CutParams = CutParams()) -> SuperpointPartition:
    """Normals (estimated when absent) -> kNN graph -> edge weights -> cut."""
    if len(cloud) < 2:
        raise TooFewPoints("superpoints need at least 2 points")
    if cloud.normals is None:
        cloud = estimate_normals(cloud, max(3, params.knn_k))
    graph = knn_graph(cloud, min(params.knn_k, len(cloud) - 1))
    graph = graph.with_weights(normal_edge_weights(cloud.normals, graph.edges))
    return segment(graph, params)
