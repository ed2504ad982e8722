"""Superpoint merging: relevancy, affinity refinement and class assignment."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import (
    DegenerateField,
    EmptySuperpoint,
    TooFewSuperpoints,
    ValidationError,
    ZeroVector,
)
from .featurefield import FeatureField, query_all_scales, query_mean_scales
from .geometry import IGNORE, farthest_point_sampling
from .superpoints import SuperpointPartition

_UNIT_TOL = 1e-5


def _unit(v, what="vector"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroVector(f"{what} has zero length")
    return v / n


@dataclass(frozen=True)
class LabelBank:
    names: Tuple[str, ...]
    positives: np.ndarray  # (C, D)
    negatives: np.ndarray  # (K, D)

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.float64).reshape(len(self.names), -1)
        neg = np.asarray(self.negatives, dtype=np.float64)
        if neg.ndim != 2 or len(neg) < 1:
            raise ValidationError("label bank needs at least one negative embedding")
        if len(self.names) < 1:
            raise ValidationError("label bank needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("class names must be unique")
        if neg.shape[1] != pos.shape[1]:
            raise ValidationError("positive and negative embeddings differ in dimension")
        for what, arr in (("positive", pos), ("negative", neg)):
            if np.any(np.abs(np.linalg.norm(arr, axis=1) - 1.0) > _UNIT_TOL):
                raise ValidationError(f"{what} embeddings must be unit length")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)

    @property
    def class_count(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.positives.shape[1]


@dataclass(frozen=True)
class MergeConfig:
    n_points: int = 16  # N_p
    n_affinity: int = 5  # N_a
    weight: float = 1.0  # w
    use_affinity: bool = True
    normalized_affinity: bool = False
    scale_mode: str = "mean"  # "mean" or "max"

    def __post_init__(self):
        problems = []
        if self.n_points < 1:
            problems.append("n_points must be >= 1")
        if self.n_affinity < 1:
            problems.append("n_affinity must be >= 1")
        if not self.weight > 0:
            problems.append("weight must be > 0")
        if self.scale_mode not in ("mean", "max"):
            problems.append("scale_mode must be 'mean' or 'max'")
        if problems:
            raise ValidationError("; ".join(problems))


@dataclass
class SegmentationResult:
    """Per-superpoint scores of shape (N, C) plus final labels.

    Superpoints whose sampled embeddings were all zero carry NaN scores and
    the IGNORE label.
    """

    relevancy: np.ndarray
    affinity: np.ndarray
    scaled: np.ndarray
    superpoint_labels: np.ndarray
    point_labels: np.ndarray
    superpoint_embeddings: np.ndarray  # (N, C, D): median point embedding per class
    class_names: Tuple[str, ...]


def cosine(a, b) -> np.ndarray:
    return np.sum(_unit(a) * _unit(b), axis=-1)


def pair_score(f_a, f_b) -> float:
    """exp of the cosine similarity."""
    return float(np.exp(cosine(f_a, f_b)))


def point_relevancy(f_p, f_pos, negatives) -> float:
    """Worst case over negatives of the two-way softmax toward ``f_pos``."""
    negatives = np.atleast_2d(negatives)
    if len(negatives) < 1:
        raise ValidationError("need at least one negative")
    pos = pair_score(f_p, f_pos)
    return min(pos / (pos + pair_score(f_p, neg)) for neg in negatives)


def _relevancy_matrix(feats: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """Vectorised ``point_relevancy`` for (M, D) features against every class: (M, C)."""
    f = _unit(feats, "queried embedding")
    pos = np.exp(f @ _unit(positives).T)  # (M, C)
    neg = np.exp(f @ _unit(negatives).T)  # (M, K)
    ratio = pos[:, :, None] / (pos[:, :, None] + neg[:, None, :])
    return ratio.min(axis=2)


def lower_median_index(scores: np.ndarray) -> int:
    """Index of the lower median; equal scores keep sample order."""
    order = np.argsort(scores, kind="stable")
    return int(order[(len(scores) - 1) // 2])


def sample_superpoint(points: np.ndarray, members: np.ndarray, n_points: int) -> np.ndarray:
    """FPS over a superpoint's members, seeded at its lowest global index."""
    if len(members) == 0:
        raise EmptySuperpoint("superpoint has no members")
    members = np.sort(members)
    m = min(n_points, len(members))
    local = farthest_point_sampling(points[members], m, 0)
    return members[local]


def _relevancy_matrix_safe(feats, bank):
    """Like ``_relevancy_matrix`` but rows with zero embeddings become NaN."""
    norms = np.linalg.norm(feats, axis=1)
    out = np.full((len(feats), bank.class_count), np.nan)
    ok = norms > 0
    if ok.any():
        out[ok] = _relevancy_matrix(feats[ok], bank.positives, bank.negatives)
    return out


def _sample_scores(field, points, bank, config):
    """Per-sample relevancy (M, C) and mean-over-scale embeddings (M, D)."""
    feats = query_mean_scales(field, points)
    if config.scale_mode == "mean":
        return _relevancy_matrix_safe(feats, bank), feats
    per_scale = np.stack([_relevancy_matrix_safe(s, bank) for s in query_all_scales(field, points)])
    best = np.where(np.isnan(per_scale), -np.inf, per_scale).max(axis=0)
    return np.where(np.isfinite(best), best, np.nan), feats


def superpoint_relevancy(field: FeatureField, points: np.ndarray, partition: SuperpointPartition,
                         sp: int, f_pos, negatives, config: MergeConfig = MergeConfig()
                         ) -> Tuple[float, np.ndarray]:
    """Lower-median relevancy over FPS samples and the embedding attaining it.

    Raises:
        EmptySuperpoint: if ``sp`` has no members.
        DegenerateField: if every sampled embedding is the zero vector.
    """
    if not 0 <= sp < partition.superpoint_count:
        raise EmptySuperpoint(f"superpoint {sp} does not exist")
    bank = LabelBank(("query",), _unit(f_pos).reshape(1, -1), _unit(np.atleast_2d(negatives)))
    points = np.asarray(points, dtype=np.float64)
    picked = sample_superpoint(points, partition.members[sp], config.n_points)
    scores, feats = _sample_scores(field, points[picked], bank, config)
    valid = np.isfinite(scores[:, 0])
    if not valid.any():
        raise DegenerateField(f"all queried embeddings in superpoint {sp} are zero")
    scores, feats = scores[valid, 0], feats[valid]
    k = lower_median_index(scores)
    return float(scores[k]), feats[k]


def affinity_pair(f_sp, f_pos_j, negative_sps) -> float:
    """Relevancy-style score of ``f_sp`` toward one positive superpoint embedding."""
    return point_relevancy(f_sp, f_pos_j, negative_sps)


def select_pools(relevancy: np.ndarray, n_affinity: int,
                 valid: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Ids of the N_a highest- and N_a lowest-relevancy superpoints (ties: lower id)."""
    ids = np.arange(len(relevancy))
    if valid is not None:
        ids = ids[valid]
    if len(ids) < 2 * n_affinity:
        raise TooFewSuperpoints(f"affinity needs {2 * n_affinity} scored superpoints, have {len(ids)}")
    r = relevancy[ids]
    top = ids[np.lexsort((ids, -r))[:n_affinity]]
    bottom = ids[np.lexsort((ids, r))[:n_affinity]]
    return top, bottom


def affinity(sp: int, all_relevancy, all_embeddings, config: MergeConfig = MergeConfig(),
             valid: Optional[np.ndarray] = None) -> float:
    """Relevancy-weighted mean of affinity pairs against the positive pool.

    The weighted sum is divided by N_a; ``normalized_affinity`` divides by
    the sum of the positive relevancies instead.
    """
    all_relevancy = np.asarray(all_relevancy, dtype=np.float64)
    all_embeddings = np.asarray(all_embeddings, dtype=np.float64)
    top, bottom = select_pools(all_relevancy, config.n_affinity, valid)
    negs = all_embeddings[bottom]
    total = sum(all_relevancy[j] * affinity_pair(all_embeddings[sp], all_embeddings[j], negs)
                for j in top)
    denom = all_relevancy[top].sum() if config.normalized_affinity else config.n_affinity
    return float(total / denom)


def _affinity_all(relevancy, embeddings, config, valid):
    """Vectorised ``affinity`` for every valid superpoint of one class."""
    top, bottom = select_pools(relevancy, config.n_affinity, valid)
    out = np.full(len(relevancy), np.nan)
    f = _unit(embeddings[valid])
    pos = np.exp(f @ _unit(embeddings[top]).T)  # (V, Na)
    neg = np.exp(f @ _unit(embeddings[bottom]).T)  # (V, Na)
    pairs = (pos[:, :, None] / (pos[:, :, None] + neg[:, None, :])).min(axis=2)
    weighted = pairs @ relevancy[top]
    denom = relevancy[top].sum() if config.normalized_affinity else config.n_affinity
    out[valid] = weighted / denom
    return out


def scaled_relevancy(r_sp, a_sp, a_min, w):
    """R * w * (1 + (A - A_min)).

    ``w`` multiplies last so that, per superpoint, rescaling it cannot
    reorder classes (rounding of a product by one factor is monotone).
    """
    return r_sp * (1.0 + (a_sp - a_min)) * w


def _score_class(c, sample_scores, sample_feats, bounds, config):
    sp_count = len(bounds) - 1
    rel = np.full(sp_count, np.nan)
    emb = np.zeros((sp_count, sample_feats.shape[1]))
    valid = np.zeros(sp_count, dtype=bool)
    scores = sample_scores[:, c]
    for sp in range(sp_count):
        rows = np.arange(bounds[sp], bounds[sp + 1])
        rows = rows[np.isfinite(scores[rows])]
        if len(rows) == 0:
            continue
        k = rows[lower_median_index(scores[rows])]
        rel[sp] = scores[k]
        emb[sp] = sample_feats[k]
        valid[sp] = True
    if config.use_affinity and valid.any():
        aff = _affinity_all(rel, emb, config, valid)
        a_min = np.min(aff[valid])
    else:
        # constant affinity: R* reduces to R * w
        aff = np.where(valid, 0.5, np.nan)
        a_min = 0.5
    scaled = scaled_relevancy(rel, aff, a_min, config.weight)
    return rel, aff, scaled, emb


def assign_classes(field: FeatureField, points: np.ndarray, partition: SuperpointPartition,
                   bank: LabelBank, config: MergeConfig = MergeConfig(),
                   threads: int = 1) -> SegmentationResult:
    """Label every superpoint with the class of highest scaled relevancy.

    FPS samples and their queried embeddings are shared across classes;
    classes are scored independently (in parallel when ``threads > 1``)
    and combined in declaration order, so the result does not depend on
    the thread count. With ``use_affinity`` off the affinity is held
    constant and labels reduce to a median-relevancy argmax.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) != len(partition):
        raise ValidationError("points and partition differ in length")
    if field.dim != bank.dim:
        raise ValidationError(f"field dim {field.dim} != label bank dim {bank.dim}")
    n_sp = partition.superpoint_count
    picked = [sample_superpoint(points, m, config.n_points) for m in partition.members]
    bounds = np.concatenate([[0], np.cumsum([len(p) for p in picked])])
    sample_scores, sample_feats = _sample_scores(field, points[np.concatenate(picked)], bank, config)

    def run(c):
        return _score_class(c, sample_scores, sample_feats, bounds, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_class = list(pool.map(run, range(bank.class_count)))
    else:
        per_class = [run(c) for c in range(bank.class_count)]

    rel = np.stack([p[0] for p in per_class], axis=1)
    aff = np.stack([p[1] for p in per_class], axis=1)
    scaled = np.stack([p[2] for p in per_class], axis=1)
    emb = np.stack([p[3] for p in per_class], axis=1)
    valid = np.all(np.isfinite(scaled), axis=1)
    sp_labels = np.full(n_sp, IGNORE, dtype=np.int64)
    sp_labels[valid] = np.argmax(scaled[valid], axis=1)
    return SegmentationResult(rel, aff, scaled, sp_labels, sp_labels[partition.assignment],
                              emb, bank.names)
