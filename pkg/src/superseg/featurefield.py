"""Multi-scale voxel embedding field with density, rendering and training.

The field stores ``S`` embedding grids of dimension ``D`` and one density
grid on the same lattice. Grid node ``(i, j, k)`` sits at
``origin + voxel_size * (i, j, k)``; values between nodes are trilinearly
interpolated, so the queryable region is the closed box spanned by the
first and last node. Densities are kept as raw parameters and exposed
through ``softplus`` so they can never go negative; the density at an
arbitrary position is the trilinear interpolation of the per-node
softplus values.

All losses come with analytic gradients, returned as sparse
:class:`FieldGrad` accumulators that plain gradient descent applies in
place.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .errors import (
    DegenerateRay,
    EmptyBatch,
    LengthMismatch,
    NonFiniteLoss,
    OutOfBounds,
    ValidationError,
)

log = logging.getLogger(__name__)

_BOUNDS_EPS = 1e-9
_MIN_WEIGHT = 1e-6

# corner offsets in (x, y, z), x varying fastest
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class FeatureField:
    origin: np.ndarray
    voxel_size: float
    density_raw: np.ndarray  # (nx, ny, nz)
    embeddings: np.ndarray  # (S, nx, ny, nz, D)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(self.voxel_size)
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if not self.voxel_size > 0:
            raise ValidationError("voxel_size must be positive")
        if self.density_raw.ndim != 3 or min(self.density_raw.shape) < 2:
            raise ValidationError("density grid must be 3-D with at least 2 nodes per axis")
        if self.embeddings.ndim != 5 or self.embeddings.shape[1:4] != self.density_raw.shape:
            raise ValidationError("embedding grids must have shape (S, nx, ny, nz, D)")
        if self.embeddings.shape[0] < 1 or self.embeddings.shape[4] < 1:
            raise ValidationError("need at least one scale and one embedding dimension")

    @classmethod
    def create(cls, origin, voxel_size, dims, scale_count=3, dim=16,
               init_density=0.2, init_scale=0.1, seed=0) -> "FeatureField":
        """Fresh field: uniform density ``init_density``, small random embeddings."""
        dims = tuple(int(d) for d in dims)
        rng = np.random.default_rng(seed)
        raw = np.full(dims, float(inverse_softplus(init_density)))
        emb = rng.normal(0.0, init_scale, size=(scale_count, *dims, dim))
        return cls(origin, voxel_size, raw, emb)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.density_raw.shape

    @property
    def scale_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[4]

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)

    def density(self) -> np.ndarray:
        return softplus(self.density_raw)

    def copy(self) -> "FeatureField":
        return FeatureField(self.origin.copy(), self.voxel_size,
                            self.density_raw.copy(), self.embeddings.copy())

    def node_position(self, i, j, k) -> np.ndarray:
        return self.origin + self.voxel_size * np.array([i, j, k], dtype=np.float64)

    def contains(self, points) -> np.ndarray:
        u = (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size
        hi = np.array(self.dims) - 1
        return np.all((u >= -_BOUNDS_EPS) & (u <= hi + _BOUNDS_EPS), axis=-1)


# -- interpolation ----------------------------------------------------------


def _corners(field: FeatureField, points: np.ndarray, strict: bool = True):
    """Flat node indices (M, 8), trilinear weights (M, 8) and inside mask (M,)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.array(field.dims)
    u = (pts - field.origin) / field.voxel_size
    inside = np.all((u >= -_BOUNDS_EPS) & (u <= dims - 1 + _BOUNDS_EPS), axis=1)
    if strict and not inside.all():
        bad = pts[~inside][0]
        raise OutOfBounds(f"point {bad.tolist()} lies outside the grid "
                          f"[{field.origin.tolist()}, {field.upper.tolist()}]")
    u = np.clip(u, 0.0, dims - 1)
    base = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    frac = u - base
    ijk = base[:, None, :] + _CORNERS[None, :, :]
    idx = (ijk[..., 0] * dims[1] + ijk[..., 1]) * dims[2] + ijk[..., 2]
    fw = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = fw[..., 0] * fw[..., 1] * fw[..., 2]
    return idx, weights, inside


def query_points(field: FeatureField, points, scale_index: int) -> np.ndarray:
    """Trilinear embedding lookup for an (M, 3) array at one scale."""
    if not 0 <= scale_index < field.scale_count:
        raise ValidationError(f"scale_index {scale_index} not in [0, {field.scale_count})")
    idx, wt, _ = _corners(field, points)
    table = field.embeddings[scale_index].reshape(-1, field.dim)
    return np.einsum("mc,mcd->md", wt, table[idx])


def query(field: FeatureField, x, scale_index: int) -> np.ndarray:
    return query_points(field, np.asarray(x, dtype=np.float64).reshape(1, 3), scale_index)[0]


def query_mean_scales(field: FeatureField, points) -> np.ndarray:
    """(M, D) embeddings averaged over all scales."""
    idx, wt, _ = _corners(field, points)
    tables = field.embeddings.reshape(field.scale_count, -1, field.dim)
    per_scale = np.einsum("mc,smcd->smd", wt, tables[:, idx])
    return per_scale.mean(axis=0)


def query_all_scales(field: FeatureField, points) -> np.ndarray:
    """(S, M, D) embeddings, one slab per scale."""
    idx, wt, _ = _corners(field, points)
    tables = field.embeddings.reshape(field.scale_count, -1, field.dim)
    return np.einsum("mc,smcd->smd", wt, tables[:, idx])


def density_at(field: FeatureField, points, strict: bool = True) -> np.ndarray:
    idx, wt, inside = _corners(field, points, strict)
    sigma = (wt * field.density().reshape(-1)[idx]).sum(axis=1)
    return np.where(inside, sigma, 0.0)


# -- gradients --------------------------------------------------------------


class FieldGrad:
    """Sparse gradient with respect to ``density_raw`` and ``embeddings``."""

    def __init__(self, field: FeatureField):
        self.shape_density = field.density_raw.shape
        self.shape_embeddings = field.embeddings.shape
        self._dens: List[Tuple[np.ndarray, np.ndarray]] = []
        self._emb: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    def add_density(self, idx, values):
        self._dens.append((np.asarray(idx).reshape(-1), np.asarray(values).reshape(-1)))

    def add_embedding(self, scale, idx, values):
        d = self.shape_embeddings[-1]
        idx = np.asarray(idx)
        scale = np.broadcast_to(np.asarray(scale), idx.shape).reshape(-1)
        self._emb.append((scale, idx.reshape(-1), np.asarray(values).reshape(-1, d)))

    def __iadd__(self, other: "FieldGrad"):
        self._dens.extend(other._dens)
        self._emb.extend(other._emb)
        return self

    def scaled(self, factor: float) -> "FieldGrad":
        out = FieldGrad.__new__(FieldGrad)
        out.shape_density = self.shape_density
        out.shape_embeddings = self.shape_embeddings
        out._dens = [(i, v * factor) for i, v in self._dens]
        out._emb = [(s, i, v * factor) for s, i, v in self._emb]
        return out

    def _scatter(self, density: np.ndarray, embeddings: np.ndarray, factor: float):
        flat_d = density.reshape(-1)
        for idx, vals in self._dens:
            flat_d += factor * np.bincount(idx, weights=vals, minlength=flat_d.size)
        s_count = embeddings.shape[0]
        v_count = flat_d.size
        flat_e = embeddings.reshape(s_count * v_count, -1)
        for scale, idx, vals in self._emb:
            np.add.at(flat_e, scale * v_count + idx, factor * vals)

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        dens = np.zeros(self.shape_density)
        emb = np.zeros(self.shape_embeddings)
        self._scatter(dens, emb, 1.0)
        return dens, emb

    def apply(self, field: FeatureField, lr: float):
        """One plain gradient-descent step, in place."""
        self._scatter(field.density_raw, field.embeddings, -lr)


def _density_chain(field: FeatureField, grad: FieldGrad, idx, wt, d_sigma):
    """Push d loss / d sigma(x) through interpolation and softplus."""
    sig = _sigmoid(field.density_raw.reshape(-1)[idx])
    grad.add_density(idx, wt * sig * d_sigma[..., None])


# -- rays and rendering -----------------------------------------------------


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    sample_count: int = 64

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValidationError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ValidationError("need 0 <= t_near < t_far")
        if self.sample_count < 1:
            raise ValidationError("sample_count must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass
class _RenderCache:
    scales: np.ndarray  # (B,)
    idx: np.ndarray  # (B, n, 8)
    wt: np.ndarray  # (B, n, 8) zero for samples outside the grid
    delta: np.ndarray  # (B,)
    tau: np.ndarray  # (B, n)
    trans: np.ndarray  # (B, n)
    weights: np.ndarray  # (B, n)
    feats: np.ndarray  # (B, n, D)
    raw: np.ndarray  # (B, D)
    weight_sum: np.ndarray  # (B,)


def _render_batch(field: FeatureField, origins, dirs, t_near, t_far, n_samples, scales) -> _RenderCache:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    b = len(origins)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (b,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (b,))
    scales = np.broadcast_to(np.asarray(scales, dtype=np.int64), (b,))
    delta = (t_far - t_near) / n_samples
    t = t_near[:, None] + (np.arange(n_samples) + 0.5)[None, :] * delta[:, None]
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    idx, wt, inside = _corners(field, pos.reshape(-1, 3), strict=False)
    wt = wt * inside[:, None]
    idx = idx.reshape(b, n_samples, 8)
    wt = wt.reshape(b, n_samples, 8)
    sigma = (wt * field.density().reshape(-1)[idx]).sum(axis=2)
    tau = sigma * delta[:, None]
    cum = np.cumsum(tau, axis=1) - tau
    trans = np.exp(-cum)
    weights = trans * -np.expm1(-tau)
    tables = field.embeddings.reshape(field.scale_count, -1, field.dim)
    feats = np.einsum("bnc,bncd->bnd", wt, tables[scales[:, None, None], idx])
    raw = np.einsum("bn,bnd->bd", weights, feats)
    return _RenderCache(scales, idx, wt, delta, tau, trans, weights, feats, raw, weights.sum(axis=1))


def _render_backward(field: FeatureField, cache: _RenderCache, g_raw: np.ndarray, grad: FieldGrad):
    """Accumulate d loss / d params given d loss / d raw rendered vector."""
    # embeddings: raw = sum_i w_i sum_c wt_ic E[c]
    contrib = cache.weights[..., None, None] * cache.wt[..., None] * g_raw[:, None, None, :]
    grad.add_embedding(cache.scales[:, None, None], cache.idx, contrib)
    # densities: d raw.g / d tau_k = T_{k+1} (F_k.g) - sum_{i>k} w_i (F_i.g)
    fg = np.einsum("bnd,bd->bn", cache.feats, g_raw)
    h = cache.weights * fg
    after = np.cumsum(h[:, ::-1], axis=1)[:, ::-1] - h
    trans_next = cache.trans * np.exp(-cache.tau)
    d_sigma = (trans_next * fg - after) * cache.delta[:, None]
    _density_chain(field, grad, cache.idx, cache.wt, d_sigma)


def render_rays(field: FeatureField, origins, dirs, t_near, t_far, n_samples: int, scales):
    """Batch rendering. Returns unnormalized (B, D) vectors and weight sums."""
    cache = _render_batch(field, origins, dirs, t_near, t_far, n_samples, scales)
    return cache.raw, cache.weight_sum


def render_ray(field: FeatureField, ray: Ray, scale_index: int) -> Tuple[np.ndarray, float]:
    """Midpoint-quadrature volume rendering of the embedding along one ray.

    Returns the rendered embedding normalized to unit length and the total
    accumulated weight, which always lies in [0, 1].

    Raises:
        DegenerateRay: if the accumulated weight is below 1e-6 or the
            weighted embedding sum vanishes, so no direction exists.
    """
    if not 0 <= scale_index < field.scale_count:
        raise ValidationError(f"scale_index {scale_index} not in [0, {field.scale_count})")
    raw, ws = render_rays(field, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far,
                          ray.sample_count, scale_index)
    weight_sum = float(ws[0])
    norm = float(np.linalg.norm(raw[0]))
    if weight_sum < _MIN_WEIGHT or norm == 0.0:
        raise DegenerateRay(f"accumulated weight {weight_sum:.3g} too small to normalize")
    return raw[0] / norm, weight_sum


# -- losses -----------------------------------------------------------------


def loss_lang(rendered, target, lambda_lang: float = 1.0) -> float:
    """Negative weighted dot product; summed over rows for 2-D input."""
    return float(-lambda_lang * np.sum(np.asarray(rendered) * np.asarray(target)))


def loss_consistency_pair(f_i, f_j, delta: float) -> float:
    r = float(np.linalg.norm(np.asarray(f_i, dtype=np.float64) - np.asarray(f_j, dtype=np.float64)))
    return _huber(r, delta)


def _huber(r, delta):
    r = np.asarray(r, dtype=np.float64)
    out = np.where(r <= delta, 0.5 * r * r, delta * r - 0.5 * delta * delta)
    return float(out) if out.ndim == 0 else out


def lang_loss_and_grad(field, origins, dirs, t_near, t_far, n_samples, scales, targets,
                       lambda_lang=1.0):
    """Language alignment loss over a ray batch.

    Rays whose accumulated weight is below 1e-6 cannot be normalized and
    are skipped. Returns ``(loss, grad, skipped_count)``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    cache = _render_batch(field, origins, dirs, t_near, t_far, n_samples, scales)
    norms = np.linalg.norm(cache.raw, axis=1)
    ok = (cache.weight_sum >= _MIN_WEIGHT) & (norms > 0)
    safe = np.where(ok, norms, 1.0)
    rendered = cache.raw / safe[:, None]
    dots = np.einsum("bd,bd->b", rendered, targets)
    loss = -lambda_lang * float(np.sum(dots[ok]))
    g = -lambda_lang * (targets - dots[:, None] * rendered) / safe[:, None]
    g[~ok] = 0.0
    grad = FieldGrad(field)
    _render_backward(field, cache, g, grad)
    return loss, grad, int((~ok).sum())


def consistency_loss_and_grad(field, points_a, points_b, delta):
    """Huber consistency averaged over pairs and scales."""
    pa = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(pa) != len(pb):
        raise LengthMismatch("pair endpoint arrays differ in length")
    if len(pa) == 0:
        raise EmptyBatch("no pairs to average")
    if not delta > 0:
        raise ValidationError("delta must be positive")
    n, s_count, d = len(pa), field.scale_count, field.dim
    ia, wa, _ = _corners(field, pa)
    ib, wb, _ = _corners(field, pb)
    tables = field.embeddings.reshape(s_count, -1, d)
    fa = np.einsum("mc,smcd->smd", wa, tables[:, ia])
    fb = np.einsum("mc,smcd->smd", wb, tables[:, ib])
    diff = fa - fb
    r = np.linalg.norm(diff, axis=2)
    loss = float(_huber(r, delta).sum() / (n * s_count))
    scale_r = np.where(r <= delta, 1.0, delta / np.where(r > 0, r, 1.0))
    g = diff * scale_r[..., None] / (n * s_count)  # (S, N, D)
    grad = FieldGrad(field)
    scales = np.arange(s_count)[:, None, None]
    grad.add_embedding(scales, np.broadcast_to(ia, (s_count, n, 8)),
                       wa[None, :, :, None] * g[:, :, None, :])
    grad.add_embedding(scales, np.broadcast_to(ib, (s_count, n, 8)),
                       -wb[None, :, :, None] * g[:, :, None, :])
    return loss, grad


def density_loss_and_grad(field, surface_points):
    pts = np.asarray(surface_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyBatch("no surface points")
    idx, wt, _ = _corners(field, pts)
    sigma = (wt * field.density().reshape(-1)[idx]).sum(axis=1)
    resid = 1.0 - sigma
    loss = float(np.mean(resid * resid))
    grad = FieldGrad(field)
    _density_chain(field, grad, idx, wt, -2.0 * resid / len(pts))
    return loss, grad


def loss_consistency_batch(field, points_a, points_b, delta) -> float:
    return consistency_loss_and_grad(field, points_a, points_b, delta)[0]


def loss_density(field, surface_points) -> float:
    return density_loss_and_grad(field, surface_points)[0]


# -- supervision ------------------------------------------------------------


@dataclass
class Supervision:
    """Per-point supervision source for training.

    ``normals`` must point toward the observer side of each surface: rays
    start ``ray_offset`` metres out along the normal and march back through
    the point, ending ``ray_margin`` beyond it.
    """

    positions: np.ndarray
    normals: np.ndarray
    targets: np.ndarray
    ray_offset: float = 0.2
    ray_margin: float = 0.05

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n = len(self.positions)
        if len(self.normals) != n or len(self.targets) != n:
            raise LengthMismatch("positions, normals and targets must have equal length")
        norms = np.linalg.norm(self.targets, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValidationError("target embeddings must be unit length")


@dataclass
class SupervisionBatch:
    ray_origins: np.ndarray
    ray_dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    samples_per_ray: int
    ray_scales: np.ndarray
    targets: np.ndarray
    surface_points: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray


@dataclass
class TrainConfig:
    lambda_lang: float = 1.0
    lambda_c: float = 2_000.0
    lambda_d: float = 1e5
    delta: float = 0.25
    lr: float = 0.05
    iterations: int = 300
    stage1: Optional[int] = None
    stage2: Optional[int] = None
    seed: int = 0
    rays_per_batch: int = 512
    samples_per_ray: int = 16
    density_points_per_batch: int = 2048
    pairs_per_batch: int = 1024

    def __post_init__(self):
        if self.stage1 is None:
            self.stage1 = int(round(0.1 * self.iterations))
        if self.stage2 is None:
            self.stage2 = int(round(0.3 * self.iterations))
        problems = []
        for name in ("lambda_lang", "lambda_c", "lambda_d"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not self.delta > 0:
            problems.append("delta must be > 0")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if not 0 <= self.stage1 <= self.stage2 <= self.iterations:
            problems.append("need 0 <= stage1 <= stage2 <= iterations")
        for name in ("rays_per_batch", "samples_per_ray", "density_points_per_batch",
                     "pairs_per_batch"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ValidationError("; ".join(problems))

    def stage(self, iteration: int) -> int:
        if iteration < self.stage1:
            return 1
        if iteration < self.stage2:
            return 2
        return 3


def iter_batches(supervision: Supervision, partition, config: TrainConfig,
                 scale_count: int) -> Iterator[SupervisionBatch]:
    """Infinite deterministic batch stream seeded by ``config.seed``.

    Pairs are drawn by picking a superpoint with probability proportional
    to its size and then two distinct members uniformly (a singleton
    superpoint yields a zero-length pair).
    """
    rng = np.random.default_rng(config.seed)
    pos, nrm, tgt = supervision.positions, supervision.normals, supervision.targets
    n = len(pos)
    assignment = partition.assignment
    if len(assignment) != n:
        raise LengthMismatch("partition and supervision cover different point counts")
    order = np.argsort(assignment, kind="stable")
    sizes = np.bincount(assignment)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rank_in_sp = np.empty(n, dtype=np.int64)
    rank_in_sp[order] = np.arange(n) - starts[assignment[order]]
    t_far = supervision.ray_offset + supervision.ray_margin
    while True:
        rays = rng.integers(0, n, size=config.rays_per_batch)
        scales = rng.integers(0, scale_count, size=config.rays_per_batch)
        dens = rng.integers(0, n, size=config.density_points_per_batch)
        first = rng.integers(0, n, size=config.pairs_per_batch)
        sp = assignment[first]
        span = np.maximum(sizes[sp] - 1, 1)
        other = rng.integers(0, span)
        other = other + (other >= rank_in_sp[first])
        other = np.where(sizes[sp] > 1, other, 0)
        second = order[starts[sp] + other]
        yield SupervisionBatch(
            ray_origins=pos[rays] + supervision.ray_offset * nrm[rays],
            ray_dirs=-nrm[rays],
            t_near=np.zeros(config.rays_per_batch),
            t_far=np.full(config.rays_per_batch, t_far),
            samples_per_ray=config.samples_per_ray,
            ray_scales=scales,
            targets=tgt[rays],
            surface_points=pos[dens],
            pair_a=pos[first],
            pair_b=pos[second],
        )


def total_loss_and_grad(field: FeatureField, batch: SupervisionBatch, config: TrainConfig,
                        stage: int) -> Tuple[float, FieldGrad, Dict[str, float]]:
    """Staged objective: density always, + language from stage 2, + consistency in stage 3."""
    terms: Dict[str, float] = {}
    d_loss, grad = density_loss_and_grad(field, batch.surface_points)
    terms["density"] = d_loss
    total = config.lambda_d * d_loss
    grad = grad.scaled(config.lambda_d)
    if stage >= 2:
        l_loss, l_grad, skipped = lang_loss_and_grad(
            field, batch.ray_origins, batch.ray_dirs, batch.t_near, batch.t_far,
            batch.samples_per_ray, batch.ray_scales, batch.targets, config.lambda_lang)
        terms["lang"] = l_loss
        terms["skipped_rays"] = skipped
        total += l_loss
        grad += l_grad
    if stage >= 3:
        c_loss, c_grad = consistency_loss_and_grad(field, batch.pair_a, batch.pair_b, config.delta)
        terms["consistency"] = c_loss
        total += config.lambda_c * c_loss
        grad += c_grad.scaled(config.lambda_c)
    terms["total"] = total
    return total, grad, terms


@dataclass
class LossRecord:
    iteration: int
    stage: int
    total: float
    density: float
    lang: Optional[float] = None
    consistency: Optional[float] = None
    skipped_rays: int = 0


def train(field: FeatureField, supervision: Supervision, partition, config: TrainConfig,
          batches: Optional[Iterable[SupervisionBatch]] = None
          ) -> Tuple[FeatureField, List[LossRecord]]:
    """Progressive gradient descent on a copy of ``field``.

    Stage 1 (``it < stage1``) fits density only, stage 2 adds the language
    loss and stage 3 (``it >= stage2``) adds the consistency loss. A custom
    ``batches`` iterable replaces the default stream from ``iter_batches``.

    Raises:
        NonFiniteLoss: as soon as any loss term is NaN or infinite.
    """
    trained = field.copy()
    history: List[LossRecord] = []
    if config.iterations == 0:
        return trained, history
    if batches is None:
        batches = iter_batches(supervision, partition, config, field.scale_count)
    stream = iter(batches)
    for it in range(config.iterations):
        stage = config.stage(it)
        batch = next(stream)
        total, grad, terms = total_loss_and_grad(trained, batch, config, stage)
        for name in ("density", "lang", "consistency", "total"):
            if name in terms and not math.isfinite(terms[name]):
                raise NonFiniteLoss(it, name)
        grad.apply(trained, config.lr)
        history.append(LossRecord(it, stage, total, terms["density"], terms.get("lang"),
                                  terms.get("consistency"), int(terms.get("skipped_rays", 0))))
        if it % 100 == 0:
            log.debug("iter %d stage %d total %.5f", it, stage, total)
    return trained, history
