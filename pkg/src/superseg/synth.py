"""Deterministic synthetic scenes and embeddings.

Scenes are unions of axis-aligned boxes, spheres and rectangular planes
sampled on their surfaces. Class prototypes are random unit vectors kept
apart by a cosine bound, and per-point target embeddings are noisy copies
of the prototype of the point's class.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptySpec, PrototypeSeparationFailure, ValidationError
from .featurefield import FeatureField, Supervision
from .geometry import PointCloud
from .merging import LabelBank

_AXES = {"x": 0, "y": 1, "z": 2}
_INSIDE_EPS = 1e-9


@dataclass
class ObjectSpec:
    """One scene object.

    ``size`` holds the full box extents, ``[radius]`` for a sphere, or the
    two in-plane extents for a plane (in x, y, z order, skipping ``axis``).
    A plane's normal is ``facing`` (+1 or -1) times the unit vector of
    ``axis``; it should point to the side rays come from.
    """

    shape: str
    center: Sequence[float]
    size: Sequence[float]
    class_id: int
    name: str = ""
    axis: str = "z"
    facing: int = 1
    open_bottom: bool = False

    def __post_init__(self):
        if self.shape not in ("box", "sphere", "plane"):
            raise ValidationError(f"unknown shape {self.shape!r}")
        self.center = [float(c) for c in self.center]
        self.size = [float(s) for s in self.size]
        want = {"box": 3, "sphere": 1, "plane": 2}[self.shape]
        if len(self.center) != 3 or len(self.size) != want:
            raise ValidationError(f"{self.shape} needs a 3-D center and {want} size values")
        if min(self.size) <= 0:
            raise ValidationError("object sizes must be positive")
        if self.class_id < 0:
            raise ValidationError("class_id must be non-negative")
        if self.axis not in _AXES or self.facing not in (1, -1):
            raise ValidationError("plane axis must be x/y/z and facing +1/-1")


@dataclass
class SceneSpec:
    objects: List[ObjectSpec]
    room: Sequence[float] = (4.0, 4.0, 2.5)
    points_per_m2: float = 480.0
    sigma_geom: float = 0.002
    seed: int = 0

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        self.room = [float(r) for r in self.room]
        if not self.objects:
            raise EmptySpec("scene has no objects")
        if not self.points_per_m2 > 0:
            raise ValidationError("points_per_m2 must be positive")
        if self.sigma_geom < 0:
            raise ValidationError("sigma_geom must be non-negative")

    @property
    def class_count(self) -> int:
        return max(o.class_id for o in self.objects) + 1

    @property
    def class_names(self) -> List[str]:
        names = [f"class_{c}" for c in range(self.class_count)]
        for o in reversed(self.objects):
            if o.name:
                names[o.class_id] = o.name
        return names

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        unknown = set(data) - {"objects", "room", "points_per_m2", "sigma_geom", "seed"}
        if unknown:
            raise ValidationError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**data)


def default_scene(seed: int = 0, points_per_m2: float = 480.0, sigma_geom: float = 0.002) -> SceneSpec:
    """Floor, two walls, two boxes and a floating ball; six classes, ~20k points."""
    objects = [
        ObjectSpec("plane", (2.0, 2.0, 0.0), (4.0, 4.0), 0, "floor", axis="z", facing=1),
        ObjectSpec("plane", (0.0, 2.0, 1.25), (4.0, 2.5), 1, "left wall", axis="x", facing=1),
        ObjectSpec("plane", (2.0, 4.0, 1.25), (4.0, 2.5), 2, "back wall", axis="y", facing=-1),
        ObjectSpec("box", (1.2, 2.6, 0.45), (0.8, 0.5, 0.9), 3, "cabinet", open_bottom=True),
        ObjectSpec("box", (2.8, 1.3, 0.3), (0.6, 0.6, 0.6), 4, "crate", open_bottom=True),
        ObjectSpec("sphere", (2.6, 2.8, 0.55), (0.35,), 5, "ball"),
    ]
    return SceneSpec(objects, (4.0, 4.0, 2.5), points_per_m2, sigma_geom, seed)


# -- surface sampling -------------------------------------------------------


def _sample_rect(rng, center, axis, extents, sign, density):
    """Uniform samples on an axis-aligned rectangle; returns points and normals."""
    a = _AXES[axis]
    u, v = [i for i in range(3) if i != a]
    count = int(round(extents[0] * extents[1] * density))
    pts = np.empty((count, 3))
    pts[:, a] = center[a]
    pts[:, u] = center[u] + rng.uniform(-0.5, 0.5, count) * extents[0]
    pts[:, v] = center[v] + rng.uniform(-0.5, 0.5, count) * extents[1]
    nrm = np.zeros((count, 3))
    nrm[:, a] = sign
    return pts, nrm


def _sample_object(obj: ObjectSpec, rng, density):
    c = np.asarray(obj.center)
    if obj.shape == "plane":
        return _sample_rect(rng, c, obj.axis, obj.size, obj.facing, density)
    if obj.shape == "sphere":
        r = obj.size[0]
        count = int(round(4 * math.pi * r * r * density))
        dirs = rng.normal(size=(count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return c + r * dirs, dirs
    half = np.asarray(obj.size) / 2
    pts, nrms = [], []
    for axis, a in _AXES.items():
        others = [obj.size[i] for i in range(3) if i != a]
        for sign in (-1, 1):
            if obj.open_bottom and axis == "z" and sign == -1:
                continue
            fc = c.copy()
            fc[a] += sign * half[a]
            p, n = _sample_rect(rng, fc, axis, others, sign, density)
            pts.append(p)
            nrms.append(n)
    return np.concatenate(pts), np.concatenate(nrms)


def _inside(obj: ObjectSpec, pts: np.ndarray) -> np.ndarray:
    c = np.asarray(obj.center)
    if obj.shape == "box":
        return np.all(np.abs(pts - c) <= np.asarray(obj.size) / 2 + _INSIDE_EPS, axis=1)
    if obj.shape == "sphere":
        return np.linalg.norm(pts - c, axis=1) <= obj.size[0] + _INSIDE_EPS
    return np.zeros(len(pts), dtype=bool)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Surface-sample every object with Gaussian jitter and analytic normals.

    Samples falling inside (or on) another solid object are dropped, so a
    box resting on the floor hides the floor beneath it. Each object draws
    from its own random substream of ``spec.seed``.
    """
    if not spec.objects:
        raise EmptySpec("scene has no objects")
    pts, nrms, labels = [], [], []
    for i, obj in enumerate(spec.objects):
        rng = np.random.default_rng([spec.seed, i])
        p, n = _sample_object(obj, rng, spec.points_per_m2)
        keep = np.ones(len(p), dtype=bool)
        for j, other in enumerate(spec.objects):
            if j != i:
                keep &= ~_inside(other, p)
        p, n = p[keep], n[keep]
        p = p + spec.sigma_geom * rng.normal(size=p.shape)
        pts.append(p)
        nrms.append(n)
        labels.append(np.full(len(p), obj.class_id))
    positions = np.concatenate(pts)
    if len(positions) == 0:
        raise EmptySpec("scene produced no points")
    return PointCloud(positions, np.concatenate(nrms), np.concatenate(labels))


# -- embeddings -------------------------------------------------------------


@dataclass
class EmbeddingModel:
    """Stand-in for an image encoder.

    A point's target is the mean prototype over all points within
    ``context_radius`` of it (just its own prototype when the radius is 0),
    plus isotropic Gaussian noise of scale ``sigma_emb``, normalized. A
    positive radius imitates patch features that bleed across object
    borders.
    """

    prototypes: np.ndarray  # (C, D)
    sigma_emb: float = 0.1
    seed: int = 0
    context_radius: float = 0.0

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def make_prototypes(class_count: int, dim: int, seed: int = 0, max_cos: float = 0.5,
                    max_tries: int = 10_000) -> np.ndarray:
    """Random unit vectors with pairwise ``|cos| <= max_cos``.

    Vectors are drawn one at a time and redrawn until they clear every
    earlier one; ``max_tries`` bounds the total number of draws.
    """
    if class_count < 1 or dim < 1:
        raise ValidationError("class_count and dim must be positive")
    rng = np.random.default_rng(seed)
    protos: List[np.ndarray] = []
    tries = 0
    while len(protos) < class_count:
        if tries >= max_tries:
            raise PrototypeSeparationFailure(
                f"could not place {class_count} prototypes in {dim}-D with |cos| <= {max_cos}")
        tries += 1
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ p)) <= max_cos for p in protos):
            protos.append(v)
    return np.stack(protos)


@dataclass
class GridParams:
    resolution: int = 64
    scale_count: int = 3
    init_density: float = 0.2
    init_scale: float = 0.1
    ray_offset: float = 0.2
    ray_margin: float = 0.05
    seed: int = 0


def grid_for_cloud(positions: np.ndarray, params: GridParams) -> Tuple[np.ndarray, float, Tuple[int, int, int]]:
    """Origin, voxel size and dims covering the cloud plus ray padding.

    Origin and voxel size are rounded to float32 so checkpoints round-trip.
    """
    pad = params.ray_offset + params.ray_margin
    lo = positions.min(axis=0) - pad
    hi = positions.max(axis=0) + pad
    extent = hi - lo
    voxel = float(np.float32(extent.max() / (params.resolution - 1)))
    origin = lo.astype(np.float32).astype(np.float64)
    dims = tuple(int(max(2, math.ceil((hi[a] - origin[a]) / voxel) + 1)) for a in range(3))
    return origin, voxel, dims


def target_embeddings(cloud: PointCloud, model: EmbeddingModel) -> np.ndarray:
    rng = np.random.default_rng([model.seed, 1])
    clean = model.prototypes[cloud.gt_labels]
    if model.context_radius > 0:
        from scipy.sparse import csr_matrix
        from scipy.spatial import cKDTree

        tree = cKDTree(cloud.positions)
        pairs = tree.query_pairs(model.context_radius, output_type="ndarray")
        n = len(cloud)
        rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n)])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n)])
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        clean = (adj @ clean) / np.asarray(adj.sum(axis=1))
    t = clean + model.sigma_emb * rng.normal(size=(len(cloud), model.dim))
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def make_label_bank(model: EmbeddingModel, names: Sequence[str]) -> LabelBank:
    """Positives are the prototypes; negatives are their mean and one random vector."""
    rng = np.random.default_rng([model.seed, 2])
    mean = model.prototypes.mean(axis=0)
    rand = rng.normal(size=model.dim)
    negs = np.stack([mean / np.linalg.norm(mean), rand / np.linalg.norm(rand)])
    return LabelBank(tuple(names), model.prototypes, negs)


def paint_embeddings(field: FeatureField, cloud: PointCloud, prototypes: np.ndarray) -> FeatureField:
    """Copy of ``field`` whose every node holds the prototype of the nearest point's class."""
    from scipy.spatial import cKDTree

    out = field.copy()
    nx, ny, nz = field.dims
    grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1)
    nodes = field.origin + field.voxel_size * grid.reshape(-1, 3)
    _, nearest = cKDTree(cloud.positions).query(nodes)
    emb = prototypes[cloud.gt_labels[nearest]].reshape(nx, ny, nz, -1)
    out.embeddings[:] = emb[None]
    return out


def paint_field(cloud: PointCloud, model: EmbeddingModel, grid: GridParams = GridParams(),
                class_names: Optional[Sequence[str]] = None, paint: bool = False
                ) -> Tuple[FeatureField, LabelBank, Supervision]:
    """Initial field, label bank and supervision source for a labelled cloud.

    With ``paint=True`` the returned field already holds noise-free class
    prototypes (nearest-point painting) instead of random embeddings.
    """
    if cloud.gt_labels is None or cloud.normals is None:
        raise ValidationError("painting needs a cloud with labels and oriented normals")
    if class_names is None:
        class_names = [f"class_{c}" for c in range(len(model.prototypes))]
    origin, voxel, dims = grid_for_cloud(cloud.positions, grid)
    field = FeatureField.create(origin, voxel, dims, grid.scale_count, model.dim,
                                grid.init_density, grid.init_scale, grid.seed)
    if paint:
        field = paint_embeddings(field, cloud, model.prototypes)
    supervision = Supervision(cloud.positions, cloud.normals, target_embeddings(cloud, model),
                              grid.ray_offset, grid.ray_margin)
    return field, make_label_bank(model, class_names), supervision
