"""Readers and writers for point clouds, embeddings, label banks, partitions
and field checkpoints.

Binary formats are little-endian throughout:

* ``EMB1`` embedding matrix: magic, u32 rows, u32 dim, f32 payload row-major.
* ``SPP1`` partition column: magic, u32 point count, u32 superpoint id per point.
* ``SPF1`` field checkpoint: magic, u32 version, u32 dims[3], f32 voxel_size,
  f32 origin[3], u32 S, u32 D, then the f32 raw density grid and the S
  embedding grids. Grids are stored with x varying fastest, then y, then z;
  within an embedding voxel the D components are contiguous.

Values round-trip bit-exactly whenever they are representable in float32.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .errors import (
    BadMagic,
    MalformedHeader,
    MissingProperty,
    PayloadLengthMismatch,
    ResolutionError,
    TruncatedFile,
    UnsupportedEncoding,
    ValidationError,
)
from .featurefield import FeatureField, LossRecord
from .geometry import IGNORE, PointCloud
from .merging import LabelBank, SegmentationResult
from .superpoints import SuperpointPartition

_LABEL_NONE = np.uint32(0xFFFFFFFF)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


# -- PLY --------------------------------------------------------------------


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props: List[Tuple[str, str, Optional[str]]] = []  # (name, type, list count type)


def _parse_ply_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise MalformedHeader("missing 'ply' magic line")
    fmt = None
    elements: List[_Element] = []
    while True:
        line = fh.readline()
        if not line:
            raise MalformedHeader("header ended before end_header")
        try:
            words = line.decode("ascii").split()
        except UnicodeDecodeError:
            raise MalformedHeader("non-ASCII bytes in header")
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            if len(words) != 3:
                raise MalformedHeader(f"bad format line: {line!r}")
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise MalformedHeader(f"bad element line: {line!r}")
            elements.append(_Element(words[1], int(words[2])))
        elif words[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if len(words) < 3:
                raise MalformedHeader(f"bad property line: {line!r}")
            if words[1] == "list":
                if len(words) != 5 or words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise MalformedHeader(f"bad list property: {line!r}")
                elements[-1].props.append((words[4], _PLY_TYPES[words[3]], _PLY_TYPES[words[2]]))
            else:
                if len(words) != 3 or words[1] not in _PLY_TYPES:
                    raise MalformedHeader(f"bad property line: {line!r}")
                elements[-1].props.append((words[2], _PLY_TYPES[words[1]], None))
        else:
            raise MalformedHeader(f"unexpected header line: {line!r}")
    if fmt is None:
        raise MalformedHeader("no format line")
    if fmt == "binary_big_endian":
        raise UnsupportedEncoding("big-endian PLY is not supported")
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedHeader(f"unknown PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(fh, el: _Element):
    if all(lt is None for _, _, lt in el.props):
        dtype = np.dtype([(n, "<" + t) for n, t, _ in el.props])
        buf = fh.read(dtype.itemsize * el.count)
        if len(buf) != dtype.itemsize * el.count:
            raise MalformedHeader(f"element '{el.name}' declares {el.count} rows but the file is short")
        return np.frombuffer(buf, dtype=dtype)
    # list properties: walk row by row (only used to skip non-vertex elements)
    for _ in range(el.count):
        for _, t, lt in el.props:
            if lt is None:
                size = np.dtype(t).itemsize
                if len(fh.read(size)) != size:
                    raise MalformedHeader(f"element '{el.name}' is truncated")
            else:
                raw = fh.read(np.dtype(lt).itemsize)
                if len(raw) != np.dtype(lt).itemsize:
                    raise MalformedHeader(f"element '{el.name}' is truncated")
                n = int(np.frombuffer(raw, "<" + lt)[0])
                size = n * np.dtype(t).itemsize
                if len(fh.read(size)) != size:
                    raise MalformedHeader(f"element '{el.name}' is truncated")
    return None


def _read_ascii_element(lines, el: _Element):
    rows = []
    for _ in range(el.count):
        line = next(lines, None)
        if line is None:
            raise MalformedHeader(f"element '{el.name}' declares {el.count} rows but the file is short")
        rows.append(line.split())
    if any(lt is not None for _, _, lt in el.props):
        return None
    if any(len(r) != len(el.props) for r in rows):
        raise MalformedHeader(f"element '{el.name}' has rows with the wrong number of values")
    dtype = np.dtype([(n, "<" + t) for n, t, _ in el.props])
    out = np.empty(el.count, dtype=dtype)
    for j, (name, t, _) in enumerate(el.props):
        col = [r[j] for r in rows]
        try:
            out[name] = np.array(col, dtype=np.float64 if t.startswith("f") else np.int64).astype(t)
        except ValueError:
            raise MalformedHeader(f"non-numeric value in property '{name}'")
    return out


def read_ply_table(path) -> np.ndarray:
    """Structured array of all scalar vertex properties."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        if fmt == "ascii":
            lines = (ln.decode("ascii") for ln in fh if ln.strip())
        vertex = None
        for el in elements:
            data = _read_binary_element(fh, el) if fmt != "ascii" else _read_ascii_element(lines, el)
            if el.name == "vertex":
                vertex = data
                break
    if vertex is None:
        raise MissingProperty("PLY file has no vertex element with scalar properties")
    return vertex


def read_ply(path) -> PointCloud:
    """Read x, y, z and, when present, nx, ny, nz and a ``label`` column."""
    table = read_ply_table(path)
    names = table.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise MissingProperty(f"vertex property '{axis}' is required")
    pos = np.stack([table[a].astype(np.float64) for a in "xyz"], axis=1)
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.stack([table[n].astype(np.float64) for n in ("nx", "ny", "nz")], axis=1)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.all(lengths > 0):
            normals = normals / lengths
        else:
            normals = None
    labels = None
    if "label" in names:
        raw = table["label"]
        labels = raw.astype(np.int64)
        if raw.dtype.kind == "u":
            labels[raw == np.iinfo(raw.dtype).max] = IGNORE
        labels[labels < 0] = IGNORE
    return PointCloud(pos, normals, labels)


def read_ply_column(path, name: str) -> np.ndarray:
    table = read_ply_table(path)
    if name not in table.dtype.names:
        raise MissingProperty(f"vertex property '{name}' not found")
    return np.asarray(table[name])


def _labels_u32(labels):
    labels = np.asarray(labels, dtype=np.int64)
    return np.where(labels == IGNORE, _LABEL_NONE, labels).astype("<u4")


def write_ply(path, cloud: PointCloud, labels=None, superpoints=None, colors=None,
              binary: bool = True):
    """Write a vertex-only PLY.

    ``labels`` (default: the cloud's ``gt_labels``) are written as u32
    ``label`` with IGNORE stored as 0xFFFFFFFF; ``superpoints`` as u32
    ``superpoint``; ``colors`` as uchar ``red green blue``.
    """
    if labels is None:
        labels = cloud.gt_labels
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if labels is not None:
        fields.append(("label", "<u4"))
    if superpoints is not None:
        fields.append(("superpoint", "<u4"))
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    table = np.zeros(n, dtype=np.dtype(fields))
    for j, a in enumerate("xyz"):
        table[a] = cloud.positions[:, j]
    if cloud.normals is not None:
        for j, a in enumerate(("nx", "ny", "nz")):
            table[a] = cloud.normals[:, j]
    if labels is not None:
        table["label"] = _labels_u32(labels)
    if superpoints is not None:
        table["superpoint"] = np.asarray(superpoints, dtype="<u4")
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        table["red"], table["green"], table["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]

    ply_names = {"<f4": "float", "<u4": "uint", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {ply_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(table.tobytes())
        else:
            for row in table:
                vals = [repr(float(row[name])) if t == "<f4" else str(int(row[name]))
                        for name, t in fields]
                fh.write((" ".join(vals) + "\n").encode("ascii"))


def class_colors(class_count: int) -> np.ndarray:
    """Fixed, well-separated RGB colours per class id (golden-ratio hues)."""
    import colorsys

    out = np.zeros((class_count, 3), dtype=np.uint8)
    for c in range(class_count):
        r, g, b = colorsys.hsv_to_rgb((c * 0.618033988749895) % 1.0, 0.75, 0.95)
        out[c] = (int(r * 255), int(g * 255), int(b * 255))
    return out


def label_colors(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    table = np.vstack([class_colors(class_count), [[0, 0, 0]]])
    return table[np.where(labels == IGNORE, class_count, labels)]


# -- small binary helpers ---------------------------------------------------


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _check_magic(fh, magic: bytes, path):
    got = fh.read(4)
    if got != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, found {got!r}")


def _read_payload(fh, count, dtype, what):
    itemsize = np.dtype(dtype).itemsize
    buf = fh.read()
    if len(buf) != count * itemsize:
        raise PayloadLengthMismatch(f"{what}: header implies {count * itemsize} payload bytes, "
                                    f"file has {len(buf)}")
    return np.frombuffer(buf, dtype=dtype).copy()


# -- EMB1 -------------------------------------------------------------------


def write_embeddings(path, matrix):
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValidationError("embedding matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(b"EMB1" + struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, b"EMB1", path)
        rows, dim = struct.unpack("<II", _read_exact(fh, 8, str(path)))
        data = _read_payload(fh, rows * dim, "<f4", str(path))
    return data.reshape(rows, dim).astype(np.float64)


# -- label bank -------------------------------------------------------------


def _resolve_row(base: Path, ref: dict, cache: dict) -> np.ndarray:
    if "file" not in ref:
        raise ValidationError(f"label bank entry {ref} lacks a 'file' reference")
    path = (base / ref["file"]).resolve()
    if path not in cache:
        if not path.is_file():
            raise ResolutionError(path)
        cache[path] = read_embeddings(path)
    mat = cache[path]
    row = int(ref.get("row", 0))
    if not 0 <= row < len(mat):
        raise ValidationError(f"row {row} out of range for {path} ({len(mat)} rows)")
    return mat[row]


def _unit_rows(m):
    # f32 storage perturbs unit length by ~1e-7; renormalize on load
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def read_labelbank(path) -> LabelBank:
    """Load a label bank JSON.

    Layout::

        {"classes":   [{"name": "floor", "file": "classes.emb", "row": 0}, ...],
         "negatives": [{"file": "negatives.emb", "row": 0}, ...]}

    File paths are relative to the JSON file.
    """
    path = Path(path)
    with open(path) as fh:
        index = json.load(fh)
    unknown = set(index) - {"classes", "negatives"}
    if unknown:
        raise ValidationError(f"unknown label bank keys: {sorted(unknown)}")
    cache: dict = {}
    base = path.parent
    names = [c["name"] for c in index.get("classes", [])]
    pos = np.stack([_resolve_row(base, c, cache) for c in index.get("classes", [])]) if names else np.zeros((0, 1))
    negs = [_resolve_row(base, n, cache) for n in index.get("negatives", [])]
    if not negs:
        raise ValidationError("label bank needs at least one negative")
    return LabelBank(tuple(names), _unit_rows(pos), _unit_rows(np.stack(negs)))


def write_labelbank(path, bank: LabelBank):
    """Write ``<stem>.classes.emb``, ``<stem>.negatives.emb`` and the JSON index."""
    path = Path(path)
    cls_file = path.with_name(path.stem + ".classes.emb")
    neg_file = path.with_name(path.stem + ".negatives.emb")
    write_embeddings(cls_file, bank.positives)
    write_embeddings(neg_file, bank.negatives)
    index = {
        "classes": [{"name": n, "file": cls_file.name, "row": i} for i, n in enumerate(bank.names)],
        "negatives": [{"file": neg_file.name, "row": i} for i in range(len(bank.negatives))],
    }
    with open(path, "w") as fh:
        json.dump(index, fh, indent=2)


# -- partitions -------------------------------------------------------------


def write_partition(path, partition: SuperpointPartition):
    a = np.asarray(partition.assignment, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(b"SPP1" + struct.pack("<I", len(a)))
        fh.write(a.tobytes())


def read_partition(path) -> SuperpointPartition:
    with open(path, "rb") as fh:
        _check_magic(fh, b"SPP1", path)
        (n,) = struct.unpack("<I", _read_exact(fh, 4, str(path)))
        data = _read_payload(fh, n, "<u4", str(path))
    return SuperpointPartition(data.astype(np.int64))


# -- field checkpoints ------------------------------------------------------

_SPF_VERSION = 1
_SPF_HEADER = struct.Struct("<4sI3If3fII")


def write_field(path, field: FeatureField):
    nx, ny, nz = field.dims
    header = _SPF_HEADER.pack(b"SPF1", _SPF_VERSION, nx, ny, nz, field.voxel_size,
                              *field.origin.tolist(), field.scale_count, field.dim)
    # (nx, ny, nz) C-order -> transpose so x varies fastest on disk
    dens = np.ascontiguousarray(field.density_raw.transpose(2, 1, 0), dtype="<f4")
    emb = np.ascontiguousarray(field.embeddings.transpose(0, 3, 2, 1, 4), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dens.tobytes())
        fh.write(emb.tobytes())


def read_field(path) -> FeatureField:
    with open(path, "rb") as fh:
        head = fh.read(_SPF_HEADER.size)
        if head[:4] != b"SPF1":
            raise BadMagic(f"{path}: expected magic b'SPF1', found {head[:4]!r}")
        if len(head) != _SPF_HEADER.size:
            raise TruncatedFile(f"{path}: checkpoint header is truncated")
        _, version, nx, ny, nz, voxel, ox, oy, oz, s, d = _SPF_HEADER.unpack(head)
        if version != _SPF_VERSION:
            raise MalformedHeader(f"{path}: unsupported checkpoint version {version}")
        v = nx * ny * nz
        data = _read_payload(fh, v + s * v * d, "<f4", str(path))
    dens = data[:v].reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    emb = data[v:].reshape(s, nz, ny, nx, d).transpose(0, 3, 2, 1, 4).astype(np.float64)
    return FeatureField(np.array([ox, oy, oz], dtype=np.float32).astype(np.float64),
                        float(np.float32(voxel)), dens, emb)


# -- CSV / JSON outputs -----------------------------------------------------


def write_loss_csv(path, history: Iterable[LossRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "stage", "total", "density", "lang", "consistency", "skipped_rays"])
        for r in history:
            w.writerow([r.iteration, r.stage, repr(r.total), repr(r.density),
                        "" if r.lang is None else repr(r.lang),
                        "" if r.consistency is None else repr(r.consistency), r.skipped_rays])


def write_scores_csv(path, result: SegmentationResult):
    """One row per superpoint: id, winning class, and its R, A, R*."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["superpoint", "class_id", "class", "R", "A", "R_scaled"])
        for sp, c in enumerate(result.superpoint_labels.tolist()):
            if c == IGNORE:
                w.writerow([sp, IGNORE, "", "", "", ""])
                continue
            w.writerow([sp, c, result.class_names[c], repr(float(result.relevancy[sp, c])),
                        repr(float(result.affinity[sp, c])), repr(float(result.scaled[sp, c]))])


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
