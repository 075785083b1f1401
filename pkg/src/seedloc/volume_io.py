"""On-disk formats for volumes, point sets, detections and checkpoints.

Every artifact is a small JSON header plus (for array data) a raw
little-endian blob. Volumes are stored x-fastest, so the value at flat
index ``i`` sits at ``(i % nx, (i // nx) % ny, i // (nx * ny))``. In memory
a volume is a float32 numpy array indexed ``data[x, y, z]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

VOLUME_SUFFIX = ".vol.json"
VOLUME_BLOB_SUFFIX = ".vol.raw"
POINTS_SUFFIX = ".pts.json"
DETECTIONS_SUFFIX = ".det.json"
CHECKPOINT_SUFFIX = ".ckpt.json"
CHECKPOINT_BLOB_SUFFIX = ".ckpt.bin"

CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"f32-le": np.dtype("<f4"), "f64-le": np.dtype("<f8")}


class FormatError(ValueError):
    """Raised when a file on disk violates its format contract."""


def _triple(values, name: str, kind=float) -> tuple:
    try:
        out = tuple(kind(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{name} must be a triple of numbers, got {values!r}") from exc
    if len(out) != 3:
        raise FormatError(f"{name} must have 3 components, got {len(out)}")
    return out


@dataclass
class Volume:
    """A 3D scalar grid with physical placement.

    ``origin_mm`` is the world coordinate of the *center* of voxel
    ``(0, 0, 0)``; voxel ``i`` sits at ``origin + i * spacing``.
    ``meta`` carries optional extra header fields (e.g. ``kind`` and
    ``scale`` for probability maps) and is persisted verbatim.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing_mm = _triple(self.spacing_mm, "spacing_mm")
        self.origin_mm = _triple(self.origin_mm, "origin_mm")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise FormatError(f"volume data must be 3D, got shape {self.data.shape}")
        for s in self.spacing_mm:
            if not (math.isfinite(s) and s > 0):
                raise FormatError(f"spacing_mm must be positive and finite, got {self.spacing_mm}")
        if not all(math.isfinite(o) for o in self.origin_mm):
            raise FormatError(f"origin_mm must be finite, got {self.origin_mm}")
        bad = ~np.isfinite(self.data)
        if bad.any():
            flat = int(np.flatnonzero(bad.ravel(order="F"))[0])
            nx, ny, _ = self.shape
            idx = (flat % nx, (flat // nx) % ny, flat // (nx * ny))
            raise FormatError(f"non-finite value at voxel {idx} (flat index {flat})")

    def with_data(self, data: np.ndarray, **meta) -> "Volume":
        """Same grid, new values."""
        return Volume(data, self.spacing_mm, self.origin_mm, {**self.meta, **meta})


@dataclass
class AnnotationSet:
    """Ground-truth seed points in world millimetres."""

    points_mm: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        pts = np.asarray(self.points_mm, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise FormatError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise FormatError("annotation coordinates must be finite")
        self.points_mm = pts

    def __len__(self) -> int:
        return len(self.points_mm)


@dataclass
class DetectionSet:
    """Extracted seed locations with their peak values and basin masses."""

    points_mm: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    peak_value: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basin_mass: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        pts = np.asarray(self.points_mm, dtype=np.float64)
        self.points_mm = pts.reshape(0, 3) if pts.size == 0 else pts
        self.peak_value = np.asarray(self.peak_value, dtype=np.float64).reshape(-1)
        self.basin_mass = np.asarray(self.basin_mass, dtype=np.float64).reshape(-1)
        n = len(self.points_mm)
        if self.points_mm.shape != (n, 3) or len(self.peak_value) != n or len(self.basin_mass) != n:
            raise FormatError("detection fields must have matching lengths")
        if not (np.isfinite(self.points_mm).all() and np.isfinite(self.peak_value).all()
                and np.isfinite(self.basin_mass).all()):
            raise FormatError("detection values must be finite")

    def __len__(self) -> int:
        return len(self.points_mm)


@dataclass
class Checkpoint:
    """Serialized network state.

    ``tensors`` maps parameter/buffer names to arrays; insertion order is
    preserved on disk. ``optimizer_state`` is ``None`` or a dict with keys
    ``step`` (int), ``m`` and ``v`` (name -> array), plus any scalar extras.
    """

    arch_config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    optimizer_state: dict[str, Any] | None = None
    training_meta: dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION


def _base(path, suffix: str) -> Path:
    p = Path(path)
    name = p.name
    if name.endswith(suffix):
        return p.with_name(name[: -len(suffix)])
    return p


def _dump_json(obj, path: Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _load_json(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {path}: {exc}") from exc


def volume_paths(path) -> tuple[Path, Path]:
    """Header and blob paths for a volume given either file or the bare name."""
    base = _base(_base(path, VOLUME_SUFFIX), VOLUME_BLOB_SUFFIX)
    return base.with_name(base.name + VOLUME_SUFFIX), base.with_name(base.name + VOLUME_BLOB_SUFFIX)


def write_volume(volume: Volume, path) -> Path:
    volume.validate()
    header_path, blob_path = volume_paths(path)
    header = {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "dtype": "f32-le",
        "order": "x-fastest",
        "blob": blob_path.name,
    }
    header.update(volume.meta)
    blob = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    header_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    _dump_json(header, header_path)
    return header_path


def read_volume(path) -> Volume:
    header_path, blob_path = volume_paths(path)
    header = _load_json(header_path)
    if not isinstance(header, dict):
        raise FormatError(f"{header_path}: header must be a JSON object")
    try:
        shape = _triple(header["shape"], "shape", int)
        spacing = _triple(header["spacing_mm"], "spacing_mm")
        origin = _triple(header["origin_mm"], "origin_mm")
    except KeyError as exc:
        raise FormatError(f"{header_path}: missing header field {exc}") from exc
    if header.get("dtype", "f32-le") != "f32-le":
        raise FormatError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order {header.get('order')!r}")
    if any(n < 1 for n in shape):
        raise FormatError(f"shape components must be >= 1, got {shape}")
    if "blob" in header:
        blob_path = header_path.with_name(header["blob"])
    if not blob_path.exists():
        raise FileNotFoundError(f"missing file: {blob_path}")
    raw = blob_path.read_bytes()
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(raw) != expected:
        raise FormatError(f"{blob_path}: size mismatch, expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape, order="F").astype(np.float32)
    meta = {k: v for k, v in header.items()
            if k not in ("shape", "spacing_mm", "origin_mm", "dtype", "order", "blob")}
    vol = Volume(data, spacing, origin, meta)
    vol.validate()
    return vol


def _check_point_list(raw, path, key="points_mm") -> np.ndarray:
    if not isinstance(raw, list):
        raise FormatError(f"{path}: '{key}' must be a list")
    for i, p in enumerate(raw):
        if not isinstance(p, list) or len(p) != 3:
            raise FormatError(f"{path}: entry {i} of '{key}' is not a coordinate triple")
        for c in p:
            if isinstance(c, bool) or not isinstance(c, (int, float)):
                raise FormatError(f"{path}: entry {i} of '{key}' has non-numeric coordinate {c!r}")
            if not math.isfinite(c):
                raise FormatError(f"{path}: entry {i} of '{key}' has non-finite coordinate")
    return np.array(raw, dtype=np.float64).reshape(-1, 3)


def _points_to_json(points: np.ndarray) -> list:
    # float() of a float64 serializes with repr, which round-trips exactly
    return [[float(c) for c in p] for p in points]


def points_path(path) -> Path:
    base = _base(path, POINTS_SUFFIX)
    return base.with_name(base.name + POINTS_SUFFIX)


def write_annotations(annotations: AnnotationSet, path) -> Path:
    if not np.isfinite(annotations.points_mm).all():
        raise FormatError("annotation coordinates must be finite")
    out = points_path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json({"points_mm": _points_to_json(annotations.points_mm)}, out)
    return out


def read_annotations(path) -> AnnotationSet:
    p = points_path(path)
    doc = _load_json(p)
    if not isinstance(doc, dict) or "points_mm" not in doc:
        raise FormatError(f"{p}: expected an object with key 'points_mm'")
    return AnnotationSet(_check_point_list(doc["points_mm"], p))


def detections_path(path) -> Path:
    base = _base(path, DETECTIONS_SUFFIX)
    return base.with_name(base.name + DETECTIONS_SUFFIX)


def write_detections(detections: DetectionSet, path) -> Path:
    out = detections_path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json({
        "points_mm": _points_to_json(detections.points_mm),
        "peak_value": [float(v) for v in detections.peak_value],
        "basin_mass": [float(v) for v in detections.basin_mass],
    }, out)
    return out


def read_detections(path) -> DetectionSet:
    p = detections_path(path)
    doc = _load_json(p)
    if not isinstance(doc, dict) or "points_mm" not in doc:
        raise FormatError(f"{p}: expected an object with key 'points_mm'")
    pts = _check_point_list(doc["points_mm"], p)
    n = len(pts)
    peak = doc.get("peak_value", [1.0] * n)
    mass = doc.get("basin_mass", [0.0] * n)
    for key, vals in (("peak_value", peak), ("basin_mass", mass)):
        if not isinstance(vals, list) or len(vals) != n:
            raise FormatError(f"{p}: '{key}' must be a list of length {n}")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v)
               for v in vals):
            raise FormatError(f"{p}: '{key}' must contain finite numbers")
    return DetectionSet(pts, peak, mass)


def read_points(path) -> np.ndarray:
    """Points from either an annotation or a detection file."""
    name = Path(path).name
    if name.endswith(DETECTIONS_SUFFIX):
        return read_detections(path).points_mm
    return read_annotations(path).points_mm


def checkpoint_paths(path) -> tuple[Path, Path]:
    base = _base(_base(path, CHECKPOINT_SUFFIX), CHECKPOINT_BLOB_SUFFIX)
    return (base.with_name(base.name + CHECKPOINT_SUFFIX),
            base.with_name(base.name + CHECKPOINT_BLOB_SUFFIX))


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64-le"
    if arr.dtype == np.float32:
        return "f32-le"
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"cannot write checkpoint format_version {checkpoint.format_version}")
    header_path, blob_path = checkpoint_paths(path)
    chunks: list[bytes] = []
    offset = 0

    def add(name: str, arr) -> dict:
        nonlocal offset
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        if not np.isfinite(arr).all():
            raise FormatError(f"tensor {name!r} has non-finite values")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[tag], copy=False).tobytes(order="C")
        entry = {"name": name, "shape": list(arr.shape), "dtype": tag,
                 "offset": offset, "nbytes": len(blob)}
        chunks.append(blob)
        offset += len(blob)
        return entry

    manifest = [add(name, arr) for name, arr in checkpoint.tensors.items()]
    opt = None
    if checkpoint.optimizer_state is not None:
        state = checkpoint.optimizer_state
        opt = {k: v for k, v in state.items() if k not in ("m", "v")}
        opt["m"] = [add(name, arr) for name, arr in state["m"].items()]
        opt["v"] = [add(name, arr) for name, arr in state["v"].items()]
    header = {
        "format_version": checkpoint.format_version,
        "blob": blob_path.name,
        "arch_config": checkpoint.arch_config,
        "tensors": manifest,
        "optimizer_state": opt,
        "training_meta": checkpoint.training_meta,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    _dump_json(header, header_path)
    return header_path


def load_checkpoint(path) -> Checkpoint:
    header_path, blob_path = checkpoint_paths(path)
    header = _load_json(header_path)
    if not isinstance(header, dict):
        raise FormatError(f"{header_path}: header must be a JSON object")
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {version!r} "
                          f"(this build reads version {CHECKPOINT_FORMAT_VERSION})")
    if "blob" in header:
        blob_path = header_path.with_name(header["blob"])
    if not blob_path.exists():
        raise FileNotFoundError(f"missing file: {blob_path}")
    raw = blob_path.read_bytes()

    def take(entry) -> np.ndarray:
        name = entry.get("name")
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {name!r}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(int(n) for n in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != count * dtype.itemsize:
            raise FormatError(f"tensor {name!r}: manifest shape {list(shape)} needs "
                              f"{count} values but blob holds {nbytes // dtype.itemsize}")
        if start < 0 or start + nbytes > len(raw):
            raise FormatError(f"tensor {name!r}: blob range out of bounds")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        return arr.reshape(shape).astype(dtype.newbyteorder("="))

    tensors = {e["name"]: take(e) for e in header["tensors"]}
    opt = header.get("optimizer_state")
    if opt is not None:
        opt = dict(opt)
        opt["m"] = {e["name"]: take(e) for e in opt["m"]}
        opt["v"] = {e["name"]: take(e) for e in opt["v"]}
    return Checkpoint(
        arch_config=header["arch_config"],
        tensors=tensors,
        optimizer_state=opt,
        training_meta=header.get("training_meta", {}),
        format_version=version,
    )
