"""Intensity clamping, isotropic resampling, VOI cropping and flip augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume_io import AnnotationSet, Volume

HU_CLAMP = (-80.0, 175.0)
DEFAULT_SPACING_MM = 0.5
DEFAULT_VOI_SHAPE = (128, 128, 96)


@dataclass(frozen=True)
class VoiSpec:
    center_mm: tuple[float, float, float]
    shape_voxels: tuple[int, int, int] = DEFAULT_VOI_SHAPE
    spacing_mm: float = DEFAULT_SPACING_MM

    def __post_init__(self):
        if len(self.shape_voxels) != 3 or any(n < 8 or n % 2 for n in self.shape_voxels):
            raise ValueError(f"VOI shape components must be even and >= 8, got {self.shape_voxels}")
        if not self.spacing_mm > 0:
            raise ValueError(f"VOI spacing must be positive, got {self.spacing_mm}")


def world_to_voxel(volume: Volume, point_mm) -> np.ndarray:
    """Continuous voxel index of a world point (works on (3,) or (n, 3))."""
    p = np.asarray(point_mm, dtype=np.float64)
    return (p - np.asarray(volume.origin_mm)) / np.asarray(volume.spacing_mm)


def voxel_to_world(volume: Volume, index) -> np.ndarray:
    i = np.asarray(index, dtype=np.float64)
    return np.asarray(volume.origin_mm) + i * np.asarray(volume.spacing_mm)


def volume_center_mm(volume: Volume) -> np.ndarray:
    return voxel_to_world(volume, (np.asarray(volume.shape) - 1) / 2.0)


def clamp_hu(volume: Volume, lo: float = HU_CLAMP[0], hi: float = HU_CLAMP[1]) -> Volume:
    if not lo < hi:
        raise ValueError(f"clamp bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return volume.with_data(np.clip(volume.data, np.float32(lo), np.float32(hi)))


def _resample_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional indices, edge-clamped."""
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(data, lo, axis=axis).astype(np.float64)
    b = np.take(data, hi, axis=axis).astype(np.float64)
    return a + (b - a) * frac


def resample_trilinear(volume: Volume, target_spacing_mm) -> Volume:
    """Resample onto a grid of the given spacing covering the same extent.

    The new grid's lower edge coincides with the old one; output shape per
    axis is ``ceil(n * spacing / target)``. Trilinear interpolation is done
    as three separable linear passes, which is identical to trilinear
    sampling on an axis-aligned grid.
    """
    if np.ndim(target_spacing_mm) == 0:
        target = (float(target_spacing_mm),) * 3
    else:
        target = tuple(float(t) for t in target_spacing_mm)
    if any(not t > 0 for t in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    data = volume.data.astype(np.float64)
    new_shape, new_origin = [], []
    for axis in range(3):
        n, s, t = volume.shape[axis], volume.spacing_mm[axis], target[axis]
        m = max(1, math.ceil(n * s / t - 1e-9))
        o = volume.origin_mm[axis] - s / 2 + t / 2
        new_shape.append(m)
        new_origin.append(o)
        coords = (o + np.arange(m) * t - volume.origin_mm[axis]) / s
        if m == n and t == s:
            continue
        data = _resample_axis(data, axis, coords)
    return Volume(data.astype(np.float32), target, tuple(new_origin), dict(volume.meta))


def nearest_voxel(volume: Volume, point_mm) -> np.ndarray:
    """Index of the voxel nearest a world point; exact halves go to the lower index."""
    v = world_to_voxel(volume, point_mm)
    return np.ceil(v - 0.5).astype(np.int64)


def voi_corner(volume: Volume, voi: VoiSpec) -> np.ndarray:
    """Source index of the VOI's voxel (0, 0, 0)."""
    center = nearest_voxel(volume, voi.center_mm)
    return center - np.asarray(voi.shape_voxels) // 2


def extract_voi(volume: Volume, voi: VoiSpec, fill_value: float = HU_CLAMP[0]) -> Volume:
    """Crop ``voi.shape_voxels`` around the voxel nearest ``voi.center_mm``.

    The source is expected to already be at ``voi.spacing_mm``. Parts of the
    crop outside the source are filled with ``fill_value``; the output
    origin keeps world coordinates unchanged.
    """
    if not np.allclose(volume.spacing_mm, voi.spacing_mm, rtol=1e-9, atol=0):
        raise ValueError(f"volume spacing {volume.spacing_mm} differs from VOI spacing {voi.spacing_mm}")
    corner = voi_corner(volume, voi)
    shape = np.asarray(voi.shape_voxels)
    out = np.full(tuple(shape), fill_value, dtype=np.float32)
    src_lo = np.maximum(corner, 0)
    src_hi = np.minimum(corner + shape, volume.shape)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - corner
        dst_hi = src_hi - corner
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            volume.data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    origin = voxel_to_world(volume, corner)
    return Volume(out, volume.spacing_mm, tuple(origin), dict(volume.meta))


def _axes(mask) -> tuple[int, ...]:
    if isinstance(mask, str):
        mask = [{"x": 0, "y": 1, "z": 2}[c] for c in mask.lower()]
    elif len(mask) == 3 and all(isinstance(m, (bool, np.bool_)) for m in mask):
        mask = [i for i, m in enumerate(mask) if m]
    axes = tuple(sorted(set(int(a) for a in mask)))
    if any(a not in (0, 1, 2) for a in axes):
        raise ValueError(f"flip axes must be a subset of x, y, z, got {mask!r}")
    return axes


def flip_points(volume: Volume, points_mm, axes_mask) -> np.ndarray:
    pts = np.array(points_mm, dtype=np.float64).reshape(-1, 3)
    for a in _axes(axes_mask):
        mirror = 2 * volume.origin_mm[a] + (volume.shape[a] - 1) * volume.spacing_mm[a]
        pts[:, a] = mirror - pts[:, a]
    return pts


def flip_augment(volume: Volume, companion, axes_mask):
    """Mirror ``volume`` along the masked axes, together with its companion.

    ``axes_mask`` is a string such as ``"xz"``, an iterable of axis indices or
    a boolean triple. ``companion`` may be an :class:`AnnotationSet`, a
    :class:`Volume` on the same grid (e.g. a probability map) or ``None``.
    """
    axes = _axes(axes_mask)
    flipped = volume.with_data(np.flip(volume.data, axes).copy() if axes else volume.data.copy())
    if companion is None:
        other = None
    elif isinstance(companion, AnnotationSet):
        other = AnnotationSet(flip_points(volume, companion.points_mm, axes))
    elif isinstance(companion, Volume):
        if companion.shape != volume.shape:
            raise ValueError("companion map must share the volume's grid")
        other = companion.with_data(np.flip(companion.data, axes).copy() if axes else companion.data.copy())
    else:
        raise TypeError(f"unsupported companion type {type(companion).__name__}")
    return flipped, other


def normalize_intensity(volume: Volume, lo: float = HU_CLAMP[0], hi: float = HU_CLAMP[1]) -> np.ndarray:
    """Map clamped HU linearly onto [0, 1] for network input."""
    return ((volume.data - np.float32(lo)) / np.float32(hi - lo)).astype(np.float32)


def prepare_input(volume: Volume, voi: VoiSpec, clamp=HU_CLAMP) -> Volume:
    """Clamp, resample to the VOI spacing and crop: the full inference-time preparation."""
    lo, hi = clamp
    v = clamp_hu(volume, lo, hi)
    if not np.allclose(v.spacing_mm, voi.spacing_mm, rtol=1e-9, atol=0):
        v = resample_trilinear(v, voi.spacing_mm)
    return extract_voi(v, voi, fill_value=lo)
