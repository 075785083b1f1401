"""Gaussian kernel-density target maps built from dot annotations.

Each annotation contributes a normalized anisotropic 3D Gaussian (density in
mm^-3) sampled at voxel centers, truncated to zero beyond a fixed number of
standard deviations on any axis. Maps may be multiplied by a ``scale``
recorded in the volume header.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume_io import AnnotationSet, Volume

PROBABILITY_MAP_KIND = "probability_map"


@dataclass(frozen=True)
class KernelSpec:
    sigma_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    truncation_radius_sigmas: float = 4.0

    def __post_init__(self):
        if len(self.sigma_mm) != 3 or any(not s > 0 for s in self.sigma_mm):
            raise ValueError(f"sigmas must be three positive numbers, got {self.sigma_mm}")
        if self.truncation_radius_sigmas < 3:
            raise ValueError("truncation radius must be at least 3 sigmas")

    @property
    def peak_density(self) -> float:
        sx, sy, sz = self.sigma_mm
        return (2 * math.pi) ** -1.5 / (sx * sy * sz)


def kernel_eval(point_mm, center_mm, spec: KernelSpec = KernelSpec()) -> float:
    d = np.asarray(point_mm, dtype=np.float64) - np.asarray(center_mm, dtype=np.float64)
    sig = np.asarray(spec.sigma_mm, dtype=np.float64)
    if np.any(np.abs(d) > spec.truncation_radius_sigmas * sig):
        return 0.0
    return spec.peak_density * math.exp(-0.5 * float(np.sum((d / sig) ** 2)))


def _axis_factor(n: int, origin: float, spacing: float, c: float, sigma: float, trunc: float):
    """Index window and 1D Gaussian factor of one kernel along one axis."""
    lo = max(0, math.ceil((c - trunc * sigma - origin) / spacing))
    hi = min(n - 1, math.floor((c + trunc * sigma - origin) / spacing))
    if hi < lo:
        return None
    x = origin + np.arange(lo, hi + 1) * spacing
    d = x - c
    f = np.exp(-0.5 * (d / sigma) ** 2)
    f[np.abs(d) > trunc * sigma] = 0.0
    return slice(lo, hi + 1), f


def build_target_map(grid: Volume, annotations, spec: KernelSpec = KernelSpec(),
                     scale: float = 1.0) -> Volume:
    """Sum of truncated Gaussians at every annotation, sampled on ``grid``.

    ``annotations`` may be an :class:`AnnotationSet` or an (n, 3) array.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    pts = annotations.points_mm if isinstance(annotations, AnnotationSet) else \
        np.asarray(annotations, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValueError("annotations must be finite")
    acc = np.zeros(grid.shape, dtype=np.float64)
    peak = spec.peak_density * scale
    for c in pts:
        parts = [_axis_factor(grid.shape[a], grid.origin_mm[a], grid.spacing_mm[a], c[a],
                              spec.sigma_mm[a], spec.truncation_radius_sigmas) for a in range(3)]
        if any(p is None for p in parts):
            continue
        (sx, fx), (sy, fy), (sz, fz) = parts
        acc[sx, sy, sz] += peak * fx[:, None, None] * fy[None, :, None] * fz[None, None, :]
    return Volume(acc.astype(np.float32), grid.spacing_mm, grid.origin_mm,
                  {"kind": PROBABILITY_MAP_KIND, "scale": float(scale)})


def map_scale(volume: Volume) -> float:
    return float(volume.meta.get("scale", 1.0))


def as_probability_map(volume: Volume, scale: float) -> Volume:
    return volume.with_data(volume.data, kind=PROBABILITY_MAP_KIND, scale=float(scale))


def rescale_map(prob_map: Volume, factor: float) -> Volume:
    """Multiply values by ``factor`` and record the new scale."""
    return prob_map.with_data(prob_map.data * np.float32(factor), kind=PROBABILITY_MAP_KIND,
                              scale=map_scale(prob_map) * factor)
