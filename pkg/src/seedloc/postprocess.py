"""Seed coordinates from a probability map via marker-controlled watershed.

Markers are thresholded local maxima; a priority flood from the markers
over the negated map partitions the supra-threshold voxels into basins, one
per marker. Each basin yields an intensity-weighted centroid and its mass.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .preprocess import voxel_to_world
from .targetmap import map_scale
from .volume_io import DetectionSet, Volume


@dataclass(frozen=True)
class ExtractConfig:
    threshold_fraction: float = 0.05
    min_basin_mass_fraction: float = 0.1
    connectivity: int = 26
    smoothing: bool = False

    def __post_init__(self):
        for name in ("threshold_fraction", "min_basin_mass_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


def _offsets(connectivity: int) -> list[tuple[int, int, int]]:
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                order = abs(dx) + abs(dy) + abs(dz)
                if order == 0:
                    continue
                if (connectivity == 6 and order > 1) or (connectivity == 18 and order > 2):
                    continue
                out.append((dx, dy, dz))
    return out


def _flat_index(shape) -> np.ndarray:
    """x-fastest flat index of every voxel, the tie-break order used throughout."""
    nx, ny, nz = shape
    x, y, z = np.indices(shape, sparse=True)
    return x + nx * (y + ny * z)


def _values(prob_map) -> np.ndarray:
    return prob_map.data if isinstance(prob_map, Volume) else np.asarray(prob_map)


def _threshold(data: np.ndarray, config: ExtractConfig) -> float:
    return config.threshold_fraction * float(data.max())


def find_local_maxima(prob_map, config: ExtractConfig = ExtractConfig()) -> np.ndarray:
    """Voxel indices (k, 3) of thresholded 26-neighbourhood maxima, in flat-index order.

    A plateau of equal maximal voxels yields one marker, at its lowest flat
    index.
    """
    data = _values(prob_map)
    if data.size == 0 or not data.max() > 0:
        return np.zeros((0, 3), dtype=np.int64)
    thr = _threshold(data, config)
    peak = ndimage.maximum_filter(data, size=3, mode="constant", cval=-np.inf)
    cand = (data >= peak) & (data > thr)
    plateaus, n = ndimage.label(cand, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return np.zeros((0, 3), dtype=np.int64)
    flat = np.broadcast_to(_flat_index(data.shape), data.shape)
    first = ndimage.minimum(flat, plateaus, index=np.arange(1, n + 1)).astype(np.int64)
    first.sort()
    nx, ny, _ = data.shape
    return np.stack([first % nx, (first // nx) % ny, first // (nx * ny)], axis=1)


def watershed_segment(prob_map, markers, config: ExtractConfig = ExtractConfig()) -> np.ndarray:
    """Flood the negated map from ``markers`` (k, 3); returns int32 labels 1..k, 0 = background.

    Voxels below the relative threshold are never flooded. Among queued
    voxels the highest value goes first, ties broken by lowest flat index.
    """
    data = _values(prob_map)
    labels = np.zeros(data.shape, dtype=np.int32)
    markers = np.asarray(markers, dtype=np.int64).reshape(-1, 3)
    if len(markers) == 0:
        return labels
    thr = _threshold(data, config)
    nx, ny, nz = data.shape
    # padded copy so neighbour lookups never leave the array
    vals = np.pad(data.astype(np.float64), 1, constant_values=-np.inf).ravel()
    lab = np.zeros(vals.shape, dtype=np.int32)
    sx, sy, sz = (ny + 2) * (nz + 2), nz + 2, 1
    steps = [dx * sx + dy * sy + dz * sz for dx, dy, dz in _offsets(config.connectivity)]

    def padded(x, y, z):
        return (x + 1) * sx + (y + 1) * sy + (z + 1)

    def flat(p):
        x, rem = divmod(p, sx)
        y, z = divmod(rem, sy)
        return (x - 1) + nx * ((y - 1) + ny * (z - 1))

    heap = []
    for i, (x, y, z) in enumerate(markers, start=1):
        p = padded(int(x), int(y), int(z))
        lab[p] = i
        heapq.heappush(heap, (-vals[p], flat(p), p))
    while heap:
        _, _, p = heapq.heappop(heap)
        current = lab[p]
        for s in steps:
            q = p + s
            if lab[q] == 0 and vals[q] >= thr:
                lab[q] = current
                heapq.heappush(heap, (-vals[q], flat(q), q))
    labels[:] = lab.reshape(nx + 2, ny + 2, nz + 2)[1:-1, 1:-1, 1:-1]
    return labels


def extract_detections(prob_map: Volume, config: ExtractConfig = ExtractConfig()) -> DetectionSet:
    """Markers, watershed, then per-basin weighted centroid and mass.

    Basin mass is ``sum(value) * voxel_volume / scale`` so one unit kernel
    has mass 1 regardless of how the map was scaled; basins lighter than
    ``min_basin_mass_fraction`` are dropped.
    """
    data = prob_map.data.astype(np.float64)
    if not np.isfinite(data).all() or (data < 0).any():
        raise ValueError("probability map must be finite and non-negative")
    if config.smoothing:
        data = ndimage.gaussian_filter(data, sigma=1.0, mode="nearest")
    markers = find_local_maxima(data, config)
    if len(markers) == 0:
        return DetectionSet()
    labels = watershed_segment(data, markers, config)
    k = len(markers)
    lab = labels.ravel()
    w = data.ravel()
    idx = np.indices(data.shape).reshape(3, -1).astype(np.float64)
    mass = np.bincount(lab, weights=w, minlength=k + 1)[1:]
    centroid = np.stack([np.bincount(lab, weights=w * idx[a], minlength=k + 1)[1:] for a in range(3)],
                        axis=1) / mass[:, None]
    peaks = data[tuple(markers.T)]
    basin_mass = mass * prob_map.voxel_volume_mm3 / map_scale(prob_map)
    keep = basin_mass >= config.min_basin_mass_fraction
    points = voxel_to_world(prob_map, centroid[keep])
    return DetectionSet(points, peaks[keep], basin_mass[keep])
