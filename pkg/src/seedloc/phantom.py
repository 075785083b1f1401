"""Synthetic CT-like volumes with implanted seeds, clusters and streak artifacts.

Seeds are capsules (a cylinder with hemispherical caps) with uniformly
random orientation. A fraction of them is placed in tight pairs or triples
to mimic seed clusters. Streaks are additive bright/dark bands along random
lines through seeds. Everything is drawn from one ``numpy`` generator seeded
with ``rng_seed``, so a config fully determines its phantom.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .volume_io import AnnotationSet, Volume, write_annotations, write_volume

log = logging.getLogger(__name__)

JITTER_MODES = ("uniform-on-seed", "center")
STREAK_AMPLITUDE_HU = 300.0
STREAK_SIGMA_MM = 1.0
MANIFEST_NAME = "dataset.json"


class PlacementError(RuntimeError):
    """Seeds could not be fitted into the volume."""


@dataclass(frozen=True)
class PhantomConfig:
    rng_seed: int = 0
    shape: tuple[int, int, int] = (64, 64, 48)
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed_count: int = 15
    # when set, each phantom draws its seed count uniformly from [seed_count, seed_count_max]
    seed_count_max: int | None = None
    seed_diameter_mm: float = 0.8
    seed_length_mm: float = 4.5
    cluster_fraction: float = 0.2
    cluster_gap_mm: float = 4.0
    min_separation_mm: float = 6.0
    margin_mm: float = 2.0
    streak_artifact_count: int = 3
    noise_sd_hu: float = 10.0
    background_hu_range: tuple[float, float] = (20.0, 60.0)
    seed_hu: float = 3000.0
    annotation_jitter: str = "uniform-on-seed"
    max_attempts: int = 2000

    def __post_init__(self):
        if self.seed_count < 0:
            raise ValueError("seed_count must be >= 0")
        if self.seed_count_max is not None and self.seed_count_max < self.seed_count:
            raise ValueError("seed_count_max must be >= seed_count")
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValueError(f"shape must be three positive integers, got {self.shape}")
        for name in ("seed_diameter_mm", "seed_length_mm", "cluster_gap_mm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if any(not s > 0 for s in self.spacing_mm):
            raise ValueError("spacing must be positive")
        if self.seed_length_mm < self.seed_diameter_mm:
            raise ValueError("seed_length_mm must be at least the diameter")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must lie in [0, 1]")
        if self.noise_sd_hu < 0 or self.streak_artifact_count < 0 or self.margin_mm < 0:
            raise ValueError("noise, streak count and margin must be non-negative")
        lo, hi = self.background_hu_range
        if lo > hi:
            raise ValueError("background_hu_range must be (low, high)")
        if self.annotation_jitter not in JITTER_MODES:
            raise ValueError(f"annotation_jitter must be one of {JITTER_MODES}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
              if k in cls.__dataclass_fields__}
        return cls(**kw)


@dataclass
class PhantomRender:
    volume: Volume
    clean: Volume  # before noise
    annotations: AnnotationSet
    centers_mm: np.ndarray
    axes: np.ndarray  # unit seed directions
    labels: np.ndarray  # voxel -> 1-based seed index, 0 = background


def _random_unit(rng, n=None):
    v = rng.standard_normal((3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class _Placer:
    def __init__(self, cfg: PhantomConfig, rng):
        self.cfg = cfg
        self.rng = rng
        origin = np.asarray(cfg.origin_mm, float)
        extent = (np.asarray(cfg.shape) - 1) * np.asarray(cfg.spacing_mm)
        self.lo = origin + cfg.margin_mm
        self.hi = origin + extent - cfg.margin_mm
        self.half = cfg.seed_length_mm / 2
        self.centers: list[np.ndarray] = []
        self.axes: list[np.ndarray] = []

    def fits(self, c, u) -> bool:
        ends = np.stack([c - self.half * u, c + self.half * u])
        return bool(np.all(ends >= self.lo) and np.all(ends <= self.hi))

    def far_enough(self, c, min_dist) -> bool:
        return all(np.linalg.norm(c - other) >= min_dist for other in self.centers)

    def random_center(self):
        # rejection against fits() handles the orientation-dependent margin
        return self.rng.uniform(self.lo, self.hi)

    def place_single(self):
        for _ in range(self.cfg.max_attempts):
            c, u = self.random_center(), _random_unit(self.rng)
            if self.fits(c, u) and self.far_enough(c, self.cfg.min_separation_mm):
                self.centers.append(c)
                self.axes.append(u)
                return
        raise PlacementError(f"could not place seed {len(self.centers) + 1} after "
                             f"{self.cfg.max_attempts} attempts")

    def place_cluster(self, size: int):
        gap = self.cfg.cluster_gap_mm
        for _ in range(self.cfg.max_attempts):
            members = [(self.random_center(), _random_unit(self.rng))]
            ok = self.fits(*members[0]) and self.far_enough(members[0][0], self.cfg.min_separation_mm)
            while ok and len(members) < size:
                # next member at the gap distance from a random existing member
                base = members[self.rng.integers(len(members))][0]
                c = base + gap * _random_unit(self.rng)
                u = _random_unit(self.rng)
                ok = (self.fits(c, u) and self.far_enough(c, self.cfg.min_separation_mm)
                      and all(np.linalg.norm(c - m[0]) >= gap - 1e-9 for m in members))
                members.append((c, u))
            if ok:
                for c, u in members:
                    self.centers.append(c)
                    self.axes.append(u)
                return
        raise PlacementError(f"could not place a {size}-seed cluster after "
                             f"{self.cfg.max_attempts} attempts")


def _cluster_sizes(n_clustered: int, rng) -> list[int]:
    sizes = []
    left = n_clustered
    while left >= 2:
        s = 3 if left >= 5 or left == 3 else 2
        if left >= 5 and rng.random() < 0.5:
            s = 2
        sizes.append(s)
        left -= s
    return sizes


def _segment_distance(points, a, b):
    ab = b - a
    denom = ab @ ab
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def _rasterize(labels, cfg: PhantomConfig, idx: int, c, u):
    """Mark capsule voxels: centres within the radius, plus every voxel the axis passes through."""
    sp = np.asarray(cfg.spacing_mm)
    origin = np.asarray(cfg.origin_mm)
    r = cfg.seed_diameter_mm / 2
    half_cyl = (cfg.seed_length_mm - cfg.seed_diameter_mm) / 2
    a, b = c - half_cyl * u, c + half_cyl * u
    reach = cfg.seed_length_mm / 2 + sp.max()
    lo = np.maximum(np.floor((c - reach - origin) / sp).astype(int), 0)
    hi = np.minimum(np.ceil((c + reach - origin) / sp).astype(int) + 1, labels.shape)
    grids = np.meshgrid(*[origin[k] + np.arange(lo[k], hi[k]) * sp[k] for k in range(3)], indexing="ij")
    pts = np.stack(grids, axis=-1)
    inside = _segment_distance(pts, a, b) <= r
    block = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    block[inside] = idx
    # axis voxels (segment between the cap tips) so the centreline is never lost
    n = int(np.ceil(cfg.seed_length_mm / (sp.min() / 4))) + 1
    for t in np.linspace(-cfg.seed_length_mm / 2 + r, cfg.seed_length_mm / 2 - r, n):
        v = np.ceil((c + t * u - origin) / sp - 0.5).astype(int)
        if np.all(v >= 0) and np.all(v < labels.shape):
            labels[tuple(v)] = idx
    v = np.ceil((c - origin) / sp - 0.5).astype(int)
    if np.all(v >= 0) and np.all(v < labels.shape):
        labels[tuple(v)] = idx


def _annotation_point(cfg: PhantomConfig, rng, c, u, labels):
    if cfg.annotation_jitter == "center":
        return c.copy()
    r = cfg.seed_diameter_mm / 2
    half_cyl = (cfg.seed_length_mm - cfg.seed_diameter_mm) / 2
    a, b = c - half_cyl * u, c + half_cyl * u
    sp = np.asarray(cfg.spacing_mm)
    origin = np.asarray(cfg.origin_mm)
    half = cfg.seed_length_mm / 2
    for _ in range(10000):
        p = c + rng.uniform(-half, half, size=3)
        if _segment_distance(p[None], a, b)[0] > r:
            continue
        v = np.ceil((p - origin) / sp - 0.5).astype(int)
        if np.all(v >= 0) and np.all(v < labels.shape) and labels[tuple(v)] > 0:
            return p
    return c.copy()


def render_phantom(cfg: PhantomConfig) -> PhantomRender:
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.seed_count
    if cfg.seed_count_max is not None:
        n = int(rng.integers(cfg.seed_count, cfg.seed_count_max + 1))
    placer = _Placer(cfg, rng)
    sizes = _cluster_sizes(int(round(cfg.cluster_fraction * n)), rng)
    for s in sizes:
        placer.place_cluster(s)
    for _ in range(n - sum(sizes)):
        placer.place_single()
    centers = np.array(placer.centers, dtype=np.float64).reshape(-1, 3)
    axes = np.array(placer.axes, dtype=np.float64).reshape(-1, 3)

    shape = tuple(int(s) for s in cfg.shape)
    sp = np.asarray(cfg.spacing_mm)
    origin = np.asarray(cfg.origin_mm)
    data = np.full(shape, rng.uniform(*cfg.background_hu_range), dtype=np.float64)
    if n and cfg.streak_artifact_count:
        coords = np.stack(np.meshgrid(*[origin[k] + np.arange(shape[k]) * sp[k] for k in range(3)],
                                      indexing="ij"), axis=-1)
        for _ in range(cfg.streak_artifact_count):
            through = centers[rng.integers(n)]
            d = _random_unit(rng)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            rel = coords - through
            perp = rel - (rel @ d)[..., None] * d
            dist2 = np.einsum("...i,...i->...", perp, perp)
            data += sign * STREAK_AMPLITUDE_HU * np.exp(-dist2 / (2 * STREAK_SIGMA_MM ** 2))

    labels = np.zeros(shape, dtype=np.int32)
    for i in range(n):
        _rasterize(labels, cfg, i + 1, centers[i], axes[i])
    data[labels > 0] = cfg.seed_hu
    points = np.array([_annotation_point(cfg, rng, centers[i], axes[i], labels)
                       for i in range(n)]).reshape(-1, 3)
    clean = data.astype(np.float32)
    noisy = data + rng.normal(0.0, cfg.noise_sd_hu, size=shape) if cfg.noise_sd_hu > 0 else data
    return PhantomRender(
        volume=Volume(noisy.astype(np.float32), cfg.spacing_mm, cfg.origin_mm),
        clean=Volume(clean, cfg.spacing_mm, cfg.origin_mm),
        annotations=AnnotationSet(points),
        centers_mm=centers,
        axes=axes,
        labels=labels,
    )


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, AnnotationSet]:
    r = render_phantom(cfg)
    return r.volume, r.annotations


def generate_dataset(cfg: PhantomConfig, n_volumes: int, out_dir, jobs: int = 1) -> list[dict]:
    """Write ``n_volumes`` phantoms (seeds ``rng_seed + index``) and a ``dataset.json`` manifest.

    Manifest paths are relative to ``out_dir``.
    """
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(i: int) -> dict:
        vol, ann = generate_phantom(replace(cfg, rng_seed=cfg.rng_seed + i))
        name = f"phantom_{i:04d}"
        write_volume(vol, out / name)
        write_annotations(ann, out / name)
        log.info("wrote %s (%d seeds)", name, len(ann))
        return {"volume_path": f"{name}.vol.json", "annotation_path": f"{name}.pts.json",
                "seed_count": len(ann)}

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(one, range(n_volumes)))
    else:
        rows = [one(i) for i in range(n_volumes)]
    (out / MANIFEST_NAME).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows


def read_manifest(path) -> tuple[Path, list[dict]]:
    """Manifest rows with paths resolved against the manifest's directory."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    rows = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(rows, list):
        raise ValueError(f"{p}: manifest must be a JSON list")
    resolved = []
    for row in rows:
        r = dict(row)
        for key in ("volume_path", "annotation_path"):
            if key in r:
                r[key] = str((p.parent / r[key]).resolve())
        resolved.append(r)
    return p, resolved
