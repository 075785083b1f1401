import json
from dataclasses import replace

import numpy as np
import pytest

from seedloc.phantom import PhantomConfig, PlacementError, generate_dataset, generate_phantom, read_manifest, render_phantom
from seedloc.preprocess import nearest_voxel
from seedloc.volume_io import read_annotations, read_volume


@pytest.fixture(scope="module")
def render20():
    return render_phantom(PhantomConfig(rng_seed=7, seed_count=20, shape=(80, 80, 64)))


def test_exact_count_and_points_on_seed_axis(render20):
    r, cfg = render20, PhantomConfig(seed_count=20)
    assert len(r.annotations) == 20 and r.centers_mm.shape == (20, 3)
    for p, c, u in zip(r.annotations.points_mm, r.centers_mm, r.axes):
        along = float(np.dot(p - c, u))
        radial = np.linalg.norm((p - c) - along * u)
        assert abs(along) <= cfg.seed_length_mm / 2 + 1e-9
        assert radial <= cfg.seed_diameter_mm / 2 + 1e-9


def test_annotations_lie_in_seed_valued_voxels(render20):
    r = render20
    for p in r.annotations.points_mm:
        idx = tuple(nearest_voxel(r.clean, p))
        assert r.clean.data[idx] == 3000.0


def test_seed_voxels_and_background(render20):
    r = render20
    for k in range(1, 21):
        assert (r.labels == k).sum() >= 4
    assert np.all(r.clean.data[r.labels > 0] == 3000.0)
    # background is a constant plus streaks, well below seed intensity
    assert r.clean.data[r.labels == 0].max() < 1000


def test_deterministic_from_seed():
    a = generate_phantom(PhantomConfig(rng_seed=3))
    b = generate_phantom(PhantomConfig(rng_seed=3))
    c = generate_phantom(PhantomConfig(rng_seed=4))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].points_mm.tobytes() == b[1].points_mm.tobytes()
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_center_jitter_puts_annotation_on_center():
    r = render_phantom(PhantomConfig(rng_seed=1, annotation_jitter="center"))
    assert np.allclose(r.annotations.points_mm, r.centers_mm)


def test_seed_count_range():
    counts = {len(generate_phantom(PhantomConfig(rng_seed=s, seed_count=10, seed_count_max=20))[1])
              for s in range(8)}
    assert counts <= set(range(10, 21)) and len(counts) > 1


def test_clusters_present():
    r = render_phantom(PhantomConfig(rng_seed=2, seed_count=15, cluster_fraction=0.4))
    d = np.linalg.norm(r.centers_mm[:, None] - r.centers_mm[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert np.isclose(d.min(axis=1), 4.0, atol=1e-6).sum() >= 2


def test_no_clusters_respects_min_separation():
    r = render_phantom(PhantomConfig(rng_seed=2, seed_count=12, cluster_fraction=0.0))
    d = np.linalg.norm(r.centers_mm[:, None] - r.centers_mm[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 6.0


def test_noise_free_phantom():
    r = render_phantom(PhantomConfig(rng_seed=5, noise_sd_hu=0.0, streak_artifact_count=0))
    assert np.array_equal(r.volume.data, r.clean.data)
    bg = r.volume.data[r.labels == 0]
    assert bg.min() == bg.max() and 20 <= bg[0] <= 60


def test_impossible_placement_raises():
    with pytest.raises(PlacementError):
        render_phantom(PhantomConfig(seed_count=40, shape=(24, 24, 24), max_attempts=50))


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(annotation_jitter="gaussian")
    with pytest.raises(ValueError):
        PhantomConfig(cluster_fraction=1.5)
    with pytest.raises(ValueError):
        PhantomConfig(seed_count=5, seed_count_max=4)


def test_dataset_and_manifest(tmp_path):
    cfg = PhantomConfig(rng_seed=10, seed_count=4, shape=(40, 40, 32))
    rows = generate_dataset(cfg, 3, tmp_path, jobs=2)
    doc = json.loads((tmp_path / "dataset.json").read_text())
    assert doc == rows and [r["volume_path"] for r in rows] == [f"phantom_{i:04d}.vol.json" for i in range(3)]
    _, resolved = read_manifest(tmp_path)
    for i, r in enumerate(resolved):
        vol, ann = generate_phantom(replace(cfg, rng_seed=10 + i))
        assert read_volume(r["volume_path"]).data.tobytes() == vol.data.tobytes()
        assert np.array_equal(read_annotations(r["annotation_path"]).points_mm, ann.points_mm)
    other = tmp_path / "again"
    generate_dataset(cfg, 3, other, jobs=1)
    for name in ("phantom_0001.vol.raw", "phantom_0002.pts.json", "dataset.json"):
        assert (tmp_path / name).read_bytes() == (other / name).read_bytes()
