import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seedloc import preprocess as pp
from seedloc.targetmap import build_target_map
from seedloc.volume_io import AnnotationSet, Volume


def grid(shape=(4, 4, 4), spacing=(0.5, 0.5, 0.5), origin=(0.0, 0.0, 0.0), data=None):
    return Volume(np.zeros(shape) if data is None else data, spacing, origin)


def test_clamp_bounds():
    v = grid(data=np.array([-1000.0, 500.0, 100.0, -80.0, 175.0, 0.0, 3000.0, -81.0]).reshape(2, 2, 2))
    out = pp.clamp_hu(v)
    assert out.data.ravel().tolist() == [-80.0, 175.0, 100.0, -80.0, 175.0, 0.0, 175.0, -80.0]
    assert out.spacing_mm == v.spacing_mm and out.origin_mm == v.origin_mm


def test_clamp_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        pp.clamp_hu(grid(), 10, 10)


@given(st.lists(st.floats(-5000, 5000, width=32), min_size=8, max_size=8))
def test_clamp_idempotent_and_monotone(values):
    v = grid(data=np.array(values, np.float32).reshape(2, 2, 2))
    once = pp.clamp_hu(v)
    assert np.array_equal(pp.clamp_hu(once).data, once.data)
    order = np.argsort(v.data.ravel(), kind="stable")
    assert np.all(np.diff(once.data.ravel()[order]) >= 0)


def test_world_voxel_conversions():
    v = grid(origin=(10.0, 0.0, 0.0))
    assert np.allclose(pp.voxel_to_world(v, (0, 0, 0)), v.origin_mm)
    assert np.allclose(pp.world_to_voxel(v, (12.0, 0.0, 0.0)), (4, 0, 0))
    rng = np.random.default_rng(0)
    v2 = grid(spacing=(0.7, 1.3, 2.9), origin=(-4.2, 11.0, 3.3))
    pts = rng.uniform(-100, 100, size=(50, 3))
    back = pp.voxel_to_world(v2, pp.world_to_voxel(v2, pts))
    assert np.allclose(back, pts, rtol=1e-9, atol=1e-12)


def test_resample_constant():
    v = grid((5, 6, 3), (1.0, 1.0, 2.5), data=np.full((5, 6, 3), 42.0))
    out = pp.resample_trilinear(v, 0.5)
    assert out.shape == (10, 12, 15)
    assert np.all(out.data == 42.0)


def test_resample_output_shape():
    v = grid((100, 100, 40), (1.0, 1.0, 2.5))
    out = pp.resample_trilinear(v, 0.5)
    assert out.shape == (200, 200, 200)
    assert out.spacing_mm == (0.5, 0.5, 0.5)
    # lower edges of the two grids coincide
    assert np.allclose(np.asarray(out.origin_mm) - 0.25, np.asarray(v.origin_mm) - np.array([0.5, 0.5, 1.25]))


def test_resample_exact_on_linear_field():
    spacing, origin, shape = (1.0, 1.5, 2.5), (3.0, -2.0, 7.0), (9, 7, 6)
    src = grid(shape, spacing, origin)
    idx = np.indices(shape).astype(np.float64)
    world = [origin[a] + idx[a] * spacing[a] for a in range(3)]
    src.data = (2.0 * world[0] - 0.5 * world[1] + 0.25 * world[2] + 1.0).astype(np.float32)
    out = pp.resample_trilinear(src, 0.5)
    oidx = np.indices(out.shape).astype(np.float64)
    ow = [out.origin_mm[a] + oidx[a] * 0.5 for a in range(3)]
    expected = 2.0 * ow[0] - 0.5 * ow[1] + 0.25 * ow[2] + 1.0
    inside = np.ones(out.shape, bool)
    for a in range(3):
        inside &= (ow[a] >= origin[a]) & (ow[a] <= origin[a] + (shape[a] - 1) * spacing[a])
    assert inside.sum() > 100
    assert np.max(np.abs(out.data[inside] - expected[inside])) < 1e-5 * np.abs(expected).max()


def test_resample_to_own_spacing_is_identity():
    rng = np.random.default_rng(3)
    v = grid((6, 5, 4), (0.8, 0.8, 1.7), (1.0, 2.0, 3.0), rng.normal(size=(6, 5, 4)))
    out = pp.resample_trilinear(v, v.spacing_mm)
    assert out.shape == v.shape
    assert np.allclose(out.origin_mm, v.origin_mm)
    assert np.max(np.abs(out.data - v.data)) <= 1e-6


def test_resample_degenerate_axis():
    v = grid((1, 3, 3), (2.0, 1.0, 1.0), data=np.arange(9.0).reshape(1, 3, 3))
    out = pp.resample_trilinear(v, 1.0)
    assert out.shape == (2, 3, 3)
    assert np.array_equal(out.data[0], v.data[0]) and np.array_equal(out.data[1], v.data[0])


def test_voi_fully_inside_matches_sub_block():
    rng = np.random.default_rng(0)
    src = grid((30, 30, 30), data=rng.normal(size=(30, 30, 30)), origin=(1.0, 2.0, 3.0))
    c = pp.voxel_to_world(src, (15, 14, 16))
    voi = pp.VoiSpec(tuple(c), (8, 10, 12), 0.5)
    out = pp.extract_voi(src, voi)
    assert np.array_equal(out.data, src.data[11:19, 9:19, 10:22])
    assert np.allclose(out.origin_mm, pp.voxel_to_world(src, (11, 9, 10)))


def test_voi_fully_outside_is_fill():
    src = grid((10, 10, 10), data=np.ones((10, 10, 10)))
    out = pp.extract_voi(src, pp.VoiSpec((500.0, 0, 0), (8, 8, 8), 0.5), fill_value=-80)
    assert np.all(out.data == -80)


def test_voi_partially_outside_pads():
    src = grid((10, 10, 10), data=np.ones((10, 10, 10)))
    out = pp.extract_voi(src, pp.VoiSpec((0.0, 0.0, 0.0), (8, 8, 8), 0.5))
    assert np.all(out.data[4:, 4:, 4:] == 1) and np.all(out.data[:4] == -80)


def test_voi_center_tie_goes_to_lower_index():
    src = grid((20, 20, 20))
    # exactly halfway between voxels 9 and 10 on every axis
    c = pp.voxel_to_world(src, (9.5, 9.5, 9.5))
    assert pp.nearest_voxel(src, c).tolist() == [9, 9, 9]
    assert pp.voi_corner(src, pp.VoiSpec(tuple(c), (8, 8, 8), 0.5)).tolist() == [5, 5, 5]


@pytest.mark.parametrize("center_idx,point_idx", [
    ((15, 15, 15), (14.2, 16.7, 15.0)),
    ((5, 25, 12), (3.0, 22.5, 9.9)),
    ((28, 2, 20), (30.1, 0.4, 23.0)),
])
def test_voi_preserves_world_coordinates(center_idx, point_idx):
    src = grid((32, 32, 32), origin=(-7.0, 4.0, 1.25))
    voi = pp.VoiSpec(tuple(pp.voxel_to_world(src, center_idx)), (8, 8, 8), 0.5)
    out = pp.extract_voi(src, voi)
    p = pp.voxel_to_world(src, point_idx)
    corner = pp.voi_corner(src, voi)
    assert np.allclose(pp.world_to_voxel(out, p), pp.world_to_voxel(src, p) - corner)


def test_voi_spec_validation():
    with pytest.raises(ValueError):
        pp.VoiSpec((0, 0, 0), (9, 8, 8))
    with pytest.raises(ValueError):
        pp.VoiSpec((0, 0, 0), (6, 8, 8))
    with pytest.raises(ValueError):
        pp.VoiSpec((0, 0, 0), (8, 8, 8), 0.0)


def test_flip_worked_example():
    v = grid((4, 4, 4))
    _, ann = pp.flip_augment(v, AnnotationSet([[0.5, 0.5, 0.5]]), "x")
    assert np.allclose(ann.points_mm, [[1.0, 0.5, 0.5]])


def test_flip_empty_mask_identity():
    rng = np.random.default_rng(0)
    v = grid((4, 5, 6), data=rng.normal(size=(4, 5, 6)))
    ann = AnnotationSet(rng.uniform(0, 2, size=(3, 3)))
    fv, fa = pp.flip_augment(v, ann, "")
    assert np.array_equal(fv.data, v.data) and np.array_equal(fa.points_mm, ann.points_mm)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["", "x", "y", "z", "xy", "xz", "yz", "xyz"]), st.integers(0, 10_000))
def test_flip_is_involution(mask, seed):
    rng = np.random.default_rng(seed)
    v = grid((4, 5, 6), (0.5, 0.7, 1.1), tuple(rng.uniform(-5, 5, 3)), rng.normal(size=(4, 5, 6)))
    ann = AnnotationSet(rng.uniform(-5, 5, size=(5, 3)))
    m = v.with_data(rng.random((4, 5, 6)))
    v1, a1 = pp.flip_augment(v, ann, mask)
    v2, a2 = pp.flip_augment(v1, a1, mask)
    assert np.array_equal(v2.data, v.data)
    assert np.allclose(a2.points_mm, ann.points_mm, atol=1e-12)
    _, m1 = pp.flip_augment(v, m, mask)
    _, m2 = pp.flip_augment(v, m1, mask)
    assert np.array_equal(m2.data, m.data)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["x", "y", "z", "xy", "xyz"]), st.integers(0, 10_000))
def test_target_map_commutes_with_flip(mask, seed):
    rng = np.random.default_rng(seed)
    v = grid((16, 14, 20), (0.5, 0.5, 0.5), tuple(rng.uniform(-3, 3, 3)))
    ann = AnnotationSet(pp.voxel_to_world(v, rng.uniform(2, 12, size=(3, 3))))
    fv, fa = pp.flip_augment(v, ann, mask)
    direct = build_target_map(fv, fa, scale=1.0)
    _, flipped = pp.flip_augment(v, build_target_map(v, ann, scale=1.0), mask)
    assert np.max(np.abs(direct.data - flipped.data)) <= 1e-6
