import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlk.preprocess import (BoundingBox, EmptyInputError, PatchPlan, crop_with_margin, extract_patches,
                            fit_scale, fixed_size_input, margins, pad_bbox, plan_patches, scale_crop_to_target,
                            stitch, tight_bbox)
from vlk.volume import Volume, VolumeError


def _seg(dims, voxels):
    a = np.zeros(dims, np.uint8)
    for v in voxels:
        a[v] = 1
    return Volume(a)


def test_bbox_examples():
    assert tight_bbox(_seg((8, 8, 12), [(3, 4, 5)])) == BoundingBox((3, 4, 5), (3, 4, 5))
    assert tight_bbox(Volume(np.ones((8, 8, 8), np.uint8))) == BoundingBox((0, 0, 0), (7, 7, 7))
    assert tight_bbox(_seg((8, 8, 12), [(1, 1, 1), (5, 2, 9)])) == BoundingBox((1, 1, 1), (5, 2, 9))
    with pytest.raises(EmptyInputError):
        tight_bbox(Volume(np.zeros((3, 3, 3), np.uint8)))


def test_margins():
    b = BoundingBox((0, 0, 0), (99, 9, 0))
    assert margins(b, 0.15) == (15, 2, 0)  # 1.5 rounds half away from zero
    assert pad_bbox(b, 0.0) == b
    assert pad_bbox(b, 0.15) == BoundingBox((-15, -2, 0), (114, 11, 0))
    assert pad_bbox(b, 0.15, dims=(100, 10, 1)) == BoundingBox((0, 0, 0), (99, 9, 0))


def test_crop_with_margin_zero_fills():
    v = _seg((20, 20, 20), [(0, 5, 5), (9, 14, 14)])
    c = crop_with_margin(v)
    assert c.dims == (10 + 4, 10 + 4, 10 + 4)  # round(1.5) = 2 per side
    assert c.data[2, 2, 2] == 1 and c.data[11, 11, 11] == 1
    assert c.data.sum() == 2


def test_scale_identity():
    rng = np.random.default_rng(0)
    v = Volume((rng.random((128, 256, 256)) < 0.01).astype(np.uint8))
    assert scale_crop_to_target(v) == v


def test_scale_upsample_by_two():
    rng = np.random.default_rng(1)
    src = (rng.random((64, 128, 128)) < 0.2).astype(np.uint8)
    out = scale_crop_to_target(Volume(src, (1.0, 1.0, 1.0)))
    assert out.dims == (128, 256, 256)
    assert np.array_equal(out.data, src.repeat(2, 0).repeat(2, 1).repeat(2, 2))
    assert out.spacing == (0.5, 0.5, 0.5)


def test_scale_downsample_and_pad():
    src = np.zeros((128, 512, 256), np.uint8)
    src[::2, ::2, ::2] = 1
    src[10, 20, 30] = 1
    assert fit_scale(src.shape, (128, 256, 256)) == 0.5
    out = scale_crop_to_target(Volume(src)).data
    assert out.shape == (128, 256, 256)
    inner = out[32:96, :, 64:192]
    assert inner.all()
    assert out.sum() == inner.size
    # brute force: scaled voxel j reads source floor(j / s)
    j = np.array([5, 10, 15])
    assert inner[tuple(j)] == src[tuple(j * 2)]


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 300)] * 3))
def test_scale_output_dims_property(dims):
    out = scale_crop_to_target(Volume(np.ones(dims, np.uint8)))
    assert out.dims == (128, 256, 256)


def test_fixed_size_input_keeps_content():
    v = _seg((40, 40, 40), [(10, 10, 10), (29, 29, 29)])
    out = fixed_size_input(v)
    assert out.dims == (128, 256, 256)
    assert out.data.sum() > 0


def test_patch_offsets():
    p = plan_patches((80, 224, 160), (80, 224, 160))
    assert p.offsets == [(0, 0, 0)]
    p = plan_patches((160, 224, 160))
    assert sorted({o[0] for o in p.offsets}) == [0, 40, 80]
    assert {o[1:] for o in p.offsets} == {(0, 0)}
    p = plan_patches((100, 224, 160))
    assert sorted({o[0] for o in p.offsets}) == [0, 20]
    p = plan_patches((50, 30, 10), (80, 224, 160))
    assert p.dims == (80, 224, 160) and p.offsets == [(0, 0, 0)]
    assert PatchPlan.from_dict(p.to_dict()) == p


def _coverage(plan):
    cov = np.zeros(plan.dims, np.int32)
    for o in plan.offsets:
        cov[tuple(slice(a, a + s) for a, s in zip(o, plan.patch_dims))] += 1
    return cov


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 60)] * 3), st.tuples(*[st.integers(1, 24)] * 3),
       st.sampled_from([0.25, 0.5, 0.75, 1.0]))
def test_patch_plans_cover_every_voxel(dims, patch, step):
    plan = plan_patches(dims, patch, step)
    cov = _coverage(plan)
    assert cov.min() >= 1
    for o in plan.offsets:
        assert all(0 <= a and a + s <= n for a, s, n in zip(o, plan.patch_dims, plan.dims))


def test_extract_patches_zero_pad():
    v = Volume(np.ones((3, 3, 3), np.uint8))
    (off, patch), = extract_patches(v, plan_patches(v.dims, (4, 4, 4)))
    assert off == (0, 0, 0) and patch.dims == (4, 4, 4) and patch.data.sum() == 27


def _probs(shape, rng, c=11):
    p = rng.random(tuple(shape) + (c,))
    return p / p.sum(-1, keepdims=True)


def test_stitch_single_patch(rng):
    p = _probs((4, 5, 6), rng)
    assert np.allclose(stitch([((0, 0, 0), p)], (4, 5, 6)), p, atol=1e-6)


@pytest.mark.parametrize("weights", ["uniform", "gaussian"])
def test_stitch_identical_patches(rng, weights):
    p = _probs((6, 4, 4), rng)
    out = stitch([((0, 0, 0), p), ((0, 0, 0), p)], (6, 4, 4), weights)
    assert np.abs(out - p).max() < 1e-6
    # shifted copies of a field that is constant along x agree on their overlap
    q = np.broadcast_to(p[:1], (6, 4, 4, 11))
    out = stitch([((0, 0, 0), q), ((2, 0, 0), q)], (8, 4, 4), weights)
    assert np.abs(out - p[0]).max() < 1e-6


def test_stitch_disagreeing_voxel():
    a = np.zeros((2, 1, 1, 3))
    a[..., 0] = 1.0
    b = np.zeros((2, 1, 1, 3))
    b[..., 1] = 1.0
    out = stitch([((0, 0, 0), a), ((1, 0, 0), b)], (3, 1, 1))
    assert np.allclose(out[1, 0, 0], [0.5, 0.5, 0.0])
    assert np.allclose(out[0, 0, 0], [1, 0, 0]) and np.allclose(out[2, 0, 0], [0, 1, 0])


def test_stitch_errors(rng):
    p = _probs((2, 2, 2), rng)
    with pytest.raises(VolumeError, match="out of bounds"):
        stitch([((1, 0, 0), p)], (2, 2, 2))
    with pytest.raises(VolumeError, match="class-count"):
        stitch([((0, 0, 0), p), ((0, 0, 0), _probs((2, 2, 2), rng, 3))], (2, 2, 2))
    with pytest.raises(VolumeError, match="cover"):
        stitch([((0, 0, 0), p)], (3, 2, 2))


def test_stitch_order_independent(rng):
    plan = plan_patches((20, 12, 9), (8, 8, 8), 0.5)
    patches = [(o, _probs((8, 8, 8), rng)) for o in plan.offsets]
    a = stitch(patches, plan.dims, "gaussian")
    b = stitch(patches[::-1], plan.dims, "gaussian")
    assert np.abs(a - b).max() < 1e-6
    assert np.allclose(a.sum(-1), 1.0, atol=1e-6)
