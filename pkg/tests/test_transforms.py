import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from vlk.transforms import (MAX_ANGLE_DEG, MAX_SHIFT_VOX, RigidTransform, apply_forward, invert_coordinate_guided,
                            invert_standard, misassigned_fraction, round_half_away, sample_tta_transform)
from vlk.volume import Volume


def test_round_half_away():
    assert list(round_half_away([-2.5, -1.5, -0.5, 0.5, 1.5, 2.4])) == [-3, -2, -1, 1, 2, 2]


def test_rotation_is_orthonormal():
    R = RigidTransform((10.0, -7.0, 15.0)).rotation()
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1.0)


def test_points_roundtrip():
    t = RigidTransform((12.0, -3.0, 7.0), (1.5, -2.0, 0.25))
    pts = np.random.default_rng(0).uniform(0, 30, (50, 3))
    assert np.allclose(t.inverse_points(t.forward_points(pts, (31, 31, 31)), (31, 31, 31)), pts)


def test_sampler_deterministic_and_in_range():
    assert sample_tta_transform(3, 9) == sample_tta_transform(3, 9)
    assert sample_tta_transform(3, 9) != sample_tta_transform(3, 10)
    assert sample_tta_transform(3, 9) != sample_tta_transform(4, 9)
    params = np.array([t.euler_deg + t.translation_vox for t in (sample_tta_transform(42, i) for i in range(10000))])
    assert np.all(np.abs(params[:, :3]) <= MAX_ANGLE_DEG)
    assert np.all(np.abs(params[:, 3:]) <= MAX_SHIFT_VOX)
    bound = np.array([MAX_ANGLE_DEG] * 3 + [MAX_SHIFT_VOX] * 3)
    se = bound / np.sqrt(3) / np.sqrt(len(params))  # sd of U(-a, a) is a / sqrt(3)
    assert np.all(np.abs(params.mean(0)) < 3 * se)


def test_identity_is_exact(cow64):
    _, _, _, gt = cow64
    t = RigidTransform.identity()
    assert apply_forward(gt, t) == gt
    assert invert_standard(gt, t) == gt


def test_translation_moves_voxel():
    a = np.zeros((8, 8, 8), np.uint8)
    a[3, 4, 5] = 2
    out = apply_forward(Volume(a), RigidTransform(translation_vox=(1.0, 0.0, 0.0))).data
    assert out[4, 4, 5] == 2 and out.sum() == 2


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(-5, 5)] * 3))
def test_integer_translation_roundtrip(shift):
    rng = np.random.default_rng(abs(hash(shift)) % 2**32)
    a = np.zeros((20, 20, 20), np.uint8)
    a[5:15, 5:15, 5:15] = rng.integers(0, 11, (10, 10, 10))
    v = Volume(a)
    t = RigidTransform(translation_vox=tuple(float(s) for s in shift))
    assert invert_standard(apply_forward(v, t), t) == v


def test_bar_rotates_ninety_degrees():
    n = 33
    a = np.zeros((n, n, n), np.uint8)
    a[6:27, 15:18, 15:18] = 1
    out = apply_forward(Volume(a), RigidTransform((0.0, 0.0, 90.0))).data
    # brute force: rotate voxel centres of the bar about the centre and rasterize
    c = (n - 1) / 2
    pts = np.argwhere(a) - c
    R = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    expected = np.zeros_like(a)
    expected[tuple(np.rint(pts @ R.T + c).astype(int).T)] = 1
    diff = np.count_nonzero(out != expected)
    assert diff / a.sum() < 0.02
    assert np.ptp(np.argwhere(out), axis=0)[1] == 20  # now spans y


def test_coordinate_guided_identity_masks(cow64):
    seg, _, _, gt = cow64
    noise = Volume(np.random.default_rng(0).integers(0, 11, gt.dims).astype(np.uint8))
    out = invert_coordinate_guided(noise, RigidTransform.identity(), seg).data
    expected = np.where(seg.data == 1, noise.data, 0)
    # masked voxels where noise is 0 fall back to a nearby non-zero value
    hit = (seg.data == 1) & (noise.data != 0)
    assert np.array_equal(out[hit], expected[hit])
    assert np.all(out[seg.data == 0] == 0)
    assert np.all(out[seg.data == 1] != 0)


def test_coordinate_guided_identity_exact(cow64):
    seg, _, _, gt = cow64
    assert invert_coordinate_guided(gt, RigidTransform.identity(), seg) == gt


def test_coordinate_guided_background_gives_non_annotated(cow64):
    seg, _, _, _ = cow64
    empty = Volume(np.zeros(seg.dims, np.uint8))
    out = invert_coordinate_guided(empty, sample_tta_transform(0, 0), seg).data
    assert np.all(out[seg.data == 1] == 10) and np.all(out[seg.data == 0] == 0)


def test_coordinate_guided_fallback_prefers_nearest():
    seg = np.zeros((9, 9, 9), np.uint8)
    seg[4, 4, 4] = 1
    pred = np.zeros((9, 9, 9), np.uint8)
    pred[4, 4, 6] = 7  # distance 2
    pred[4, 5, 5] = 3  # distance sqrt(2)
    out = invert_coordinate_guided(Volume(pred), RigidTransform.identity(), Volume(seg)).data
    assert out[4, 4, 4] == 3
    pred[4, 5, 5] = 0
    pred[4, 7, 4] = 1  # outside radius 2
    out = invert_coordinate_guided(Volume(pred), RigidTransform.identity(), Volume(seg)).data
    assert out[4, 4, 4] == 7


def test_roundtrip_errors_on_phantom(cow96):
    seg, _, _, gt = cow96
    std, cg = [], []
    for i in range(10):
        t = sample_tta_transform(1, i)
        moved = apply_forward(gt, t)
        std.append(misassigned_fraction(gt, invert_standard(moved, t)))
        cg.append(misassigned_fraction(gt, invert_coordinate_guided(moved, t, seg)))
    assert max(cg) < 0.005
    assert np.mean(std) > 0.01
    assert all(c < s for c, s in zip(cg, std))


def test_misassigned_fraction():
    a = np.zeros((4, 1, 1), np.uint8)
    a[:2] = 1
    b = a.copy()
    b[0] = 2
    b[3] = 5  # background in the original is not counted
    assert misassigned_fraction(Volume(a), Volume(b)) == 0.5
    assert misassigned_fraction(Volume(np.zeros((2, 2, 2), np.uint8)), Volume(np.ones((2, 2, 2), np.uint8))) == 0.0


def test_transform_dict():
    t = RigidTransform((1.0, 2.0, 3.0), (4.0, 5.0, 6.0))
    assert RigidTransform(**{k: tuple(v) for k, v in t.to_dict().items()}) == t
