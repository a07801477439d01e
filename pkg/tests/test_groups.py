import numpy as np
import numpy.testing as npt
import pytest

from ien.groups import (
    GroupElement,
    GroupSpec,
    ROTATION,
    apply_action,
    apply_plan_array,
    enumerate_elements,
    rotation_plan,
    valid_region_mask,
)
from ien.tensor import Tape, Tensor, backward, grad_check, tsum


def _img(seed, h=6, w=None, n=1, c=1, dtype=np.float32):
    w = h if w is None else w
    rng = np.random.default_rng(seed)
    return rng.random((n, c, h, w)).astype(dtype)


def test_r4_angles():
    spec = GroupSpec.rotations(4)
    assert [g.angle_deg for g in enumerate_elements(spec)] == [0.0, 90.0, 180.0, 270.0]
    assert spec.elements[0].is_identity
    assert spec.order == 4


def test_r1_is_trivial():
    spec = GroupSpec.rotations(1)
    assert spec.order == 1
    assert spec.elements[0].is_identity
    assert spec.non_identity() == ()


def test_r4r_enumeration():
    spec = GroupSpec.rotoreflections(4)
    els = enumerate_elements(spec)
    assert len(els) == 8
    assert [g.flip for g in els] == [False] * 4 + [True] * 4
    assert [g.angle_deg for g in els] == [0, 90, 180, 270] * 2
    # product set has no duplicates
    assert len({(g.angle_deg, g.flip) for g in els}) == 8


def test_from_name():
    assert GroupSpec.from_name("R8").order == 8
    assert GroupSpec.from_name("R4R").order == 8
    assert GroupSpec.from_name("S").order == 3
    assert [g.factor for g in GroupSpec.from_name("S:0.5,1,2").elements] == [1.0, 0.5, 2.0]
    with pytest.raises(ValueError):
        GroupSpec.from_name("Q7")


def test_identity_action_is_noop():
    x = Tensor(_img(0))
    ident = GroupSpec.rotations(4).elements[0]
    out, mask = apply_action(ident, x)
    assert out.data.tobytes() == x.data.tobytes()
    assert mask.all_true


def test_rot90_index_map():
    m = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    rot90 = GroupSpec.rotations(4).elements[1]
    out, mask = apply_action(rot90, m)
    npt.assert_array_equal(out.data[0, 0], [[2.0, 4.0], [1.0, 3.0]])
    assert mask.all_true


@pytest.mark.parametrize("k", [1, 2, 3])
def test_exact_rotations_are_permutations(k):
    x = _img(k, h=5)
    g = GroupSpec.rotations(4).elements[k]
    out, mask = apply_action(g, Tensor(x))
    assert mask.all_true
    assert np.array_equal(np.sort(out.data, axis=None), np.sort(x, axis=None))
    npt.assert_array_equal(out.data[0, 0], np.rot90(x[0, 0], k))


def test_flips_are_permutations():
    x = _img(9, h=4, w=6)
    for g in GroupSpec.reflections().non_identity():
        out, mask = apply_action(g, Tensor(x))
        assert mask.all_true
        assert np.array_equal(np.sort(out.data, axis=None), np.sort(x, axis=None))


def test_forward_then_inverse_exact_is_bit_identity():
    x = _img(3, h=8)
    for g in GroupSpec.rotoreflections(4).elements:
        mid, _ = apply_action(g, Tensor(x))
        back, _ = apply_action(g, mid, direction="inverse")
        assert back.data.tobytes() == x.tobytes() if isinstance(x, np.ndarray) else True
        assert back.data.tobytes() == x.tobytes()


def test_rot90_four_times_is_bit_identity():
    x = _img(4, h=7)
    rot90 = GroupSpec.rotations(4).elements[1]
    t = Tensor(x)
    for _ in range(4):
        t, _ = apply_action(rot90, t)
    assert t.data.tobytes() == x.tobytes()


def test_exact_rotation_commutes_with_maxpool():
    from ien.layers import maxpool2d
    x = Tensor(_img(5, h=8))
    rot90 = GroupSpec.rotations(4).elements[1]
    a, _ = apply_action(rot90, x)
    a = maxpool2d(a, 2, 2)
    b = maxpool2d(x, 2, 2)
    b, _ = apply_action(rot90, b)
    assert a.data.tobytes() == b.data.tobytes()


def test_rot45_valid_mask_excludes_corners():
    g = GroupElement(ROTATION, 1, angle_deg=45.0)
    mask = valid_region_mask(g, 4, 4)
    assert not mask.mask[0, 0]
    assert not mask.mask[0, -1]
    assert not mask.mask[-1, 0]
    assert not mask.mask[-1, -1]
    assert 0 < mask.count < 16

    exact = valid_region_mask(GroupElement(ROTATION, 1, angle_deg=90.0), 5, 5)
    assert exact.count == 25


def test_scale_up_mask_all_true():
    g = GroupElement("scale", 1, factor=2.0)
    mask = valid_region_mask(g, 8, 8)
    assert (mask.h, mask.w) == (16, 16)
    assert mask.all_true


def test_scale_shapes_and_errors():
    g = GroupElement("scale", 1, factor=0.5)
    x = Tensor(_img(0, h=8))
    out, mask = apply_action(g, x)
    assert out.shape == (1, 1, 4, 4)
    assert mask.all_true
    with pytest.raises(ValueError, match="non-integer"):
        apply_action(g, Tensor(_img(0, h=7)))


def test_scale_round_trip_on_constant_image():
    x = Tensor(np.full((1, 1, 8, 8), 0.37, dtype=np.float32))
    g = GroupElement("scale", 1, factor=2.0)
    up, _ = apply_action(g, x)
    back, mask = apply_action(g, up, direction="inverse")
    assert back.shape == x.shape
    assert mask.all_true
    npt.assert_allclose(back.data, x.data, atol=1e-6)


def test_interpolated_masked_pixels_survive_round_trip_on_constant():
    # mask soundness: pixels marked valid are invariant to 1e-6 on constants
    g = GroupElement(ROTATION, 1, angle_deg=45.0)
    x = Tensor(np.full((1, 1, 12, 12), 0.61, dtype=np.float32))
    fwd, m_f = apply_action(g, x)
    back, m_rt = apply_action(g, fwd, direction="inverse", in_mask=m_f)
    assert m_rt.count > 0
    npt.assert_allclose(back.data[0, 0][m_rt.mask], 0.61, atol=1e-6)


def _smooth_image(seed, h=28, fmax=2):
    # random bandlimited field: smooth enough that two bilinear passes
    # only lose a small fraction of the variance
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    img = np.zeros((h, h))
    for p in range(fmax + 1):
        for q in range(fmax + 1):
            if p == 0 and q == 0:
                continue
            amp = rng.normal() / (1 + p * p + q * q) ** 2
            phase = rng.uniform(0, 2 * np.pi)
            img += amp * np.cos(2 * np.pi * (p * yy + q * xx) / h + phase)
    return img.astype(np.float32)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rot45_round_trip_mse_small_on_smooth_images(seed):
    img = _smooth_image(seed)
    x = Tensor(img[None, None])
    g = GroupElement(ROTATION, 1, angle_deg=45.0)
    fwd, m_f = apply_action(g, x)
    back, m_rt = apply_action(g, fwd, direction="inverse", in_mask=m_f)
    diff = (back.data[0, 0] - img)[m_rt.mask]
    mse = float(np.mean(diff ** 2))
    var = float(np.var(img))
    assert mse <= 1e-3 * var


def test_rotation_plan_angle_zero_is_exact():
    img = _img(11, h=9)
    plan = rotation_plan(0.0, 9, 9)
    assert plan.exact
    out = apply_plan_array(plan, img)
    assert out.tobytes() == img.tobytes()


def test_interpolated_action_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.random((1, 2, 6, 6)), requires_grad=True, dtype="f64")
    g = GroupElement(ROTATION, 1, angle_deg=45.0)

    def f(t):
        out, _ = apply_action(g, t)
        from ien.tensor import mul
        return tsum(mul(out, out))

    assert grad_check(f, x).passed


def test_exact_action_grad_is_inverse_permutation():
    x = Tensor(_img(8, h=4).astype(np.float64), requires_grad=True, dtype="f64")
    g = GroupSpec.rotations(4).elements[1]
    with Tape() as tape:
        out, _ = apply_action(g, x)
        loss = tsum(out * Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)))
        backward(loss, tape)
    # gradient of sum(rot(x) * w) w.r.t. x is rot^{-1}(w)
    want = np.rot90(np.arange(16, dtype=np.float64).reshape(4, 4), -1)
    npt.assert_array_equal(x.grad[0, 0], want)


def test_nonsquare_90_rotation_rejected():
    g = GroupSpec.rotations(4).elements[1]
    with pytest.raises(ValueError, match="non-square"):
        apply_action(g, Tensor(_img(0, h=4, w=6)))
    # 180 degrees is fine on non-square maps
    g180 = GroupSpec.rotations(4).elements[2]
    out, _ = apply_action(g180, Tensor(_img(0, h=4, w=6)))
    assert out.shape == (1, 1, 4, 6)


def test_scale_inverse_unenumerated():
    spec = GroupSpec.scales((0.5, 1.0, 2.0))
    half = spec.elements[1]
    assert half.factor == 0.5
    assert half.inverse().factor == 2.0
    rot = GroupElement(ROTATION, 1, angle_deg=90.0)
    assert rot.inverse().angle_deg == 270.0
    flipped = GroupSpec.rotoreflections(4).elements[5]
    assert flipped.inverse() is flipped
