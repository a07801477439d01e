import numpy as np
import numpy.testing as npt
import pytest

from ien.tensor import (
    GradCheckReport,
    Tape,
    Tensor,
    backward,
    concat,
    grad_check,
    matmul,
    mul,
    narrow,
    reshape,
    take_channels,
    tensor_new,
    tmean,
    tsum,
)


def test_tensor_new_constant_fills():
    t = tensor_new([2, 2], fill="constant", value=0.0)
    npt.assert_array_equal(t.data, np.zeros((2, 2), dtype=np.float32))
    t = tensor_new([3], fill="constant", value=1.0)
    npt.assert_array_equal(t.data, np.ones(3, dtype=np.float32))


def test_tensor_new_seeded_fills_are_bit_identical():
    a = tensor_new([4], fill="uniform", seed=7)
    b = tensor_new([4], fill="uniform", seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    c = tensor_new([4], fill="normal", seed=7, mean=1.0, std=2.0, dtype="f64")
    d = tensor_new([4], fill="normal", seed=7, mean=1.0, std=2.0, dtype="f64")
    assert c.data.tobytes() == d.data.tobytes()
    assert c.dtype == "f64"


def test_tensor_new_errors():
    with pytest.raises(ValueError):
        tensor_new([0, 3])
    with pytest.raises(ValueError):
        tensor_new([2], dtype="i8")
    with pytest.raises(ValueError):
        tensor_new([2], fill="uniform")  # no seed
    with pytest.raises(ValueError):
        tensor_new([2], fill="bogus")


def test_matmul_identity_and_small():
    eye = Tensor(np.eye(2, dtype=np.float32))
    m = Tensor(np.array([[1, 2], [3, 4]], dtype=np.float32))
    npt.assert_array_equal(matmul(eye, m).data, m.data)
    a = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    b = Tensor(np.array([[3.0], [4.0]], dtype=np.float32))
    npt.assert_array_equal(matmul(a, b).data, [[11.0]])


def _naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    got = matmul(Tensor(a), Tensor(b)).data
    want = _naive_matmul(a, b)
    npt.assert_allclose(got, want, rtol=1e-12)


def test_matmul_shape_and_dtype_errors():
    a = Tensor(np.zeros((2, 3), dtype=np.float32))
    b = Tensor(np.zeros((4, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        matmul(a, b)
    c = Tensor(np.zeros((3, 2), dtype=np.float64))
    with pytest.raises(TypeError):
        matmul(a, c)


def test_backward_sum_gives_ones():
    x = Tensor(np.array([5.0, -1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
        backward(loss, tape)
    npt.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_sum_of_squares():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
        backward(loss, tape)
    npt.assert_array_equal(x.grad, [4.0, -2.0])


def test_backward_errors():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tape = Tape()
    with pytest.raises(ValueError, match="empty tape"):
        backward(x, tape)
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)
    with Tape() as tape:
        _ = tsum(mul(x, x))
        stray = Tensor(np.array(0.0), requires_grad=True)
        with pytest.raises(ValueError, match="not computed"):
            backward(stray, tape)


def test_off_path_leaves_get_zero_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with Tape() as tape:
        _unused = mul(y, y)
        loss = tsum(mul(x, x))
        backward(loss, tape)
    npt.assert_array_equal(x.grad, [2.0, 4.0])
    npt.assert_array_equal(y.grad, [0.0, 0.0])


def test_grad_accumulates_on_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True, dtype="f64")
    with Tape() as tape:
        loss = tsum(mul(x, x) + mul(x, x))
        backward(loss, tape)
    npt.assert_allclose(x.grad, [12.0])


def test_broadcast_add_unbroadcasts_grad():
    x = Tensor(np.ones((2, 3)), requires_grad=True, dtype="f64")
    b = Tensor(np.ones((3,)), requires_grad=True, dtype="f64")
    with Tape() as tape:
        loss = tsum(x + b)
        backward(loss, tape)
    npt.assert_array_equal(x.grad, np.ones((2, 3)))
    npt.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_narrow_and_concat_roundtrip_grads():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        top = narrow(x, 0, 0, 1)
        rest = narrow(x, 0, 1, 2)
        back = concat([top, rest], axis=0)
        loss = tsum(mul(back, back))
        backward(loss, tape)
    npt.assert_allclose(x.grad, 2.0 * x.data)


def test_take_channels_grad():
    x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 4, 3), requires_grad=True)
    with Tape() as tape:
        sel = take_channels(x, [0, 2])
        loss = tsum(sel)
        backward(loss, tape)
    want = np.zeros((2, 4, 3))
    want[:, [0, 2]] = 1.0
    npt.assert_array_equal(x.grad, want)


def test_grad_check_polynomial_exact():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype="f64")
    report = grad_check(lambda t: tsum(mul(t, t)), x)
    assert isinstance(report, GradCheckReport)
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_grad_check_rejects_f32_and_nonscalar():
    x32 = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda t: tsum(t), x32)
    x = Tensor(np.ones(3), requires_grad=True, dtype="f64")
    with pytest.raises(ValueError):
        grad_check(lambda t: mul(t, t), x)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_composite_ops(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)) + 2.5, requires_grad=True, dtype="f64")
    w = Tensor(rng.standard_normal((4, 2)), dtype="f64")

    def f(t):
        h = matmul(t, w)
        h = reshape(h, (6,))
        from ien.tensor import sqrt as tsqrt
        return tsum(mul(h, h)) + tmean(tsqrt(mul(t, t)))

    report = grad_check(f, x)
    assert report.passed, report


def test_backward_linearity():
    # grad of (a*f + b*g) == a*grad(f) + b*grad(g) for scalar constants
    rng = np.random.default_rng(11)
    xv = rng.standard_normal(5)
    a_const, b_const = 2.5, -0.75

    def run(factors):
        x = Tensor(xv, requires_grad=True, dtype="f64")
        with Tape() as tape:
            f = tsum(mul(x, x))
            g = tsum(mul(mul(x, x), x))
            loss = factors[0] * f + factors[1] * g
            backward(loss, tape)
        return x.grad.copy()

    combined = run((a_const, b_const))
    only_f = run((1.0, 0.0))
    only_g = run((0.0, 1.0))
    npt.assert_allclose(combined, a_const * only_f + b_const * only_g, atol=1e-10)


def test_determinism_two_runs_bit_identical():
    def pipeline():
        x = tensor_new([4, 4], dtype="f64", fill="normal", seed=99, requires_grad=True)
        w = tensor_new([4, 4], dtype="f64", fill="uniform", seed=5)
        with Tape() as tape:
            h = matmul(x, w)
            loss = tsum(mul(h, h))
            backward(loss, tape)
        return loss.data.tobytes(), x.grad.tobytes()

    assert pipeline() == pipeline()


def test_check_finite():
    t = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(FloatingPointError):
        t.check_finite("probe")
    Tensor(np.array([1.0, 2.0])).check_finite("probe")
