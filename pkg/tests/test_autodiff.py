import numpy as np
import pytest

from addl.autodiff import Adam, AdamState, NonFiniteError, ShapeError, StepDecay, Tensor, adam_step, no_grad, ops
from addl.autodiff.checkpoint import CheckpointError, dumps, loads, model_id
from addl.autodiff.gradcheck import grad_check
from addl.selftest import GRAD_CASES, run_grad_suite


def conv2d_loops(x, w, b, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for a in range(kh):
                            for d in range(kw):
                                acc += w[o, c, a, d] * xp[n, c, i * stride + a, j * stride + d]
                    out[n, o, i, j] = acc
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 3, 8, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((2, 3, 4, 4))  # (in, out) for the transposed conv
    x = rng.standard_normal((1, 2, 5, 6))
    y = rng.standard_normal((1, 3, 10, 12))
    up = ops.conv_transpose2d(Tensor(x), Tensor(w), None, 2, 1).data
    down = ops.conv2d(Tensor(y), Tensor(w), None, 2, 1).data
    assert up.shape == y.shape
    assert np.isclose((up * y).sum(), (x * down).sum(), rtol=1e-12)


def test_maxpool_matches_scan_and_routes_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 4))
    t = Tensor(x, requires_grad=True)
    out = ops.maxpool2(t)
    expect = np.zeros((2, 3, 3, 2))
    grad = np.zeros_like(x)
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(2):
                    win = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    expect[n, c, i, j] = win.max()
                    a, b = np.unravel_index(np.argmax(win), (2, 2))
                    grad[n, c, 2 * i + a, 2 * j + b] = 1.0
    np.testing.assert_array_equal(out.data, expect)
    ops.sum_all(out).backward()
    np.testing.assert_array_equal(t.grad, grad)


def test_maxpool_tie_goes_to_first_element():
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.sum_all(ops.maxpool2(t)).backward()
    np.testing.assert_array_equal(t.grad[0, 0], [[1, 0], [0, 0]])


def test_bilinear_up2_closed_form():
    x = np.arange(12, dtype=float).reshape(1, 1, 3, 4) ** 1.5
    up = ops.bilinear_up2(Tensor(x)).data[0, 0]

    def up1(v):
        n = len(v)
        out = np.empty(2 * n)
        for i in range(n):
            lo, hi = v[max(i - 1, 0)], v[min(i + 1, n - 1)]
            out[2 * i] = 0.25 * lo + 0.75 * v[i]
            out[2 * i + 1] = 0.75 * v[i] + 0.25 * hi
        return out

    rows = np.stack([up1(r) for r in x[0, 0]])
    expect = np.stack([up1(c) for c in rows.T]).T
    np.testing.assert_allclose(up, expect, rtol=1e-13)


def test_bilinear_preserves_constants():
    up = ops.bilinear_up2(Tensor(np.full((1, 2, 3, 5), 0.3))).data
    np.testing.assert_allclose(up, 0.3, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    (res,) = run_grad_suite(instances=4, seed=11, names=[name])
    assert res.passed, f"{name}: {res.max_error:.3e}"


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return Tensor._make(x.data**2, (x,), lambda g: (g * x.data,), "bad_square")

    rep = grad_check(bad, [np.array([1.0, 2.0, -0.5])])
    assert not rep.passed
    assert rep.max_rel_error > 0.4


def test_straight_through_gradient_is_identity():
    x = Tensor(np.array([0.2, 1.7, -3.4]), requires_grad=True)
    y = ops.straight_through(x, np.round(x.data))
    np.testing.assert_array_equal(y.data, [0.0, 2.0, -3.0])
    y.backward(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(x.grad, [1.0, 2.0, 3.0])
    # equals the gradient of the identity surrogate under the same check
    rep = grad_check(lambda t: ops.straight_through(t, t.data), [x.data])
    assert rep.passed


def test_gradient_accumulates_over_shared_inputs():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    y = ops.sum_all(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ops.mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


def test_shape_errors_are_explicit():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ops.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 4, 9, 9)), rng.standard_normal((5, 4, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = ops.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_step_decay_schedule():
    s = StepDecay(1e-4, 0.5, 500, 1.25e-5)
    assert s(0) == 1e-4 and s(499) == 1e-4
    assert s(500) == 5e-5
    assert s(1000) == 2.5e-5
    assert s(1500) == 1.25e-5
    assert s(10_000) == 1.25e-5


def test_adam_first_step_by_hand():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -0.1])
    state = AdamState(StepDecay(0.1, 0.5, 1000, 0.0))
    lr = adam_step({"p": p}, {"p": g}, state)
    m = 0.1 * g
    v = 0.001 * g * g
    expect = np.array([1.0, -2.0]) - 0.1 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    assert lr == 0.1
    np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)


def test_adam_two_steps_by_hand():
    p = Tensor(np.array([0.3]), requires_grad=True)
    state = AdamState(StepDecay(0.01, 0.5, 10, 0.0))
    m = v = 0.0
    val = 0.3
    for t, g in enumerate([0.2, -0.4], start=1):
        adam_step({"p": p}, {"p": np.array([g])}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        val -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.isclose(p.data[0], val, rtol=0, atol=1e-15)


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    opt = Adam({"p": p}, StepDecay(0.1, 0.5, 100, 1e-3))
    for _ in range(300):
        opt.zero_grad()
        ops.sum_all(p * p).backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


def test_checkpoint_round_trip_and_corruption():
    w = {"b/x": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "c": np.zeros((1, 2, 1, 1))}
    blob = dumps(w)
    back = loads(blob)
    assert sorted(back) == sorted(w)
    for k in w:
        assert back[k].shape == w[k].shape
        assert back[k].tobytes() == w[k].tobytes()
    assert dumps(back) == blob
    assert model_id(blob) == model_id(dumps(dict(reversed(list(w.items())))))
    bad = bytearray(blob)
    bad[10] ^= 1
    with pytest.raises(CheckpointError):
        loads(bytes(bad))
    with pytest.raises(CheckpointError):
        loads(blob[:-5])
