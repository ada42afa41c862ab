"""Tensor engine: forward semantics, backward rules, and the grad checker.

Expected values here are either hand arithmetic or independent numpy
recomputations; gradient correctness is established against central finite
differences in float64.
"""

import numpy as np
import pytest

import querytrack.autograd as ag
from querytrack.precision import precision


def t(data, grad=True):
    return ag.tensor(np.asarray(data, dtype=float), requires_grad=grad)


# ---------------------------------------------------------------- forward ops

def test_matmul_hand_example():
    out = ag.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_identity_and_zeros():
    a = np.arange(4.0).reshape(2, 2)
    out = ag.matmul(t(np.eye(2)), t(a))
    assert np.array_equal(out.data, a)
    zz = ag.matmul(t(np.zeros((3, 4))), t(np.ones((4, 2))))
    assert np.array_equal(zz.data, np.zeros((3, 2)))


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"2.*3"):
        ag.matmul(t(np.ones((2, 2))), t(np.ones((3, 2))))


def test_softmax_closed_form():
    out = ag.softmax(t([0.0, np.log(3.0)]), axis=-1)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_uniform_and_stability():
    out = ag.softmax(t([0.0, 0.0, 0.0]), axis=-1)
    assert np.allclose(out.data, [1 / 3] * 3)
    big = ag.softmax(t([1000.0, 1000.0]), axis=-1)
    assert np.all(np.isfinite(big.data))
    assert np.allclose(big.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one(rng):
    for _ in range(25):
        x = t(rng.normal(0, 5, (4, 7)))
        out = ag.softmax(x, axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.data >= 0)


def test_softmax_masked_entries_exactly_zero():
    x = t([[1.0, ag.MASK_SENTINEL, 2.0]])
    out = ag.softmax(x, axis=-1)
    assert out.data[0, 1] == 0.0
    assert np.isclose(out.data.sum(), 1.0)


def test_softmax_fully_masked_row_raises():
    x = t([[ag.MASK_SENTINEL, ag.MASK_SENTINEL]])
    with pytest.raises(ValueError, match="fully masked"):
        ag.softmax(x, axis=-1)


def test_conv2d_one_hot_plateau():
    x = np.zeros((1, 5, 5, 1))
    x[0, 2, 2, 0] = 1.0
    k = np.ones((3, 3, 1, 1))
    out = ag.conv2d(t(x), t(k), stride=1)
    expect = np.zeros((5, 5))
    expect[1:4, 1:4] = 1.0
    assert np.array_equal(out.data[0, :, :, 0], expect)


def test_conv2d_identity_1x1():
    x = t(np.random.default_rng(3).normal(0, 1, (2, 4, 4, 3)))
    k = t(np.eye(3).reshape(1, 1, 3, 3))
    out = ag.conv2d(x, k, stride=1)
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_conv2d_zero_kernel():
    x = t(np.ones((1, 4, 4, 2)))
    out = ag.conv2d(x, t(np.zeros((3, 3, 2, 5))), stride=1)
    assert np.array_equal(out.data, np.zeros((1, 4, 4, 5)))


def test_bilinear_hand_example():
    x = t(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))
    out = ag.bilinear_resize(x, 1, 4)
    assert np.allclose(out.data.reshape(-1), [0.0, 0.25, 0.75, 1.0], atol=1e-12)


def test_bilinear_identity_and_constant():
    x = t(np.random.default_rng(1).normal(0, 1, (2, 3, 5, 4)))
    same = ag.bilinear_resize(x, 3, 5)
    assert np.allclose(same.data, x.data, atol=1e-12)
    const = ag.bilinear_resize(t(np.full((1, 2, 2, 1), 7.0)), 5, 3)
    assert np.allclose(const.data, 7.0, atol=1e-12)


def test_roi_pool_constant_map_is_constant():
    feat = t(np.full((6, 6, 2), 3.5))
    out = ag.roi_pool(feat, (4.0, 4.0, 20.0, 20.0), 3, 24.0)
    assert out.data.shape == (3, 3, 2)
    assert np.allclose(out.data, 3.5, atol=1e-12)


def test_roi_pool_degenerate_box_single_sample():
    feat = t(np.arange(36.0).reshape(6, 6, 1))
    out = ag.roi_pool(feat, (12.0, 12.0, 12.0, 12.0), 2, 24.0)
    # a zero-area box replicates the sample at its center
    assert np.allclose(out.data, out.data[0, 0, 0])


# ---------------------------------------------------------------- backward

def test_backward_square():
    x = t(3.0)
    ag.backward(x * x)
    assert np.allclose(x.grad, 6.0)


def test_backward_sum_gives_ones():
    w = t(np.random.default_rng(0).normal(0, 1, (3, 4)))
    ag.backward(w.sum())
    assert np.array_equal(w.grad, np.ones((3, 4)))


def test_backward_requires_scalar():
    x = t([1.0, 2.0])
    with pytest.raises(ValueError):
        ag.backward(x * 2.0)


def test_backward_accumulates_through_reuse():
    x = t(2.0)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    ag.backward(y)
    assert np.allclose(x.grad, 7.0)


def test_intermediate_grads_freed_leaves_kept():
    x = t(np.ones(3))
    mid = x * 2.0
    loss = mid.sum()
    ag.backward(loss)
    assert x.grad is not None
    assert mid.grad is None
    assert mid._ctx is None


def test_no_grad_records_nothing():
    x = t(np.ones(3))
    with ag.no_grad():
        y = x * 2.0
    assert y._ctx is None and not y.requires_grad


def test_unbroadcast_sums_expanded_axes():
    a = t(np.ones((3, 1)))
    b = t(np.ones((1, 4)))
    ag.backward((a + b).sum())
    assert a.grad.shape == (3, 1) and np.allclose(a.grad, 4.0)
    assert b.grad.shape == (1, 4) and np.allclose(b.grad, 3.0)


def test_getitem_scatter_adds():
    x = t(np.arange(5.0))
    y = x[np.array([0, 0, 3])].sum()
    ag.backward(y)
    assert np.array_equal(x.grad, [2.0, 0.0, 0.0, 1.0, 0.0])


def test_concat_and_stack_split_grads():
    a, b = t(np.ones(2)), t(np.ones(3))
    ag.backward((ag.concat([a, b], axis=0) * np.array([1, 2, 3, 4, 5.0])).sum())
    assert np.array_equal(a.grad, [1.0, 2.0])
    assert np.array_equal(b.grad, [3.0, 4.0, 5.0])
    c, d = t(np.ones(2)), t(np.ones(2))
    ag.backward((ag.stack([c, d], axis=0) * np.array([[1, 2], [3, 4.0]])).sum())
    assert np.array_equal(c.grad, [1.0, 2.0])
    assert np.array_equal(d.grad, [3.0, 4.0])


def test_max_min_route_to_first_argmax():
    x = t([[1.0, 5.0, 5.0]])
    ag.backward(x.max(axis=1).sum())
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])
    y = t([[2.0, 1.0, 1.0]])
    ag.backward(y.min(axis=1).sum())
    assert np.array_equal(y.grad, [[0.0, 1.0, 0.0]])


def test_clip_passes_gradient_inside_only():
    x = t([-2.0, 0.5, 2.0])
    ag.backward(ag.clip(x, 0.0, 1.0).sum())
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_where_routes_by_condition():
    x, y = t([1.0, 2.0]), t([3.0, 4.0])
    out = ag.where(np.array([True, False]), x, y)
    ag.backward(out.sum())
    assert np.array_equal(x.grad, [1.0, 0.0])
    assert np.array_equal(y.grad, [0.0, 1.0])


# ------------------------------------------------------- numeric grad sweeps

def _numeric_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


@pytest.mark.parametrize("name,fn", [
    ("exp", ag.exp),
    ("log", lambda x: ag.log(x * x + 1.0)),
    ("sqrt", lambda x: ag.sqrt(x * x + 0.5)),
    ("tanh", ag.tanh),
    ("sigmoid", ag.sigmoid),
    ("gelu", ag.gelu),
    ("abs_shifted", lambda x: abs(x + 0.3)),
    ("mean", lambda x: x.mean()),
    ("reciprocal", lambda x: 1.0 / (x * x + 2.0)),
])
def test_elementwise_backward_matches_numeric(name, fn, rng):
    with precision(np.float64):
        x = t(rng.normal(0, 1, (3, 4)))
        loss = lambda: (fn(x) * fn(x)).sum()
        ag.backward(loss())
        numeric = _numeric_grad(loss, x)
        assert np.allclose(x.grad, numeric, rtol=1e-5, atol=1e-7), name


def test_softmax_backward_matches_numeric(rng):
    with precision(np.float64):
        x = t(rng.normal(0, 2, (2, 5)))
        w = rng.normal(0, 1, (2, 5))
        loss = lambda: (ag.softmax(x, axis=-1) * w).sum()
        ag.backward(loss())
        assert np.allclose(x.grad, _numeric_grad(loss, x), rtol=1e-5, atol=1e-8)


def test_matmul_batched_backward_matches_numeric(rng):
    with precision(np.float64):
        a = t(rng.normal(0, 1, (2, 3, 4)))
        b = t(rng.normal(0, 1, (4, 2)))  # broadcast over the batch
        loss = lambda: (ag.matmul(a, b) ** 2.0).sum()
        ag.backward(loss())
        assert np.allclose(a.grad, _numeric_grad(loss, a), rtol=1e-5, atol=1e-8)
        assert np.allclose(b.grad, _numeric_grad(loss, b), rtol=1e-5, atol=1e-8)


def test_transpose_reshape_backward(rng):
    with precision(np.float64):
        x = t(rng.normal(0, 1, (2, 3, 4)))
        w = rng.normal(0, 1, (4, 6))
        loss = lambda: (x.transpose((2, 0, 1)).reshape(4, 6) * w).sum()
        ag.backward(loss())
        assert np.allclose(x.grad, _numeric_grad(loss, x), rtol=1e-6)


# ---------------------------------------------------------------- grad_check

def test_grad_check_linear_tight_tolerance(rng):
    with precision(np.float64):
        w = t(rng.normal(0, 1, (4, 3)))
        b = t(rng.normal(0, 1, (3,)))
        x = t(rng.normal(0, 1, (2, 4)))
        report = ag.grad_check(lambda: ((x @ w + b) ** 2.0).sum(),
                               [("w", w), ("b", b), ("x", x)], tol=1e-5)
        assert all(r["passed"] for r in report.values())


def test_grad_check_softmax_matmul_composite(rng):
    with precision(np.float64):
        a = t(rng.normal(0, 1, (3, 4)))
        b = t(rng.normal(0, 1, (4, 5)))
        fn = lambda: (ag.softmax(a @ b, axis=-1) ** 2.0).sum()
        report = ag.grad_check(fn, [("a", a), ("b", b)], tol=1e-4)
        assert all(r["passed"] for r in report.values())


def test_grad_check_rejects_nondeterminism():
    state = {"n": 0.0}

    def fn():
        state["n"] += 1.0
        return ag.tensor(np.array(state["n"]))

    with pytest.raises(RuntimeError, match="non-deterministic"):
        ag.grad_check(fn, [])


def test_grad_check_requires_scalar():
    x = t(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        ag.grad_check(lambda: x * 1.0, [("x", x)])


def test_grad_check_flags_wrong_gradient(rng):
    """Negative control: a deliberately broken backward rule must fail."""

    class BadSquare(ag.Function):
        def forward(self, x):
            self.saved = (x,)
            return x * x

        def backward(self, g):
            (x,) = self.saved
            return (g * x,)  # missing the factor of 2

    with precision(np.float64):
        x = t(rng.normal(1, 0.1, (3,)))
        report = ag.grad_check(lambda: BadSquare.apply(x).sum(), [("x", x)])
        assert not report["x"]["passed"]


# ---------------------------------------------------------------- precision

def test_precision_context_switches_dtype():
    assert ag.tensor(1.0).data.dtype == np.float32
    with precision(np.float64):
        assert ag.tensor(1.0).data.dtype == np.float64
    assert ag.tensor(1.0).data.dtype == np.float32


def test_ops_are_deterministic(rng):
    x = rng.normal(0, 1, (4, 4))
    first = ag.softmax(ag.tensor(x) @ ag.tensor(x), axis=-1).data
    second = ag.softmax(ag.tensor(x) @ ag.tensor(x), axis=-1).data
    assert np.array_equal(first, second)
