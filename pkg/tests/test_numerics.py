"""Tests for the tensor substrate.

The gradient tests lean on two oracles: ``numeric_grad`` below, a
central-difference differentiator written independently of the library
(and before it), and the library's own ``finite_diff_check``, whose
contract is itself tested here against a linear loss and a deliberately
corrupted gradient.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import adaptkt.numerics as nm
from adaptkt.errors import NumericError, ShapeError


def numeric_grad(loss_fn, param: nm.Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences d loss / d param, one entry at a time.

    Mutates param.data in place and restores it; loss_fn must rebuild the
    graph from live data on every call.
    """
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn().item()
        flat[i] = orig - eps
        lo = loss_fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity_returns_vector():
    eye = nm.constant(np.eye(2))
    v = nm.constant([3.0, -1.5])
    out = nm.matmul(eye, v)
    assert np.array_equal(out.data, [3.0, -1.5])


def test_sigmoid_at_zero_is_half():
    assert nm.sigmoid(nm.constant(0.0)).item() == 0.5


def test_reduce_max_single_row_returns_that_row():
    x = nm.constant([[2.0, -7.0, 4.0]])
    out = nm.reduce_max(x, axis=0)
    assert np.array_equal(out.data, [2.0, -7.0, 4.0])


def test_sigmoid_is_stable_for_large_inputs():
    out = nm.sigmoid(nm.constant([-800.0, 800.0]))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(0.0, abs=1e-300)
    assert out.data[1] == pytest.approx(1.0)


def test_binary_cross_entropy_clamps_extreme_probabilities():
    p = nm.constant([0.0, 1.0])
    t = nm.constant([1.0, 0.0])
    out = nm.binary_cross_entropy(p, t)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# backward pass: analytic cases
# ---------------------------------------------------------------------------

def test_gradient_of_sum_is_all_ones():
    p = nm.parameter(np.arange(6.0).reshape(2, 3))
    (g,) = nm.gradients(nm.reduce_sum(p), [p])
    assert np.array_equal(g, np.ones((2, 3)))


def test_gradient_of_sigmoid_dot_at_zero_is_quarter_x():
    # w chosen orthogonal to x so w.x = 0 and sigma'(0) = 1/4 exactly
    x = np.array([1.0, 2.0, -1.0])
    w = nm.parameter([2.0, 0.0, 2.0])
    loss = nm.sigmoid(nm.matmul(w, nm.constant(x.reshape(3, 1))))
    (g,) = nm.gradients(nm.reduce_sum(loss), [w])
    assert np.allclose(g, 0.25 * x)


def test_detached_parameter_gets_zero_gradient_not_error():
    used = nm.parameter([1.0, 2.0])
    unused = nm.parameter(np.ones((3, 3)))
    gs = nm.gradients(nm.reduce_sum(nm.mul(used, used)), [used, unused])
    assert np.allclose(gs[0], 2.0 * used.data)
    assert np.array_equal(gs[1], np.zeros((3, 3)))


def test_backward_rejects_non_scalar_loss():
    p = nm.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        nm.backward(nm.mul(p, p))


def test_gradient_accumulates_when_parameter_is_reused():
    p = nm.parameter([3.0])
    loss = nm.reduce_sum(nm.mul(p, p) + nm.scale_add(p, 5.0, 0.0))
    (g,) = nm.gradients(loss, [p])
    assert np.allclose(g, [2.0 * 3.0 + 5.0])


def test_gather_rows_accumulates_over_repeated_indices():
    table = nm.parameter(np.arange(8.0).reshape(4, 2))
    picked = nm.gather_rows(table, [1, 1, 3])
    (g,) = nm.gradients(nm.reduce_sum(picked), [table])
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.array_equal(g, expect)


def test_reduce_max_tie_routes_gradient_to_first_argmax():
    p = nm.parameter([[5.0, 5.0, 1.0]])
    (g,) = nm.gradients(nm.reduce_sum(nm.reduce_max(p, axis=1)), [p])
    assert np.array_equal(g, [[1.0, 0.0, 0.0]])


# ---------------------------------------------------------------------------
# backward pass: every primitive vs the independent oracle
# ---------------------------------------------------------------------------

def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _weighted_sum(out: nm.Tensor, rng) -> nm.Tensor:
    """Collapse to a scalar through a fixed random weighting.

    A plain sum would hide transposition mistakes in matrix gradients, so
    every output entry gets its own coefficient.
    """
    c = nm.constant(rng.uniform(0.5, 1.5, size=out.shape))
    return nm.reduce_sum(nm.mul(out, c))


PRIMITIVE_CASES = [
    "add",
    "sub",
    "mul",
    "scale_add",
    "matmul_22",
    "matmul_21",
    "matmul_12",
    "linear_batched",
    "linear_vector",
    "linear_no_bias",
    "concat_axis0",
    "concat_axis1",
    "stack",
    "slice_axis",
    "gather_rows",
    "reshape",
    "sigmoid",
    "tanh",
    "exp",
    "reduce_sum_all",
    "reduce_sum_axis0",
    "reduce_mean_all",
    "reduce_mean_axis1",
    "reduce_max_axis0",
    "reduce_max_axis1",
    "squared_diff",
    "binary_cross_entropy",
]


def _build_case(name: str, rng):
    """Return (params, loss_fn) for one primitive under test."""
    if name in ("add", "sub", "mul", "squared_diff"):
        a = nm.parameter(_rand(rng, 2, 3))
        b = nm.parameter(_rand(rng, 2, 3))
        op = getattr(nm, name)
        return [a, b], lambda: _weighted_sum(op(a, b), np.random.default_rng(0))
    if name == "scale_add":
        a = nm.parameter(_rand(rng, 4))
        return [a], lambda: _weighted_sum(nm.scale_add(a, -2.5, 0.75), np.random.default_rng(0))
    if name == "matmul_22":
        a = nm.parameter(_rand(rng, 2, 3))
        b = nm.parameter(_rand(rng, 3, 4))
        return [a, b], lambda: _weighted_sum(nm.matmul(a, b), np.random.default_rng(0))
    if name == "matmul_21":
        a = nm.parameter(_rand(rng, 2, 3))
        b = nm.parameter(_rand(rng, 3))
        return [a, b], lambda: _weighted_sum(nm.matmul(a, b), np.random.default_rng(0))
    if name == "matmul_12":
        a = nm.parameter(_rand(rng, 3))
        b = nm.parameter(_rand(rng, 3, 2))
        return [a, b], lambda: _weighted_sum(nm.matmul(a, b), np.random.default_rng(0))
    if name == "linear_batched":
        x = nm.parameter(_rand(rng, 3, 4))
        w = nm.parameter(_rand(rng, 2, 4))
        b = nm.parameter(_rand(rng, 2))
        return [x, w, b], lambda: _weighted_sum(nm.linear(x, w, b), np.random.default_rng(0))
    if name == "linear_vector":
        x = nm.parameter(_rand(rng, 4))
        w = nm.parameter(_rand(rng, 2, 4))
        b = nm.parameter(_rand(rng, 2))
        return [x, w, b], lambda: _weighted_sum(nm.linear(x, w, b), np.random.default_rng(0))
    if name == "linear_no_bias":
        x = nm.parameter(_rand(rng, 3, 4))
        w = nm.parameter(_rand(rng, 2, 4))
        return [x, w], lambda: _weighted_sum(nm.linear(x, w), np.random.default_rng(0))
    if name == "concat_axis0":
        a = nm.parameter(_rand(rng, 2, 3))
        b = nm.parameter(_rand(rng, 1, 3))
        return [a, b], lambda: _weighted_sum(nm.concat([a, b], axis=0), np.random.default_rng(0))
    if name == "concat_axis1":
        a = nm.parameter(_rand(rng, 2, 2))
        b = nm.parameter(_rand(rng, 2, 3))
        return [a, b], lambda: _weighted_sum(nm.concat([a, b], axis=1), np.random.default_rng(0))
    if name == "stack":
        a = nm.parameter(_rand(rng, 3))
        b = nm.parameter(_rand(rng, 3))
        return [a, b], lambda: _weighted_sum(nm.stack([a, b]), np.random.default_rng(0))
    if name == "slice_axis":
        a = nm.parameter(_rand(rng, 3, 5))
        return [a], lambda: _weighted_sum(nm.slice_axis(a, 1, 1, 4), np.random.default_rng(0))
    if name == "gather_rows":
        a = nm.parameter(_rand(rng, 4, 3))
        return [a], lambda: _weighted_sum(nm.gather_rows(a, [0, 2, 2, 1]), np.random.default_rng(0))
    if name == "reshape":
        a = nm.parameter(_rand(rng, 2, 6))
        return [a], lambda: _weighted_sum(nm.reshape(a, (3, 4)), np.random.default_rng(0))
    if name in ("sigmoid", "tanh", "exp"):
        a = nm.parameter(_rand(rng, 2, 3))
        op = getattr(nm, name)
        return [a], lambda: _weighted_sum(op(a), np.random.default_rng(0))
    if name == "reduce_sum_all":
        a = nm.parameter(_rand(rng, 2, 3))
        return [a], lambda: nm.reduce_sum(a)
    if name == "reduce_sum_axis0":
        a = nm.parameter(_rand(rng, 2, 3))
        return [a], lambda: _weighted_sum(nm.reduce_sum(a, axis=0), np.random.default_rng(0))
    if name == "reduce_mean_all":
        a = nm.parameter(_rand(rng, 2, 3))
        return [a], lambda: nm.reduce_mean(a)
    if name == "reduce_mean_axis1":
        a = nm.parameter(_rand(rng, 2, 3))
        return [a], lambda: _weighted_sum(nm.reduce_mean(a, axis=1), np.random.default_rng(0))
    if name == "reduce_max_axis0":
        a = nm.parameter(_rand(rng, 3, 4))
        return [a], lambda: _weighted_sum(nm.reduce_max(a, axis=0), np.random.default_rng(0))
    if name == "reduce_max_axis1":
        a = nm.parameter(_rand(rng, 3, 4))
        return [a], lambda: _weighted_sum(nm.reduce_max(a, axis=1), np.random.default_rng(0))
    if name == "binary_cross_entropy":
        p = nm.parameter(rng.uniform(0.1, 0.9, size=(2, 3)))
        t = nm.parameter(rng.uniform(0.1, 0.9, size=(2, 3)))
        return [p, t], lambda: _weighted_sum(
            nm.binary_cross_entropy(p, t), np.random.default_rng(0)
        )
    raise AssertionError(f"unknown case {name}")


@pytest.mark.parametrize("name", PRIMITIVE_CASES)
def test_primitive_gradient_matches_central_differences(name):
    rng = np.random.default_rng(17)
    params, loss_fn = _build_case(name, rng)
    analytic = nm.gradients(loss_fn(), params)
    for p, a in zip(params, analytic):
        numeric = numeric_grad(loss_fn, p)
        assert max_rel_err(a, numeric) < 5e-6, f"{name}: grad of {p.shape} off"


def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = nm.constant(rng.uniform(-1, 1, size=(2, 3)))
    w1 = nm.glorot_uniform(3, 4, rng=rng, name="w1")
    b1 = nm.zeros(4)
    w2 = nm.glorot_uniform(4, 3, rng=rng, name="w2")
    b2 = nm.zeros(3)
    w3 = nm.parameter(rng.uniform(-1, 1, size=3))

    def loss_fn():
        h1 = nm.tanh(nm.linear(x, w1, b1))
        h2 = nm.sigmoid(nm.linear(h1, w2, b2))
        return nm.reduce_sum(nm.matmul(h2, w3))

    err = nm.finite_diff_check(loss_fn, [w1, b1, w2, b2, w3], eps=1e-4)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# glorot_uniform
# ---------------------------------------------------------------------------

def test_glorot_same_seed_is_bitwise_identical():
    a = nm.glorot_uniform(3, 3, seed=7)
    b = nm.glorot_uniform(3, 3, seed=7)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, nm.glorot_uniform(3, 3, seed=8).data)


def test_glorot_bound_for_100_by_100():
    t = nm.glorot_uniform(100, 100, seed=1)
    bound = np.sqrt(6.0 / 200.0)
    assert t.shape == (100, 100)
    assert np.all(np.abs(t.data) <= bound)
    assert bound == pytest.approx(0.17320508, abs=1e-8)


def test_glorot_sample_mean_near_zero():
    t = nm.glorot_uniform(100, 1000, seed=5)  # 1e5 draws
    assert abs(t.data.mean()) < 0.005


def test_glorot_rejects_zero_fan():
    with pytest.raises(ShapeError):
        nm.glorot_uniform(0, 5, seed=1)


@given(
    n_in=st.integers(min_value=1, max_value=40),
    n_out=st.integers(min_value=1, max_value=40),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=60, deadline=None)
def test_glorot_entries_always_within_bound(n_in, n_out, seed):
    t = nm.glorot_uniform(n_in, n_out, seed=seed)
    assert np.all(np.abs(t.data) <= np.sqrt(6.0 / (n_in + n_out)))


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = nm.parameter([1.0, -2.0])
    before = p.data.copy()
    state = nm.AdamState.for_params([p])
    nm.adam_step([p], [np.zeros(2)], state, lr=0.1)
    assert np.array_equal(p.data, before)


def test_adam_single_step_descends_quadratic():
    w = nm.parameter([1.0])
    state = nm.AdamState.for_params([w])
    (g,) = nm.gradients(nm.reduce_sum(nm.mul(w, w)), [w])
    nm.adam_step([w], [g], state, lr=0.1)
    assert w.data[0] < 1.0


def test_adam_converges_on_shifted_quadratic():
    w = nm.parameter([0.0])
    opt = nm.Adam([w], lr=0.05)
    target = nm.constant([3.0])
    for _ in range(500):
        loss = nm.reduce_sum(nm.squared_diff(w, target))
        opt.step(nm.gradients(loss, [w]))
    assert abs(w.data[0] - 3.0) < 0.05


def test_adam_rejects_nan_gradient_before_mutating():
    p = nm.parameter([1.0, 2.0])
    q = nm.parameter([5.0])
    before_p, before_q = p.data.copy(), q.data.copy()
    state = nm.AdamState.for_params([p, q])
    with pytest.raises(NumericError):
        nm.adam_step([p, q], [np.ones(2), np.array([np.nan])], state, lr=0.1)
    assert np.array_equal(p.data, before_p)
    assert np.array_equal(q.data, before_q)
    assert state.step == 0


def test_adam_state_shapes_must_align():
    p = nm.parameter([1.0, 2.0])
    state = nm.AdamState.for_params([p])
    with pytest.raises(ShapeError):
        nm.adam_step([p], [np.ones(3)], state, lr=0.1)


def test_training_is_deterministic_given_seed():
    def run():
        w = nm.glorot_uniform(4, 4, seed=11)
        x = nm.constant(np.random.default_rng(2).uniform(-1, 1, size=(5, 4)))
        opt = nm.Adam([w], lr=0.01)
        for _ in range(25):
            loss = nm.reduce_sum(nm.squared_diff(nm.sigmoid(nm.linear(x, w)), nm.constant(np.full((5, 4), 0.3))))
            opt.step(nm.gradients(loss, [w]))
        return w.data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# finite_diff_check contract
# ---------------------------------------------------------------------------

def test_finite_diff_exact_on_linear_loss():
    p = nm.parameter([2.0, -1.0, 0.5])
    c = nm.constant([3.0, 1.0, -2.0])
    err = nm.finite_diff_check(lambda: nm.reduce_sum(nm.mul(p, c)), [p], eps=1e-4)
    assert err < 1e-8


def test_finite_diff_flags_corrupted_gradient():
    p = nm.parameter([1.5, -0.5])

    def bad_square(x: nm.Tensor) -> nm.Tensor:
        # Hand-built node whose backward rule is wrong on purpose: it
        # reports 3x instead of 2x.  The checker has to notice.
        out = nm.Tensor(x.data * x.data)
        out.requires_grad = True
        out._inputs = (x,)

        def vjp(g):
            x.grad += 3.0 * x.data * g

        out._vjp = vjp
        return out

    err = nm.finite_diff_check(lambda: nm.reduce_sum(bad_square(p)), [p], eps=1e-4)
    assert err > 1e-2


def test_finite_diff_rejects_non_finite_loss():
    p = nm.parameter([np.inf])
    with pytest.raises(NumericError):
        nm.finite_diff_check(lambda: nm.reduce_sum(p), [p], eps=1e-4)


# ---------------------------------------------------------------------------
# shape errors
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "build",
    [
        lambda: nm.add(nm.constant(np.ones((2, 3))), nm.constant(np.ones((3, 2)))),
        lambda: nm.mul(nm.constant(np.ones(3)), nm.constant(np.ones(4))),
        lambda: nm.matmul(nm.constant(np.ones((2, 3))), nm.constant(np.ones((2, 3)))),
        lambda: nm.linear(nm.constant(np.ones((2, 3))), nm.constant(np.ones((4, 5)))),
        lambda: nm.reshape(nm.constant(np.ones(6)), (4, 2)),
        lambda: nm.stack([nm.constant(np.ones(2)), nm.constant(np.ones(3))]),
        lambda: nm.squared_diff(nm.constant(np.ones(2)), nm.constant(np.ones(3))),
    ],
)
def test_shape_mismatch_raises_structured_error(build):
    with pytest.raises(ShapeError) as exc:
        build()
    # the message names both shapes so failures are debuggable from logs
    assert "(" in str(exc.value)


def test_gather_rows_rejects_out_of_range_index():
    with pytest.raises(ShapeError):
        nm.gather_rows(nm.constant(np.ones((3, 2))), [0, 3])


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6))
@settings(max_examples=25, deadline=None)
def test_product_rule_gradient_is_exact_for_sum_of_products(rows, cols):
    rng = np.random.default_rng(rows * 7 + cols)
    a = nm.parameter(rng.normal(size=(rows, cols)))
    b = nm.parameter(rng.normal(size=(rows, cols)))
    ga, gb = nm.gradients(nm.reduce_sum(nm.mul(a, b)), [a, b])
    assert np.array_equal(ga, b.data)
    assert np.array_equal(gb, a.data)
