"""Reverse-mode gradients: analytic backward vs central finite differences."""

import numpy as np
import pytest

from minimoco import ops
from minimoco.grid import (
    DisconnectedOutputError,
    Tape,
    finite_difference_check,
    reverse_accumulate,
)


def test_square_rule():
    tape = Tape()
    x = tape.leaf(np.array(3.0), name="x")
    y = x * x
    tape.mark_output(y)
    grads = reverse_accumulate(tape, 1.0)
    assert float(grads["x"].data) == pytest.approx(6.0)


def test_log_exp_inverse():
    for value in (-2.0, 0.3, 5.0):
        tape = Tape()
        x = tape.leaf(np.array(value), name="x")
        y = ops.log(ops.exp(x))
        tape.mark_output(y)
        grads = reverse_accumulate(tape, 1.0)
        assert float(grads["x"].data) == pytest.approx(1.0, abs=1e-12)


def test_unused_parameter_gets_zero_grid():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]), name="x")
    unused = tape.leaf(np.ones((3, 3)), name="unused")
    y = ops.reduce_sum(x * x)
    tape.mark_output(y)
    grads = reverse_accumulate(tape, 1.0)
    assert grads["unused"].data.shape == (3, 3)
    assert np.all(grads["unused"].data == 0.0)


def test_disconnected_parameter_errors():
    tape = Tape()
    x = tape.leaf(np.ones(2), name="x")
    tape.mark_output(ops.reduce_sum(x))
    with pytest.raises(DisconnectedOutputError):
        reverse_accumulate(tape, 1.0, params=["ghost"])


def test_seed_shape_mismatch():
    tape = Tape()
    x = tape.leaf(np.ones(3), name="x")
    y = x * 2.0
    tape.mark_output(y)
    from minimoco.grid import ShapeError

    with pytest.raises(ShapeError, match="seed"):
        reverse_accumulate(tape, np.ones(4))


def test_backward_linearity(rng):
    """grad(a*f + b*g) == a*grad(f) + b*grad(g) element-wise."""
    point = rng.normal(size=(4, 5))
    a, b = 2.5, -1.25

    def grad_of(fn):
        tape = Tape()
        x = tape.leaf(point, name="x")
        tape.mark_output(fn(x))
        return reverse_accumulate(tape, 1.0)["x"].data

    f = lambda x: ops.reduce_sum(x * x)
    g = lambda x: ops.reduce_sum(ops.exp(x * 0.1))
    combined = lambda x: a * f(x) + b * g(x)
    lhs = grad_of(combined)
    rhs = a * grad_of(f) + b * grad_of(g)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_finite_difference_check_quadratic_form(rng):
    a = rng.normal(size=(4, 4))
    a = a + a.T

    def fn(leaves):
        x = leaves["x"]
        return ops.reduce_sum(x * ops.reshape(ops.matmul(
            ops.reshape(x, (1, 4)), a), (4,)))

    err = finite_difference_check(fn, {"x": rng.normal(size=4)}, eps=1e-6)
    assert err < 1e-8


def test_finite_difference_check_constant():
    err = finite_difference_check(
        lambda leaves: ops.reduce_sum(leaves["x"] * 0.0),
        {"x": np.array([1.0, -2.0])},
    )
    assert err == 0.0


def test_finite_difference_relu_away_from_kink(rng):
    point = rng.normal(size=8)
    point[np.abs(point) < 1e-3] = 0.5

    def fn(leaves):
        return ops.reduce_sum(ops.relu(leaves["x"]))

    assert finite_difference_check(fn, {"x": point}, eps=1e-5) < 1e-6


# randomized gradient checks for every differentiable primitive (>= 100 trials)
def _rand(rng, *shape):
    return rng.normal(size=shape) * 0.7 + 0.1


PRIMITIVE_CASES = {
    "add": lambda L: L["a"] + L["b"],
    "sub": lambda L: L["a"] - L["b"],
    "mul": lambda L: L["a"] * L["b"],
    "div": lambda L: L["a"] / (L["b"] * L["b"] + 1.0),
    "neg": lambda L: -L["a"],
    "exp": lambda L: ops.exp(L["a"]),
    "log": lambda L: ops.log(L["a"] * L["a"] + 0.5),
    "sqrt": lambda L: ops.sqrt(L["a"] * L["a"] + 0.5),
    "relu": lambda L: ops.relu(L["a"] + 0.05),
    "add_relu": lambda L: ops.add_relu(L["a"], L["b"]),
    "matmul": lambda L: ops.matmul(ops.reshape(L["a"], (3, 4)),
                                   ops.reshape(L["b"], (4, 3))),
    "matmul_batched": lambda L: ops.matmul(ops.reshape(L["a"], (2, 3, 2)),
                                           ops.reshape(L["b"], (2, 2, 3))),
    "conv2d": lambda L: ops.conv2d(ops.reshape(L["a"], (1, 2, 4, 4)),
                                   ops.reshape(L["b"], (2, 2, 3, 3)),
                                   stride=1, pad=1),
    "conv2d_strided": lambda L: ops.conv2d(ops.reshape(L["a"], (1, 2, 5, 5)),
                                           ops.reshape(L["b"], (3, 2, 3, 3)),
                                           stride=2, pad=1),
    "avg_pool2d": lambda L: ops.avg_pool2d(ops.reshape(L["a"], (1, 2, 4, 4)), (2, 2)),
    "global_avg_pool": lambda L: ops.global_avg_pool(ops.reshape(L["a"], (2, 2, 2, 2))),
    "reduce_sum": lambda L: ops.reduce_sum(L["a"]),
    "reduce_mean": lambda L: ops.reduce_mean(L["a"], axes=0, keepdims=True),
    "reduce_max": lambda L: ops.reduce_max(L["a"], axes=0),
    "reshape": lambda L: ops.reshape(L["a"], (-1,)),
    "transpose": lambda L: ops.transpose(ops.reshape(L["a"], (2, 3, 2)), (2, 0, 1)),
    "concat": lambda L: ops.concat([L["a"], L["b"]], axis=0),
    "crop2d": lambda L: ops.crop2d(ops.reshape(L["a"], (1, 1, 4, 4)), 1, 2, 0, 3),
    "l2_normalize": lambda L: ops.l2_normalize(L["a"] + 0.3, axis=0),
    "bilinear_resize": lambda L: ops.bilinear_resize(
        ops.reshape(L["a"], (1, 1, 4, 4)), (7, 5)),
    "standardize": lambda L: ops.standardize(ops.reshape(L["a"], (2, 6)), axes=(1,)),
    "batch_norm2d": lambda L: ops.batch_norm2d(ops.reshape(L["a"], (2, 2, 2, 2))),
    "bn_affine2d": lambda L: ops.bn_affine2d(ops.reshape(L["a"], (2, 2, 2, 2)),
                                             L["g"], L["bta"]),
    "logsumexp": lambda L: ops.logsumexp(ops.reshape(L["a"], (3, 4)), axis=1),
}

_SHAPES = {
    "matmul": (12, 12), "matmul_batched": (12, 12),
    "conv2d": (32, 36), "conv2d_strided": (50, 54),
    "avg_pool2d": (32, None), "global_avg_pool": (16, None),
    "transpose": (12, None), "crop2d": (16, None), "bilinear_resize": (16, None),
    "batch_norm2d": (16, None), "bn_affine2d": (16, None),
    "standardize": (12, None), "logsumexp": (12, None),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name, rng):
    """Property: reverse accumulation of a scalar built from each primitive
    matches central differences within 1e-4 at 64-bit (4 trials x 27 cases)."""
    case = PRIMITIVE_CASES[name]
    na, nb = _SHAPES.get(name, (6, 6))
    for trial in range(4):
        point = {"a": _rand(rng, na)}
        if nb is not None:
            point["b"] = _rand(rng, nb)
        if name == "bn_affine2d":
            point["g"] = _rand(rng, 2)
            point["bta"] = _rand(rng, 2)

        def fn(leaves):
            out = case(leaves)
            return ops.reduce_sum(out * out)

        err = finite_difference_check(fn, point, eps=1e-6)
        assert err < 1e-4, f"{name} trial {trial}: FD error {err}"


def test_forward_determinism(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ops.conv2d(x, w, stride=2, pad=1)
    b = ops.conv2d(x, w, stride=2, pad=1)
    assert np.array_equal(a.data, b.data)
