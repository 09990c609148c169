"""Primitive forward oracles and shape/error contracts."""

import numpy as np
import pytest

from minimoco import ops
from minimoco.grid import (
    Grid,
    NonFiniteError,
    ShapeError,
    Tape,
    reverse_accumulate,
    set_finite_checks,
)


def conv2d_loops(x, w, stride=1, pad=0):
    """Direct nested-loop convolution oracle."""
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow))
    for bi in range(b):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    patch = xp[bi, :, oy * stride : oy * stride + kh,
                               ox * stride : ox * stride + kw]
                    out[bi, co, oy, ox] = (patch * w[co]).sum()
    return out


class TestConv2d:
    def test_ones_kernel_oracle(self):
        out = ops.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 9.0))

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        eye = np.zeros((3, 3, 1, 1))
        for c in range(3):
            eye[c, c, 0, 0] = 1.0
        out = ops.conv2d(x, eye)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 9, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        out = ops.conv2d(x, w, stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_1x1_paths(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(5, 3, 1, 1))
        for stride in (1, 2):
            out = ops.conv2d(x, w, stride=stride)
            np.testing.assert_allclose(out.data, conv2d_loops(x, w, stride, 0),
                                       rtol=1e-12, atol=1e-12)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)))


class TestElementwiseAndReductions:
    def test_l2_normalize_345(self):
        out = ops.l2_normalize(np.array([3.0, 4.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-9)

    def test_avg_pool(self, rng):
        x = rng.normal(size=(1, 2, 4, 6))
        out = ops.avg_pool2d(x, (2, 3))
        expected = x.reshape(1, 2, 2, 2, 2, 3).mean(axis=(3, 5))
        np.testing.assert_allclose(out.data, expected)
        with pytest.raises(ShapeError):
            ops.avg_pool2d(x, (3, 3))

    def test_global_avg_pool(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_allclose(ops.global_avg_pool(x).data, x.mean(axis=(2, 3)))

    def test_logsumexp_stability(self):
        x = np.array([[1000.0, 1000.0, 1000.0]])
        out = ops.logsumexp(x, axis=1)
        np.testing.assert_allclose(out.data, 1000.0 + np.log(3.0))

    def test_bilinear_constant_preserved(self):
        x = np.full((1, 1, 3, 3), 2.5)
        out = ops.bilinear_resize(x, (9, 7))
        np.testing.assert_allclose(out.data, 2.5)

    def test_bilinear_shape(self, rng):
        out = ops.bilinear_resize(rng.normal(size=(2, 3, 8, 8)), (64, 64))
        assert out.data.shape == (2, 3, 64, 64)

    def test_standardize_rows(self):
        out = ops.standardize(np.array([[1.0, 3.0], [2.0, 2.0]]), axes=(1,), eps=1e-12)
        np.testing.assert_allclose(out.data[0], [-1.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(out.data[1], [0.0, 0.0], atol=1e-12)


class TestFiniteness:
    def test_nonfinite_op_raises(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError, match="log"):
                ops.log(np.array([0.0]))

    def test_checks_can_be_disabled(self):
        prev = set_finite_checks(False)
        try:
            with np.errstate(divide="ignore"):
                out = ops.log(np.array([0.0]))
            assert np.isneginf(out.data[0])
        finally:
            set_finite_checks(prev)

    def test_nonfinite_grid_construction(self):
        with pytest.raises(NonFiniteError):
            Grid(np.array([np.nan]))


class TestTape:
    def test_replay_reproduces_bitwise(self, rng):
        tape = Tape()
        x = tape.leaf(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), name="x")
        w = tape.leaf(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), name="w")
        y = ops.relu(ops.conv2d(x, w, stride=2, pad=1))
        z = ops.reduce_mean(y * y)
        tape.mark_output(z)
        assert tape.replay()

    def test_topological_order(self, rng):
        tape = Tape()
        a = tape.leaf(np.ones(3), name="a")
        b = a * 2.0
        c = b + a
        for node in tape.nodes:
            for parent in node.parents:
                assert parent is None or parent < tape.nodes.index(node) + 1

    def test_two_tapes_refuse_to_mix(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones(2), name="a")
        b = t2.leaf(np.ones(2), name="b")
        with pytest.raises(ShapeError, match="different tapes"):
            ops.add(a, b)

    def test_primitive_forward_dispatch(self):
        out = ops.primitive_forward("add", [np.ones(2), np.ones(2)])
        np.testing.assert_array_equal(out.data, [2.0, 2.0])
        with pytest.raises(ShapeError, match="unknown primitive"):
            ops.primitive_forward("frobnicate", [np.ones(2)])
