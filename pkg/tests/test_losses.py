"""Contrastive loss oracles: scalar hand computations and brute-force loops."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minimoco import losses, ops
from minimoco.grid import GridError, Tape, reverse_accumulate
from minimoco.losses import (
    ContractViolation,
    PatchGrid,
    SimilarityScores,
    cosine_similarity,
    global_loss,
    info_nce,
    local_loss,
    sample_patch_grid,
    total_loss,
)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def brute_force_global(z_q, z_k, queue, tau, include_positive=True):
    """Explicit-loop reference without stability tricks."""
    total = 0.0
    for i in range(z_q.shape[0]):
        pos = float(z_q[i] @ z_k[i])
        num = math.exp(pos / tau)
        den = num if include_positive else 0.0
        for j in range(queue.shape[0]):
            den += math.exp(float(z_q[i] @ queue[j]) / tau)
        total += -math.log(num / den) if den > 0 else 0.0
    return total / z_q.shape[0]


def brute_force_local(pooled_q, pooled_k, tau, include_positive=True):
    b, k, _ = pooled_q.shape
    total = 0.0
    for bi in range(b):
        for i in range(k):
            pos = cosine_similarity(pooled_q[bi, i], pooled_k[bi, i])
            num = math.exp(pos / tau)
            den = num if include_positive else 0.0
            for j in range(k):
                if j == i:
                    continue
                den += math.exp(cosine_similarity(pooled_q[bi, i], pooled_k[bi, j]) / tau)
            total += -math.log(num / den)
    return total / (b * k)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine_similarity([0.6, 0.8], [0.6, 0.8]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 2.0]) == pytest.approx(0.0)

    def test_45_degrees(self):
        assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(
            0.70710678, abs=1e-7)


class TestInfoNce:
    def test_hand_oracle(self):
        loss = info_nce(SimilarityScores(pos=1.0, negs=[0.0, 0.0], tau=1.0))
        assert loss == pytest.approx(math.log(1 + 2 * math.exp(-1)), abs=1e-12)

    def test_empty_negatives_is_zero(self):
        assert info_nce(SimilarityScores(pos=0.37, negs=[], tau=0.2)) == 0.0

    def test_uniform_scores(self):
        for n, tau in ((3, 0.5), (7, 0.2)):
            loss = info_nce(SimilarityScores(pos=0.4, negs=[0.4] * n, tau=tau))
            assert loss == pytest.approx(math.log(n + 1), abs=1e-12)

    def test_tau_must_be_positive(self):
        with pytest.raises(GridError, match="tau"):
            info_nce(SimilarityScores(pos=1.0, negs=[0.0], tau=0.0))

    @given(st.floats(-5, 5), st.lists(st.floats(-5, 5), min_size=1, max_size=8),
           st.floats(-3, 3))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, pos, negs, shift):
        base = info_nce(SimilarityScores(pos, negs, 0.4))
        shifted = info_nce(SimilarityScores(pos + shift, [n + shift for n in negs], 0.4))
        assert abs(base - shifted) < 1e-10

    def test_monotone_in_pos_and_negs(self):
        base = info_nce(SimilarityScores(0.3, [0.1, -0.2], 0.3))
        assert info_nce(SimilarityScores(0.31, [0.1, -0.2], 0.3)) < base
        assert info_nce(SimilarityScores(0.3, [0.12, -0.2], 0.3)) > base


class TestGlobalLoss:
    def test_empty_queue_zero(self, rng):
        z = unit_rows(rng, 3, 8)
        loss = global_loss(z, z, np.zeros((0, 8)), tau=0.2)
        assert float(loss.data) == 0.0

    def test_single_pair_oracle(self):
        e1 = np.eye(1, 4)
        e2 = np.zeros((1, 4))
        e2[0, 1] = 1.0
        loss = global_loss(e1, e1, e2, tau=0.2)
        assert float(loss.data) == pytest.approx(math.log(1 + math.exp(-5)), abs=1e-9)

    def test_duplicate_queue_entries_brute_force(self, rng):
        z_q, z_k = unit_rows(rng, 3, 6), unit_rows(rng, 3, 6)
        queue = unit_rows(rng, 4, 6)
        doubled = np.concatenate([queue, queue], axis=0)
        ours = float(global_loss(z_q, z_k, doubled, tau=0.3).data)
        ref = brute_force_global(z_q, z_k, doubled, 0.3)
        assert ours == pytest.approx(ref, abs=1e-10)

    def test_matches_brute_force_randomized(self, rng):
        for _ in range(10):
            b = int(rng.integers(1, 5))
            q = int(rng.integers(0, 33))
            z_q, z_k = unit_rows(rng, b, 8), unit_rows(rng, b, 8)
            queue = unit_rows(rng, q, 8) if q else np.zeros((0, 8))
            for include in (True, False):
                ours = float(global_loss(z_q, z_k, queue, 0.2, include).data)
                ref = brute_force_global(z_q, z_k, queue, 0.2, include)
                assert ours == pytest.approx(ref, abs=1e-8)

    def test_unnormalized_rows_rejected(self, rng):
        z = unit_rows(rng, 2, 4)
        with pytest.raises(ContractViolation, match="norm"):
            global_loss(z * 1.5, z, np.zeros((0, 4)), tau=0.2)

    def test_no_gradient_reaches_momentum_side(self, rng):
        tape = Tape()
        zq = tape.leaf(unit_rows(rng, 2, 4), name="zq")
        zk = tape.leaf(unit_rows(rng, 2, 4), name="zk")
        loss = global_loss(ops.l2_normalize(zq, axis=1),
                           ops.l2_normalize(zk, axis=1),
                           unit_rows(rng, 6, 4), tau=0.2)
        tape.mark_output(loss)
        grads = reverse_accumulate(tape, 1.0)
        assert np.all(grads["zk"].data == 0.0)
        assert np.any(grads["zq"].data != 0.0)


class TestPatchGrid:
    def test_square_map_twenty_patches(self):
        fm = np.zeros((2, 3, 64, 64))
        grid = sample_patch_grid(fm, fm, 20)
        assert (grid.rows, grid.cols) == (4, 5)
        assert (grid.patch_h, grid.patch_w) == (16, 12)
        assert grid.pooled_q.data.shape == (2, 20, 3)

    def test_exact_fit_one_by_one(self):
        fm = np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5)
        grid = sample_patch_grid(fm, fm, 20)
        assert (grid.patch_h, grid.patch_w) == (1, 1)
        np.testing.assert_array_equal(
            grid.pooled_q.data, fm.reshape(2, 3, 20).transpose(0, 2, 1))

    def test_constant_map_equal_vectors(self):
        fm = np.full((1, 2, 8, 8), 3.25)
        grid = sample_patch_grid(fm, fm, 4)
        assert np.allclose(grid.pooled_q.data, 3.25)

    def test_pool_values_match_region_means(self, rng):
        fm = rng.normal(size=(1, 2, 8, 10))
        grid = sample_patch_grid(fm, fm, 4)  # 2x2 grid of 4x5 patches
        manual = fm[0, :, 0:4, 0:5].mean(axis=(1, 2))
        np.testing.assert_allclose(grid.pooled_q.data[0, 0], manual)

    def test_too_many_patches(self):
        with pytest.raises(Exception, match="patches"):
            sample_patch_grid(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3)), 20)


class TestLocalLoss:
    def test_orthonormal_oracle(self):
        k = 20
        pooled = np.eye(k)[None]
        grid = PatchGrid(4, 5, 1, 1, losses.as_grid(pooled), losses.as_grid(pooled))
        loss = float(local_loss(grid, tau=1.0).data)
        assert loss == pytest.approx(math.log(1 + 19 * math.exp(-1)), abs=1e-9)

    def test_identical_vectors_k2(self, rng):
        v = rng.normal(size=3)
        pooled = np.tile(v, (1, 2, 1))
        grid = PatchGrid(2, 1, 1, 1, losses.as_grid(pooled), losses.as_grid(pooled))
        assert float(local_loss(grid, tau=0.7).data) == pytest.approx(math.log(2), abs=1e-9)

    def test_nonnegative(self, rng):
        for _ in range(5):
            pooled_q = rng.normal(size=(2, 6, 4))
            pooled_k = rng.normal(size=(2, 6, 4))
            grid = PatchGrid(2, 3, 1, 1, losses.as_grid(pooled_q), losses.as_grid(pooled_k))
            assert float(local_loss(grid, tau=0.2).data) >= 0.0

    def test_matches_brute_force(self, rng):
        for k in (4, 20):
            pooled_q = rng.normal(size=(2, k, 5))
            pooled_k = rng.normal(size=(2, k, 5))
            grid = PatchGrid(1, k, 1, 1, losses.as_grid(pooled_q), losses.as_grid(pooled_k))
            for include in (True, False):
                ours = float(local_loss(grid, 0.25, include).data)
                ref = brute_force_local(pooled_q, pooled_k, 0.25, include)
                assert ours == pytest.approx(ref, abs=1e-8)

    def test_needs_two_patches(self, rng):
        pooled = rng.normal(size=(1, 1, 3))
        grid = PatchGrid(1, 1, 1, 1, losses.as_grid(pooled), losses.as_grid(pooled))
        with pytest.raises(GridError, match="2 patches"):
            local_loss(grid, tau=0.2)


class TestTotalLoss:
    def test_examples(self):
        assert float(total_loss(0.5, 2.0, 0.0).data) == 0.5
        assert float(total_loss(0.5, 2.0, 1.0).data) == 2.5

    def test_affine_in_local(self):
        lam = 0.7
        l0 = float(total_loss(0.3, 0.0, lam).data)
        l1 = float(total_loss(0.3, 1.0, lam).data)
        assert l1 - l0 == pytest.approx(lam, abs=1e-15)

    def test_negative_lambda_rejected(self):
        with pytest.raises(GridError, match="lambda"):
            total_loss(0.1, 0.1, -1.0)

    def test_gradient_linearity_in_lambda(self, rng):
        """grad(global + lam*local) == grad(global) + lam*grad(local)."""
        lam = 0.6
        point = rng.normal(size=(2, 4))
        queue = unit_rows(rng, 5, 4)
        zk = unit_rows(rng, 2, 4)
        pooled_k = rng.normal(size=(1, 2, 4))

        def grads_for(mode):
            tape = Tape()
            raw = tape.leaf(point, name="p")
            zq = ops.l2_normalize(raw, axis=1)
            g = global_loss(zq, zk, queue, 0.2)
            grid = PatchGrid(1, 2, 1, 1, ops.reshape(raw, (1, 2, 4)),
                             losses.as_grid(pooled_k))
            l = local_loss(grid, 0.2)
            out = {"g": g, "l": l, "t": total_loss(g, l, lam)}[mode]
            tape.mark_output(out)
            return reverse_accumulate(tape, 1.0)["p"].data

        np.testing.assert_allclose(
            grads_for("t"), grads_for("g") + lam * grads_for("l"), atol=1e-10)
