"""Contrastive objectives: global InfoNCE, patch-level local InfoNCE, and
their weighted combination, plus the non-overlapping patch-grid sampler.

The batched losses are differentiable through the query branch only: key-side
inputs (momentum features, queue entries) are detached inside, so no gradient
ever reaches the momentum encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .grid import Grid, GridError, ShapeError, as_grid

__all__ = [
    "SimilarityScores",
    "PatchGrid",
    "ContractViolation",
    "cosine_similarity",
    "info_nce",
    "global_loss",
    "sample_patch_grid",
    "local_loss",
    "total_loss",
]


class ContractViolation(GridError):
    """An input violated a documented precondition (e.g. non-unit rows)."""


@dataclass
class SimilarityScores:
    """One anchor's similarity to its positive and to each negative."""

    pos: float
    negs: Sequence[float]
    tau: float = 0.2


def cosine_similarity(a, b) -> float:
    """Dot product over norms, eps-guarded; result clipped to [-1, 1]."""
    av = np.asarray(a.data if isinstance(a, Grid) else a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b.data if isinstance(b, Grid) else b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ShapeError(f"cosine_similarity: shapes differ, {av.shape} vs {bv.shape}")
    denom = (np.linalg.norm(av) + 1e-12) * (np.linalg.norm(bv) + 1e-12)
    return float(np.clip(av @ bv / denom, -1.0, 1.0))


def info_nce(scores: SimilarityScores, include_positive: bool = True) -> float:
    """Scalar InfoNCE with max-subtraction for stability.

    With no negatives the positive has probability one and the loss is
    exactly 0.  ``include_positive`` controls whether the positive term
    enters the denominator (default) or only the negatives do.
    """
    if scores.tau <= 0:
        raise GridError(f"info_nce: tau must be positive, got {scores.tau}")
    negs = np.asarray(scores.negs, dtype=np.float64)
    if negs.size == 0:
        return 0.0
    pos = float(scores.pos) / scores.tau
    logits = negs / scores.tau
    if include_positive:
        logits = np.concatenate([[pos], logits])
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - pos)


def _check_unit_rows(name: str, arr: np.ndarray, tol: float = 1e-3) -> None:
    norms = np.linalg.norm(np.asarray(arr, dtype=np.float64), axis=1)
    # non-finite rows fall through to the caller's non-finite-loss handling
    bad = np.isfinite(norms) & (np.abs(norms - 1.0) > tol)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise ContractViolation(
            f"{name}: row {idx} has norm {norms[idx]:.6f}, expected 1 +/- {tol}"
        )


def global_loss(z_q, z_k, queue, tau: float, include_positive: bool = True) -> Grid:
    """Batch-mean InfoNCE of positives against the negative queue.

    ``z_q`` rows pair with ``z_k`` rows; all queue entries serve as negatives
    for every anchor.  ``z_k`` and ``queue`` are gradient-stopped.
    """
    if tau <= 0:
        raise GridError(f"global_loss: tau must be positive, got {tau}")
    zq = as_grid(z_q)
    zk = as_grid(z_k).detach()
    q = as_grid(queue).detach()
    if zq.data.shape != zk.data.shape or zq.data.ndim != 2:
        raise ShapeError(
            f"global_loss: query/key shapes differ, {zq.shape} vs {zk.shape}"
        )
    _check_unit_rows("global_loss: z_q", zq.data)
    _check_unit_rows("global_loss: z_k", zk.data)
    if q.data.size:
        _check_unit_rows("global_loss: queue", q.data)
    inv_tau = 1.0 / tau
    pos = ops.reduce_sum(zq * zk, axes=1, keepdims=True)  # [B, 1]
    if q.data.size == 0:
        zero = ops.reduce_mean(pos - pos)
        return zero
    negs = zq @ ops.transpose(q, (1, 0))  # [B, Q]
    if include_positive:
        logits = ops.concat([pos, negs], axis=1)
    else:
        logits = negs
    lse = ops.logsumexp(logits * inv_tau, axis=1)  # [B]
    return ops.reduce_mean(lse - ops.reshape(pos, (pos.data.shape[0],)) * inv_tau)


@dataclass
class PatchGrid:
    """Average-pooled non-overlapping patches from two aligned feature maps."""

    rows: int
    cols: int
    patch_h: int
    patch_w: int
    pooled_q: Grid  # [B, K, C]
    pooled_k: Grid  # [B, K, C]

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols


def _choose_grid(k: int, h: int, w: int) -> tuple[int, int]:
    """Factor pair (rows, cols) of k with rows/cols closest to h/w.

    Pairs whose patches would be empty are skipped; ties prefer more rows.
    """
    target = h / w
    best = None
    for rows in range(1, k + 1):
        if k % rows:
            continue
        cols = k // rows
        if h // rows < 1 or w // cols < 1:
            continue
        score = abs(rows / cols - target)
        if best is None or score < best[0] or (score == best[0] and rows > best[1]):
            best = (score, rows, cols)
    if best is None:
        raise ShapeError(f"sample_patch_grid: cannot tile {k} patches onto {h}x{w}")
    return best[1], best[2]


def _pool_patches(fm: Grid, rows, cols, ph, pw) -> Grid:
    b, c = fm.data.shape[0], fm.data.shape[1]
    tiled = fm
    if (rows * ph, cols * pw) != tuple(fm.data.shape[2:]):
        tiled = ops.crop2d(fm, 0, rows * ph, 0, cols * pw)
    pooled = ops.avg_pool2d(tiled, (ph, pw))  # [B, C, rows, cols]
    return ops.transpose(ops.reshape(pooled, (b, c, rows * cols)), (0, 2, 1))


def sample_patch_grid(fm_q, fm_k, k: int) -> PatchGrid:
    """Tile both views with the same K-patch grid and average-pool each patch.

    The two maps must be spatially aligned (geometric augmentations off), so
    patch i in both views covers the same image region.
    """
    q = as_grid(fm_q)
    kk = as_grid(fm_k)
    if q.data.shape != kk.data.shape or q.data.ndim != 4:
        raise ShapeError(
            f"sample_patch_grid: feature maps differ, {q.shape} vs {kk.shape}"
        )
    b, c, h, w = q.data.shape
    if h * w < k:
        raise ShapeError(f"sample_patch_grid: {k} patches exceed {h}x{w} locations")
    rows, cols = _choose_grid(k, h, w)
    ph, pw = h // rows, w // cols
    return PatchGrid(
        rows=rows, cols=cols, patch_h=ph, patch_w=pw,
        pooled_q=_pool_patches(q, rows, cols, ph, pw),
        pooled_k=_pool_patches(kk, rows, cols, ph, pw),
    )


def local_loss(patches: PatchGrid, tau: float, include_positive: bool = True) -> Grid:
    """Patch-level InfoNCE within each image: same-location pairs are
    positives, other locations in the momentum view are negatives."""
    if tau <= 0:
        raise GridError(f"local_loss: tau must be positive, got {tau}")
    k = patches.num_patches
    if k < 2:
        raise GridError(f"local_loss: need at least 2 patches, got {k}")
    inv_tau = 1.0 / tau
    qn = ops.l2_normalize(patches.pooled_q, axis=2)
    kn = ops.l2_normalize(patches.pooled_k.detach(), axis=2)
    sims = qn @ ops.transpose(kn, (0, 2, 1))  # [B, K, K]
    pos = ops.reduce_sum(qn * kn, axes=2)     # [B, K]
    if include_positive:
        lse = ops.logsumexp(sims * inv_tau, axis=2)
    else:
        # exclude the positive location from the denominator
        mask = np.where(np.eye(k, dtype=bool), -1e30, 0.0).astype(sims.data.dtype)[None]
        lse = ops.logsumexp(sims * inv_tau + as_grid(mask), axis=2)
    return ops.reduce_mean(lse - pos * inv_tau)


def total_loss(l_global, l_local, lam: float) -> Grid:
    """Weighted sum of the global and local objectives."""
    if lam < 0:
        raise GridError(f"total_loss: lambda must be non-negative, got {lam}")
    g = as_grid(l_global)
    return g + lam * as_grid(l_local, like=g)
