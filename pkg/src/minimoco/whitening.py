"""Feature standardization and ZCA decorrelation.

Data matrices here follow the ``[d, m]`` convention: ``d`` features in rows,
``m`` batch samples in columns.  ``zca_exact`` is the eigendecomposition
reference; ``zca_newton`` is the iterative approximation used as the final
backbone normalization layer, differentiable end-to-end through its recorded
matrix iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .grid import Grid, GridError, NonFiniteError, as_grid

__all__ = [
    "DegenerateBatchError",
    "NumericalError",
    "WhiteningState",
    "batch_standardize",
    "zca_exact",
    "zca_newton",
    "whitening_layer_apply",
]


class DegenerateBatchError(GridError):
    """Batch too small for the requested statistics."""


class NumericalError(GridError):
    """A numerical routine failed to converge or diverged."""


def batch_standardize(x, eps: float = 1e-5) -> Grid:
    """Zero-mean, unit-variance rows (population variance, eps-guarded).

    Constant rows map to all zeros rather than dividing by zero.
    """
    g = as_grid(x)
    if g.data.ndim != 2:
        raise GridError(f"batch_standardize: expected [d, m] matrix, got {g.shape}")
    if g.data.shape[1] < 2:
        raise DegenerateBatchError(
            f"batch_standardize: need m >= 2 samples, got {g.data.shape[1]}"
        )
    return ops.standardize(g, axes=(1,), eps=eps)


def zca_exact(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZCA whitening via symmetric eigendecomposition.

    Returns ``(x_white, w)`` where ``w`` is the symmetric positive-definite
    matrix with ``w @ sigma @ w = I`` for the eps-regularized sample
    covariance.  This is the reference path; it is not differentiable.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise GridError(f"zca_exact: expected [d, m] matrix, got {x.shape}")
    d, m = x.shape
    if m < 2:
        raise DegenerateBatchError(f"zca_exact: need m >= 2 samples, got {m}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    sigma = (xc @ xc.T) / m + eps * np.eye(d)
    try:
        lam, vec = np.linalg.eigh(sigma)
    except np.linalg.LinAlgError as e:
        cond = float(np.abs(sigma).max() / max(np.abs(np.diag(sigma)).min(), 1e-300))
        raise NumericalError(
            f"zca_exact: eigendecomposition failed (condition estimate {cond:.3e})"
        ) from e
    w = (vec * (1.0 / np.sqrt(lam))) @ vec.T
    return w @ xc, w


@dataclass
class WhiteningState:
    """Newton-iteration whitening layer state.

    ``running_w`` and ``running_mu`` are the eval-mode statistics, blended
    toward each train batch by ``running_momentum``.
    """

    dim: int
    iterations: int = 5
    eps: float = 1e-5
    running_momentum: float = 0.1
    running_mu: np.ndarray = field(default=None)
    running_w: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.iterations < 1:
            raise GridError("WhiteningState: iterations must be >= 1")
        if self.running_mu is None:
            self.running_mu = np.zeros(self.dim, dtype=np.float64)
        if self.running_w is None:
            self.running_w = np.eye(self.dim, dtype=np.float64)


def _newton_inverse_sqrt(sigma: Grid, iterations: int) -> Grid:
    """Iterate P <- (3P - P^3 S)/2 on the trace-normalized covariance.

    Returns the approximate inverse square root of the *unnormalized*
    covariance.  Divergence (non-finite iterate) reports the iteration index.
    """
    d = sigma.data.shape[0]
    eye = as_grid(np.eye(d, dtype=sigma.data.dtype))
    trace = ops.reduce_sum(sigma * eye)
    tr_val = float(trace.data)
    if not np.isfinite(tr_val):
        raise NonFiniteError(f"whitening: covariance trace is {tr_val}")
    if tr_val <= 0:
        raise DegenerateBatchError(f"whitening: covariance trace {tr_val} is not positive")
    sigma_n = sigma / trace
    p = eye
    for k in range(iterations):
        p_sq = p @ p
        p = 0.5 * (3.0 * p - (p_sq @ p) @ sigma_n)
        if not np.all(np.isfinite(p.data)):
            raise NumericalError(f"whitening: Newton iteration diverged at step {k + 1}")
    return p / ops.sqrt(trace)


def zca_newton(x, state: WhiteningState, mode: str = "train") -> Grid:
    """Whiten ``x`` ([d, m]) with Newton-iteration ZCA.

    Train mode computes statistics from the batch, whitens with them and
    moves the running statistics toward the batch values; eval mode applies
    the stored running statistics only.  The train path is differentiable
    through the covariance and the iteration.
    """
    g = as_grid(x)
    if g.data.ndim != 2 or g.data.shape[0] != state.dim:
        raise GridError(
            f"zca_newton: expected [{state.dim}, m] matrix, got {g.shape}"
        )
    if mode == "eval":
        w = as_grid(state.running_w.astype(g.data.dtype, copy=False))
        mu = as_grid(state.running_mu.astype(g.data.dtype, copy=False).reshape(-1, 1))
        return w @ (g - mu)
    if mode != "train":
        raise GridError(f"zca_newton: unknown mode {mode!r}")
    d, m = g.data.shape
    if m < 2:
        raise DegenerateBatchError(f"zca_newton: need m >= 2 samples, got {m}")
    mu = ops.reduce_mean(g, axes=(1,), keepdims=True)
    xc = g - mu
    sigma = (xc @ ops.transpose(xc, (1, 0))) / float(m)
    sigma = sigma + as_grid(state.eps * np.eye(d, dtype=g.data.dtype))
    w = _newton_inverse_sqrt(sigma, state.iterations)
    out = w @ xc

    rho = state.running_momentum
    w_batch = 0.5 * (w.data + w.data.T)  # keep the running matrix symmetric
    state.running_mu = (1.0 - rho) * state.running_mu + rho * mu.data.reshape(-1).astype(np.float64)
    state.running_w = (1.0 - rho) * state.running_w + rho * w_batch.astype(np.float64)
    return out


def whitening_layer_apply(state: WhiteningState, feature_map, mode: str = "train") -> Grid:
    """Decorrelate a [B, C, H, W] feature map across the batch-spatial axis.

    Channels are the whitened feature dimension (d = C, m = B*H*W); the output
    has the input's shape.
    """
    g = as_grid(feature_map)
    if g.data.ndim != 4:
        raise GridError(f"whitening_layer_apply: expected [B,C,H,W], got {g.shape}")
    b, c, h, w = g.data.shape
    m = b * h * w
    if mode == "train" and m < 2:
        raise DegenerateBatchError(
            f"whitening_layer_apply: batch-spatial size {m} is degenerate"
        )
    flat = ops.reshape(ops.transpose(g, (1, 0, 2, 3)), (c, m))
    white = zca_newton(flat, state, mode=mode)
    return ops.transpose(ops.reshape(white, (c, b, h, w)), (1, 0, 2, 3))
