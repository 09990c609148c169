"""Desk-scale residual encoder, projection head, and linear segmentation head.

Parameters live in flat dicts keyed by slash-separated paths so they can be
bound to a tape, moved by the optimizer, averaged by the momentum update, and
serialized without any layer objects.  Forward functions are pure: running
statistics come in through ``stats`` and updated values are returned, never
written in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .grid import Grid, GridError, ShapeError, as_grid
from .whitening import DegenerateBatchError, WhiteningState, whitening_layer_apply

__all__ = [
    "EncoderConfig",
    "EncoderOutput",
    "BN_EPS",
    "STATS_MOMENTUM",
    "PROJECTOR_HIDDEN",
    "PROJECTOR_DIM",
    "init_encoder_params",
    "init_projector_params",
    "init_seg_head_params",
    "encoder_forward",
    "projector_forward",
    "seg_head_forward",
]

BN_EPS = 1e-5
STATS_MOMENTUM = 0.1  # fraction moved toward each new batch value
PROJECTOR_HIDDEN = 128
PROJECTOR_DIM = 64


@dataclass
class EncoderConfig:
    in_channels: int = 1
    stage_channels: tuple = (16, 32, 64, 128)
    stage_strides: tuple = (1, 2, 2, 2)
    blocks_per_stage: int = 1
    final_norm: str = "batchnorm"  # or "zca_whitening"

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_strides = tuple(self.stage_strides)
        if len(self.stage_channels) != len(self.stage_strides):
            raise GridError("EncoderConfig: stage_channels and stage_strides lengths differ")
        if len(self.stage_channels) < 2:
            raise GridError("EncoderConfig: need at least 2 stages")
        if any(c < 1 for c in self.stage_channels) or self.in_channels < 1:
            raise GridError("EncoderConfig: channels must be positive")
        if self.blocks_per_stage < 1:
            raise GridError("EncoderConfig: blocks_per_stage must be >= 1")
        if self.final_norm not in ("batchnorm", "zca_whitening"):
            raise GridError(f"EncoderConfig: unknown final_norm {self.final_norm!r}")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.stage_strides))


@dataclass
class EncoderOutput:
    stage1_fm: Grid   # [B, C1, H1, W1]
    final_fm: Grid    # [B, Cd, Hd, Wd], post final normalization
    pooled: Grid      # [B, Cd], spatial mean of final_fm


def _he_conv(rng, cout, cin, kh, kw, dtype):
    std = np.sqrt(2.0 / (cin * kh * kw))
    return (rng.normal(size=(cout, cin, kh, kw)) * std).astype(dtype)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
    """He fan-in initialization; returns (trainable params, running stats)."""
    params: dict[str, np.ndarray] = {}
    stats: dict[str, np.ndarray] = {}
    cin = config.in_channels
    for i, (cout, stride) in enumerate(zip(config.stage_channels, config.stage_strides)):
        for b in range(config.blocks_per_stage):
            key = f"stage{i}/block{b}"
            bcin = cin if b == 0 else cout
            bstride = stride if b == 0 else 1
            params[f"{key}/conv_w"] = _he_conv(rng, cout, bcin, 3, 3, dtype)
            if bcin != cout or bstride != 1:
                params[f"{key}/proj_w"] = _he_conv(rng, cout, bcin, 1, 1, dtype)
            params[f"{key}/bn_gamma"] = np.ones(cout, dtype=dtype)
            params[f"{key}/bn_beta"] = np.zeros(cout, dtype=dtype)
            stats[f"{key}/bn_mean"] = np.zeros(cout, dtype=np.float64)
            stats[f"{key}/bn_var"] = np.ones(cout, dtype=np.float64)
        cin = cout
    d = config.feature_dim
    if config.final_norm == "batchnorm":
        stats["norm_final/running_mean"] = np.zeros(d, dtype=np.float64)
        stats["norm_final/running_var"] = np.ones(d, dtype=np.float64)
    else:
        stats["norm_final/running_mu"] = np.zeros(d, dtype=np.float64)
        stats["norm_final/running_W"] = np.eye(d, dtype=np.float64)
    return params, stats


def init_projector_params(in_dim: int, rng: np.random.Generator,
                          hidden: int = PROJECTOR_HIDDEN, out_dim: int = PROJECTOR_DIM,
                          dtype=np.float32):
    """Two affine layers with a ReLU between; output is L2-normalized downstream."""
    return {
        "w1": (rng.normal(size=(in_dim, hidden)) * np.sqrt(2.0 / in_dim)).astype(dtype),
        "b1": np.zeros(hidden, dtype=dtype),
        "w2": (rng.normal(size=(hidden, out_dim)) * np.sqrt(2.0 / hidden)).astype(dtype),
        "b2": np.zeros(out_dim, dtype=dtype),
    }


def init_seg_head_params(in_dim: int, num_classes: int, rng: np.random.Generator,
                         dtype=np.float32):
    return {
        "w": (rng.normal(size=(num_classes, in_dim, 1, 1)) * np.sqrt(2.0 / in_dim)).astype(dtype),
        "b": np.zeros(num_classes, dtype=dtype),
    }


def param_shapes(config: EncoderConfig) -> dict[str, tuple]:
    """Expected shape of every trainable backbone parameter."""
    shapes: dict[str, tuple] = {}
    cin = config.in_channels
    for i, (cout, stride) in enumerate(zip(config.stage_channels, config.stage_strides)):
        for b in range(config.blocks_per_stage):
            key = f"stage{i}/block{b}"
            bcin = cin if b == 0 else cout
            bstride = stride if b == 0 else 1
            shapes[f"{key}/conv_w"] = (cout, bcin, 3, 3)
            if bcin != cout or bstride != 1:
                shapes[f"{key}/proj_w"] = (cout, bcin, 1, 1)
            shapes[f"{key}/bn_gamma"] = (cout,)
            shapes[f"{key}/bn_beta"] = (cout,)
        cin = cout
    return shapes


def stat_shapes(config: EncoderConfig) -> dict[str, tuple]:
    """Expected shape of every running-statistics array."""
    shapes: dict[str, tuple] = {}
    for i, cout in enumerate(config.stage_channels):
        for b in range(config.blocks_per_stage):
            shapes[f"stage{i}/block{b}/bn_mean"] = (cout,)
            shapes[f"stage{i}/block{b}/bn_var"] = (cout,)
    d = config.feature_dim
    if config.final_norm == "batchnorm":
        shapes["norm_final/running_mean"] = (d,)
        shapes["norm_final/running_var"] = (d,)
    else:
        shapes["norm_final/running_mu"] = (d,)
        shapes["norm_final/running_W"] = (d, d)
    return shapes


def _g(params: Mapping, key: str) -> Grid:
    value = params[key]
    return value if isinstance(value, Grid) else as_grid(value)


def _channel_shape(vec: Grid) -> Grid:
    return ops.reshape(vec, (1, vec.data.shape[0], 1, 1))


def _bn_train(x: Grid):
    """Batch-normalize over (B, H, W); returns (xhat, batch mean, batch var)."""
    if x.tape is not None:
        xhat = ops.batch_norm2d(x, eps=BN_EPS)
        _, _, mu, var = xhat.tape.nodes[xhat.nid].saved
    else:
        from . import _kernels as K

        raw, _, mu, var = K.bn2d_forward(np.ascontiguousarray(x.data), BN_EPS)
        xhat = Grid(raw)
    return xhat, np.asarray(mu, dtype=np.float64), np.asarray(var, dtype=np.float64)


def _bn_eval(x: Grid, mean: np.ndarray, var: np.ndarray) -> Grid:
    scale = (1.0 / np.sqrt(var + BN_EPS)).astype(x.data.dtype)
    shift = (mean * scale).astype(x.data.dtype)
    return x * as_grid(scale.reshape(1, -1, 1, 1)) - as_grid(shift.reshape(1, -1, 1, 1))


def _block_norm(x: Grid, params, stats, key: str, mode: str, new_stats: dict) -> Grid:
    gamma = _g(params, f"{key}/bn_gamma")
    beta = _g(params, f"{key}/bn_beta")
    if mode == "train":
        if x.tape is not None:
            out = ops.bn_affine2d(x, gamma, beta, eps=BN_EPS)
            _, _, mu, var, _ = out.tape.nodes[out.nid].saved
        else:
            from . import _kernels as K

            raw, _, _, mu, var = K.bn2d_affine_forward(
                np.ascontiguousarray(x.data),
                gamma.data.astype(x.data.dtype, copy=False),
                beta.data.astype(x.data.dtype, copy=False), BN_EPS)
            out = Grid(raw)
        rho = STATS_MOMENTUM
        new_stats[f"{key}/bn_mean"] = (1 - rho) * stats[f"{key}/bn_mean"] + rho * np.asarray(mu, dtype=np.float64)
        new_stats[f"{key}/bn_var"] = (1 - rho) * stats[f"{key}/bn_var"] + rho * np.asarray(var, dtype=np.float64)
        return out
    xhat = _bn_eval(x, stats[f"{key}/bn_mean"], stats[f"{key}/bn_var"])
    return xhat * _channel_shape(gamma) + _channel_shape(beta)


def _final_norm(x: Grid, stats, config: EncoderConfig, mode: str, new_stats: dict) -> Grid:
    if config.final_norm == "batchnorm":
        if mode == "train":
            out, bm, bv = _bn_train(x)
            rho = STATS_MOMENTUM
            new_stats["norm_final/running_mean"] = (1 - rho) * stats["norm_final/running_mean"] + rho * bm
            new_stats["norm_final/running_var"] = (1 - rho) * stats["norm_final/running_var"] + rho * bv
            return out
        return _bn_eval(x, stats["norm_final/running_mean"], stats["norm_final/running_var"])
    state = WhiteningState(
        dim=config.feature_dim,
        running_mu=stats["norm_final/running_mu"].copy(),
        running_w=stats["norm_final/running_W"].copy(),
    )
    out = whitening_layer_apply(state, x, mode=mode)
    if mode == "train":
        new_stats["norm_final/running_mu"] = state.running_mu
        new_stats["norm_final/running_W"] = state.running_w
    return out


def encoder_forward(params: Mapping, stats: Mapping, images, config: EncoderConfig,
                    mode: str = "train"):
    """Run the backbone; returns (EncoderOutput, updated running stats).

    ``params`` values may be tape-bound Grids (training) or plain arrays.
    Train mode normalizes with batch statistics and returns blended running
    stats; eval mode is a pure function of (params, stats, images).
    """
    if mode not in ("train", "eval"):
        raise GridError(f"encoder_forward: unknown mode {mode!r}")
    x = as_grid(images)
    if x.data.ndim != 4:
        raise ShapeError(f"encoder_forward: expected [B,C,H,W] images, got {x.shape}")
    b, c, h, w = x.data.shape
    if c != config.in_channels:
        raise ShapeError(f"encoder_forward: expected {config.in_channels} channels, got {c}")
    ts = config.total_stride
    if h % ts or w % ts:
        raise ShapeError(f"encoder_forward: input {h}x{w} not divisible by total stride {ts}")
    if mode == "train" and b == 1 and config.final_norm == "zca_whitening":
        raise DegenerateBatchError(
            "encoder_forward: batch size 1 is covariance-degenerate with whitening enabled"
        )

    new_stats = dict(stats)
    stage1_fm = None
    for i, (cout, stride) in enumerate(zip(config.stage_channels, config.stage_strides)):
        for blk in range(config.blocks_per_stage):
            key = f"stage{i}/block{blk}"
            bstride = stride if blk == 0 else 1
            y = ops.conv2d(x, _g(params, key + "/conv_w"), stride=bstride, pad=1)
            y = _block_norm(y, params, stats, key, mode, new_stats)
            if key + "/proj_w" in params:
                shortcut = ops.conv2d(x, _g(params, key + "/proj_w"), stride=bstride, pad=0)
            else:
                shortcut = x
            x = ops.add_relu(y, shortcut)
        if i == 0:
            stage1_fm = x
    final_fm = _final_norm(x, stats, config, mode, new_stats)
    pooled = ops.global_avg_pool(final_fm)
    return EncoderOutput(stage1_fm=stage1_fm, final_fm=final_fm, pooled=pooled), new_stats


def projector_forward(params: Mapping, pooled) -> Grid:
    """Two-layer MLP head; rows of the output have unit L2 norm."""
    x = as_grid(pooled)
    w1 = _g(params, "w1")
    if x.data.ndim != 2 or x.data.shape[1] != w1.data.shape[0]:
        raise ShapeError(
            f"projector_forward: input {x.shape} does not match w1 {w1.shape}"
        )
    h = ops.relu(x @ w1 + _g(params, "b1"))
    z = h @ _g(params, "w2") + _g(params, "b2")
    return ops.l2_normalize(z, axis=1, eps=1e-12)


def seg_head_forward(head_params: Mapping, final_fm, num_classes: int, out_hw) -> Grid:
    """Per-pixel linear map to class logits, bilinearly upsampled to ``out_hw``."""
    x = as_grid(final_fm)
    if num_classes < 2:
        raise GridError("seg_head_forward: need num_classes >= 2")
    oh, ow = out_hw
    if oh < x.data.shape[2] or ow < x.data.shape[3]:
        raise ShapeError(
            f"seg_head_forward: cannot downsample {x.data.shape[2:]} to {out_hw}"
        )
    w = _g(head_params, "w")
    if w.data.shape[0] != num_classes or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"seg_head_forward: head {w.shape} does not match input {x.shape}")
    logits = ops.conv2d(x, w, stride=1, pad=0)
    logits = logits + ops.reshape(_g(head_params, "b"), (1, num_classes, 1, 1))
    if (oh, ow) == tuple(x.data.shape[2:]):
        return logits
    return ops.bilinear_resize(logits, (oh, ow))
