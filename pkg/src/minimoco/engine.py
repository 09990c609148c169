"""Momentum-contrast pretraining engine.

One training step runs, in order: pair augmentation, query forward, momentum
forward (no gradient), the combined contrastive loss, SGD update of the query
branch, EMA update of the momentum branch, and a queue push of the new keys.
State transitions are explicit: running statistics and optimizer buffers are
only committed at step boundaries.
"""

from __future__ import annotations

import ctypes
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import losses, nets, ops
from .grid import (Grid, GridError, NonFiniteError, ShapeError, Tape,
                   reverse_accumulate, set_finite_checks)
from .nets import EncoderConfig

__all__ = [
    "TrainConfig",
    "MocoState",
    "StepMetrics",
    "NonFiniteLossError",
    "WhiteningConversionError",
    "init_state",
    "ema_update",
    "queue_push",
    "augment_pair",
    "train_step",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "whitening_to_bn_convert",
    "eval_features",
    "cosine_lr",
    "sgd_update",
]


def _tune_allocator():
    # Large tensors churn every step; keeping big blocks on the heap instead
    # of mmap avoids repeated page-fault costs.  Best effort, glibc only.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()


class NonFiniteLossError(GridError):
    """Training aborted on a NaN/Inf loss; carries the failing step index."""

    def __init__(self, step: int, metrics: dict):
        super().__init__(f"non-finite loss at step {step}: {metrics}")
        self.step = step
        self.metrics = metrics


class WhiteningConversionError(ckpt.CheckpointError):
    """Whitening-to-batchnorm conversion failed (singular running matrix)."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    queue_size: int = 1024
    momentum: float = 0.999           # EMA coefficient for the momentum branch
    tau: float = 0.2
    lambda_: float = 1.0              # weight of the local loss
    num_patches: int = 20             # K
    epochs: int = 20
    lr: float = 0.03
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    enable_local: bool = True
    enable_whitening: bool = True
    denominator_includes_positive: bool = True
    checkpoint_every: int = 0         # extra checkpoints every N steps (0 = final only)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise GridError(f"TrainConfig: momentum must be in [0, 1), got {self.momentum}")
        if self.queue_size % self.batch_size:
            raise GridError(
                f"TrainConfig: queue_size {self.queue_size} must be a multiple of "
                f"batch_size {self.batch_size}"
            )
        if self.tau <= 0 or self.lambda_ < 0:
            raise GridError("TrainConfig: tau must be positive and lambda non-negative")
        if self.dtype not in ("float32", "float64"):
            raise GridError(f"TrainConfig: unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class MocoState:
    encoder_config: EncoderConfig
    backbone_q: dict
    projector_q: dict
    backbone_k: dict
    projector_k: dict
    stats_q: dict
    stats_k: dict
    queue: np.ndarray          # [Q, d_z]
    queue_ptr: int
    queue_fill: int
    step: int
    opt_v: dict                # momentum buffers, keys mirror trainables
    rng: np.random.Generator
    total_steps: int = 0       # cosine schedule horizon; 0 = constant lr


StepMetrics = dict  # {step, loss_global, loss_local, loss_total, queue_fill, lr}


def init_state(config: TrainConfig, encoder_config: EncoderConfig | None = None,
               total_steps: int = 0) -> MocoState:
    if encoder_config is None:
        encoder_config = EncoderConfig(
            final_norm="zca_whitening" if config.enable_whitening else "batchnorm"
        )
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    backbone, stats = nets.init_encoder_params(encoder_config, rng, dtype=dt)
    projector = nets.init_projector_params(encoder_config.feature_dim, rng, dtype=dt)
    opt_v = {f"backbone/{k}": np.zeros_like(v) for k, v in backbone.items()}
    opt_v.update({f"projector/{k}": np.zeros_like(v) for k, v in projector.items()})
    return MocoState(
        encoder_config=encoder_config,
        backbone_q=backbone,
        projector_q=projector,
        backbone_k={k: v.copy() for k, v in backbone.items()},
        projector_k={k: v.copy() for k, v in projector.items()},
        stats_q=stats,
        stats_k={k: v.copy() for k, v in stats.items()},
        queue=np.zeros((config.queue_size, nets.PROJECTOR_DIM), dtype=dt),
        queue_ptr=0,
        queue_fill=0,
        step=0,
        opt_v=opt_v,
        rng=rng,
        total_steps=total_steps,
    )


def ema_update(theta_q: dict, theta_k: dict, m: float) -> dict:
    """theta_k' = m * theta_k + (1 - m) * theta_q, element-wise per parameter."""
    if not 0.0 <= m < 1.0:
        raise GridError(f"ema_update: momentum must be in [0, 1), got {m}")
    if theta_q.keys() != theta_k.keys():
        raise ShapeError("ema_update: parameter sets differ")
    out = {}
    for key, q in theta_q.items():
        k = theta_k[key]
        if q.shape != k.shape:
            raise ShapeError(f"ema_update: shape mismatch for {key}: {q.shape} vs {k.shape}")
        out[key] = m * k + (1.0 - m) * q
    return out


def queue_push(state: MocoState, keys: np.ndarray) -> MocoState:
    """FIFO write of a key batch at the cursor; oldest entries fall out first."""
    keys = np.asarray(keys)
    q_size, dz = state.queue.shape
    if keys.ndim != 2 or keys.shape[1] != dz:
        raise ShapeError(f"queue_push: keys {keys.shape} do not match queue dim {dz}")
    b = keys.shape[0]
    if q_size % b:
        raise ShapeError(f"queue_push: batch {b} must divide queue size {q_size}")
    norms = np.linalg.norm(np.asarray(keys, dtype=np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise losses.ContractViolation(
            f"queue_push: key {bad} has norm {norms[bad]:.8f}, expected 1 +/- 1e-5"
        )
    state.queue[state.queue_ptr : state.queue_ptr + b] = keys.astype(state.queue.dtype)
    state.queue_ptr = (state.queue_ptr + b) % q_size
    state.queue_fill = min(state.queue_fill + b, q_size)
    return state


# ---------------------------------------------------------------------------
# augmentation

def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma + 0.5))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = img
    for axis in (-2, -1):
        padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + (
            [(radius, radius), (0, 0)] if axis == -2 else [(0, 0), (radius, radius)]
        ), mode="edge")
        acc = np.zeros_like(out, dtype=np.float64)
        for i, w in enumerate(kernel):
            if axis == -2:
                acc += w * padded[..., i : i + out.shape[-2], :]
            else:
                acc += w * padded[..., :, i : i + out.shape[-1]]
        out = acc
    return out.astype(img.dtype, copy=False)


def _random_resized_crop(img: np.ndarray, rng, scale=(0.2, 1.0)) -> np.ndarray:
    c, h, w = img.shape
    area = rng.uniform(scale[0], scale[1]) * h * w
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    ch = int(round(np.sqrt(area / aspect)))
    cw = int(round(np.sqrt(area * aspect)))
    ch = int(np.clip(ch, 1, h))
    cw = int(np.clip(cw, 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top : top + ch, left : left + cw]
    ry = ops.resize_matrix(ch, h, np.float64)
    rx = ops.resize_matrix(cw, w, np.float64)
    return np.matmul(np.matmul(ry, crop.astype(np.float64)), rx.T)


def _augment_view(img: np.ndarray, rng, local_mode: bool,
                  enable_jitter: bool, enable_blur: bool) -> np.ndarray:
    out = img.astype(np.float64, copy=True)
    if not local_mode:
        out = _random_resized_crop(out, rng)
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
    if enable_jitter:
        out = out * rng.uniform(0.6, 1.4)                      # brightness
        mean = out.mean()
        out = (out - mean) * rng.uniform(0.6, 1.4) + mean      # contrast
    if enable_blur and rng.random() < 0.5:
        out = _gaussian_blur(out, rng.uniform(0.1, 2.0))
    return np.clip(out, 0.0, 1.0)


def augment_pair(image: np.ndarray, rng: np.random.Generator, local_mode: bool,
                 enable_jitter: bool = True, enable_blur: bool = True):
    """Two photometric/geometric views of one [C, H, W] image in [0, 1].

    ``local_mode`` disables crop and flip so the views stay pixel-aligned;
    jitter and blur are still drawn independently per view.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"augment_pair: expected [C,H,W] image, got {image.shape}")
    view_q = _augment_view(image, rng, local_mode, enable_jitter, enable_blur)
    view_k = _augment_view(image, rng, local_mode, enable_jitter, enable_blur)
    return view_q, view_k


# ---------------------------------------------------------------------------
# optimization

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total_steps))


def sgd_update(params: dict, grads: dict, velocity: dict, lr: float,
               momentum: float, weight_decay: float) -> None:
    """In-place SGD with momentum: v <- m v + g + wd * p; p <- p - lr * v."""
    for key, p in params.items():
        g = grads[key]
        v = velocity[key]
        v *= momentum
        v += g + weight_decay * p
        p -= (lr * v).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# the training step

@dataclass
class LossBundle:
    loss_global: Grid
    loss_local: Grid
    loss_total: Grid
    z_k: Grid
    new_stats_q: dict
    new_stats_k: dict


def forward_losses(backbone_q, projector_q, stats_q, backbone_k, projector_k, stats_k,
                   view_q, view_k, queue_filled, config: TrainConfig,
                   encoder_config: EncoderConfig) -> LossBundle:
    """Pure forward pass of both branches plus the combined objective.

    ``backbone_q``/``projector_q`` values may be tape leaves; the momentum
    branch is always treated as constant.
    """
    out_q, new_stats_q = nets.encoder_forward(backbone_q, stats_q, view_q,
                                              encoder_config, "train")
    z_q = nets.projector_forward(projector_q, out_q.pooled)
    out_k, new_stats_k = nets.encoder_forward(backbone_k, stats_k, view_k,
                                              encoder_config, "train")
    z_k = nets.projector_forward(projector_k, out_k.pooled).detach()

    include = config.denominator_includes_positive
    l_global = losses.global_loss(z_q, z_k, queue_filled, config.tau, include)
    if config.enable_local:
        patches = losses.sample_patch_grid(out_q.stage1_fm, out_k.stage1_fm,
                                           config.num_patches)
        l_local = losses.local_loss(patches, config.tau, include)
    else:
        l_local = losses.as_grid(np.asarray(0.0, dtype=l_global.data.dtype))
    l_total = losses.total_loss(l_global, l_local, config.lambda_)
    return LossBundle(l_global, l_local, l_total, z_k, new_stats_q, new_stats_k)


def train_step(state: MocoState, batch: np.ndarray, config: TrainConfig):
    """One optimization step; returns (state, StepMetrics).

    Aborts with :class:`NonFiniteLossError` if the loss leaves the reals.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[0] != config.batch_size:
        raise ShapeError(
            f"train_step: expected [{config.batch_size},C,H,W] batch, got {batch.shape}"
        )
    dt = config.np_dtype
    views_q = np.empty(batch.shape, dtype=dt)
    views_k = np.empty(batch.shape, dtype=dt)
    for i in range(batch.shape[0]):
        vq, vk = augment_pair(batch[i], state.rng, local_mode=config.enable_local)
        views_q[i] = vq
        views_k[i] = vk

    prev_checks = set_finite_checks(False)
    try:
        tape = Tape()
        bq = {k: tape.leaf(v, name=f"backbone/{k}") for k, v in state.backbone_q.items()}
        pq = {k: tape.leaf(v, name=f"projector/{k}") for k, v in state.projector_q.items()}
        try:
            bundle = forward_losses(
                bq, pq, state.stats_q,
                state.backbone_k, state.projector_k, state.stats_k,
                views_q, views_k, state.queue[: state.queue_fill], config,
                state.encoder_config,
            )
        except NonFiniteError as e:
            raise NonFiniteLossError(state.step, {"detail": str(e)}) from e
        lr = cosine_lr(config.lr, state.step, state.total_steps)
        metrics: StepMetrics = {
            "step": state.step,
            "loss_global": float(bundle.loss_global.data),
            "loss_local": float(bundle.loss_local.data),
            "loss_total": float(bundle.loss_total.data),
            "queue_fill": int(state.queue_fill),
            "lr": float(lr),
        }
        if not all(np.isfinite(v) for v in
                   (metrics["loss_global"], metrics["loss_local"], metrics["loss_total"])):
            raise NonFiniteLossError(state.step, metrics)

        tape.mark_output(bundle.loss_total)
        grads = reverse_accumulate(tape, 1.0)
    finally:
        set_finite_checks(prev_checks)

    trainables = {f"backbone/{k}": v for k, v in state.backbone_q.items()}
    trainables.update({f"projector/{k}": v for k, v in state.projector_q.items()})
    grad_arrays = {k: grads[k].data for k in trainables}
    sgd_update(trainables, grad_arrays, state.opt_v, lr,
               config.sgd_momentum, config.weight_decay)

    state.backbone_k = ema_update(state.backbone_q, state.backbone_k, config.momentum)
    state.projector_k = ema_update(state.projector_q, state.projector_k, config.momentum)
    state.stats_q = bundle.new_stats_q
    state.stats_k = bundle.new_stats_k
    queue_push(state, bundle.z_k.data)
    state.step += 1
    return state, metrics


METRIC_KEYS = ("step", "loss_global", "loss_local", "loss_total", "queue_fill", "lr")


def metrics_line(metrics: StepMetrics) -> str:
    return json.dumps({k: metrics[k] for k in METRIC_KEYS})


def pretrain(config: TrainConfig, images: np.ndarray, out_dir=None,
             encoder_config: EncoderConfig | None = None):
    """Full pretraining run over ``images`` [N, C, H, W]; returns
    (state, metrics list).  When ``out_dir`` is set, writes ``metrics.jsonl``
    and ``ckpt_<step>.mmc1``."""
    images = np.asarray(images)
    n = images.shape[0]
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch < 1:
        raise GridError(f"pretrain: {n} samples cannot fill a batch of {config.batch_size}")
    total_steps = steps_per_epoch * config.epochs
    state = init_state(config, encoder_config, total_steps=total_steps)

    out_path = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_f = open(out_path / "metrics.jsonl", "w", encoding="utf-8")
    all_metrics = []
    try:
        for _ in range(config.epochs):
            order = state.rng.permutation(n)
            for b in range(steps_per_epoch):
                batch = images[order[b * config.batch_size : (b + 1) * config.batch_size]]
                state, metrics = train_step(state, batch, config)
                all_metrics.append(metrics)
                if log_f is not None:
                    log_f.write(metrics_line(metrics) + "\n")
                if (out_path is not None and config.checkpoint_every > 0
                        and state.step % config.checkpoint_every == 0):
                    save_checkpoint(state, out_path / f"ckpt_{state.step}.mmc1")
    finally:
        if log_f is not None:
            log_f.close()
    if out_path is not None:
        save_checkpoint(state, out_path / f"ckpt_{state.step}.mmc1")
    return state, all_metrics


# ---------------------------------------------------------------------------
# checkpoint binding

def _rng_to_u64(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ckpt.CheckpointError(f"unsupported generator {st['bit_generator']}")
    mask = (1 << 64) - 1
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    return np.array(
        [s & mask, (s >> 64) & mask, inc & mask, (inc >> 64) & mask,
         st["has_uint32"], st["uinteger"]],
        dtype=np.uint64,
    )


def _rng_from_u64(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
        "has_uint32": w[4],
        "uinteger": w[5],
    }
    return gen


def state_to_arrays(state: MocoState) -> dict[str, np.ndarray]:
    cfg = state.encoder_config
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.backbone_q.items():
        arrays[f"encoder/{k}"] = v
    for k, v in state.stats_q.items():
        arrays[f"encoder/{k}"] = v
    for k, v in state.projector_q.items():
        arrays[f"projector/{k}"] = v
    for k, v in state.backbone_k.items():
        arrays[f"momentum/encoder/{k}"] = v
    for k, v in state.stats_k.items():
        arrays[f"momentum/encoder/{k}"] = v
    for k, v in state.projector_k.items():
        arrays[f"momentum/projector/{k}"] = v
    for k, v in state.opt_v.items():
        arrays[f"optim/{k}"] = v
    arrays["queue/data"] = state.queue
    arrays["meta/queue_ptr"] = np.array([state.queue_ptr], dtype=np.uint64)
    arrays["meta/queue_fill"] = np.array([state.queue_fill], dtype=np.uint64)
    arrays["meta/step"] = np.array([state.step], dtype=np.uint64)
    arrays["meta/total_steps"] = np.array([state.total_steps], dtype=np.uint64)
    arrays["meta/rng"] = _rng_to_u64(state.rng)
    arrays["meta/encoder_in_channels"] = np.array([cfg.in_channels], dtype=np.uint64)
    arrays["meta/encoder_channels"] = np.array(cfg.stage_channels, dtype=np.uint64)
    arrays["meta/encoder_strides"] = np.array(cfg.stage_strides, dtype=np.uint64)
    arrays["meta/blocks_per_stage"] = np.array([cfg.blocks_per_stage], dtype=np.uint64)
    return arrays


def save_checkpoint(state: MocoState, path) -> None:
    ckpt.write_arrays(path, state_to_arrays(state))


def _collect(arrays: dict, prefix: str) -> dict:
    plen = len(prefix)
    return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_checkpoint(path, expected_final_norm: str | None = None) -> MocoState:
    """Rebuild a full training state; validates parameter shapes against the
    stored architecture.  ``expected_final_norm`` enforces the normalization
    layer the caller was configured for."""
    return state_from_arrays(ckpt.read_arrays(path), expected_final_norm)


def state_from_arrays(arrays: dict, expected_final_norm: str | None = None) -> MocoState:
    try:
        final_norm = ("zca_whitening" if "encoder/norm_final/running_W" in arrays
                      else "batchnorm")
        cfg = EncoderConfig(
            in_channels=int(arrays["meta/encoder_in_channels"][0]),
            stage_channels=tuple(int(c) for c in arrays["meta/encoder_channels"]),
            stage_strides=tuple(int(s) for s in arrays["meta/encoder_strides"]),
            blocks_per_stage=int(arrays["meta/blocks_per_stage"][0]),
            final_norm=final_norm,
        )
    except KeyError as e:
        raise ckpt.CheckpointShapeError(f"checkpoint missing metadata entry {e}") from e
    if expected_final_norm is not None and expected_final_norm != final_norm:
        missing = ("norm_final/running_mean" if expected_final_norm == "batchnorm"
                   else "norm_final/running_W")
        raise ckpt.CheckpointShapeError(
            f"normalization layer mismatch at norm_final: checkpoint holds "
            f"{final_norm!r} state, caller expects {expected_final_norm!r} "
            f"({missing} not present)"
        )

    param_shapes = nets.param_shapes(cfg)
    stat_shapes = nets.stat_shapes(cfg)
    backbone_q, stats_q = {}, {}
    backbone_k, stats_k = {}, {}
    for key, shape in param_shapes.items():
        for store, prefix in ((backbone_q, "encoder/"), (backbone_k, "momentum/encoder/")):
            name = prefix + key
            if name not in arrays:
                raise ckpt.CheckpointShapeError(f"checkpoint missing array {name}")
            if arrays[name].shape != shape:
                raise ckpt.CheckpointShapeError(
                    f"{name}: shape {arrays[name].shape}, expected {shape}"
                )
            store[key] = arrays[name]
    for key, shape in stat_shapes.items():
        for store, prefix in ((stats_q, "encoder/"), (stats_k, "momentum/encoder/")):
            name = prefix + key
            if name not in arrays:
                raise ckpt.CheckpointShapeError(f"checkpoint missing array {name}")
            if arrays[name].shape != shape:
                raise ckpt.CheckpointShapeError(
                    f"{name}: shape {arrays[name].shape}, expected {shape}"
                )
            store[key] = arrays[name]
    projector_q = _collect(arrays, "projector/")
    projector_k = _collect(arrays, "momentum/projector/")
    opt_v = _collect(arrays, "optim/")
    return MocoState(
        encoder_config=cfg,
        backbone_q=backbone_q,
        projector_q=projector_q,
        backbone_k=backbone_k,
        projector_k=projector_k,
        stats_q=stats_q,
        stats_k=stats_k,
        queue=arrays["queue/data"],
        queue_ptr=int(arrays["meta/queue_ptr"][0]),
        queue_fill=int(arrays["meta/queue_fill"][0]),
        step=int(arrays["meta/step"][0]),
        opt_v=opt_v,
        rng=_rng_from_u64(arrays["meta/rng"]),
        total_steps=int(arrays["meta/total_steps"][0]),
    )


def whitening_to_bn_convert(in_path, out_path, eps: float = 1e-5) -> None:
    """Rewrite a whitening-normalized checkpoint as a batchnorm one.

    running_mean copies running_mu; running_var is diag(running_W^-2) clamped
    to at least ``eps``; everything else is copied verbatim.
    """
    ckpt.write_arrays(out_path, convert_arrays_whitening_to_bn(ckpt.read_arrays(in_path), eps))


def convert_arrays_whitening_to_bn(arrays: dict, eps: float = 1e-5) -> dict:
    out: dict[str, np.ndarray] = {}
    converted = 0
    for name, value in arrays.items():
        if name.endswith("norm_final/running_mu"):
            out[name.replace("running_mu", "running_mean")] = value
            converted += 1
        elif name.endswith("norm_final/running_W"):
            w = np.asarray(value, dtype=np.float64)
            cond = np.linalg.cond(w)
            if not np.isfinite(cond) or cond > 1e12:
                raise WhiteningConversionError(
                    f"{name}: running whitening matrix is singular "
                    f"(condition number {cond:.3e})"
                )
            w_inv = np.linalg.inv(w)
            var = np.diag(w_inv @ w_inv).copy()
            out[name.replace("running_W", "running_var")] = np.maximum(var, eps)
        else:
            out[name] = value
    if converted == 0:
        raise WhiteningConversionError(
            "checkpoint has no whitening layer (norm_final/running_mu not found)"
        )
    return out


def eval_features(state: MocoState, images: np.ndarray, source: str = "pooled",
                  batch_size: int = 64) -> np.ndarray:
    """Eval-mode features of the query branch.

    ``source`` selects pooled backbone features [N, Cd] or the projector
    embedding [N, d_z].
    """
    if source not in ("pooled", "embedding"):
        raise GridError(f"eval_features: unknown source {source!r}")
    images = np.asarray(images)
    outs = []
    for i in range(0, images.shape[0], batch_size):
        chunk = images[i : i + batch_size].astype(state.queue.dtype, copy=False)
        out, _ = nets.encoder_forward(state.backbone_q, state.stats_q, chunk,
                                      state.encoder_config, "eval")
        feats = out.pooled
        if source == "embedding":
            feats = nets.projector_forward(state.projector_q, feats)
        outs.append(feats.data)
    return np.concatenate(outs, axis=0)
