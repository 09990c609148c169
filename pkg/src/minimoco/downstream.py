"""Downstream segmentation evaluation: linear head on a frozen or fine-tuned
backbone, Dice scoring, and the ablation comparison table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine, nets, ops, phantoms
from .grid import GridError, ShapeError, Tape, reverse_accumulate, set_finite_checks
from .engine import NonFiniteLossError

__all__ = [
    "EvalConfig",
    "DiceResult",
    "SegModel",
    "dice_score",
    "evaluate_masks",
    "fit_segmentation_head",
    "predict_masks",
    "train_eval_segmentation",
    "ablation_matrix",
    "ABLATION_ROWS",
]

ABLATION_ROWS = ("no_ssl", "baseline", "local", "decorr", "both")


@dataclass
class EvalConfig:
    mode: str = "frozen"              # or "finetune"
    label_fraction: float = 1.0
    combination_seed: int = 0
    iterations: int = 2000
    lr: float | None = None           # resolved per mode when None
    checkpoint_path: str | None = None  # None = randomly initialized backbone
    convert_whitening: bool = True    # applies in finetune mode only
    batch_size: int = 8

    def __post_init__(self):
        if self.mode not in ("frozen", "finetune"):
            raise GridError(f"EvalConfig: unknown mode {self.mode!r}")
        if not 0 < self.label_fraction <= 1:
            raise GridError(
                f"EvalConfig: label_fraction must be in (0,1], got {self.label_fraction}"
            )

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.2 if self.mode == "frozen" else 0.02


@dataclass
class DiceResult:
    per_class: list[float]
    class_ids: list[int]
    mean: float
    num_eval_images: int

    def to_dict(self) -> dict:
        return {
            "per_class": {str(c): v for c, v in zip(self.class_ids, self.per_class)},
            "mean": self.mean,
            "num_eval_images": self.num_eval_images,
        }


@dataclass
class SegModel:
    enc_config: nets.EncoderConfig
    backbone: dict
    stats: dict
    head: dict
    num_classes: int
    out_hw: tuple


def dice_score(pred_mask, gt_mask, class_id: int) -> float:
    """2|A.B| / (|A|+|B|) for one class; 1.0 when the class is absent from both."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice_score: mask shapes differ, {pred.shape} vs {gt.shape}")
    if class_id < 1:
        raise GridError(
            f"dice_score: class_id must be >= 1 (background excluded), got {class_id}"
        )
    p = pred == class_id
    g = gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def evaluate_masks(pred_masks, gt_masks, num_classes: int) -> DiceResult:
    """Per-class mean of per-image Dice over the eval set; classes absent from
    both predictions and ground truth everywhere are excluded from the mean."""
    preds = np.asarray(pred_masks)
    gts = np.asarray(gt_masks)
    if preds.shape != gts.shape:
        raise ShapeError(f"evaluate_masks: shapes differ, {preds.shape} vs {gts.shape}")
    n = preds.shape[0]
    per_class, class_ids = [], []
    for c in range(1, num_classes):
        seen = bool(((preds == c).any()) or ((gts == c).any()))
        if not seen:
            continue
        scores = [dice_score(preds[i], gts[i], c) for i in range(n)]
        per_class.append(float(np.mean(scores)))
        class_ids.append(c)
    mean = float(np.mean(per_class)) if per_class else 0.0
    return DiceResult(per_class=per_class, class_ids=class_ids, mean=mean,
                      num_eval_images=n)


def _cross_entropy(logits, masks: np.ndarray, num_classes: int):
    """Mean pixel-wise CE of [B,C,H,W] logits against integer masks."""
    b, c, h, w = logits.data.shape
    onehot = np.zeros((b, c, h, w), dtype=logits.data.dtype)
    for cls in range(num_classes):
        onehot[:, cls][masks == cls] = 1.0
    lse = ops.logsumexp(logits, axis=1, keepdims=True)        # [B,1,H,W]
    logp = logits - lse
    return -ops.reduce_mean(ops.reduce_sum(logp * onehot, axes=1))


def _load_backbone(config: EvalConfig, rng: np.random.Generator,
                   enc_config: nets.EncoderConfig | None):
    if config.checkpoint_path is None:
        cfg = enc_config or nets.EncoderConfig()
        params, stats = nets.init_encoder_params(cfg, rng, dtype=np.float32)
        return cfg, params, stats
    state = engine.load_checkpoint(config.checkpoint_path)
    if (config.mode == "finetune" and config.convert_whitening
            and state.encoder_config.final_norm == "zca_whitening"):
        arrays = engine.convert_arrays_whitening_to_bn(engine.state_to_arrays(state))
        state = engine.state_from_arrays(arrays)
    return state.encoder_config, state.backbone_q, state.stats_q


def _final_maps(params, stats, images, enc_config, batch=64):
    outs = []
    for i in range(0, images.shape[0], batch):
        out, _ = nets.encoder_forward(params, stats, images[i : i + batch],
                                      enc_config, "eval")
        outs.append(out.final_fm.data)
    return np.concatenate(outs, axis=0)


def fit_segmentation_head(config: EvalConfig, images, masks, num_classes: int,
                          enc_config: nets.EncoderConfig | None = None):
    """Train the 1x1-conv segmentation head with pixel-wise cross-entropy.

    Frozen mode trains the head on cached eval-mode feature maps; finetune
    mode backpropagates into a copy of the backbone as well.  Returns
    (SegModel, loss log).
    """
    images = np.asarray(images, dtype=np.float32)
    masks = np.asarray(masks)
    rng = np.random.default_rng(config.combination_seed)
    enc_config, params, stats = _load_backbone(config, rng, enc_config)
    out_hw = tuple(images.shape[2:])
    head = nets.init_seg_head_params(enc_config.feature_dim, num_classes, rng,
                                     dtype=np.float32)
    head_v = {k: np.zeros_like(v) for k, v in head.items()}
    lr = config.resolved_lr
    log = []

    prev = set_finite_checks(False)
    try:
        if config.mode == "frozen":
            maps = _final_maps(params, stats, images, enc_config)
            for it in range(config.iterations):
                idx = rng.integers(0, maps.shape[0],
                                   size=min(config.batch_size, maps.shape[0]))
                tape = Tape()
                hleaves = {k: tape.leaf(v, name=k) for k, v in head.items()}
                logits = nets.seg_head_forward(hleaves, maps[idx], num_classes, out_hw)
                loss = _cross_entropy(logits, masks[idx], num_classes)
                lval = float(loss.data)
                if not np.isfinite(lval):
                    raise NonFiniteLossError(it, {"loss": lval})
                tape.mark_output(loss)
                grads = reverse_accumulate(tape, 1.0)
                engine.sgd_update(head, {k: grads[k].data for k in head}, head_v,
                                  engine.cosine_lr(lr, it, config.iterations),
                                  0.9, 0.0)
                log.append({"iter": it, "loss": lval})
            model = SegModel(enc_config, params, stats, head, num_classes, out_hw)
        else:
            backbone = {k: v.copy() for k, v in params.items()}
            bstats = dict(stats)
            back_v = {k: np.zeros_like(v) for k, v in backbone.items()}
            for it in range(config.iterations):
                idx = rng.integers(0, images.shape[0],
                                   size=min(config.batch_size, images.shape[0]))
                tape = Tape()
                bleaves = {k: tape.leaf(v, name=f"backbone/{k}") for k, v in backbone.items()}
                hleaves = {k: tape.leaf(v, name=k) for k, v in head.items()}
                out, new_stats = nets.encoder_forward(bleaves, bstats, images[idx],
                                                      enc_config, "train")
                logits = nets.seg_head_forward(hleaves, out.final_fm, num_classes, out_hw)
                loss = _cross_entropy(logits, masks[idx], num_classes)
                lval = float(loss.data)
                if not np.isfinite(lval):
                    raise NonFiniteLossError(it, {"loss": lval})
                tape.mark_output(loss)
                grads = reverse_accumulate(tape, 1.0)
                lr_t = engine.cosine_lr(lr, it, config.iterations)
                engine.sgd_update(backbone,
                                  {k: grads[f"backbone/{k}"].data for k in backbone},
                                  back_v, lr_t, 0.9, 1e-4)
                engine.sgd_update(head, {k: grads[k].data for k in head}, head_v,
                                  lr_t, 0.9, 0.0)
                bstats = new_stats
                log.append({"iter": it, "loss": lval})
            model = SegModel(enc_config, backbone, bstats, head, num_classes, out_hw)
    finally:
        set_finite_checks(prev)
    return model, log


def predict_masks(model: SegModel, images, batch: int = 32) -> np.ndarray:
    """Argmax class per pixel, eval-mode forward."""
    images = np.asarray(images, dtype=np.float32)
    preds = []
    prev = set_finite_checks(False)
    try:
        for i in range(0, images.shape[0], batch):
            out, _ = nets.encoder_forward(model.backbone, model.stats,
                                          images[i : i + batch], model.enc_config, "eval")
            logits = nets.seg_head_forward(model.head, out.final_fm,
                                           model.num_classes, model.out_hw)
            preds.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    finally:
        set_finite_checks(prev)
    return np.concatenate(preds, axis=0)


def train_eval_segmentation(config: EvalConfig, train_images, train_masks,
                            val_images, val_masks, num_classes: int,
                            enc_config: nets.EncoderConfig | None = None,
                            out_dir=None):
    """Train on the configured label fraction, score Dice on the validation
    split; returns (DiceResult, per-iteration loss log)."""
    train_images = np.asarray(train_images, dtype=np.float32)
    train_masks = np.asarray(train_masks)
    subset = phantoms.split_labels(train_images.shape[0], config.label_fraction,
                                   config.combination_seed)
    model, log = fit_segmentation_head(config, train_images[subset],
                                       train_masks[subset], num_classes, enc_config)
    preds = predict_masks(model, val_images)
    result = evaluate_masks(preds, np.asarray(val_masks), num_classes)
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        payload = result.to_dict()
        payload["config"] = asdict(config)
        with open(out_path / "results.json", "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    return result, log


def ablation_matrix(checkpoints: dict, train_images, train_masks, val_images,
                    val_masks, num_classes: int, base_config: EvalConfig | None = None,
                    out_csv=None) -> dict:
    """Frozen and finetune mean Dice for each pretraining variant.

    ``checkpoints`` maps row name -> checkpoint path (None for the "no_ssl"
    row).  Returns {row: {"frozen": float, "finetune": float}}.
    """
    base = base_config or EvalConfig()
    for row in ABLATION_ROWS:
        if row == "no_ssl":
            continue
        if checkpoints.get(row) is None:
            raise GridError(f"ablation_matrix: missing checkpoint for row {row!r}")
    table: dict[str, dict[str, float]] = {}
    for row in ABLATION_ROWS:
        table[row] = {}
        for mode in ("frozen", "finetune"):
            cfg = EvalConfig(
                mode=mode,
                label_fraction=base.label_fraction,
                combination_seed=base.combination_seed,
                iterations=base.iterations,
                lr=base.lr,
                checkpoint_path=checkpoints.get(row),
                convert_whitening=base.convert_whitening,
                batch_size=base.batch_size,
            )
            result, _ = train_eval_segmentation(cfg, train_images, train_masks,
                                                val_images, val_masks, num_classes)
            table[row][mode] = result.mean
    if out_csv is not None:
        lines = ["method,frozen,finetune"]
        for row in ABLATION_ROWS:
            lines.append(f"{row},{table[row]['frozen']:.6f},{table[row]['finetune']:.6f}")
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return table
