"""Command-line entry point.

Subcommands: gen-data, pretrain, diagnose, evaluate, ablate.  Runs are
configured by a flat ``key = value`` file plus ``--set key=value`` overrides;
every run directory receives the fully resolved configuration as
``config.resolved`` so outputs are reproducible from the directory alone.

Exit codes: 0 success, 1 configuration error, 2 runtime/numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, downstream, engine, phantoms
from .checkpoint import CheckpointError
from .downstream import ABLATION_ROWS, EvalConfig
from .engine import TrainConfig
from .grid import GridError
from .phantoms import DatasetError, PhantomConfig

__all__ = ["run", "main", "ConfigError", "CONFIG_SCHEMA"]


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_optional_float(raw: str):
    if raw.strip().lower() in ("auto", "none", ""):
        return None
    return float(raw)


# key -> (parser, default)
CONFIG_SCHEMA: dict[str, tuple] = {
    # data generation
    "data_dir": (str, ""),
    "image_size": (int, 64),
    "num_classes": (int, 5),
    "num_samples": (int, 2048),
    "template_seed": (int, 7),
    "sample_seed_base": (int, 1000),
    "deform_amplitude": (float, 0.15),
    "texture_noise": (float, 0.05),
    "seg_train_samples": (int, 256),
    "seg_val_samples": (int, 64),
    # pretraining
    "batch_size": (int, 32),
    "queue_size": (int, 1024),
    "momentum": (float, 0.999),
    "tau": (float, 0.2),
    "lambda": (float, 1.0),
    "K": (int, 20),
    "epochs": (int, 20),
    "lr": (float, 0.03),
    "weight_decay": (float, 1e-4),
    "sgd_momentum": (float, 0.9),
    "enable_local": (_parse_bool, True),
    "enable_whitening": (_parse_bool, True),
    "denominator_includes_positive": (_parse_bool, True),
    "checkpoint_every": (int, 0),
    "seed": (int, 0),
    "dtype": (str, "float32"),
    # downstream evaluation
    "eval_mode": (str, "frozen"),
    "label_fraction": (float, 1.0),
    "combination_seed": (int, 0),
    "eval_iterations": (int, 2000),
    "eval_lr": (_parse_optional_float, None),
    "checkpoint_path": (str, ""),
    "convert_whitening": (_parse_bool, True),
    "eval_batch_size": (int, 8),
}


def parse_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        values[key] = raw
    return values


def resolve_config(file_values: dict | None, overrides: list[str]) -> dict:
    """Apply schema defaults, then file values, then --set overrides (last wins)."""
    raw: dict[str, str] = dict(file_values or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    config = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    for key, raw_value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            config[key] = parser(raw_value)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}") from e
    return config


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_resolved(config: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {_format_value(config[key])}" for key in sorted(config)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _phantom_config(config: dict, num_samples: int, seed_base: int) -> PhantomConfig:
    return PhantomConfig(
        image_size=config["image_size"],
        num_classes=config["num_classes"],
        num_samples=num_samples,
        template_seed=config["template_seed"],
        sample_seed_base=seed_base,
        deform_amplitude=config["deform_amplitude"],
        texture_noise=config["texture_noise"],
    )


def _train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=config["batch_size"],
        queue_size=config["queue_size"],
        momentum=config["momentum"],
        tau=config["tau"],
        lambda_=config["lambda"],
        num_patches=config["K"],
        epochs=config["epochs"],
        lr=config["lr"],
        weight_decay=config["weight_decay"],
        sgd_momentum=config["sgd_momentum"],
        enable_local=config["enable_local"],
        enable_whitening=config["enable_whitening"],
        denominator_includes_positive=config["denominator_includes_positive"],
        checkpoint_every=config["checkpoint_every"],
        seed=config["seed"],
        dtype=config["dtype"],
    )


def _eval_config(config: dict, checkpoint_path=None, mode=None, seed=None) -> EvalConfig:
    return EvalConfig(
        mode=mode if mode is not None else config["eval_mode"],
        label_fraction=config["label_fraction"],
        combination_seed=seed if seed is not None else config["combination_seed"],
        iterations=config["eval_iterations"],
        lr=config["eval_lr"],
        checkpoint_path=checkpoint_path if checkpoint_path is not None
        else (config["checkpoint_path"] or None),
        convert_whitening=config["convert_whitening"],
        batch_size=config["eval_batch_size"],
    )


def _dataset_dir(config: dict, subset: str | None = None) -> Path:
    root = Path(config["data_dir"])
    if not config["data_dir"]:
        raise ConfigError("data_dir is required for this subcommand")
    if subset is not None and (root / subset / "manifest.json").exists():
        return root / subset
    if (root / "manifest.json").exists():
        return root
    where = f"{root}/{subset}" if subset else str(root)
    raise DatasetError(f"no dataset manifest found under {where}")


def _load_all(path: Path):
    manifest = phantoms.read_manifest(path)
    return phantoms.load_batch(path, range(manifest["count"])) + (manifest,)


def cmd_gen_data(config: dict, out: Path) -> None:
    write_resolved(config, out)
    base = config["sample_seed_base"]
    n_pre = config["num_samples"]
    n_tr = config["seg_train_samples"]
    n_val = config["seg_val_samples"]
    phantoms.write_dataset(_phantom_config(config, n_pre, base), out / "pretrain")
    phantoms.write_dataset(_phantom_config(config, n_tr, base + n_pre), out / "train")
    phantoms.write_dataset(_phantom_config(config, n_val, base + n_pre + n_tr), out / "val")
    print(f"wrote datasets under {out} (pretrain={n_pre}, train={n_tr}, val={n_val})")


def cmd_pretrain(config: dict, out: Path) -> None:
    write_resolved(config, out)
    data = _dataset_dir(config, "pretrain")
    images, _, _ = _load_all(data)
    state, metrics = engine.pretrain(_train_config(config), images, out_dir=out)
    print(f"pretrained {state.step} steps; final loss_total="
          f"{metrics[-1]['loss_total']:.6f}; checkpoints in {out}")


def cmd_diagnose(config: dict, out: Path, ckpt_path: str, source: str) -> None:
    write_resolved(config, out)
    state = engine.load_checkpoint(ckpt_path)
    data = _dataset_dir(config, "val")
    images, _, _ = _load_all(data)
    feats = engine.eval_features(state, images, source=source)
    label = "pooled_backbone" if source == "pooled" else "projector_embedding"
    report = diagnostics.make_spectrum_report(feats, source=label)
    diagnostics.export_spectrum_csv(report, out / "spectrum.csv")
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    print(f"effective_rank={report.effective_rank:.3f} "
          f"collapse_index={report.collapse_index} -> {out}")


def cmd_evaluate(config: dict, out: Path) -> None:
    write_resolved(config, out)
    train_dir = _dataset_dir(config, "train")
    val_dir = _dataset_dir(config, "val")
    tr_images, tr_masks, tr_manifest = _load_all(train_dir)
    va_images, va_masks, _ = _load_all(val_dir)
    num_classes = tr_manifest["config"]["num_classes"]
    result, _ = downstream.train_eval_segmentation(
        _eval_config(config), tr_images, tr_masks, va_images, va_masks,
        num_classes, out_dir=out)
    print(f"mean dice={result.mean:.4f} over {len(result.class_ids)} classes -> {out}")


_ABLATION_FLAGS = {
    "baseline": (False, False),
    "local": (True, False),
    "decorr": (False, True),
    "both": (True, True),
}


def _latest_checkpoint(run_dir: Path):
    latest = None
    best = -1
    for p in run_dir.glob("ckpt_*.mmc1"):
        try:
            step = int(p.stem.split("_")[1])
        except (IndexError, ValueError):
            continue
        if step > best:
            best = step
            latest = p
    return latest


def cmd_ablate(config: dict, out: Path) -> None:
    write_resolved(config, out)
    pre_dir = _dataset_dir(config, "pretrain")
    images, _, _ = _load_all(pre_dir)
    checkpoints: dict[str, str | None] = {"no_ssl": None}
    for row, (local, decorr) in _ABLATION_FLAGS.items():
        run_dir = out / f"pretrain_{row}"
        existing = _latest_checkpoint(run_dir) if run_dir.exists() else None
        if existing is None:
            cfg = _train_config(config)
            cfg = TrainConfig(**{**cfg.__dict__, "enable_local": local,
                                 "enable_whitening": decorr})
            engine.pretrain(cfg, images, out_dir=run_dir)
            existing = _latest_checkpoint(run_dir)
        checkpoints[row] = str(existing)
    train_dir = _dataset_dir(config, "train")
    val_dir = _dataset_dir(config, "val")
    tr_images, tr_masks, tr_manifest = _load_all(train_dir)
    va_images, va_masks, _ = _load_all(val_dir)
    table = downstream.ablation_matrix(
        checkpoints, tr_images, tr_masks, va_images, va_masks,
        tr_manifest["config"]["num_classes"],
        base_config=_eval_config(config), out_csv=out / "ablation.csv")
    for row in ABLATION_ROWS:
        print(f"{row}: frozen={table[row]['frozen']:.4f} "
              f"finetune={table[row]['finetune']:.4f}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="minimoco", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name in ("gen-data", "pretrain", "diagnose", "evaluate", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override a config key (last wins)")
        p.add_argument("--out", required=True, help="run directory")
        if name == "diagnose":
            p.add_argument("checkpoint", help="checkpoint file (.mmc1)")
            p.add_argument("--source", choices=("pooled", "embedding"),
                           default="pooled")
    return parser


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("missing subcommand "
                              "(gen-data | pretrain | diagnose | evaluate | ablate)")
        file_values = parse_config_file(args.config) if args.config else None
        config = resolve_config(file_values, args.overrides)
        out = Path(args.out)
        if args.command == "gen-data":
            cmd_gen_data(config, out)
        elif args.command == "pretrain":
            cmd_pretrain(config, out)
        elif args.command == "diagnose":
            cmd_diagnose(config, out, args.checkpoint, args.source)
        elif args.command == "evaluate":
            cmd_evaluate(config, out)
        else:
            cmd_ablate(config, out)
        return 0
    except ConfigError as e:
        print(json.dumps({"error": "config", "detail": str(e)}), file=sys.stderr)
        return 1
    except (GridError, CheckpointError, DatasetError, OSError, ValueError) as e:
        print(json.dumps({"error": "runtime", "detail": str(e)}), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
