"""Synthetic anatomy phantoms: grayscale images with pixel-accurate masks.

Every sample is a smooth warp of one shared template (seeded ellipsoidal
"organs" over a body ellipse), so the dataset exhibits the high inter-image
similarity of slice imagery while still providing exact segmentation labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PhantomConfig",
    "PhantomSample",
    "DatasetError",
    "generate_phantom",
    "write_dataset",
    "load_batch",
    "split_labels",
]

FORMAT_VERSION = 1


class DatasetError(Exception):
    """Manifest/layout problems in an on-disk phantom dataset."""


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    num_classes: int = 5          # background + organs
    num_samples: int = 2048
    template_seed: int = 7
    sample_seed_base: int = 1000
    deform_amplitude: float = 0.15
    texture_noise: float = 0.05

    def __post_init__(self):
        if self.num_classes < 2:
            raise DatasetError("PhantomConfig: need at least 2 classes")
        if not 0.0 <= self.deform_amplitude < 0.5:
            raise DatasetError("PhantomConfig: deform_amplitude must be in [0, 0.5)")
        if self.image_size < 8:
            raise DatasetError("PhantomConfig: image_size too small")


@dataclass
class PhantomSample:
    image: np.ndarray   # [1, H, W] float32 in [0, 1]
    mask: np.ndarray    # [H, W] uint8 in 0..num_classes-1
    sample_id: int


# intensity bands: (low, high) per class; class 0 covers air and body tissue
_BODY_INTENSITY = 0.30
_AIR_INTENSITY = 0.05
_ORGAN_BASE = 0.45
_ORGAN_STEP = 0.12
_ORGAN_SHADE = 0.02


def class_intensity_band(class_id: int) -> tuple[float, float]:
    """Closed intensity interval a class occupies in the noise-free template."""
    if class_id == 0:
        return (_AIR_INTENSITY, _BODY_INTENSITY)
    base = _ORGAN_BASE + _ORGAN_STEP * (class_id - 1)
    return (base - _ORGAN_SHADE, base + _ORGAN_SHADE)


_template_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _build_template(config: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free template image and mask shared by the whole population."""
    key = (config.image_size, config.num_classes, config.template_seed)
    if key in _template_cache:
        return _template_cache[key]
    rng = np.random.default_rng(config.template_seed)
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1.0)

    image = np.full((s, s), _AIR_INTENSITY, dtype=np.float64)
    mask = np.zeros((s, s), dtype=np.uint8)

    # body: one large ellipse; stays class 0 but sets the tissue intensity
    body = ((yy - 0.5) / 0.42) ** 2 + ((xx - 0.5) / 0.46) ** 2 <= 1.0
    image[body] = _BODY_INTENSITY

    n_organs = config.num_classes - 1
    for c in range(1, config.num_classes):
        angle = 2.0 * np.pi * (c - 1) / max(n_organs, 1) + rng.uniform(-0.15, 0.15)
        radius = 0.21 + rng.uniform(-0.02, 0.02) if n_organs > 1 else 0.0
        cy = 0.5 + radius * np.sin(angle)
        cx = 0.5 + radius * np.cos(angle)
        ay = rng.uniform(0.08, 0.13)
        ax = rng.uniform(0.08, 0.13)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        ry = (yy - cy) * ct + (xx - cx) * st
        rx = -(yy - cy) * st + (xx - cx) * ct
        r2 = (ry / ay) ** 2 + (rx / ax) ** 2
        organ = r2 <= 1.0
        base = _ORGAN_BASE + _ORGAN_STEP * (c - 1)
        # mild radial shading keeps the band non-degenerate but tight
        image[organ] = base + _ORGAN_SHADE * (1.0 - 2.0 * r2[organ])
        mask[organ] = c
    _template_cache[key] = (image, mask)
    return image, mask


def _displacement_field(rng: np.random.Generator, size: int, amplitude: float):
    """Smooth low-frequency field; peak displacement ~ amplitude * size / 4."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    n_comp = int(rng.integers(4, 9))
    dy = np.zeros((size, size))
    dx = np.zeros((size, size))
    scale = amplitude * size / 4.0 / n_comp
    for _ in range(n_comp):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        ay, ax = rng.uniform(0.5, 1.0, size=2) * scale
        dy += ay * np.sin(2 * np.pi * (fy * yy + fx * xx) + py)
        dx += ax * np.sin(2 * np.pi * (fx * yy + fy * xx) + px)
    return dy, dx


def _warp_bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = sy - y0
    wx = sx - x0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _warp_nearest(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    iy = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
    ix = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
    return img[iy, ix]


def generate_phantom(config: PhantomConfig, sample_index: int) -> PhantomSample:
    """Deterministically generate sample ``sample_index``: the template under a
    per-sample smooth deformation plus additive texture noise."""
    if sample_index < 0 or sample_index >= config.num_samples:
        raise DatasetError(
            f"sample_index {sample_index} out of range [0, {config.num_samples})"
        )
    template_img, template_mask = _build_template(config)
    rng = np.random.default_rng(config.sample_seed_base + sample_index)
    s = config.image_size
    if config.deform_amplitude > 0:
        dy, dx = _displacement_field(rng, s, config.deform_amplitude)
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        image = _warp_bilinear(template_img, yy + dy, xx + dx)
        mask = _warp_nearest(template_mask, yy + dy, xx + dx)
    else:
        rng.integers(4, 9)  # keep the stream layout identical
        image = template_img.copy()
        mask = template_mask.copy()
    if config.texture_noise > 0:
        image = image + rng.normal(0.0, config.texture_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return PhantomSample(
        image=image.astype(np.float32)[None],
        mask=mask.astype(np.uint8),
        sample_id=sample_index,
    )


def write_dataset(config: PhantomConfig, path) -> dict:
    """Materialize the dataset: manifest.json + images.bin + masks.bin."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": config.num_samples,
        "config": asdict(config),
    }
    with open(root / "images.bin", "wb") as fimg, open(root / "masks.bin", "wb") as fmask:
        for i in range(config.num_samples):
            sample = generate_phantom(config, i)
            fimg.write(sample.image.astype("<f4").tobytes())
            fmask.write(sample.mask.astype(np.uint8).tobytes())
    with open(root / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_manifest(path) -> dict:
    root = Path(path)
    try:
        with open(root / "manifest.json", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"no manifest.json under {root}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupted manifest under {root}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(
            f"unsupported dataset format {manifest.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return manifest


def load_batch(path, indices) -> tuple[np.ndarray, np.ndarray]:
    """Load the requested samples, in order, duplicates allowed."""
    root = Path(path)
    manifest = read_manifest(root)
    count = manifest["count"]
    size = manifest["config"]["image_size"]
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= count):
        raise DatasetError(f"index out of range [0, {count})")
    images = np.memmap(root / "images.bin", dtype="<f4", mode="r",
                       shape=(count, 1, size, size))
    masks = np.memmap(root / "masks.bin", dtype=np.uint8, mode="r",
                      shape=(count, size, size))
    return np.array(images[idx]), np.array(masks[idx])


def split_labels(manifest_or_count, fraction: float, combination_seed: int) -> np.ndarray:
    """Deterministic label subset of size round(fraction * N), without duplicates."""
    if isinstance(manifest_or_count, dict):
        count = manifest_or_count["count"]
    else:
        count = int(manifest_or_count)
    if not 0 < fraction <= 1:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    n = int(round(fraction * count))
    if n < 1:
        raise DatasetError(f"fraction {fraction} yields an empty split of {count}")
    if n == count:
        return np.arange(count, dtype=np.int64)
    rng = np.random.default_rng(combination_seed)
    return np.sort(rng.choice(count, size=n, replace=False)).astype(np.int64)
