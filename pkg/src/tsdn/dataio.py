"""Dataset scanning, synthetic data generation, and PNG codecs.

The on-disk layout follows the industrial-inspection benchmark convention:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect_type>/*.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

The synthetic generator emits striped textures with solid contrasting
patches as defects, exact masks included, in that same layout.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "DatasetItem",
    "DatasetLayoutError",
    "SynthConfig",
    "scan_dataset",
    "generate_synthetic",
    "load_image",
    "load_mask",
    "save_image",
    "save_label_png",
    "save_score_png",
    "load_score_png",
]


class DatasetLayoutError(ValueError):
    """A required directory of the dataset convention is missing."""


@dataclass(frozen=True)
class DatasetItem:
    image_path: Path
    split: str
    defect_type: str
    mask_path: Path | None = None

    @property
    def is_abnormal(self) -> bool:
        return self.split == "test" and self.defect_type != "good"


@dataclass(frozen=True)
class SynthConfig:
    """Procedural stand-in dataset: textures plus solid defect patches."""

    image_size: int = 64
    n_train: int = 100
    n_test_normal: int = 20
    n_test_abnormal: int = 20
    texture: str = "stripes"
    defect: str = "square"
    defect_size: tuple[int, int] = (8, 16)
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_test_normal, self.n_test_abnormal) < 0:
            raise ValueError("sample counts must be >= 0")
        if self.texture not in ("stripes", "checker", "blobs"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.defect not in ("square", "ellipse"):
            raise ValueError(f"unknown defect {self.defect!r}")
        if self.defect_size[1] >= self.image_size:
            raise ValueError("defect size must be smaller than the image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defect_size"] = list(self.defect_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "defect_size" in d:
            d["defect_size"] = tuple(d["defect_size"])
        return cls(**d)


def scan_dataset(root, category: str) -> list[DatasetItem]:
    """Enumerate one category in deterministic lexicographic order.

    Abnormal test images are paired with ``<stem>_mask.png`` ground truth;
    a missing mask produces a warning and an item with ``mask_path=None``.
    """
    base = Path(root) / category
    train_dir = base / "train" / "good"
    test_dir = base / "test"
    if not train_dir.is_dir():
        raise DatasetLayoutError(f"missing training directory: {train_dir}")
    items = [
        DatasetItem(image_path=p, split="train", defect_type="good")
        for p in sorted(train_dir.glob("*.png"))
    ]
    if test_dir.is_dir():
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img_path in sorted(defect_dir.glob("*.png")):
                mask_path = None
                if defect != "good":
                    candidate = base / "ground_truth" / defect / f"{img_path.stem}_mask.png"
                    if candidate.is_file():
                        mask_path = candidate
                    else:
                        warnings.warn(f"no ground-truth mask for {img_path} (expected {candidate})")
                items.append(DatasetItem(image_path=img_path, split="test", defect_type=defect, mask_path=mask_path))
    return items


# synthetic generation --------------------------------------------------------

_STRIPE_LO = np.array([0.25, 0.32, 0.45])
_STRIPE_HI = np.array([0.65, 0.72, 0.82])


def _texture(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    if cfg.texture == "stripes":
        phase = rng.uniform(0.0, 8.0)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + phase) / 8.0)
    elif cfg.texture == "checker":
        sy, sx = rng.integers(0, 8, size=2)
        wave = (((yy + sy) // 8 + (xx + sx) // 8) % 2).astype(np.float64)
    else:  # blobs
        from .imgproc import gaussian_blur, minmax_normalize

        wave = minmax_normalize(gaussian_blur(rng.random((n, n)), 3.0))
    img = _STRIPE_LO[:, None, None] + (_STRIPE_HI - _STRIPE_LO)[:, None, None] * wave[None]
    return img.astype(np.float32)


def _defect_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    size = int(rng.integers(cfg.defect_size[0], cfg.defect_size[1] + 1))
    cy = int(rng.integers(size // 2 + 1, n - size // 2 - 1))
    cx = int(rng.integers(size // 2 + 1, n - size // 2 - 1))
    mask = np.zeros((n, n), dtype=np.float32)
    if cfg.defect == "square":
        half = size // 2
        mask[cy - half : cy - half + size, cx - half : cx - half + size] = 1.0
    else:
        yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ry = size / 2.0
        rx = max(2.0, size / 3.0)
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1.0
    return mask


def _defect_color(rng: np.random.Generator) -> np.ndarray:
    # rejection-sample a color far from both stripe tones so the defect
    # stays high contrast
    while True:
        color = rng.random(3)
        if min(np.abs(color - _STRIPE_LO).mean(), np.abs(color - _STRIPE_HI).mean()) > 0.25:
            return color


def generate_synthetic(cfg: SynthConfig, out_root) -> Path:
    """Write a complete synthetic category; byte-identical under one seed."""
    out_root = Path(out_root)
    category = out_root / cfg.texture
    rng = np.random.default_rng(cfg.seed)

    train_dir = category / "train" / "good"
    train_dir.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_train):
        save_image(_texture(cfg, rng), train_dir / f"{i:03d}.png")

    test_good = category / "test" / "good"
    test_good.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_test_normal):
        save_image(_texture(cfg, rng), test_good / f"{i:03d}.png")

    if cfg.n_test_abnormal:
        defect_dir = category / "test" / cfg.defect
        gt_dir = category / "ground_truth" / cfg.defect
        defect_dir.mkdir(parents=True, exist_ok=True)
        gt_dir.mkdir(parents=True, exist_ok=True)
        for i in range(cfg.n_test_abnormal):
            img = _texture(cfg, rng)
            mask = _defect_mask(cfg, rng)
            color = _defect_color(rng).astype(np.float32)
            img = np.where(mask[None] > 0, color[:, None, None], img)
            save_image(img, defect_dir / f"{i:03d}.png")
            save_image(mask, gt_dir / f"{i:03d}_mask.png")

    with open(category / "synth_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return category


# PNG codecs -------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as a (C, H, W) float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return np.ascontiguousarray(arr)


def load_mask(path) -> np.ndarray:
    """Read a grayscale mask PNG, binarized at 0.5."""
    arr = load_image(path)
    if arr.shape[0] != 1:
        arr = arr.mean(axis=0, keepdims=True)
    return (arr[0] > 0.5).astype(np.float32)


def save_image(img: np.ndarray, path) -> None:
    """Write a (C, H, W) or (H, W) float array in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[0] == 1:
        im = Image.fromarray(data[0], mode="L")
    elif data.shape[0] == 3:
        im = Image.fromarray(data.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValueError(f"expected 1 or 3 channels, got {data.shape[0]}")
    im.save(path, format="PNG")


def save_label_png(labels: np.ndarray, path) -> None:
    """Write an integer label map as a 16-bit grayscale PNG."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ValueError("labels out of uint16 range")
    Image.fromarray(arr.astype("<u2"), mode="I;16").save(path, format="PNG")


def save_score_png(score_map: np.ndarray, path) -> None:
    """Write a [0, 1] score map as a 16-bit grayscale PNG."""
    arr = np.asarray(score_map, dtype=np.float64)
    data = np.clip(np.rint(arr * 65535.0), 0, 65535).astype("<u2")
    Image.fromarray(data, mode="I;16").save(path, format="PNG")


def load_score_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0
