"""Superpixel random filling: synthetic defects for training.

A fixed number of superpixels is drawn without replacement and each is
painted with one uniform-random color, yielding a distorted image plus the
binary mask of the repainted pixels.  Inference never applies this
transform; it exists purely to corrupt anomaly-free training images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .slic import SlicParams, SuperpixelSegmentation, slic_segment

__all__ = ["SurfConfig", "SurfSample", "surf_transform", "surf_batch", "transform_count"]

# Number of surf_transform invocations since import; lets callers assert the
# transform stays out of inference paths.
_TRANSFORM_COUNT = 0


def transform_count() -> int:
    return _TRANSFORM_COUNT


@dataclass(frozen=True)
class SurfConfig:
    """How many superpixels to build and how many of them to repaint."""

    n_segments: int = 400
    fill_count: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fill_count <= self.n_segments:
            raise ValueError(f"fill_count must be in [0, n_segments], got {self.fill_count} of {self.n_segments}")


@dataclass
class SurfSample:
    """A training pair: clean image, repainted image, and fill mask."""

    original: np.ndarray
    distorted: np.ndarray
    mask: np.ndarray
    filled_labels: np.ndarray

    def __post_init__(self):
        self.filled_labels = np.sort(np.asarray(self.filled_labels, dtype=np.int64))


def surf_transform(
    img: np.ndarray,
    seg: SuperpixelSegmentation,
    cfg: SurfConfig,
    rng: np.random.Generator | None = None,
) -> SurfSample:
    """Repaint ``cfg.fill_count`` random superpixels with random colors.

    Pixels outside the returned mask are bit-identical to the input; the
    mask is exactly the union of the chosen superpixels.  When the
    segmentation produced fewer regions than ``fill_count``, all regions
    are filled.
    """
    global _TRANSFORM_COUNT
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    if img.shape[1:] != seg.labels.shape:
        raise ValueError(f"image {img.shape[1:]} and segmentation {seg.labels.shape} dimensions differ")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    _TRANSFORM_COUNT += 1

    k = seg.num_segments
    n_fill = min(cfg.fill_count, k)
    chosen = rng.choice(k, size=n_fill, replace=False) if n_fill else np.empty(0, dtype=np.int64)
    colors = rng.random((n_fill, img.shape[0]))

    mask = np.isin(seg.labels, chosen)
    palette = np.zeros((k, img.shape[0]), dtype=img.dtype)
    if n_fill:
        palette[chosen] = colors.astype(img.dtype)
    fill = palette[seg.labels].transpose(2, 0, 1)
    distorted = np.where(mask[None], fill, img)
    return SurfSample(
        original=img,
        distorted=distorted,
        mask=mask.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32),
        filled_labels=chosen,
    )


def surf_batch(
    imgs: list[np.ndarray],
    cfg: SurfConfig,
    rng: np.random.Generator,
    segmentations: list[SuperpixelSegmentation] | None = None,
    slic_params: SlicParams | None = None,
) -> list[SurfSample]:
    """Apply the transform independently to each image.

    Each sample consumes one derived seed from ``rng``, so a batch of one
    equals a single :func:`surf_transform` call with that seed, and an
    advancing ``rng`` re-randomizes every epoch.  Precomputed
    ``segmentations`` may be passed to skip the per-image clustering.
    """
    if not imgs:
        raise ValueError("surf_batch needs a non-empty image list")
    if slic_params is None:
        slic_params = SlicParams(n_segments=cfg.n_segments, seed=cfg.seed)
    out = []
    for i, img in enumerate(imgs):
        seg = segmentations[i] if segmentations is not None else slic_segment(img, slic_params)
        child = np.random.default_rng(rng.integers(np.iinfo(np.int64).max))
        out.append(surf_transform(img, seg, cfg, rng=child))
    return out
