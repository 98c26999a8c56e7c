"""Anomaly scoring and ROC-AUC evaluation.

Pixel scores are the blurred squared reconstruction error; the image score
is the maximum of that map before any normalization, so scores stay
comparable across images.  AUC uses the rank-statistic formulation with
ties counted as half.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .imgproc import gaussian_blur, minmax_normalize

__all__ = [
    "ScoredImage",
    "pixel_score_map",
    "image_score",
    "normalize_scores",
    "roc_auc",
    "evaluate",
    "default_sigma",
    "save_score_map_raw",
    "load_score_map_raw",
    "SCORE_MAP_MAGIC",
]

SCORE_MAP_MAGIC = b"TSMP"


def default_sigma(input_size: tuple[int, int]) -> float:
    """Blur width scaled from the reference resolution (4 at 352px)."""
    return max(1.0, 4.0 * min(input_size) / 352.0)


@dataclass
class ScoredImage:
    """Scores for one test image plus optional ground truth."""

    score_map: np.ndarray
    image_score: float
    gt_mask: np.ndarray | None = None
    gt_label: int | None = None
    name: str = ""
    defect_type: str = ""


def pixel_score_map(img: np.ndarray, recon: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Blurred per-pixel squared error and its [0, 1] normalization.

    Returns ``(s_map, s_final)``; ``s_map`` feeds the image-level score,
    ``s_final`` is the exportable heat map.
    """
    img = np.asarray(img)
    recon = np.asarray(recon)
    if img.shape != recon.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {recon.shape}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    diff = img.astype(np.float64) - recon.astype(np.float64)
    err = (diff * diff).mean(axis=0) if img.ndim == 3 else diff * diff
    s_map = gaussian_blur(err, sigma)
    return s_map, minmax_normalize(s_map)


def image_score(s_map: np.ndarray) -> float:
    """Maximum of the pre-normalization score map."""
    s_map = np.asarray(s_map)
    if s_map.size == 0:
        raise ValueError("empty score map")
    return float(s_map.max())


def normalize_scores(scores) -> list[float]:
    """Dataset-level min-max rescaling of image scores (order preserving)."""
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no scores to normalize")
    return [float(v) for v in minmax_normalize(arr)]


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties count one half.  Raises ``ValueError`` unless both classes are
    present.
    """
    scores = np.asarray(list(scores), dtype=np.float64)
    labels = np.asarray(list(labels))
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class")
    ranks = _tied_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(items: list[ScoredImage], pool_pixels: bool = True) -> dict:
    """Aggregate image- and pixel-level AUC over a scored test set.

    Pixel AUC pools every pixel of every item carrying a ground-truth mask
    (``pool_pixels=False`` averages per-image AUCs instead, skipping images
    whose mask is single-class).  Metrics that cannot be computed are
    reported as ``None``.
    """
    if not items:
        raise ValueError("nothing to evaluate")
    report: dict = {"pixel_auc": None, "image_auc": None, "categories": {}, "n_images": len(items)}

    labeled = [it for it in items if it.gt_label is not None]
    if labeled:
        labels = [int(it.gt_label) for it in labeled]
        if 0 < sum(labels) < len(labels):
            norm = normalize_scores([it.image_score for it in labeled])
            report["image_auc"] = roc_auc(norm, labels)

    masked = [it for it in items if it.gt_mask is not None]
    if masked:
        report["pixel_auc"] = _pixel_auc(masked, pool_pixels)

    for defect in sorted({it.defect_type for it in items if it.defect_type}):
        subset = [it for it in items if it.defect_type == defect and it.gt_mask is not None]
        entry: dict = {"n_images": sum(it.defect_type == defect for it in items)}
        entry["pixel_auc"] = _pixel_auc(subset, pool_pixels) if subset else None
        report["categories"][defect] = entry
    return report


def _pixel_auc(items: list[ScoredImage], pool_pixels: bool) -> float | None:
    if pool_pixels:
        scores = np.concatenate([it.score_map.ravel() for it in items])
        labels = np.concatenate([(it.gt_mask > 0.5).astype(np.int64).ravel() for it in items])
        if labels.min() == labels.max():
            return None
        return roc_auc(scores, labels)
    per_image = []
    for it in items:
        labels = (it.gt_mask > 0.5).astype(np.int64).ravel()
        if labels.min() == labels.max():
            continue
        per_image.append(roc_auc(it.score_map.ravel(), labels))
    return float(np.mean(per_image)) if per_image else None


# raw score-map container -----------------------------------------------------


def save_score_map_raw(path, score_map: np.ndarray) -> None:
    """Write magic + H + W + row-major little-endian float32 values."""
    arr = np.ascontiguousarray(score_map, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(SCORE_MAP_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_score_map_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SCORE_MAP_MAGIC:
        raise ValueError(f"{path}: not a score-map container (bad magic)")
    h, w = struct.unpack_from("<II", raw, 4)
    return np.frombuffer(raw, dtype="<f4", count=h * w, offset=12).reshape(h, w).copy()


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
