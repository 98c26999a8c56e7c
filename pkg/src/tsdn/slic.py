"""SLIC superpixel segmentation: localized k-means over CIELAB + position.

Cluster centers start on a regular grid with spacing ``S = sqrt(H*W / K)``,
are nudged to the lowest-gradient pixel in a 3x3 neighborhood, and are then
refined by restricted assignment/update rounds.  A connectivity pass merges
stray fragments so every output label is a single 4-connected region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imgproc import rgb_to_lab

__all__ = ["SlicParams", "SuperpixelSegmentation", "slic_segment", "enforce_connectivity"]


@dataclass(frozen=True)
class SlicParams:
    """Settings for superpixel clustering.

    ``compactness`` trades color against spatial proximity (larger values
    give more grid-like regions).  ``seed`` is kept for API stability; the
    clustering itself is deterministic.
    """

    n_segments: int = 400
    compactness: float = 10.0
    iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError(f"n_segments must be >= 1, got {self.n_segments}")
        if self.compactness <= 0:
            raise ValueError(f"compactness must be > 0, got {self.compactness}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class SuperpixelSegmentation:
    """Per-pixel labels in ``[0, num_segments)`` plus per-region centers.

    ``centers`` has one ``(L, a, b, y, x)`` row per label.
    """

    labels: np.ndarray
    num_segments: int
    centers: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def _lab_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) or single-channel image, got shape {img.shape}")
    return rgb_to_lab(img)


def _grid_centers(h: int, w: int, n_segments: int) -> np.ndarray:
    spacing = math.sqrt(h * w / n_segments)
    ny = max(1, round(h / spacing))
    nx = max(1, round(w / spacing))
    ys = ((np.arange(ny) + 0.5) * h / ny).astype(np.intp)
    xs = ((np.arange(nx) + 0.5) * w / nx).astype(np.intp)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _perturb_to_low_gradient(lab: np.ndarray, centers_yx: np.ndarray) -> np.ndarray:
    h, w = lab.shape[1:]
    gy = np.zeros((h, w))
    gx = np.zeros((h, w))
    gy[1:-1] = ((lab[:, 2:, :] - lab[:, :-2, :]) ** 2).sum(axis=0)
    gx[:, 1:-1] = ((lab[:, :, 2:] - lab[:, :, :-2]) ** 2).sum(axis=0)
    grad = gy + gx
    out = centers_yx.copy()
    for i, (cy, cx) in enumerate(centers_yx):
        y0, y1 = max(cy - 1, 0), min(cy + 2, h)
        x0, x1 = max(cx - 1, 0), min(cx + 2, w)
        window = grad[y0:y1, x0:x1]
        dy, dx = np.unravel_index(np.argmin(window), window.shape)
        out[i] = (y0 + dy, x0 + dx)
    return out


def slic_segment(img: np.ndarray, params: SlicParams | None = None) -> SuperpixelSegmentation:
    """Partition an image into roughly ``params.n_segments`` superpixels.

    Parameters
    ----------
    img : ndarray, shape (3, H, W) or (H, W)
        Values in [0, 1]; grayscale input is replicated to three channels.
    params : SlicParams, optional

    Returns
    -------
    SuperpixelSegmentation
        Connected regions covering every pixel; the final region count may
        differ slightly from ``n_segments`` after fragment merging.
    """
    if params is None:
        params = SlicParams()
    lab = _lab_image(img)
    h, w = lab.shape[1:]
    if h * w < params.n_segments:
        raise ValueError(f"n_segments={params.n_segments} exceeds the pixel count {h * w}")

    spacing = math.sqrt(h * w / params.n_segments)
    centers_yx = _perturb_to_low_gradient(lab, _grid_centers(h, w, params.n_segments))
    k = len(centers_yx)
    centers = np.empty((k, 5))
    centers[:, :3] = lab[:, centers_yx[:, 0], centers_yx[:, 1]].T
    centers[:, 3] = centers_yx[:, 0]
    centers[:, 4] = centers_yx[:, 1]

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ratio = (params.compactness / spacing) ** 2
    labels = _nearest_grid_labels(h, w, centers)
    window = int(round(2 * spacing))

    for _ in range(params.iterations):
        best = np.full((h, w), np.inf)
        for ci in range(k):
            cl, ca, cb, cy, cx = centers[ci]
            y0, y1 = max(int(cy) - window, 0), min(int(cy) + window + 1, h)
            x0, x1 = max(int(cx) - window, 0), min(int(cx) + window + 1, w)
            if y0 >= y1 or x0 >= x1:
                continue
            patch = lab[:, y0:y1, x0:x1]
            d_lab = (patch[0] - cl) ** 2 + (patch[1] - ca) ** 2 + (patch[2] - cb) ** 2
            d_xy = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
            dist = d_lab + d_xy * ratio
            closer = dist < best[y0:y1, x0:x1]
            best[y0:y1, x0:x1][closer] = dist[closer]
            labels[y0:y1, x0:x1][closer] = ci

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        nonempty = counts > 0
        sums = np.empty((k, 5))
        for comp in range(3):
            sums[:, comp] = np.bincount(flat, weights=lab[comp].ravel(), minlength=k)
        sums[:, 3] = np.bincount(flat, weights=yy.ravel(), minlength=k)
        sums[:, 4] = np.bincount(flat, weights=xx.ravel(), minlength=k)
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]

    seg = SuperpixelSegmentation(labels=labels.astype(np.int32), num_segments=k, centers=centers)
    min_size = max(1, int((h * w / params.n_segments) / 4))
    seg = enforce_connectivity(seg, min_size)
    _recompute_centers(seg, lab)
    return seg


def _nearest_grid_labels(h: int, w: int, centers: np.ndarray) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # coarse but total initialization: nearest center by squared distance,
    # chunked over centers to bound memory
    best = np.full((h, w), np.inf)
    labels = np.zeros((h, w), dtype=np.intp)
    for ci, (_, _, _, cy, cx) in enumerate(centers):
        d = (yy - cy) ** 2 + (xx - cx) ** 2
        closer = d < best
        best[closer] = d[closer]
        labels[closer] = ci
    return labels


def _recompute_centers(seg: SuperpixelSegmentation, lab: np.ndarray) -> None:
    h, w = seg.labels.shape
    flat = seg.labels.ravel()
    k = seg.num_segments
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    centers = np.empty((k, 5))
    for comp in range(3):
        centers[:, comp] = np.bincount(flat, weights=lab[comp].ravel(), minlength=k)
    centers[:, 3] = np.bincount(flat, weights=yy.ravel(), minlength=k)
    centers[:, 4] = np.bincount(flat, weights=xx.ravel(), minlength=k)
    seg.centers = centers / counts[:, None]


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def enforce_connectivity(seg: SuperpixelSegmentation, min_size: int) -> SuperpixelSegmentation:
    """Split disconnected labels and absorb fragments smaller than ``min_size``.

    Each 4-connected component becomes its own region; components below
    ``min_size`` are merged into the adjacent region sharing the longest
    boundary.  Labels are re-densified to ``[0, K')``.  Centers of merged
    regions mix the originating centers by size (colors are approximate when
    the source image is not available).
    """
    labels = np.asarray(seg.labels)
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    n_comp = 0
    origin = []
    for lbl in np.unique(labels):
        mask = labels == lbl
        comp_lbl, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
        comp[mask] = comp_lbl[mask] + n_comp - 1
        n_comp += n
        origin.extend([lbl] * n)
    origin = np.asarray(origin)
    sizes = np.bincount(comp.ravel(), minlength=n_comp)

    boundary = _boundary_counts(comp, n_comp)
    parent = np.arange(n_comp)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for ci in np.argsort(sizes, kind="stable"):
        root = find(ci)
        if sizes[root] >= min_size:
            continue
        neighbors = {}
        for other, count in boundary.get(root, {}).items():
            other_root = find(other)
            if other_root != root:
                neighbors[other_root] = neighbors.get(other_root, 0) + count
        if not neighbors:
            continue
        target = max(sorted(neighbors), key=lambda n: neighbors[n])
        parent[root] = target
        sizes[target] += sizes[root]
        merged = boundary.pop(root, {})
        tgt_edges = boundary.setdefault(target, {})
        for other, count in merged.items():
            if find(other) != target:
                tgt_edges[other] = tgt_edges.get(other, 0) + count

    roots = np.array([find(c) for c in range(n_comp)])
    unique_roots, dense = np.unique(roots, return_inverse=True)
    new_labels = dense[comp].astype(np.int32)
    k_new = len(unique_roots)

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    flat = new_labels.ravel()
    counts = np.bincount(flat, minlength=k_new).astype(np.float64)
    centers = np.zeros((k_new, 5))
    comp_sizes = np.bincount(comp.ravel(), minlength=n_comp)
    for ci in range(n_comp):
        centers[dense[ci], :3] += seg.centers[origin[ci], :3] * comp_sizes[ci]
    centers[:, :3] /= counts[:, None]
    centers[:, 3] = np.bincount(flat, weights=yy.ravel(), minlength=k_new) / counts
    centers[:, 4] = np.bincount(flat, weights=xx.ravel(), minlength=k_new) / counts
    return SuperpixelSegmentation(labels=new_labels, num_segments=k_new, centers=centers)


def _boundary_counts(comp: np.ndarray, n_comp: int) -> dict[int, dict[int, int]]:
    """Shared 4-neighbor boundary lengths between component pairs."""
    pairs = []
    horiz = np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1)
    vert = np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1)
    for arr in (horiz, vert):
        diff = arr[arr[:, 0] != arr[:, 1]]
        pairs.append(diff)
    if not pairs:
        return {}
    all_pairs = np.concatenate(pairs)
    lo = np.minimum(all_pairs[:, 0], all_pairs[:, 1])
    hi = np.maximum(all_pairs[:, 0], all_pairs[:, 1])
    keys = lo * n_comp + hi
    uniq, counts = np.unique(keys, return_counts=True)
    out: dict[int, dict[int, int]] = {}
    for key, count in zip(uniq, counts):
        a, b = int(key // n_comp), int(key % n_comp)
        out.setdefault(a, {})[b] = int(count)
        out.setdefault(b, {})[a] = int(count)
    return out
