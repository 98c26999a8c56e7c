"""Pure image/tensor primitives shared across the pipeline.

Conventions
-----------
Images are ``float`` arrays of shape ``(C, H, W)`` with values nominally in
``[0, 1]``; single-channel maps ("mask maps", score maps) are ``(H, W)``.
All functions here are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SsimParams",
    "rgb_to_lab",
    "resize_bilinear",
    "gaussian_blur",
    "gaussian_kernel1d",
    "ssim_mean",
    "gms_mean",
    "minmax_normalize",
    "GMS_C",
]

# Stabilization constant for gradient magnitude similarity on [0, 1] inputs
# (170 / 255**2 rounded, the convention for 8-bit data rescaled to unit range).
GMS_C = 0.0026

# sRGB (D65) -> XYZ; rows sum to the D65 white point.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.00000, 1.08883])


@dataclass(frozen=True)
class SsimParams:
    """Parameters of the windowed structural similarity index.

    ``c1``/``c2`` default to the standard ``(0.01 * L)**2`` and
    ``(0.03 * L)**2`` where ``L`` is ``dynamic_range``.
    """

    window_size: int = 11
    window_sigma: float = 1.5
    dynamic_range: float = 1.0
    c1: float = field(default=None)  # type: ignore[assignment]
    c2: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.c1 is None:
            object.__setattr__(self, "c1", (0.01 * self.dynamic_range) ** 2)
        if self.c2 is None:
            object.__setattr__(self, "c2", (0.03 * self.dynamic_range) ** 2)
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image in [0, 1] to CIELAB (D65 white point).

    Parameters
    ----------
    img : ndarray, shape (3, H, W)

    Returns
    -------
    ndarray, shape (3, H, W)
        L in [0, 100], a/b roughly in [-128, 127].
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    rgb = img.astype(np.float64, copy=False)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, lin)
    xyz /= _WHITE_D65[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    lightness = 116.0 * f[1] - 16.0
    a = 500.0 * (f[0] - f[1])
    b = 200.0 * (f[1] - f[2])
    return np.stack([lightness, a, b])


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample (half-pixel-centered sampling, edges clamped).

    Accepts ``(C, H, W)`` or ``(H, W)`` arrays and preserves the layout.
    Resizing to the input size returns a bit-identical copy.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got ({out_h}, {out_w})")
    arr = np.asarray(img)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {np.shape(img)}")
    _, h, w = arr.shape
    if (out_h, out_w) == (h, w):
        out = arr.copy()
        return out[0] if squeeze else out

    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    r0 = arr[:, y0[:, None], x0[None, :]] * (1.0 - fx) + arr[:, y0[:, None], x1[None, :]] * fx
    r1 = arr[:, y1[:, None], x0[None, :]] * (1.0 - fx) + arr[:, y1[:, None], x1[None, :]] * fx
    out = (r0 * (1.0 - fy) + r1 * fy).astype(arr.dtype, copy=False)
    return out[0] if squeeze else out


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at radius ``ceil(3 * sigma)``."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders.

    ``sigma=0`` returns an unchanged copy.  The kernel is truncated at
    radius ``ceil(3 * sigma)`` and renormalized, so constant inputs are
    preserved exactly.  Accepts ``(H, W)`` or ``(C, H, W)`` arrays.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    arr = np.asarray(img)
    if sigma == 0:
        return arr.copy()
    kernel = gaussian_kernel1d(sigma)
    if arr.ndim == 2:
        return _sepconv_reflect(arr, kernel).astype(arr.dtype, copy=False)
    if arr.ndim == 3:
        out = np.stack([_sepconv_reflect(ch, kernel) for ch in arr])
        return out.astype(arr.dtype, copy=False)
    raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")


def _sepconv_reflect(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate a 2-D plane with a separable kernel, reflect padding."""
    radius = len(kernel) // 2
    work = plane.astype(np.float64, copy=False)
    padded = np.pad(work, ((0, 0), (radius, radius)), mode="symmetric")
    work = np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=1) @ kernel
    padded = np.pad(work, ((radius, radius), (0, 0)), mode="symmetric")
    return np.lib.stride_tricks.sliding_window_view(padded, len(kernel), axis=0) @ kernel


def _ssim_window(params: SsimParams) -> np.ndarray:
    half = (params.window_size - 1) / 2.0
    offsets = np.arange(params.window_size) - half
    k = np.exp(-0.5 * (offsets / params.window_sigma) ** 2)
    return k / k.sum()


def _sepconv_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.lib.stride_tricks.sliding_window_view(plane, len(kernel), axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(out, len(kernel), axis=0) @ kernel


def ssim_mean(a: np.ndarray, b: np.ndarray, params: SsimParams | None = None) -> float:
    """Mean local structural similarity between two single-channel maps.

    Local statistics use a Gaussian-weighted window evaluated at every
    position where the window fully fits (valid mode).  The result lies in
    ``[-1, 1]``; identical inputs give exactly 1.

    Raises ``ValueError`` on shape mismatch or maps smaller than the window.
    """
    if params is None:
        params = SsimParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected 2-D maps, got shape {a.shape}")
    if min(a.shape) < params.window_size:
        raise ValueError(f"maps of shape {a.shape} are smaller than the {params.window_size}-pixel window")

    k = _ssim_window(params)
    mu_a = _sepconv_valid(a, k)
    mu_b = _sepconv_valid(b, k)
    var_a = _sepconv_valid(a * a, k) - mu_a**2
    var_b = _sepconv_valid(b * b, k) - mu_b**2
    cov = _sepconv_valid(a * b, k) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + params.c1) * (2.0 * cov + params.c2)
    den = (mu_a**2 + mu_b**2 + params.c1) * (var_a + var_b + params.c2)
    return float(np.mean(num / den))


_PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
_PREWITT_Y = _PREWITT_X.T


def _conv2d_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(plane, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def gms_mean(a: np.ndarray, b: np.ndarray, c: float = GMS_C) -> float:
    """Mean gradient magnitude similarity between two single-channel maps.

    Gradient magnitudes come from 3x3 Prewitt operators evaluated on the
    interior (valid positions); per-pixel similarity is
    ``(2 * g_a * g_b + c) / (g_a**2 + g_b**2 + c)``.  The mean lies in
    ``(0, 1]`` and equals 1 for maps with identical gradient fields.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 3:
        raise ValueError(f"expected 2-D maps with both dimensions >= 3, got shape {a.shape}")
    g_a = np.hypot(_conv2d_valid(a, _PREWITT_X), _conv2d_valid(a, _PREWITT_Y))
    g_b = np.hypot(_conv2d_valid(b, _PREWITT_X), _conv2d_valid(b, _PREWITT_Y))
    sim = (2.0 * g_a * g_b + c) / (g_a**2 + g_b**2 + c)
    return float(np.mean(sim))


def minmax_normalize(arr: np.ndarray) -> np.ndarray:
    """Affinely map values to [0, 1]; a constant array maps to all zeros.

    Monotone (order preserving) and idempotent.
    """
    arr = np.asarray(arr)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    lo = arr.min()
    hi = arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)
