"""Optimization: the five-term objective, FNE targets, Adam, and the loop.

The reconstruction is penalized three ways (pixel MSE, structural
similarity, gradient magnitude similarity), the predicted fill mask by MSE,
and the channel gate by cross entropy against a target built from the
inverted per-channel similarity between the upscaled bottleneck and the
predicted mask.  All five are combined by fixed weights into one scalar.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imgproc import SsimParams, minmax_normalize, resize_bilinear
from .network import NetworkConfig, TsdnModel, save_checkpoint
from .slic import SlicParams, slic_segment
from .surf import SurfConfig, SurfSample, surf_batch

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "Adam",
    "compute_w_gt",
    "loss_reconstruction",
    "loss_ssim",
    "loss_gms",
    "loss_mask",
    "loss_fne",
    "total_loss",
    "train_step",
    "evaluate_batch",
    "train_loop",
    "LOSS_CSV_HEADER",
]

LOSS_CSV_HEADER = ["epoch", "step", "l_r", "l_s", "l_g", "l_m", "l_fne", "total"]

# smoothing inside the gradient-magnitude sqrt; keeps the loss value within
# ~1e-5 of the exact metric while bounding the derivative at zero gradient
_GMS_EPS = 1e-10


class TrainingDivergedError(RuntimeError):
    """Raised when a loss term stops being finite; carries the term name."""

    def __init__(self, term: str, breakdown: "LossBreakdown | None" = None):
        super().__init__(f"training diverged: loss term {term!r} is not finite")
        self.term = term
        self.breakdown = breakdown


@dataclass(frozen=True)
class LossWeights:
    """Contribution weights of the five objective terms."""

    lambda_r: float = 1.0
    lambda_s: float = 5e-1
    lambda_g: float = 1.0
    lambda_m: float = 1.0
    lambda_f: float = 5e-5

    def __post_init__(self):
        for name in ("lambda_r", "lambda_s", "lambda_g", "lambda_m", "lambda_f"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    l_r: float = 0.0
    l_s: float = 0.0
    l_g: float = 0.0
    l_m: float = 0.0
    l_fne: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [self.l_r, self.l_s, self.l_g, self.l_m, self.l_fne, self.total]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7e-5
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    surf: SurfConfig = field(default_factory=SurfConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    detach_fne_target: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.detach_fne_target:
            raise ValueError(
                "detach_fne_target=False is unsupported: the gate target is built "
                "from the prediction itself and must be treated as a constant"
            )


@dataclass
class TrainResult:
    checkpoint_path: Path
    history: list[LossBreakdown]
    loss_csv_path: Path


# -- individual loss terms ----------------------------------------------------


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_reconstruction(img, recon) -> Tensor:
    """Mean squared error over all elements."""
    img, recon = _pair(img, recon)
    diff = img - recon
    return (diff * diff).mean()


loss_mask = loss_reconstruction


def _flatten_channels(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n * c, 1, h, w)


def _window_kernels(params: SsimParams, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = (params.window_size - 1) / 2.0
    k = np.exp(-0.5 * ((np.arange(params.window_size) - half) / params.window_sigma) ** 2)
    k = (k / k.sum()).astype(dtype)
    return k.reshape(1, 1, -1, 1), k.reshape(1, 1, 1, -1)


def _window_mean(x: Tensor, krow: np.ndarray, kcol: np.ndarray) -> Tensor:
    return ad.conv2d(ad.conv2d(x, Tensor(krow)), Tensor(kcol))


def loss_ssim(img, recon, params: SsimParams | None = None) -> Tensor:
    """One minus the mean channel-wise structural similarity; 0 at identity."""
    if params is None:
        params = SsimParams()
    img, recon = _pair(img, recon)
    if img.ndim == 3:
        img, recon = ad.reshape(img, (1,) + img.shape), ad.reshape(recon, (1,) + recon.shape)
    x, y = _flatten_channels(img), _flatten_channels(recon)
    krow, kcol = _window_kernels(params, x.dtype)
    mu_x = _window_mean(x, krow, kcol)
    mu_y = _window_mean(y, krow, kcol)
    var_x = _window_mean(x * x, krow, kcol) - mu_x * mu_x
    var_y = _window_mean(y * y, krow, kcol) - mu_y * mu_y
    cov = _window_mean(x * y, krow, kcol) - mu_x * mu_y
    num = (mu_x * mu_y * 2.0 + params.c1) * (cov * 2.0 + params.c2)
    den = (mu_x * mu_x + mu_y * mu_y + params.c1) * (var_x + var_y + params.c2)
    return 1.0 - (num / den).mean()


_PREWITT = np.stack(
    [
        np.array([[1.0, 0.0, -1.0]] * 3) / 3.0,
        (np.array([[1.0, 0.0, -1.0]] * 3) / 3.0).T,
    ]
)[:, None]  # (2, 1, 3, 3)


def _gradient_magnitude(x: Tensor) -> Tensor:
    g = ad.conv2d(x, Tensor(_PREWITT.astype(x.dtype)))
    gx = ad.reshape(g, (g.shape[0], 2, 1) + g.shape[2:])
    mag2 = (gx * gx).sum(axis=1)
    return ad.sqrt(mag2 + _GMS_EPS)


def loss_gms(img, recon, c: float = 0.0026) -> Tensor:
    """One minus the mean channel-wise gradient magnitude similarity."""
    img, recon = _pair(img, recon)
    if img.ndim == 3:
        img, recon = ad.reshape(img, (1,) + img.shape), ad.reshape(recon, (1,) + recon.shape)
    x, y = _flatten_channels(img), _flatten_channels(recon)
    g_a = _gradient_magnitude(x)
    g_b = _gradient_magnitude(y)
    sim = (g_a * g_b * 2.0 + c) / (g_a * g_a + g_b * g_b + c)
    return 1.0 - sim.mean()


def loss_fne(w_gt, w_pred) -> Tensor:
    """Mean binary cross entropy of predicted gate scores vs soft targets."""
    w_gt, w_pred = ad.as_tensor(w_gt), ad.as_tensor(w_pred)
    if w_gt.shape != w_pred.shape:
        raise ValueError(f"shape mismatch: {w_gt.shape} vs {w_pred.shape}")
    p = ad.clip(w_pred, 1e-7, 1.0 - 1e-7)
    t = w_gt.detach()
    return -(t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p)).mean()


def total_loss(
    l_r: float = 0.0,
    l_s: float = 0.0,
    l_g: float = 0.0,
    l_m: float = 0.0,
    l_fne: float = 0.0,
    weights: LossWeights | None = None,
) -> LossBreakdown:
    """Combine term values into a weighted breakdown (floats only)."""
    w = weights or LossWeights()
    terms = {"l_r": l_r, "l_s": l_s, "l_g": l_g, "l_m": l_m, "l_fne": l_fne}
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingDivergedError(name)
    total = (
        w.lambda_r * l_r + w.lambda_s * l_s + w.lambda_g * l_g + w.lambda_m * l_m + w.lambda_f * l_fne
    )
    return LossBreakdown(l_r=l_r, l_s=l_s, l_g=l_g, l_m=l_m, l_fne=l_fne, total=total)


# -- FNE target ---------------------------------------------------------------


def _ssim_vector(channels: np.ndarray, target: np.ndarray, params: SsimParams) -> np.ndarray:
    """SSIM of each (H, W) channel against one target map, vectorized."""
    half = (params.window_size - 1) / 2.0
    k = np.exp(-0.5 * ((np.arange(params.window_size) - half) / params.window_sigma) ** 2)
    k /= k.sum()

    def wmean(arr):
        out = np.lib.stride_tricks.sliding_window_view(arr, len(k), axis=-1) @ k
        return np.lib.stride_tricks.sliding_window_view(out, len(k), axis=-2) @ k

    t = target[None]
    mu_x = wmean(channels)
    mu_y = wmean(t)
    var_x = wmean(channels * channels) - mu_x**2
    var_y = wmean(t * t) - mu_y**2
    cov = wmean(channels * t) - mu_x * mu_y
    num = (2 * mu_x * mu_y + params.c1) * (2 * cov + params.c2)
    den = (mu_x**2 + mu_y**2 + params.c1) * (var_x + var_y + params.c2)
    return (num / den).mean(axis=(1, 2))


def compute_w_gt(
    f_latent: np.ndarray,
    m_pred: np.ndarray,
    ssim_params: SsimParams | None = None,
) -> np.ndarray:
    """Target gate scores: channels resembling the predicted mask get 0.

    The bottleneck block is upscaled to the mask resolution, each channel is
    min-max normalized, and its SSIM against the mask gives a distance
    vector that is inverted and rescaled to [0, 1].  The result is a
    constant (no gradient flows through it).
    """
    if ssim_params is None:
        ssim_params = SsimParams()
    f_latent = np.asarray(f_latent, dtype=np.float64)
    m_pred = np.asarray(m_pred, dtype=np.float64)
    if f_latent.ndim != 3 or m_pred.ndim != 2:
        raise ValueError(f"expected (C, h, w) features and an (H, W) mask, got {f_latent.shape} and {m_pred.shape}")
    h, w = m_pred.shape
    up = resize_bilinear(f_latent, h, w)
    lo = up.min(axis=(1, 2), keepdims=True)
    hi = up.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    normed = np.where(hi > lo, (up - lo) / span, 0.0)
    d = _ssim_vector(normed, m_pred, ssim_params)
    return minmax_normalize(1.0 - d)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction, operating on tensor lists."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= self.lr * update


# -- steps and loop -----------------------------------------------------------


def _stack(batch: list[SurfSample]):
    x = np.stack([s.distorted for s in batch])
    clean = np.stack([s.original for s in batch])
    masks = np.stack([s.mask for s in batch])[:, None]
    return x, clean, masks


def _batch_objective(model: TsdnModel, batch: list[SurfSample], weights: LossWeights, w_gt_override: np.ndarray | None = None):
    """Build the weighted objective graph for one batch.

    ``w_gt_override`` pins the gate target instead of deriving it from the
    current forward pass; the finite-difference checks use it because the
    target is a constant of the optimization step.
    """
    x, clean, masks = _stack(batch)
    out = model.forward(x)
    target = Tensor(clean.astype(out.r_surf.dtype, copy=False))
    terms: dict[str, Tensor] = {
        "l_r": loss_reconstruction(target, out.r_surf),
        "l_s": loss_ssim(target, out.r_surf),
        "l_g": loss_gms(target, out.r_surf),
    }
    lambdas = {"l_r": weights.lambda_r, "l_s": weights.lambda_s, "l_g": weights.lambda_g}
    if out.m_pred is not None:
        terms["l_m"] = loss_mask(Tensor(masks.astype(out.m_pred.dtype, copy=False)), out.m_pred)
        lambdas["l_m"] = weights.lambda_m
        if model.fne is not None:
            if w_gt_override is not None:
                w_gt = np.asarray(w_gt_override, dtype=out.w_pred.dtype)
            else:
                w_gt = np.stack(
                    [compute_w_gt(out.f_latent.data[n], out.m_pred.data[n, 0]) for n in range(len(batch))]
                ).astype(out.w_pred.dtype)
            terms["l_fne"] = loss_fne(Tensor(w_gt), out.w_pred)
            lambdas["l_fne"] = weights.lambda_f

    total = None
    for name, term in terms.items():
        weighted = term * lambdas[name]
        total = weighted if total is None else total + weighted
    values = {name: float(term) for name, term in terms.items()}
    for name, value in values.items():
        if not np.isfinite(value):
            raise TrainingDivergedError(name, LossBreakdown(**values, total=float("nan")))
    breakdown = LossBreakdown(**values, total=float(total))
    used_w_gt = w_gt if "l_fne" in terms else None
    return total, breakdown, used_w_gt


def evaluate_batch(model: TsdnModel, batch: list[SurfSample], weights: LossWeights | None = None) -> LossBreakdown:
    """Loss breakdown on a batch without updating parameters."""
    _, breakdown, _ = _batch_objective(model, batch, weights or LossWeights())
    return breakdown


def train_step(model: TsdnModel, optimizer: Adam, batch: list[SurfSample], weights: LossWeights | None = None) -> LossBreakdown:
    """One forward/backward/update on a batch of fill samples."""
    if not batch:
        raise ValueError("empty batch")
    total, breakdown, _ = _batch_objective(model, batch, weights or LossWeights())
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown


def train_loop(
    images: Sequence[np.ndarray],
    network: NetworkConfig,
    cfg: TrainConfig,
    out_dir,
    log_every: int = 0,
) -> TrainResult:
    """Train on anomaly-free images with fresh fills each step.

    Superpixel segmentations are computed once per image (they are
    deterministic); fill selection and colors are re-drawn every epoch.
    Writes ``checkpoint.tsdn`` (refreshed per epoch, including before the
    first one) and appends ``loss_history.csv`` rows per step.
    """
    if not images:
        raise ValueError("training needs at least one image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.tsdn"
    csv_path = out_dir / "loss_history.csv"

    seq = np.random.SeedSequence(cfg.seed)
    model_seed_seq, shuffle_seq, surf_seq = seq.spawn(3)
    model = TsdnModel(network, seed=int(model_seed_seq.generate_state(1)[0]))
    optimizer = Adam(model.param_tensors(), lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    surf_rng = np.random.default_rng(surf_seq)

    use_surf = cfg.surf.fill_count > 0
    segmentations = None
    if use_surf:
        slic_params = SlicParams(n_segments=cfg.surf.n_segments, seed=cfg.surf.seed)
        segmentations = [slic_segment(img, slic_params) for img in images]

    history: list[LossBreakdown] = []
    save_checkpoint(ckpt_path, model)
    start = time.perf_counter()
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_HEADER)
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(images))
            step = 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                if use_surf:
                    batch = surf_batch(
                        [images[i] for i in idx],
                        cfg.surf,
                        surf_rng,
                        segmentations=[segmentations[i] for i in idx],
                    )
                else:
                    batch = [
                        SurfSample(
                            original=images[i],
                            distorted=images[i],
                            mask=np.zeros(images[i].shape[1:], dtype=images[i].dtype),
                            filled_labels=np.empty(0, dtype=np.int64),
                        )
                        for i in idx
                    ]
                try:
                    breakdown = train_step(model, optimizer, batch, cfg.weights)
                except TrainingDivergedError:
                    fh.flush()
                    save_checkpoint(ckpt_path, model)
                    raise
                history.append(breakdown)
                writer.writerow([epoch, step] + [f"{v:.8g}" for v in breakdown.as_row()])
                step += 1
            fh.flush()
            save_checkpoint(ckpt_path, model)
            if log_every and (epoch + 1) % log_every == 0:
                mean_total = float(np.mean([b.total for b in history[-step:]]))
                elapsed = time.perf_counter() - start
                print(f"epoch {epoch + 1}/{cfg.epochs}: mean total {mean_total:.5f} ({elapsed:.1f}s)")
    return TrainResult(checkpoint_path=ckpt_path, history=history, loss_csv_path=csv_path)
