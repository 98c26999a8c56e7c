"""Reconstruction-based anomaly segmentation with a two-stream decoder.

The pipeline: superpixel random filling corrupts anomaly-free training
images; a shared encoder feeds an abnormality decoder (predicts the fill
mask) and a normality decoder (reconstructs the clean image) gated by a
feature normality estimator; blurred reconstruction error yields pixel and
image anomaly scores evaluated by ROC-AUC.
"""

from .imgproc import SsimParams, gaussian_blur, gms_mean, minmax_normalize, resize_bilinear, rgb_to_lab, ssim_mean
from .slic import SlicParams, SuperpixelSegmentation, enforce_connectivity, slic_segment
from .surf import SurfConfig, SurfSample, surf_batch, surf_transform
from .network import ModelOutputs, NetworkConfig, TsdnModel, apply_normality_weights, load_checkpoint, save_checkpoint
from .training import (
    Adam,
    LossBreakdown,
    LossWeights,
    TrainConfig,
    TrainingDivergedError,
    compute_w_gt,
    evaluate_batch,
    loss_fne,
    loss_gms,
    loss_mask,
    loss_reconstruction,
    loss_ssim,
    total_loss,
    train_loop,
    train_step,
)
from .scoring import (
    ScoredImage,
    default_sigma,
    evaluate,
    image_score,
    normalize_scores,
    pixel_score_map,
    roc_auc,
)
from .dataio import DatasetItem, SynthConfig, generate_synthetic, load_image, load_mask, save_image, scan_dataset

__version__ = "0.1.0"
