"""Command-line entry point: preview, synthesize, train, infer, evaluate.

One binary with subcommands.  Options resolve as defaults < ``--config``
JSON < explicit flags, and ``train`` echoes the fully resolved settings to
``config-lock.json`` so a run can be reproduced exactly from its lock.
Exit codes: 0 success, 1 usage/input error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .dataio import (
    DatasetLayoutError,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_mask,
    save_image,
    save_label_png,
    save_score_png,
    scan_dataset,
)
from .imgproc import minmax_normalize, resize_bilinear
from .network import NetworkConfig, TsdnModel, load_checkpoint
from .scoring import (
    ScoredImage,
    default_sigma,
    evaluate,
    image_score,
    load_score_map_raw,
    pixel_score_map,
    save_score_map_raw,
    write_report,
)
from .slic import SlicParams, slic_segment
from .surf import SurfConfig, surf_transform
from .training import LossWeights, TrainConfig, TrainingDivergedError, train_loop

__all__ = ["main", "resolve_config", "DEFAULT_CONFIG"]

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {"root": "", "category": ""},
    "network": NetworkConfig().to_dict(),
    "train": {
        "learning_rate": 7e-5,
        "epochs": 1,
        "batch_size": 8,
        "surf": {"n_segments": 400, "fill_count": 50},
        "weights": {"lambda_r": 1.0, "lambda_s": 0.5, "lambda_g": 1.0, "lambda_m": 1.0, "lambda_f": 5e-5},
        "detach_fne_target": True,
    },
    "scoring": {"sigma": None},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(config_path: str | None, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit CLI flags."""
    cfg = DEFAULT_CONFIG
    if config_path:
        with open(config_path) as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    flags: dict = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        flags.setdefault("train", {})["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        flags.setdefault("train", {})["learning_rate"] = args.lr
    if getattr(args, "batch_size", None) is not None:
        flags.setdefault("train", {})["batch_size"] = args.batch_size
    if getattr(args, "ns", None) is not None:
        flags.setdefault("train", {}).setdefault("surf", {})["n_segments"] = args.ns
    if getattr(args, "ss", None) is not None:
        flags.setdefault("train", {}).setdefault("surf", {})["fill_count"] = args.ss
    if getattr(args, "no_surf", False):
        flags.setdefault("train", {}).setdefault("surf", {})["fill_count"] = 0
    if getattr(args, "input_size", None) is not None:
        flags.setdefault("network", {})["input_size"] = [args.input_size, args.input_size]
    if getattr(args, "base_channels", None) is not None:
        flags.setdefault("network", {})["base_channels"] = args.base_channels
    if getattr(args, "latent_channels", None) is not None:
        flags.setdefault("network", {})["latent_channels"] = args.latent_channels
    if getattr(args, "no_skips_dcda", False):
        flags.setdefault("network", {})["use_skips_dcd_a"] = False
    if getattr(args, "no_skips_dcdn", False):
        flags.setdefault("network", {})["use_skips_dcd_n"] = False
    if getattr(args, "no_fne", False):
        flags.setdefault("network", {})["enable_fne"] = False
    if getattr(args, "no_dcda", False):
        flags.setdefault("network", {})["enable_dcd_a"] = False
        flags.setdefault("network", {})["enable_fne"] = False
    if getattr(args, "sigma", None) is not None:
        flags.setdefault("scoring", {})["sigma"] = args.sigma
    if getattr(args, "data", None) is not None:
        flags.setdefault("data", {})["root"] = str(args.data)
    if getattr(args, "category", None) is not None:
        flags.setdefault("data", {})["category"] = args.category
    return _deep_merge(cfg, flags)


def _network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(cfg["network"])


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    surf_cfg = dict(t["surf"])
    surf_cfg.setdefault("seed", cfg["seed"])
    return TrainConfig(
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        surf=SurfConfig(**surf_cfg),
        weights=LossWeights(**t["weights"]),
        detach_fne_target=t["detach_fne_target"],
    )


# subcommands ------------------------------------------------------------------


def run_slic(args) -> int:
    img = load_image(args.image)
    params = SlicParams(n_segments=args.ns, compactness=args.compactness, seed=args.seed or 0)
    seg = slic_segment(img, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_label_png(seg.labels, out / "labels.png")
    print(f"{seg.num_segments} superpixels -> {out / 'labels.png'}")
    return 0


def run_surf(args) -> int:
    img = load_image(args.image)
    seed = args.seed or 0
    seg = slic_segment(img, SlicParams(n_segments=args.ns, seed=seed))
    sample = surf_transform(img, seg, SurfConfig(n_segments=args.ns, fill_count=args.ss, seed=seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(sample.distorted, out / "i_surf.png")
    save_image(sample.mask, out / "m_surf.png")
    save_label_png(seg.labels, out / "labels.png")
    fraction = float(sample.mask.mean())
    print(f"filled {len(sample.filled_labels)} of {seg.num_segments} superpixels ({fraction:.1%} of pixels)")
    return 0


def run_synth(args) -> int:
    cfg_dict = {}
    if args.config:
        with open(args.config) as fh:
            cfg_dict = json.load(fh)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.size is not None:
        cfg_dict["image_size"] = args.size
    cfg = SynthConfig.from_dict(cfg_dict) if cfg_dict else SynthConfig()
    category = generate_synthetic(cfg, args.out)
    print(f"synthetic dataset at {category}")
    return 0


def run_train(args) -> int:
    cfg = resolve_config(args.config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net_cfg = _network_config(cfg)
    train_cfg = _train_config(cfg)

    root, category = cfg["data"]["root"], cfg["data"]["category"]
    if not root or not category:
        raise ValueError("train needs --data ROOT and --category NAME (or data.root/category in the config)")
    items = [i for i in scan_dataset(root, category) if i.split == "train"]
    if not items:
        raise ValueError(f"no training images under {root}/{category}/train/good")
    h, w = net_cfg.input_size
    images = [resize_bilinear(load_image(i.image_path), h, w) for i in items]

    with open(out / "config-lock.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"training on {len(images)} images (lr={train_cfg.learning_rate}, epochs={train_cfg.epochs})")
    result = train_loop(images, net_cfg, train_cfg, out, log_every=args.log_every)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def run_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args.config, args)
    sigma = cfg["scoring"]["sigma"]
    if sigma is None:
        sigma = default_sigma(model.config.input_size)
    in_dir = Path(args.input)
    paths = sorted(in_dir.glob("*.png")) if in_dir.is_dir() else [in_dir]
    if not paths:
        raise ValueError(f"no PNG images under {in_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = model.config.input_size
    rows = []
    for path in paths:
        img = resize_bilinear(load_image(path), h, w)
        recon = model.reconstruct(img)
        s_map, s_final = pixel_score_map(img, recon, sigma)
        save_score_map_raw(out / f"{path.stem}_score.tsmp", s_map)
        save_score_png(s_final, out / f"{path.stem}_score.png")
        rows.append((path.name, image_score(s_map)))
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "image_score"])
        for name, score in rows:
            writer.writerow([name, f"{score:.8g}"])
    print(f"scored {len(rows)} images -> {out}")
    return 0


def run_eval(args) -> int:
    items = [i for i in scan_dataset(args.data, args.category) if i.split == "test"]
    if not items:
        raise ValueError(f"no test images under {args.data}/{args.category}/test")
    scores_dir = Path(args.scores)
    scored = []
    for item in items:
        raw_path = scores_dir / f"{item.image_path.stem}_score.tsmp"
        if not raw_path.is_file():
            raise ValueError(f"missing score map {raw_path} (run `tsdn infer` first)")
        s_map = load_score_map_raw(raw_path)
        mask = None
        if item.is_abnormal and item.mask_path is not None:
            mask = load_mask(item.mask_path)
            if mask.shape != s_map.shape:
                mask = (resize_bilinear(mask, *s_map.shape) > 0.5).astype(np.float32)
        elif not item.is_abnormal:
            mask = np.zeros(s_map.shape, dtype=np.float32)
        scored.append(
            ScoredImage(
                score_map=minmax_normalize(s_map.astype(np.float64)),
                image_score=image_score(s_map),
                gt_mask=mask,
                gt_label=int(item.is_abnormal),
                name=item.image_path.name,
                defect_type=item.defect_type,
            )
        )
    report = evaluate(scored, pool_pixels=not args.per_image_pixel_auc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report)

    def fmt(v):
        return f"{v:.4f}" if v is not None else "   n/a"

    print(f"{'category':<16} {'n':>4} {'pixel AUC':>10}")
    for name, entry in report["categories"].items():
        print(f"{name:<16} {entry['n_images']:>4} {fmt(entry['pixel_auc']):>10}")
    print(f"{'overall':<16} {report['n_images']:>4} {fmt(report['pixel_auc']):>10}   image AUC: {fmt(report['image_auc'])}")
    return 0


def run_viz(args) -> int:
    img = load_image(args.image)
    score_path = Path(args.score)
    if score_path.suffix == ".tsmp":
        score = load_score_map_raw(score_path).astype(np.float64)
    else:
        from .dataio import load_score_png

        score = load_score_png(score_path)
    score = np.clip(score, 0.0, 1.0)
    if score.shape != img.shape[1:]:
        raise ValueError(f"score map {score.shape} does not match image {img.shape[1:]}")
    red = np.zeros_like(img)
    red[0] = 1.0
    alpha = 0.5 * score[None]
    overlay = img * (1.0 - alpha) + red * alpha
    save_image(overlay, args.out)
    print(f"overlay -> {args.out}")
    return 0


# parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsdn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slic", help="superpixel label map preview")
    p.add_argument("--image", required=True)
    p.add_argument("--ns", type=int, default=400, help="target superpixel count")
    p.add_argument("--compactness", type=float, default=10.0)
    _add_common(p)
    p.set_defaults(func=run_slic)

    p = sub.add_parser("surf", help="superpixel random filling preview")
    p.add_argument("--image", required=True)
    p.add_argument("--ns", type=int, default=400)
    p.add_argument("--ss", type=int, default=50, help="superpixels to fill")
    _add_common(p)
    p.set_defaults(func=run_surf)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--config", default=None, help="SynthConfig JSON")
    p.add_argument("--size", type=int, default=None, help="image size override")
    _add_common(p)
    p.set_defaults(func=run_synth)

    p = sub.add_parser("train", help="train on a dataset category")
    p.add_argument("--config", default=None, help="config JSON (defaults + overrides)")
    p.add_argument("--data", default=None, help="dataset root")
    p.add_argument("--category", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--ns", type=int, default=None)
    p.add_argument("--ss", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--latent-channels", type=int, default=None)
    p.add_argument("--no-skips-dcda", action="store_true")
    p.add_argument("--no-skips-dcdn", action="store_true")
    p.add_argument("--no-fne", action="store_true")
    p.add_argument("--no-dcda", action="store_true")
    p.add_argument("--no-surf", action="store_true")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--log-every", type=int, default=0, help="print a line every N epochs")
    _add_common(p)
    p.set_defaults(func=run_train)

    p = sub.add_parser("infer", help="score images with a checkpoint (no filling applied)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory of PNGs")
    p.add_argument("--config", default=None)
    p.add_argument("--sigma", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=run_infer)

    p = sub.add_parser("eval", help="AUC report from score maps + ground truth")
    p.add_argument("--scores", required=True, help="directory written by `tsdn infer`")
    p.add_argument("--data", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--per-image-pixel-auc", action="store_true", help="average per-image instead of pooling pixels")
    _add_common(p)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("viz", help="overlay a score map on its image")
    p.add_argument("--image", required=True)
    p.add_argument("--score", required=True, help=".tsmp or 16-bit score PNG")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=run_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(f"last breakdown: {exc.breakdown}", file=sys.stderr)
        return 2
    except (ValueError, OSError, DatasetLayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
