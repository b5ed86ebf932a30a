"""``frontseg`` command line: synth, preprocess, train, eval and predict.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
command fails at run time (bad data, unreadable checkpoint, diverging loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attnet import ModelConfig, build_model, extract_attention_maps
from .data import SPLIT_RATIOS, SPLITS, DatasetIndex, SynthConfig, load_dataset, split_dataset, synth_generate, write_dataset
from .imageproc import (
    FrontMask,
    SampleImage,
    augment_expand,
    preprocess_pair,
    read_image_png,
    read_mask_png,
    write_mask_png,
)
from .losses import WEIGHTS
from .training import SegmentationSet, TrainConfig, checkpoint_load, evaluate, predict_proba, train

REPORT_KEYS = ("dice", "wdice_4", "wdice_8", "wdice_16", "iou", "thickness_px", "certainty_m")
SEED_ENV = "FRONTSEG_SEED"


class ConfigError(ValueError):
    """Invalid arguments or configuration; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# run configuration

_MODEL_KEYS = {"depth", "base_channels", "attention", "kernel_size", "leaky_slope"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_RUN_KEYS = {"data", "out", "probe"}
VALID_KEYS = _MODEL_KEYS | _TRAIN_KEYS | _RUN_KEYS


def read_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    flat: Dict[str, Any] = {}
    for k, v in raw.items():
        if isinstance(v, dict) and k in ("model", "train", "run"):
            flat.update(v)
        else:
            flat[k] = v
    unknown = sorted(set(flat) - VALID_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return flat


def resolve_config(file_cfg: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Defaults, then the config file, then command-line flags; everything validated."""
    merged: Dict[str, Any] = {"seed": default_seed(), "probe": None}
    merged.update(asdict(TrainConfig()))
    merged.update({k: getattr(ModelConfig(), k) for k in _MODEL_KEYS})
    merged.update(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("data", "out"):
        if not merged.get(key):
            raise ConfigError(f"missing required setting {key!r}")
    try:
        train_config(merged).validate()
        ModelConfig(**{k: merged[k] for k in _MODEL_KEYS}, input_side=2 ** (merged["depth"] - 1)).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return merged


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def format_resolved(cfg: Dict[str, Any]) -> str:
    return "".join(f"{k} = {_toml_value(cfg[k])}\n" for k in sorted(cfg) if cfg[k] is not None)


# --------------------------------------------------------------------------
# image helpers


def to_png8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def overlay_rgb(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Grayscale background; green truth only, red prediction only, yellow both."""
    gray = to_png8(image)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    t, p = truth.astype(bool), pred.astype(bool)
    rgb[t & ~p] = (0, 255, 0)
    rgb[p & ~t] = (255, 0, 0)
    rgb[t & p] = (255, 255, 0)
    return rgb


def save_attention(out_dir: Path, prefix: str, maps: List[np.ndarray]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for lvl, a in enumerate(maps, start=1):
        Image.fromarray(to_png8(a[0]), mode="L").save(out_dir / f"{prefix}attention_{lvl}.png")


def probe_epochs(epoch: int) -> bool:
    return epoch in (1, 5) or epoch % 10 == 0


def _load_split(index: DatasetIndex, split: str) -> SegmentationSet:
    part = index.select(split)
    if len(part) == 0:
        raise RuntimeError(f"split {split!r} of {index.root} is empty")
    data = SegmentationSet.from_pairs(part.load_all())
    if data.images.shape[1] != data.images.shape[2]:
        raise RuntimeError(f"{index.root} holds non-square images; run `frontseg preprocess` first")
    return data


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    seed = args.seed if args.seed is not None else default_seed()
    cfg = SynthConfig(side=args.side, seed=seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    samples = synth_generate(cfg, args.n)
    index = write_dataset(args.out, samples)
    index = split_dataset(index, SPLIT_RATIOS, seed=seed)
    index.write_index()
    print(f"wrote {len(index)} samples to {args.out} ({index.counts()})")
    return 0


def cmd_preprocess(args) -> int:
    if args.size < 1 or args.front_width < 1:
        raise ConfigError("--size and --front-width must be positive")
    src = load_dataset(args.data)
    out = Path(args.out)
    if out.resolve() == Path(args.data).resolve():
        raise ConfigError("--out must differ from --data")
    processed, splits = [], []
    for i, entry in enumerate(src.entries):
        img, mask = src.load(i)
        processed.append(preprocess_pair(img, mask, args.size, args.front_width, args.median_area))
        splits.append(entry.split)
    write_dataset(out, processed, splits)
    print(f"preprocessed {len(processed)} samples into {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "data": args.data, "out": args.out, "seed": args.seed, "loss": args.loss, "w": args.w,
        "batch_size": args.batch_size, "max_epochs": args.max_epochs, "patience": args.patience,
        "base_channels": args.base_channels, "depth": args.depth, "lr_min": args.lr_min,
        "lr_max": args.lr_max, "cycle_epochs": args.cycle_epochs, "probe": args.probe,
    }
    if args.no_augment:
        overrides["augment"] = False
    if args.no_attention:
        overrides["attention"] = False
    cfg = resolve_config(read_config(args.config), overrides)
    out = Path(cfg["out"])

    index = load_dataset(cfg["data"])
    train_set = _load_split(index, "train")
    val_set = _load_split(index, "val")
    side = train_set.images.shape[1]
    try:
        model_cfg = ModelConfig(input_side=side, **{k: cfg[k] for k in _MODEL_KEYS}).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tcfg = train_config(cfg)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(format_resolved({**cfg, "input_side": side}))
    fit_set = train_set
    if tcfg.augment:
        fit_set = SegmentationSet.from_pairs(augment_expand(_pairs(train_set)))

    probe_id = cfg["probe"] or val_set.ids[0]
    if probe_id not in val_set.ids:
        raise ConfigError(f"probe sample {probe_id!r} is not in the validation split")
    probe = val_set.images[val_set.ids.index(probe_id)][None, None]

    def snapshot(epoch, rec, model):
        if probe_epochs(epoch):
            _, maps = model.forward(probe, training=False)
            save_attention(out / "attention", f"epoch_{epoch:03d}_", extract_attention_maps(maps, side))
        return False

    model = build_model(model_cfg, cfg["seed"])
    result = train(model, fit_set, val_set, tcfg, callback=snapshot, out_dir=out, resume=args.resume)
    _, maps = result.model.forward(probe, training=False)
    save_attention(out / "attention", "best_", extract_attention_maps(maps, side))
    print(f"best epoch {result.best_epoch}: {tcfg.monitor_name}={result.best_value:.6g}")
    return 0


def _pairs(data: SegmentationSet):
    return [
        (SampleImage(data.images[i], data.resolutions[i], data.ids[i]),
         FrontMask(data.masks[i], data.resolutions[i], data.ids[i]))
        for i in range(len(data))
    ]


def cmd_eval(args) -> int:
    model, _, _ = checkpoint_load(args.ckpt)
    data = _load_split(load_dataset(args.data), args.split)
    if data.images.shape[1] != model.config.input_side:
        raise RuntimeError(f"images are {data.images.shape[1]} px but the model expects {model.config.input_side}")
    rec = evaluate(model, data)
    lines = "".join(f"{k}={getattr(rec, k)!r}\n" for k in REPORT_KEYS)
    sys.stdout.write(lines)
    if args.report:
        Path(args.report).write_text(lines)
    return 0


def cmd_predict(args) -> int:
    model, _, _ = checkpoint_load(args.ckpt)
    side = model.config.input_side
    pixels = read_image_png(args.image)
    mask = read_mask_png(args.mask) if args.mask else None
    if mask is not None and mask.shape != pixels.shape:
        raise RuntimeError(f"mask {mask.shape} and image {pixels.shape} differ in shape")
    if pixels.shape != (side, side):
        if args.resolution is None:
            raise ConfigError(f"image is {pixels.shape}, not {side}x{side}; pass --resolution to preprocess it")
        img = SampleImage(pixels, args.resolution, Path(args.image).stem)
        m = FrontMask(mask if mask is not None else np.ones(pixels.shape, np.uint8), args.resolution, img.id)
        img, m = preprocess_pair(img, m, side, args.front_width)
        pixels = img.pixels
        mask = m.pixels if mask is not None else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = np.asarray(pixels, dtype=np.float32)[None, None]
    probs = predict_proba(model, batch[:, 0])[0]
    pred = (probs >= 0.5).astype(np.uint8)
    write_mask_png(out / "prediction.png", pred)
    _, maps = model.forward(batch, training=False)
    save_attention(out, "", extract_attention_maps(maps, side))
    if mask is not None:
        Image.fromarray(overlay_rgb(pixels, mask, pred), mode="RGB").save(out / "overlay.png")
    print(f"wrote predictions to {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frontseg", description="Calving-front segmentation with an attention U-Net.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic SAR-like dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--side", type=int, default=128)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="filter, pad, resize and thicken a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=512)
    s.add_argument("--front-width", type=int, default=6)
    s.add_argument("--median-area", type=float, default=2500.0, help="median filter footprint in m^2")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train on a preprocessed dataset")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--loss", choices=("bce", "wbce"))
    s.add_argument("--w", type=float, choices=[float(w) for w in WEIGHTS])
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--lr-min", type=float)
    s.add_argument("--lr-max", type=float)
    s.add_argument("--cycle-epochs", type=int)
    s.add_argument("--probe", help="id of the validation sample used for attention snapshots")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--no-attention", action="store_true")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on one split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--report", help="also write the report to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one image and export attention maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=float, help="metres per pixel, needed when the image must be preprocessed")
    s.add_argument("--front-width", type=int, default=6)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"frontseg: config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"frontseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
