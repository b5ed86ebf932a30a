"""Optimization loop: ADAM with a triangular cyclic learning rate, early
stopping on a loss-matched Dice monitor, evaluation and checkpointing."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import checkpoint
from .attnet import AttentionUNet, ModelConfig
from .imageproc import FrontMask, SampleImage
from .losses import (
    WEIGHTS,
    MetricsRecord,
    bce,
    bce_map,
    dice_binary,
    iou,
    read_metrics_csv,
    soft_dice,
    thickness_and_certainty,
    wbce,
    wdice,
    weight_map,
    weighted_prediction,
    write_metrics_csv,
)
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

LOSSES = ("bce", "wbce")


@dataclass
class TrainConfig:
    batch_size: int = 5
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    cycle_epochs: int = 8
    loss: str = "bce"
    w: float = 8.0
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    monitor: Optional[str] = None
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.cycle_epochs < 1:
            raise ValueError("cycle_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "wbce" and self.w not in WEIGHTS:
            raise ValueError(f"wbce weight must be one of {WEIGHTS}, got {self.w}")
        valid = {"dice", "iou"} | {f"wdice_{w}" for w in WEIGHTS}
        if self.monitor is not None and self.monitor not in valid:
            raise ValueError(f"monitor must be one of {sorted(valid)}, got {self.monitor!r}")
        return self

    @property
    def monitor_name(self) -> str:
        """Dice for BCE runs, the matching weighted Dice for WBCE runs, unless overridden."""
        if self.monitor is not None:
            return self.monitor
        return "dice" if self.loss == "bce" else f"wdice_{int(self.w)}"


# --------------------------------------------------------------------------
# data container


@dataclass
class SegmentationSet:
    """Stacked, preprocessed samples of one split."""

    images: np.ndarray  # (N, S, S) float32 in [0, 1]
    masks: np.ndarray  # (N, S, S) uint8
    resolutions: np.ndarray  # (N,) metres per pixel
    ids: List[str] = field(default_factory=list)
    _wmaps: Dict[float, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        self.resolutions = np.asarray(self.resolutions, dtype=np.float64).reshape(-1)
        if self.images.ndim != 3 or self.images.shape != self.masks.shape:
            raise ValueError(f"images {self.images.shape} and masks {self.masks.shape} must both be (N, S, S)")
        if len(self.resolutions) != len(self.images):
            raise ValueError("one resolution per sample required")
        if not self.ids:
            self.ids = [f"sample_{i}" for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[SampleImage, FrontMask]]) -> "SegmentationSet":
        return cls(
            np.stack([p[0].pixels for p in pairs]),
            np.stack([p[1].pixels for p in pairs]),
            np.array([p[0].resolution for p in pairs]),
            [p[0].id for p in pairs],
        )

    def weight_maps(self, w: float) -> np.ndarray:
        if w not in self._wmaps:
            self._wmaps[w] = weight_map(self.masks, w)
        return self._wmaps[w]

    def subset(self, idx) -> "SegmentationSet":
        idx = np.asarray(idx, dtype=np.int64)
        out = SegmentationSet(self.images[idx], self.masks[idx], self.resolutions[idx], [self.ids[i] for i in idx])
        out._wmaps = {w: m[idx] for w, m in self._wmaps.items()}
        return out


# --------------------------------------------------------------------------
# schedule / optimizer


def cyclic_lr(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Triangular schedule: ``lr_min`` at the start of each cycle, ``lr_max`` half-way through."""
    if step < 0:
        raise ValueError("step must be >= 0")
    cycle = cfg.cycle_epochs * max(1, steps_per_epoch)
    half = cycle / 2.0
    pos = step % cycle
    frac = pos / half if pos < half else (cycle - pos) / half
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in params.items()},
            {k: np.zeros_like(t.data) for k, t in params.items()},
            0,
            beta1,
            beta2,
            eps,
        )


def adam_step(params: Dict[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One bias-corrected ADAM update of every parameter, in place."""
    state.step += 1
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1 = DTYPE(1.0 - state.beta1**state.step)
    c2 = DTYPE(1.0 - state.beta2**state.step)
    lr32, eps = DTYPE(lr), DTYPE(state.eps)
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (DTYPE(1) - b1) * g
        v *= b2
        v += (DTYPE(1) - b2) * g * g
        update = lr32 * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(DTYPE)


# --------------------------------------------------------------------------
# evaluation


def predict_proba(model: AttentionUNet, images: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities, one sample at a time so results never depend on batching."""
    out = np.empty(images.shape, dtype=DTYPE)
    for i in range(len(images)):
        probs, _ = model.forward(images[i][None, None], training=False)
        out[i] = probs.data[0, 0]
    return out


def _fmean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def evaluate(
    model: AttentionUNet,
    data: SegmentationSet,
    cfg: Optional[TrainConfig] = None,
    probs: Optional[np.ndarray] = None,
) -> MetricsRecord:
    """Mean per-sample metrics over ``data``; ``val_loss`` uses the loss configured in ``cfg``."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    cfg = cfg or TrainConfig()
    if probs is None:
        probs = predict_proba(model, data.images)
    masks = data.masks
    wm = {w: data.weight_maps(w) for w in WEIGHTS}
    if cfg.loss == "bce":
        losses = [bce_map(probs[i], masks[i]).mean() for i in range(len(data))]
    else:
        wmap = data.weight_maps(cfg.w)
        losses = [bce_map(weighted_prediction(probs[i].astype(np.float64), wmap[i]), masks[i]).mean()
                  for i in range(len(data))]
    rec = MetricsRecord(
        val_loss=_fmean(losses),
        dice=_fmean(dice_binary(probs[i], masks[i]) for i in range(len(data))),
        iou=_fmean(iou(probs[i], masks[i]) for i in range(len(data))),
    )
    for w in WEIGHTS:
        setattr(rec, f"wdice_{w}", _fmean(wdice(probs[i], masks[i], w, wm[w][i]) for i in range(len(data))))
    preds = [(p >= 0.5) for p in probs]
    widths = []
    for p in preds:
        if p.any():
            widths.append(thickness_and_certainty([p], 1.0)[0])
    if widths:
        rec.thickness_px = _fmean(widths)
        rec.certainty_m = rec.thickness_px * float(_fmean(data.resolutions)) / 2.0
    return rec


def mean_soft_dice(model: AttentionUNet, data: SegmentationSet) -> float:
    probs = predict_proba(model, data.images)
    return _fmean(soft_dice(probs[i], data.masks[i]) for i in range(len(data)))


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_save(
    model: AttentionUNet,
    state: Optional[OptimizerState],
    path: Union[str, Path],
    meta: Optional[dict] = None,
) -> None:
    tensors = model.state_dict()
    cfg = {"model": asdict(model.config), "meta": dict(meta or {})}
    if state is not None:
        cfg["optimizer"] = {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
        for k in model.params:
            tensors[f"adam.m.{k}"] = state.m[k]
            tensors[f"adam.v.{k}"] = state.v[k]
    checkpoint.save(path, cfg, tensors)


def checkpoint_load(path: Union[str, Path]) -> Tuple[AttentionUNet, Optional[OptimizerState], dict]:
    """Return ``(model, optimizer_state_or_None, meta)``."""
    cfg, tensors = checkpoint.load(path)
    try:
        model_cfg = ModelConfig(**cfg["model"])
    except (KeyError, TypeError) as exc:
        raise checkpoint.CheckpointError(f"checkpoint config block is invalid: {exc}") from exc
    model = AttentionUNet.build(model_cfg, 0)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    state = None
    if "optimizer" in cfg:
        o = cfg["optimizer"]
        state = OptimizerState(
            {k: tensors[f"adam.m.{k}"].copy() for k in model.params},
            {k: tensors[f"adam.v.{k}"].copy() for k in model.params},
            int(o["step"]),
            o["beta1"],
            o["beta2"],
            o["eps"],
        )
    return model, state, cfg.get("meta", {})


# --------------------------------------------------------------------------
# training loop


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: AttentionUNet
    history: List[MetricsRecord]
    best_epoch: int
    best_value: float
    stopped_epoch: int


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


EpochCallback = Callable[[int, MetricsRecord, AttentionUNet], Optional[bool]]


def train(
    model: AttentionUNet,
    train_set: SegmentationSet,
    val_set: SegmentationSet,
    cfg: TrainConfig,
    callback: Optional[EpochCallback] = None,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    echo: Callable[[str], None] = print,
) -> TrainResult:
    """Train ``model`` in place and return the parameters of the best epoch.

    Each epoch shuffles with ``(seed, epoch)``, takes one ADAM step per
    batch at the cyclic learning rate and evaluates ``val_set``.  Training
    stops after ``patience`` epochs without improvement of the monitor, at
    ``max_epochs``, or when ``callback`` returns True.

    With ``out_dir`` the loop writes ``metrics.csv``, ``model.ckpt`` (best
    epoch) and ``last.ckpt`` (for ``resume``) after every epoch.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    monitor = cfg.monitor_name
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = OptimizerState.for_params(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: List[MetricsRecord] = []
    best_value, best_epoch, bad_epochs, start = -math.inf, 0, 0, 1
    best_state = model.state_dict()

    if resume:
        if out is None or not (out / "last.ckpt").is_file():
            raise FileNotFoundError("resume requested but no last.ckpt found")
        last, state, meta = checkpoint_load(out / "last.ckpt")
        model.load_state_dict(last.state_dict())
        best_value, best_epoch = float(meta["best_value"]), int(meta["best_epoch"])
        bad_epochs, start = int(meta["bad_epochs"]), int(meta["epoch"]) + 1
        history = [r for r in read_metrics_csv(out / "metrics.csv") if r.epoch < start]
        best_state = checkpoint_load(out / "model.ckpt")[0].state_dict() if best_epoch else model.state_dict()

    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    wmaps = train_set.weight_maps(cfg.w) if cfg.loss == "wbce" else None
    images = train_set.images[:, None]
    masks = train_set.masks[:, None].astype(DTYPE)

    epoch = start - 1
    for epoch in range(start, cfg.max_epochs + 1):
        order = epoch_order(n, cfg.seed, epoch)
        losses = []
        lr_epoch = cyclic_lr((epoch - 1) * steps_per_epoch, steps_per_epoch, cfg)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = cyclic_lr((epoch - 1) * steps_per_epoch + b, steps_per_epoch, cfg)
            probs, _ = model.forward(images[idx], training=True)
            if cfg.loss == "bce":
                loss = bce(probs, masks[idx])
            else:
                loss = wbce(probs, masks[idx], cfg.w, wmaps[idx][:, None])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr}")
            loss.backward()
            adam_step(model.params, state, lr)
            model.zero_grad()
            losses.append(value)

        rec = evaluate(model, val_set, cfg)
        rec.epoch, rec.lr, rec.train_loss = epoch, lr_epoch, _fmean(losses)
        history.append(rec)
        value = rec.monitor(monitor)
        if value > best_value:
            best_value, best_epoch, bad_epochs = value, epoch, 0
            best_state = model.state_dict()
            if out is not None:
                checkpoint_save(model, None, out / "model.ckpt", {"epoch": epoch, monitor: value})
        else:
            bad_epochs += 1
        echo(f"epoch={epoch} lr={rec.lr:.6g} loss={rec.train_loss:.6g} monitor={value:.6g}")

        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
            meta = {"epoch": epoch, "best_value": best_value, "best_epoch": best_epoch, "bad_epochs": bad_epochs}
            checkpoint_save(model, state, out / "last.ckpt", meta)
        stop = callback(epoch, rec, model) if callback is not None else False
        if bad_epochs >= cfg.patience or stop:
            break

    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_value, epoch)
