"""Supervised end-to-end training: class weighting, LR schedule, augmentation, SGD loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .ensemble import PredictionTable, weighted_logloss
from .labels import NUM_CLASSES
from .model import ConfigError, Model, forward, predict

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int = 300
    peak_lr: float = 0.001
    weighting: str = "static"
    static_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 2.0)
    dw_alpha: float = 0.5
    dw_min: float = 0.5
    dw_max: float = 5.0
    lambda_u: float = 1.0
    unlabeled_ratio: int = 1
    deep_supervision: bool = True
    augment: str = "weak"
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "static_weights", tuple(float(w) for w in self.static_weights))
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.total_iters and self.warmup_iters >= self.total_iters:
            raise ConfigError("warmup must be shorter than training")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")
        if self.unlabeled_ratio < 1:
            raise ConfigError("unlabeled_ratio must be >= 1")
        if len(self.static_weights) != NUM_CLASSES or min(self.static_weights) <= 0:
            raise ConfigError("static weights: six positive values")
        if self.weighting not in ("static", "dynamic", "both"):
            raise ConfigError(f"unknown weighting mode {self.weighting!r}")
        if self.augment not in ("weak", "none"):
            raise ConfigError(f"unknown augmentation {self.augment!r}")
        if not 0 < self.dw_min <= self.dw_max:
            raise ConfigError("dynamic weight clamp must satisfy 0 < min <= max")


@dataclass
class SeriesData:
    """A preprocessed series; ``labels`` is (N, 6) 0/1 or None for unlabeled data."""

    series_id: str
    images: np.ndarray
    labels: np.ndarray | None = None


@dataclass
class LossBundle:
    l1: float
    l2: float
    lu: float
    total: float
    graph: ad.Tensor | None = field(default=None, repr=False)


# class weights ---------------------------------------------------------------------

def class_weights(mode: str, static=(1, 1, 1, 1, 1, 2), positives=None, count: int = 0,
                  alpha: float = 0.5, lo: float = 0.5, hi: float = 5.0) -> np.ndarray:
    """Per-class loss weights.

    ``dynamic``: with smoothed prevalence ``p_c = (pos_c + 1) / (count + 2)``
    and ``m`` the mean of ``p_c``, ``w_c = clip((m / p_c) ** alpha, lo, hi)``
    rescaled to mean 1. ``both`` multiplies static and dynamic weights.
    """
    static = np.asarray(static, dtype=np.float64)
    if mode == "static":
        return static.copy()
    pos = np.asarray(positives, dtype=np.float64)
    if pos.shape != (NUM_CLASSES,) or np.any(pos < 0):
        raise ValueError("positives: six non-negative counts")
    prevalence = (pos + 1.0) / (count + 2.0)
    w = np.clip((prevalence.mean() / prevalence) ** alpha, lo, hi)
    w = w / w.mean()
    if mode == "dynamic":
        return w
    if mode == "both":
        return static * w
    raise ValueError(f"unknown weighting mode {mode!r}")


def weights_for(config: TrainConfig, series: list[SeriesData]) -> np.ndarray:
    labeled = [s.labels for s in series if s.labels is not None]
    pos = np.sum([y.sum(axis=0) for y in labeled], axis=0) if labeled else np.zeros(NUM_CLASSES)
    count = int(sum(len(y) for y in labeled))
    return class_weights(config.weighting, config.static_weights, pos, count,
                         config.dw_alpha, config.dw_min, config.dw_max)


# schedule -----------------------------------------------------------------------------

def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then half-cosine decay to 0 at ``total_iters``."""
    total, warm, peak = config.total_iters, config.warmup_iters, config.peak_lr
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if iteration < warm:
        return peak * iteration / warm
    return peak * 0.5 * (1.0 + math.cos(math.pi * (iteration - warm) / (total - warm)))


# augmentation -------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "weak"
    scale: tuple = (0.8, 1.2)
    hflip: bool = True
    vflip: bool = True
    rotation_deg: float = 0.0
    blur_sigma: tuple = (0.0, 0.0)
    distortion: float = 0.0

    @classmethod
    def weak(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def strong(cls) -> "AugmentPolicy":
        return cls(kind="strong", rotation_deg=15.0, blur_sigma=(0.1, 1.5), distortion=1.0)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(kind="weak", scale=(1.0, 1.0), hflip=False, vflip=False)


def apply_augment(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random geometric/photometric transform shared by every slice and channel."""
    n, c, h, w = images.shape
    scale = rng.uniform(*policy.scale)
    side = math.sqrt(scale)
    flip_y = -1.0 if policy.vflip and rng.random() < 0.5 else 1.0
    flip_x = -1.0 if policy.hflip and rng.random() < 0.5 else 1.0
    off_y = rng.uniform(-1, 1) * abs(h - side * h) / 2
    off_x = rng.uniform(-1, 1) * abs(w - side * w) / 2
    angle = math.radians(rng.uniform(-policy.rotation_deg, policy.rotation_deg)) if policy.rotation_deg else 0.0
    sigma = rng.uniform(*policy.blur_sigma) if policy.blur_sigma[1] > 0 else 0.0

    oy, ox = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ty, tx = (oy - cy) * flip_y * side, (ox - cx) * flip_x * side
    if angle:
        ca, sa = math.cos(angle), math.sin(angle)
        ty, tx = ca * ty - sa * tx, sa * ty + ca * tx
    src_y, src_x = cy + off_y + ty, cx + off_x + tx
    if policy.distortion > 0:
        smooth = max(h, w) / 8
        for arr in (src_y, src_x):
            field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), smooth, mode="wrap")
            arr += policy.distortion * field_ / (np.abs(field_).max() + 1e-12)

    identity = side == 1.0 and off_y == 0 and off_x == 0 and flip_y == 1 and flip_x == 1 and not angle \
        and policy.distortion == 0
    out = np.empty_like(images, dtype=np.float64)
    for i in range(n):
        for ch in range(c):
            img = images[i, ch]
            if not identity:
                img = ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="constant", cval=0.0)
            if sigma > 0:
                img = ndimage.gaussian_filter(img, sigma, mode="nearest")
            out[i, ch] = img
    return np.clip(out, 0.0, 1.0)


# losses and steps ----------------------------------------------------------------------

def supervised_loss(logits, labels: np.ndarray, weights, deep_supervision: bool = True) -> LossBundle:
    l2 = ad.bce_with_logits(logits.main, labels, weights)
    if deep_supervision:
        l1 = ad.bce_with_logits(logits.aux, labels, weights)
        total = l1 + l2
        l1_value = float(l1.data)
    else:
        total, l1_value = l2, 0.0
    return LossBundle(l1_value, float(l2.data), 0.0, float(total.data), total)


def _finish_step(model: Model, bundle: LossBundle, lr: float, iteration: int) -> LossBundle:
    if not math.isfinite(bundle.total):
        raise TrainingError(f"non-finite loss {bundle.total} at iteration {iteration}")
    model.zero_grad()
    ad.backward(bundle.graph)
    ad.sgd_update(model.parameters(), lr)
    bundle.graph = None
    return bundle


def _augment(images, config: TrainConfig, rng):
    if config.augment == "none":
        return images
    return apply_augment(images, AugmentPolicy.weak(), rng)


def _labeled_loss(model: Model, images, labels, config: TrainConfig, rng, weights) -> LossBundle:
    x = _augment(images, config, rng)
    return supervised_loss(forward(x, model), labels, weights, config.deep_supervision)


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
               iteration: int, rng: np.random.Generator, weights=None) -> LossBundle:
    """Forward both extractors, supervised loss, backward end-to-end, one SGD update."""
    weights = np.asarray(config.static_weights if weights is None else weights)
    bundle = _labeled_loss(model, images, labels, config, rng, weights)
    return _finish_step(model, bundle, lr_at(iteration, config), iteration)


def step_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, stream])


# evaluation -------------------------------------------------------------------------------

def predict_series(model: Model, series: list[SeriesData]) -> PredictionTable:
    return PredictionTable.from_series((s.series_id, predict(s.images, model)) for s in series)


def evaluate(model: Model, series: list[SeriesData]) -> float:
    """Weighted log-loss of head-2 predictions against the series' labels."""
    preds = predict_series(model, series)
    return weighted_logloss(preds, {s.series_id: s.labels for s in series})


# fit -------------------------------------------------------------------------------------

@dataclass
class HistoryRow:
    iteration: int
    l1: float
    l2: float
    lu: float
    total: float
    lr: float


@dataclass
class FitResult:
    model: Model
    history: list[HistoryRow]
    best_val: float | None = None
    best_iteration: int | None = None


def fit(model: Model, train: list[SeriesData], config: TrainConfig, val: list[SeriesData] | None = None,
        pseudo: list[SeriesData] | None = None, unlabeled_step=None) -> FitResult:
    """Train one labeled series per step over seeded shuffled epochs.

    With ``pseudo`` series (and an ``unlabeled_step`` callable returning the
    lambda-scaled unlabeled loss), every step also draws ``unlabeled_ratio``
    pseudo-labeled series and optimizes ``L1 + L2 + lambda_u * Lu`` with Lu
    their mean. With ``val``, the parameters at the best validation loss are
    restored at the end.
    """
    train = [s for s in train if s.labels is not None]
    if not train:
        raise ConfigError("training set is empty")
    pseudo = pseudo or []
    weights = weights_for(config, train)
    order_rng = np.random.default_rng([config.seed, 104729])
    order: list[int] = []
    p_order: list[int] = []
    history: list[HistoryRow] = []
    best = (math.inf, None, None)

    def check_val(it):
        nonlocal best
        if val:
            v = evaluate(model, val)
            if v < best[0]:
                best = (v, it, model.state())

    for it in range(config.total_iters):
        rng = step_rng(config.seed, it)
        lr = lr_at(it, config)
        if not order:
            order = list(order_rng.permutation(len(train)))
        s = train[order.pop(0)]
        bundle = _labeled_loss(model, s.images, s.labels, config, rng, weights)
        if pseudo:
            parts = []
            for j in range(config.unlabeled_ratio):
                if not p_order:
                    p_order = list(order_rng.permutation(len(pseudo)))
                parts.append(unlabeled_step(model, pseudo[p_order.pop(0)], config, weights,
                                            step_rng(config.seed, it, 1 + j)))
            scale = 1.0 / len(parts)
            graph = bundle.graph
            for u in parts:
                graph = graph + u.graph * scale
            bundle = LossBundle(bundle.l1, bundle.l2, float(np.mean([u.lu for u in parts])),
                                bundle.total + sum(u.total for u in parts) * scale, graph)
        bundle = _finish_step(model, bundle, lr, it)
        history.append(HistoryRow(it, bundle.l1, bundle.l2, bundle.lu, bundle.total, lr))
        if config.eval_every and (it + 1) % config.eval_every == 0 and it + 1 < config.total_iters:
            check_val(it + 1)
    if config.total_iters:
        check_val(config.total_iters)
    if best[2] is not None:
        model.load_state(best[2])
    return FitResult(model, history, best[0] if val else None, best[1])


def write_history(history: list[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L1", "L2", "Lu", "total", "lr"])
        for h in history:
            w.writerow([h.iteration, repr(h.l1), repr(h.l2), repr(h.lu), repr(h.total), repr(h.lr)])


__all__ = [
    "AugmentPolicy",
    "FitResult",
    "LossBundle",
    "SeriesData",
    "TrainConfig",
    "TrainingError",
    "apply_augment",
    "class_weights",
    "evaluate",
    "fit",
    "lr_at",
    "predict_series",
    "supervised_loss",
    "train_step",
    "write_history",
]
