"""Desk-scale experiments: learnability, ablation direction, pseudo-label efficacy, scale sanity."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import Model, ModelConfig, forward
from .preprocess import preprocess
from .ssl import SslConfig, ZooMember, ssl_round
from .synth import Dataset, SynthSpec, generate_dataset
from .training import SeriesData, TrainConfig, evaluate, fit

log = logging.getLogger(__name__)


def to_series(records, size: int, with_labels: bool = True) -> list[SeriesData]:
    out = []
    for r in records:
        images = preprocess(r.volume, size).images
        out.append(SeriesData(r.series_id, images, r.labels if with_labels else None))
    return out


def build_splits(spec: SynthSpec, counts: tuple[int, int, int], size: int) -> dict[str, list[SeriesData]]:
    """Generate ``sum(counts)`` series split into train / validation / unlabeled."""
    total = sum(counts)
    spec = replace(spec, num_series=total)
    data: Dataset = generate_dataset(spec, tuple(c / total for c in counts))
    out = {name: to_series(data.split(name), size) for name in ("train", "validation")}
    out["unlabeled"] = to_series(data.split("unlabeled"), size, with_labels=False)
    out["hidden"] = [SeriesData(s.series_id, s.images, data.hidden[s.series_id]) for s in out["unlabeled"]]
    return out


# learnability ------------------------------------------------------------------------

LEARN_TRAIN = TrainConfig(total_iters=2000, warmup_iters=100, peak_lr=0.1, augment="none")


@dataclass
class LearnResult:
    train_loss: float
    seconds: float
    history: list = field(repr=False, default_factory=list)


def learnability(seed: int = 0, num_series: int = 8, model_config: ModelConfig | None = None,
                 train_config: TrainConfig = LEARN_TRAIN) -> LearnResult:
    cfg = model_config or ModelConfig.tiny()
    spec = SynthSpec(seed=seed, num_series=num_series)
    data = generate_dataset(spec, (1.0, 0.0, 0.0))
    train = to_series(data.records, cfg.resolution)
    model = Model(cfg, seed=seed)
    t0 = time.process_time()
    res = fit(model, train, replace(train_config, seed=seed))
    return LearnResult(evaluate(model, train), time.process_time() - t0, res.history)


# ablation ------------------------------------------------------------------------------

ABLATION_TRAIN = TrainConfig(total_iters=2000, warmup_iters=100, peak_lr=0.1, augment="weak")

# (name, model overrides, train overrides) of the ablated baselines
ABLATIONS = {
    "inter": ({"use_inter": False}, {}),
    "ds": ({}, {"deep_supervision": False}),
    "post_norm": ({"norm": "pre"}, {}),
}


@dataclass
class AblationRow:
    seed: int
    full: float
    ablated: dict[str, float]


def ablation(seed: int, num_train: int = 100, num_val: int = 20, model_config: ModelConfig | None = None,
             train_config: TrainConfig = ABLATION_TRAIN, which=tuple(ABLATIONS)) -> AblationRow:
    """Validation loss of the full model and of each single-feature ablation for one seed."""
    cfg = model_config or ModelConfig.tiny()
    splits = build_splits(SynthSpec(seed=seed), (num_train, num_val, 0), cfg.resolution)
    tc = replace(train_config, seed=seed)

    def run(mc, t):
        model = Model(mc, seed=seed)
        fit(model, splits["train"], t)
        return evaluate(model, splits["validation"])

    full = run(cfg, tc)
    ablated = {}
    for name in which:
        m_over, t_over = ABLATIONS[name]
        ablated[name] = run(replace(cfg, **m_over), replace(tc, **t_over))
        log.info("seed %d: full %.5f, without %s %.5f", seed, full, name, ablated[name])
    return AblationRow(seed, full, ablated)


# pseudo-label round ---------------------------------------------------------------------

SSL_TRAIN = TrainConfig(total_iters=2000, warmup_iters=100, peak_lr=0.1, augment="weak")


@dataclass
class SslBenchRow:
    seed: int
    baseline: float
    ssl: float
    selected: int
    pseudo_accuracy: float
    seconds: float


def ssl_benchmark(seed: int, counts=(200, 50, 800), model_config: ModelConfig | None = None,
                  train_config: TrainConfig = SSL_TRAIN, ssl_train_config: TrainConfig | None = None,
                  config: SslConfig = SslConfig(tau_s=0.9, tau_p=0.5)) -> SslBenchRow:
    """Supervised baseline vs one pseudo-label round; both scored on the validation split.

    The retrained model starts from the same initialization as the baseline,
    so the comparison isolates the pseudo-labeled data.
    """
    cfg = model_config or ModelConfig.tiny()
    t0 = time.process_time()
    splits = build_splits(SynthSpec(seed=seed), counts, cfg.resolution)
    tc = replace(train_config, seed=seed)
    stc = replace(ssl_train_config or train_config, seed=seed)
    base = Model(cfg, seed=seed)
    fit(base, splits["train"], tc)
    baseline = evaluate(base, splits["validation"])
    zoo = [ZooMember(base, 1, name="baseline")]
    res = ssl_round(zoo, splits["train"], splits["unlabeled"], splits["validation"],
                    lambda: Model(cfg, seed=seed), stc, config)
    truth = {s.series_id: s.labels for s in splits["hidden"]}
    agree = [np.mean(s.labels == truth[s.series_id]) for s in res.pseudo]
    return SslBenchRow(seed, baseline, res.report.new_val, res.report.num_selected,
                       float(np.mean(agree)) if agree else float("nan"), time.process_time() - t0)


# scale sanity ----------------------------------------------------------------------------

@dataclass
class ScaleResult:
    intra_params: int
    total_params: int
    logits_shape: tuple
    finite: bool
    seconds: float


def scale_sanity(num_slices: int = 2, seed: int = 0) -> ScaleResult:
    """Full-size configuration: construct, one forward pass, parameter counts."""
    cfg = ModelConfig()
    t0 = time.process_time()
    model = Model(cfg, seed=seed)
    x = np.random.default_rng(seed).random((num_slices, 3, cfg.resolution, cfg.resolution))
    with ad.no_grad():
        out = forward(x, model)
    finite = bool(np.isfinite(out.main.data).all() and np.isfinite(out.aux.data).all())
    return ScaleResult(model.num_intra_params(), model.num_params(), out.main.shape, finite,
                       time.process_time() - t0)
