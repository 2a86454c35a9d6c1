"""Pseudo-label self-training: gate confident series, binarize, retrain with strong augmentation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .ensemble import DataError, PredictionTable, ensemble_average, nest_ranks, rank_weights
from .labels import CLASSES
from .model import ConfigError, Model, forward
from .training import (AugmentPolicy, LossBundle, SeriesData, TrainConfig, apply_augment, evaluate, fit,
                       predict_series)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SslConfig:
    tau_s: float = 0.9
    tau_p: float = 0.5
    rounds: int = 1
    lambda_u: float = 1.0
    min_change: float = 1e-4

    def __post_init__(self):
        if not 0.5 < self.tau_s < 1:
            raise ConfigError("tau_s must lie in (0.5, 1)")
        if not 0 < self.tau_p < 1:
            raise ConfigError("tau_p must lie in (0, 1)")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be >= 0")


def confidence(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return np.maximum(1.0 - p, p)


def series_confidence(table: PredictionTable) -> dict[str, float]:
    """Minimum confidence over every slice and class of each series."""
    out: dict[str, float] = {}
    counts: dict[str, list[int]] = {}
    for (sid, k), row in zip(table.keys, table.probs):
        counts.setdefault(sid, []).append(k)
        out[sid] = min(out.get(sid, 1.0), float(confidence(row).min()))
    for sid, ks in counts.items():
        if sorted(ks) != list(range(len(ks))):
            raise DataError(f"series {sid} has incomplete slice rows")
    return out


def select_series(table: PredictionTable, tau_s: float) -> list[str]:
    """Series whose every slice and class has confidence strictly above ``tau_s``."""
    return [sid for sid, s in series_confidence(table).items() if s > tau_s]


def binarize(p, tau_p: float = 0.5) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) > tau_p).astype(np.int64)


def unlabeled_loss(model: Model, images: np.ndarray, pseudo: np.ndarray, policy: AugmentPolicy, weights,
                   rng: np.random.Generator, lambda_u: float = 1.0) -> LossBundle:
    """Main-head weighted BCE of a strongly augmented series against its pseudo-labels."""
    pseudo = np.asarray(pseudo)
    if not np.all((pseudo == 0) | (pseudo == 1)):
        raise ValueError("pseudo labels must be binary")
    x = apply_augment(images, policy, rng)
    lu = ad.bce_with_logits(forward(x, model).main, pseudo, np.asarray(weights, dtype=np.float64))
    total = lu * lambda_u
    return LossBundle(0.0, 0.0, float(lu.data), float(total.data), total)


# zoo and rounds ----------------------------------------------------------------------

@dataclass
class ZooMember:
    model: Model
    rank: int
    group: int | None = None
    name: str = ""


def zoo_weights(zoo: list[ZooMember]) -> list[float]:
    structure, order = nest_ranks([m.rank for m in zoo], [m.group for m in zoo])
    w = [0.0] * len(zoo)
    for i, v in zip(order, rank_weights(structure)):
        w[i] = float(v)
    return w


def ensemble_predict(zoo: list[ZooMember], series: list[SeriesData]) -> PredictionTable:
    if not zoo:
        raise ConfigError("model zoo is empty")
    tables = [predict_series(m.model, series) for m in zoo]
    if len(zoo) == 1:
        return tables[0]
    return ensemble_average(tables, zoo_weights(zoo))


@dataclass
class SelectionRow:
    round: int
    series_id: str
    min_confidence: float
    selected: bool


@dataclass
class RoundReport:
    round: int
    num_selected: int
    num_candidates: int
    prevalence: list[float]
    new_val: float | None
    worst_val: float | None
    replaced: str | None
    rows: list[SelectionRow] = field(default_factory=list)

    def summary(self) -> str:
        prev = " ".join(f"{c}={p:.4f}" for c, p in zip(CLASSES, self.prevalence))
        val = "n/a" if self.new_val is None else f"{self.new_val:.6f}"
        return (f"round {self.round}: selected {self.num_selected}/{self.num_candidates} series; "
                f"pseudo prevalence {prev}; new model val {val}; "
                f"replaced {self.replaced or 'none'}")


@dataclass
class RoundResult:
    model: Model
    table: PredictionTable
    pseudo: list[SeriesData]
    report: RoundReport
    zoo: list[ZooMember]


def pseudo_label(table: PredictionTable, unlabeled: list[SeriesData], config: SslConfig,
                 round_index: int = 0) -> tuple[list[SeriesData], list[SelectionRow]]:
    scores = series_confidence(table)
    by_series = table.by_series()
    pseudo, rows = [], []
    for s in unlabeled:
        if s.series_id not in scores:
            raise DataError(f"no ensemble predictions for series {s.series_id}")
        if len(by_series[s.series_id]) != len(s.images):
            raise DataError(f"series {s.series_id}: prediction rows do not match its slices")
        keep = scores[s.series_id] > config.tau_s
        rows.append(SelectionRow(round_index, s.series_id, scores[s.series_id], keep))
        if keep:
            pseudo.append(SeriesData(s.series_id, s.images, binarize(by_series[s.series_id], config.tau_p)))
    return pseudo, rows


def make_unlabeled_step(lambda_u: float):
    policy = AugmentPolicy.strong()

    def step(model, s, config, weights, rng):
        return unlabeled_loss(model, s.images, s.labels, policy, weights, rng, lambda_u)

    return step


def ssl_round(zoo: list[ZooMember], labeled: list[SeriesData], unlabeled: list[SeriesData], val: list[SeriesData],
              model_factory, train_config: TrainConfig, config: SslConfig, round_index: int = 0) -> RoundResult:
    """One cycle: ensemble-predict, gate and binarize, retrain, refresh the zoo.

    ``unlabeled`` series must not carry labels (they are ignored if present).
    ``model_factory()`` returns a freshly initialized model.
    """
    if not zoo:
        raise ConfigError("model zoo is empty")
    unlabeled = [SeriesData(s.series_id, s.images, None) for s in unlabeled]
    table = ensemble_predict(zoo, unlabeled)
    pseudo, rows = pseudo_label(table, unlabeled, config, round_index)
    if not pseudo:
        log.warning("round %d: no series passed tau_s=%g; training supervised only", round_index, config.tau_s)
    model = model_factory()
    fit(model, labeled, train_config, val=None, pseudo=pseudo, unlabeled_step=make_unlabeled_step(config.lambda_u))

    new_val = worst_val = None
    replaced = None
    zoo = list(zoo)
    if val:
        new_val = evaluate(model, val)
        scores = [evaluate(m.model, val) for m in zoo]
        worst = int(np.argmax(scores))
        worst_val = scores[worst]
        if new_val < worst_val:
            old = zoo[worst]
            replaced = old.name or f"member{worst}"
            zoo[worst] = ZooMember(model, old.rank, old.group, f"round{round_index}")
    if pseudo:
        prevalence = np.concatenate([s.labels for s in pseudo]).mean(axis=0).tolist()
    else:
        prevalence = [0.0] * len(CLASSES)
    report = RoundReport(round_index, len(pseudo), len(unlabeled), prevalence, new_val, worst_val, replaced, rows)
    log.info(report.summary())
    return RoundResult(model, table, pseudo, report, zoo)


def run_rounds(zoo, labeled, unlabeled, val, model_factory, train_config: TrainConfig,
               config: SslConfig) -> list[RoundResult]:
    """Up to ``config.rounds`` cycles; stops early once the selection and validation loss settle."""
    results: list[RoundResult] = []
    for r in range(config.rounds):
        res = ssl_round(zoo, labeled, unlabeled, val, model_factory, train_config, config, r)
        results.append(res)
        zoo = res.zoo
        if len(results) > 1:
            prev, cur = results[-2].report, res.report
            same = {x.series_id for x in prev.rows if x.selected} == {x.series_id for x in cur.rows if x.selected}
            steady = prev.new_val is not None and cur.new_val is not None \
                and abs(prev.new_val - cur.new_val) < config.min_change
            if same and steady:
                log.info("selection and validation loss settled after round %d", r)
                break
    return results


# files ---------------------------------------------------------------------------------

def write_selection_report(rows: list[SelectionRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "series_id", "min_confidence", "selected"])
        for r in rows:
            w.writerow([r.round, r.series_id, repr(r.min_confidence), int(r.selected)])


def write_pseudo_manifest(pseudo: list[SeriesData], path: str | Path, provenance: str) -> None:
    from .synth import write_manifest

    write_manifest(path, [(s.series_id, "pseudo", s.labels, len(s.labels)) for s in pseudo],
                   {"provenance": [provenance] * len(pseudo)})


__all__ = [
    "RoundReport",
    "RoundResult",
    "SelectionRow",
    "SslConfig",
    "ZooMember",
    "binarize",
    "confidence",
    "ensemble_predict",
    "pseudo_label",
    "run_rounds",
    "select_series",
    "series_confidence",
    "ssl_round",
    "unlabeled_loss",
    "write_pseudo_manifest",
    "write_selection_report",
]
