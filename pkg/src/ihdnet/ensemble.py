"""Prediction tables, the weighted log-loss metric and rank-weighted ensembling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .labels import CLASSES, DEFAULT_WEIGHTS


class DataError(ValueError):
    pass


class StructureError(ValueError):
    pass


@dataclass
class PredictionTable:
    """Per-slice probabilities: ``keys[i] = (series_id, slice_index)``, ``probs[i]`` the six classes."""

    keys: list[tuple[str, int]]
    probs: np.ndarray

    def __post_init__(self):
        self.keys = [(str(s), int(k)) for s, k in self.keys]
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(len(self.keys), len(CLASSES))
        if len(set(self.keys)) != len(self.keys):
            raise DataError("duplicate (series, slice) keys")
        if np.any(~np.isfinite(self.probs)) or np.any((self.probs < 0) | (self.probs > 1)):
            raise DataError("probabilities must lie in [0, 1]")

    @classmethod
    def from_series(cls, items) -> "PredictionTable":
        """Build from ``(series_id, (N, 6) probs)`` pairs."""
        keys, rows = [], []
        for sid, p in items:
            p = np.asarray(p)
            keys += [(sid, k) for k in range(len(p))]
            rows.append(p)
        return cls(keys, np.concatenate(rows) if rows else np.zeros((0, 6)))

    def by_series(self) -> dict[str, np.ndarray]:
        out: dict[str, list] = {}
        for (sid, k), p in zip(self.keys, self.probs):
            out.setdefault(sid, []).append((k, p))
        return {sid: np.array([p for _, p in sorted(rows, key=lambda r: r[0])]) for sid, rows in out.items()}

    def aligned(self, keys: list[tuple[str, int]]) -> np.ndarray:
        """Rows reordered to ``keys``; raises on any missing key."""
        index = {k: i for i, k in enumerate(self.keys)}
        missing = [k for k in keys if k not in index]
        if missing:
            raise DataError(f"missing key {missing[0]}")
        return self.probs[[index[k] for k in keys]]

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class MetricConfig:
    weights: np.ndarray = field(default_factory=lambda: DEFAULT_WEIGHTS.copy())
    eps: float = 1e-7

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(CLASSES),) or np.any(self.weights <= 0):
            raise ValueError("need six positive class weights")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")


def weighted_logloss(preds: PredictionTable, truth: PredictionTable | dict, config: MetricConfig | None = None) -> float:
    """Mean over slices of the class-weighted binary log-loss.

    ``truth`` is a table of 0/1 labels or a ``series_id -> (N, 6)`` mapping.
    Both sides must cover exactly the same keys.
    """
    config = config or MetricConfig()
    if isinstance(truth, dict):
        truth = PredictionTable.from_series(truth.items())
    pkeys, tkeys = set(preds.keys), set(truth.keys)
    if pkeys != tkeys:
        diff = sorted(pkeys ^ tkeys)
        raise DataError(f"prediction and truth keys differ; first mismatch {diff[0]}")
    y = truth.aligned(preds.keys)
    p = np.clip(preds.probs, config.eps, 1 - config.eps)
    per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    w = config.weights
    return float(np.mean(per @ w / w.sum()))


def _group_rank(node) -> int:
    if isinstance(node, (list, tuple)):
        return sum(_group_rank(c) for c in node)
    return int(node)


def rank_weights(structure, exact: bool = False) -> list:
    """Weights per leaf for ranks given flat or nested in pairs.

    Within a pair of items with ranks ``r1, r2`` the weights are
    ``1 - r_i / (r1 + r2)``; a nested group carries the sum of its members'
    ranks and its weight is split among them multiplicatively. Leaves are
    returned in depth-first order. ``exact`` returns ``Fraction`` values.
    """
    one = Fraction(1) if exact else 1.0

    def walk(node, parent):
        if not isinstance(node, (list, tuple)):
            if int(node) < 1:
                raise StructureError(f"ranks must be positive integers, got {node}")
            return [parent]
        if len(node) == 1:
            return walk(node[0], parent)
        if len(node) != 2:
            raise StructureError(f"groups must have exactly 2 elements, got {len(node)}")
        ranks = [_group_rank(c) for c in node]
        if ranks[0] == ranks[1]:
            raise StructureError(f"ranks within a group must be distinct, got {ranks}")
        total = sum(ranks)
        out = []
        for child, r in zip(node, ranks):
            w = one - (Fraction(r, total) if exact else r / total)
            out += walk(child, parent * w)
        return out

    return walk(structure, one)


def nest_ranks(ranks, groups) -> tuple[object, list[int]]:
    """Rank structure for ``rank_weights`` from per-member ranks and optional group ids.

    Members sharing a group id form one nested pair at the position of the
    group's first member. Returns the structure and the member index of
    each leaf in ``rank_weights`` output order.
    """
    slots: list = []
    members: dict = {}
    for i, g in enumerate(groups):
        if g is None:
            slots.append([i])
        elif g not in members:
            members[g] = [i]
            slots.append(members[g])
        else:
            members[g].append(i)
    structure = [ranks[s[0]] if len(s) == 1 else [ranks[i] for i in s] for s in slots]
    order = [i for s in slots for i in s]
    return (structure[0] if len(structure) == 1 else structure), order


def ensemble_average(members: list[PredictionTable], weights) -> PredictionTable:
    weights = [float(w) for w in weights]
    if len(weights) != len(members) or not members:
        raise ValueError("need one weight per member")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(weights)}")
    keys = members[0].keys
    ref = set(keys)
    acc = np.zeros_like(members[0].probs)
    for m, w in zip(members, weights):
        if set(m.keys) != ref:
            raise DataError("ensemble members cover different keys")
        acc += w * m.aligned(keys)
    return PredictionTable(keys, np.clip(acc, 0.0, 1.0))


def threshold_snap(table: PredictionTable, tau_h: float = 0.97, tau_l: float = 0.03, eps: float = 1e-7) -> PredictionTable:
    if not 0 < tau_l < tau_h < 1:
        raise ValueError("need 0 < tau_l < tau_h < 1")
    p = table.probs.copy()
    p[p > tau_h] = 1 - eps
    p[p < tau_l] = eps
    return PredictionTable(list(table.keys), p)


# files ------------------------------------------------------------------------------

def write_predictions(table: PredictionTable, path: str | Path) -> None:
    """``ID,Label`` rows ``ID_<series>_<slice>_<class>`` at six significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ID", "Label"])
        for (sid, k), row in zip(table.keys, table.probs):
            for name, p in zip(CLASSES, row):
                w.writerow([f"ID_{sid}_{k}_{name}", f"{p:.6g}"])


def read_predictions(path: str | Path) -> PredictionTable:
    rows: dict[tuple[str, int], dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["ID", "Label"]:
            raise DataError(f"{path}: expected header ID,Label")
        for ident, value in reader:
            if not ident.startswith("ID_"):
                raise DataError(f"{path}: malformed id {ident!r}")
            sid, k, name = ident[3:].rsplit("_", 2)
            if name not in CLASSES:
                raise DataError(f"{path}: unknown class {name!r}")
            rows.setdefault((sid, int(k)), {})[name] = float(value)
    keys = list(rows)
    for key in keys:
        if len(rows[key]) != len(CLASSES):
            raise DataError(f"{path}: incomplete classes for {key}")
    probs = np.array([[rows[key][c] for c in CLASSES] for key in keys]) if keys else np.zeros((0, 6))
    return PredictionTable(keys, probs)


def truth_table(labels: dict[str, np.ndarray], keys=None) -> PredictionTable:
    """Labels from a manifest mapping, optionally restricted to ``keys``."""
    table = PredictionTable.from_series((sid, y) for sid, y in labels.items() if y is not None)
    if keys is None:
        return table
    return PredictionTable(list(keys), table.aligned(list(keys)))

