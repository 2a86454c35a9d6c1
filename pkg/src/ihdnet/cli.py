"""Command line entry point: ``ihdnet <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import RunConfig, dump_config, load_config
from .ensemble import (DataError, MetricConfig, PredictionTable, ensemble_average, nest_ranks, rank_weights,
                       read_predictions, threshold_snap, truth_table, weighted_logloss, write_predictions)
from .model import ConfigError, Model, forward, load_checkpoint, save_checkpoint
from .preprocess import brain_crop, stack_series
from .ssl import ZooMember, ssl_round, write_pseudo_manifest, write_selection_report
from .synth import generate_dataset, load_dataset, read_manifest
from .training import SeriesData, fit, predict_series, supervised_loss, write_history

log = logging.getLogger("ihdnet")

SUBCOMMANDS = ("synth", "preprocess", "train", "predict", "evaluate", "ensemble", "snap", "ssl-round",
               "gradcheck", "inspect")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timestamp: str = ""
    version: str = __version__

    def write(self, path: Path) -> None:
        # SOURCE_DATE_EPOCH pins the timestamp for reproducible builds
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        t = int(epoch) if epoch else time.time()
        self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _manifest_path(out: Path) -> Path:
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


def _config(args) -> RunConfig:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    cfg = load_config(args.config, overrides)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _series(data_dir: Path, split: str | None, size: int, cfg: RunConfig, with_labels=True) -> list[SeriesData]:
    data = load_dataset(data_dir)
    out = []
    for r in data.records:
        if split and r.split != split:
            continue
        crop = brain_crop(r.volume, cfg.data.air_threshold, cfg.data.opening_radius)
        images = stack_series(r.volume, crop=crop, size=size).images
        out.append(SeriesData(r.series_id, images, r.labels if with_labels else None))
    if not out:
        raise DataError(f"{data_dir}: no series in split {split!r}")
    return out


# subcommands -----------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> dict:
    _need(args, "out")
    out = Path(args.out)
    data = generate_dataset(cfg.synth, cfg.data.fractions, out)
    (out / "config.txt").write_text(dump_config(cfg))
    print(f"wrote {len(data.records)} series to {out}")
    return {"manifest": str(out / "manifest.csv"), "answers": str(out / "answers.csv")}


def cmd_preprocess(args, cfg: RunConfig) -> dict:
    _need(args, "data", "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.data)
    with open(out / "crops.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "top", "left", "bottom", "right", "num_slices"])
        for r in data.records:
            crop = brain_crop(r.volume, cfg.data.air_threshold, cfg.data.opening_radius)
            batch = stack_series(r.volume, crop=crop, size=cfg.model.resolution)
            np.save(out / f"{r.series_id}.npy", batch.images)
            w.writerow([r.series_id, crop.top, crop.left, crop.bottom, crop.right, r.volume.num_slices])
    print(f"preprocessed {len(data.records)} series to {out}")
    return {"dir": str(out)}


def cmd_train(args, cfg: RunConfig) -> dict:
    _need(args, "data", "out")
    train = _series(Path(args.data), "train", cfg.model.resolution, cfg)
    val = _series(Path(args.data), "validation", cfg.model.resolution, cfg) if args.val else None
    model = Model(cfg.model, seed=cfg.train.seed)
    res = fit(model, train, cfg.train, val=val)
    out = Path(args.out)
    save_checkpoint(model, out)
    history = out.with_name(out.name + ".history.csv")
    write_history(res.history, history)
    if res.best_val is not None:
        print(f"best validation loss {res.best_val:.6f} at iteration {res.best_iteration}")
    print(f"final loss {res.history[-1].total:.6f}" if res.history else "no iterations run")
    return {"checkpoint": str(out), "history": str(history)}


def cmd_predict(args, cfg: RunConfig) -> dict:
    _need(args, "ckpt", "data", "out")
    model = load_checkpoint(args.ckpt)
    series = _series(Path(args.data), args.split, model.config.resolution, cfg, with_labels=False)
    write_predictions(predict_series(model, series), args.out)
    print(f"wrote predictions for {len(series)} series to {args.out}")
    return {"predictions": args.out}


def _truth(path: str, split: str | None) -> PredictionTable:
    labels = {sid: y for sid, (s, y) in read_manifest(path).items() if y is not None and (split is None or s == split)}
    return truth_table(labels)


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    _need(args, "preds", "truth")
    preds = read_predictions(args.preds)
    metric = MetricConfig(weights=np.array(cfg.train.static_weights))
    loss = weighted_logloss(preds, _truth(args.truth, args.split), metric)
    print(f"{loss:.6f}")
    if args.out:
        Path(args.out).write_text(f"{loss!r}\n")
        return {"score": args.out}
    return {}


def read_zoo(path: str | Path) -> list[tuple[str, int, int | None]]:
    """Zoo file rows ``path,rank[,group]``; relative paths resolve against the zoo file."""
    base = Path(path).parent
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if row[0] == "path":
                continue
            if len(row) not in (2, 3):
                raise DataError(f"{path}: expected path,rank[,group], got {row}")
            p = Path(row[0])
            rows.append((str(p if p.is_absolute() else base / p), int(row[1]),
                         int(row[2]) if len(row) == 3 and row[2] != "" else None))
    if not rows:
        raise DataError(f"{path}: empty zoo")
    return rows


def cmd_ensemble(args, cfg: RunConfig) -> dict:
    _need(args, "zoo", "out")
    rows = read_zoo(args.zoo)
    structure, order = nest_ranks([r[1] for r in rows], [r[2] for r in rows])
    weights = rank_weights(structure)
    tables = []
    for i in order:
        path = rows[i][0]
        if path.endswith(".csv"):
            tables.append(read_predictions(path))
        else:
            _need(args, "data")
            model = load_checkpoint(path)
            series = _series(Path(args.data), args.split, model.config.resolution, cfg, with_labels=False)
            tables.append(predict_series(model, series))
    result = tables[0] if len(tables) == 1 else ensemble_average(tables, weights)
    write_predictions(result, args.out)
    for i, w in zip(order, weights):
        print(f"{rows[i][0]}\trank {rows[i][1]}\tweight {float(w):.6f}")
    return {"predictions": args.out}


def cmd_snap(args, cfg: RunConfig) -> dict:
    _need(args, "preds", "out")
    table = threshold_snap(read_predictions(args.preds), args.tau_h, args.tau_l)
    write_predictions(table, args.out)
    return {"predictions": args.out}


def cmd_ssl_round(args, cfg: RunConfig) -> dict:
    _need(args, "zoo", "data", "out")
    ssl_cfg = cfg.ssl
    if args.tau_s is not None:
        ssl_cfg = replace(ssl_cfg, tau_s=args.tau_s)
    if args.tau_p is not None:
        ssl_cfg = replace(ssl_cfg, tau_p=args.tau_p)
    rows = read_zoo(args.zoo)
    zoo = [ZooMember(load_checkpoint(p), rank, group, name=p) for p, rank, group in rows]
    mc = zoo[0].model.config
    labeled = _series(Path(args.data), "train", mc.resolution, cfg)
    unlabeled = _series(Path(args.data), "unlabeled", mc.resolution, cfg, with_labels=False)
    val = _series(Path(args.data), "validation", mc.resolution, cfg)
    res = ssl_round(zoo, labeled, unlabeled, val, lambda: Model(mc, seed=cfg.train.seed), cfg.train, ssl_cfg,
                    round_index=args.round)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, out / "model.ckpt")
    write_predictions(res.table, out / "ensemble_unlabeled.csv")
    write_selection_report(res.report.rows, out / "selection.csv")
    write_pseudo_manifest(res.pseudo, out / "pseudo_manifest.csv", f"ensemble:{args.zoo};round:{args.round}")
    (out / "report.txt").write_text(res.report.summary() + "\n")
    with open(out / "zoo.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for m in res.zoo:
            path = "model.ckpt" if m.model is res.model else os.path.relpath(m.name, out)
            w.writerow([path, m.rank] + ([m.group] if m.group is not None else []))
    print(res.report.summary())
    return {"dir": str(out)}


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    seed = cfg.train.seed
    model = Model(cfg.model, seed=seed)
    rng = np.random.default_rng([seed, 31])
    n = args.slices
    images = rng.random((n, 3, cfg.model.resolution, cfg.model.resolution))
    labels = (rng.random((n, 6)) < 0.4).astype(np.int64)
    labels[:, 5] = labels[:, :5].max(axis=1)
    weights = np.array(cfg.train.static_weights)

    def loss():
        return supervised_loss(forward(images, model), labels, weights, cfg.train.deep_supervision).graph

    report = ad.grad_check(loss, model.parameters(), h=1e-5, tol=args.tol, max_coords=args.coords,
                           rng=np.random.default_rng([seed, 37]))
    print(report)
    if args.out:
        Path(args.out).write_text(str(report) + "\n")
    if not report.passed:
        raise SystemExit(1)
    return {"report": args.out} if args.out else {}


def cmd_inspect(args, cfg: RunConfig) -> dict:
    _need(args, "ckpt")
    model = load_checkpoint(args.ckpt)
    for k, v in model.config.to_dict().items():
        print(f"{k}: {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    print(f"parameters: {model.num_params()}")
    print(f"intra-slice parameters: {model.num_intra_params()}")
    return {}


HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble,
    "snap": cmd_snap,
    "ssl-round": cmd_ssl_round,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ihdnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key: value config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--data", help="dataset directory (manifest.csv + volumes/)")
        p.add_argument("--ckpt")
        p.add_argument("--split")
        p.add_argument("--preds")
        p.add_argument("--truth")
        p.add_argument("--zoo", help="file of path,rank[,group] rows")
        p.add_argument("--tau-s", type=float)
        p.add_argument("--tau-p", type=float)
        p.add_argument("--tau-h", type=float, default=0.97)
        p.add_argument("--tau-l", type=float, default=0.03)
        if name == "train":
            p.add_argument("--val", action="store_true", help="restore the best validation checkpoint")
        if name == "ssl-round":
            p.add_argument("--round", type=int, default=0)
        if name == "gradcheck":
            p.add_argument("--tol", type=float, default=1e-4)
            p.add_argument("--coords", type=int, default=200)
            p.add_argument("--slices", type=int, default=3)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        parser.print_usage(sys.stderr)
        print(f"ihdnet: error: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = _config(args)
        outputs = HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"ihdnet: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ConfigError, DataError, ValueError, KeyError) as exc:
        print(f"ihdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.out and outputs:
        inputs = {k: getattr(args, k) for k in ("data", "ckpt", "preds", "truth", "zoo") if getattr(args, k)}
        RunManifest(args.command, args.config, args.seed, inputs, outputs).write(_manifest_path(Path(args.out)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
