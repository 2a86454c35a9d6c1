"""Seed-determined synthetic head CT series with planted hemorrhage blobs.

Each subtype lives in its own geometric zone of the head (a caricature, not
anatomy), so the class of a blob is identified by where it sits:

* EDH: thick biconvex lens against the inner skull
* IPH: round blob in the mid parenchyma
* IVH: blob at the centre (ventricle zone)
* SAH: thin, long band a little below the skull
* SDH: crescent against the skull, thinner than EDH and longer

Zones differ radially rather than by angle, so flips and small rotations
keep every class identifiable.

Blobs span a contiguous run of slices and taper toward the ends of the run,
so edge slices carry a weaker signal than the middle of the run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import ANY, CLASSES
from .preprocess import HUVolume, read_volume, write_volume

AIR_HU = -1000
SKULL_HU = 1000
BRAIN_HU = 30

MANIFEST_FIELDS = ("series_id", "slice_index", "split") + CLASSES
SPLITS = ("train", "validation", "unlabeled")


@dataclass
class SynthSpec:
    seed: int = 0
    num_series: int = 100
    slices_min: int = 6
    slices_max: int = 10
    frame_size: int = 64
    signal_hu: float = 45.0
    label_noise: float = 0.0
    noise_hu: float = 4.0
    class_rates: tuple = (0.15, 0.25, 0.2, 0.25, 0.25)
    blob_scale: float = 1.0
    force_negative: bool = False

    def __post_init__(self):
        if self.frame_size < 32:
            raise ValueError("frame_size must be >= 32")
        if self.signal_hu <= 0:
            raise ValueError("signal_hu must be positive")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")
        if not 1 <= self.slices_min <= self.slices_max:
            raise ValueError("need 1 <= slices_min <= slices_max")
        self.class_rates = tuple(float(r) for r in self.class_rates)
        if len(self.class_rates) != 5:
            raise ValueError("class_rates needs one rate per subtype")


def series_id(index: int) -> str:
    return f"S{index:05d}"


# relative blood density per subtype (multiplies signal_hu)
DENSITY = (1.0, 0.9, 0.8, 0.6, 0.75)


def _zone_mask(cls: int, u, v, rho, phi, inner: float, theta: float, taper: float, k: float = 1.0) -> np.ndarray:
    depth = inner - rho  # > 0 inside the brain, measured from the inner skull
    dphi = np.angle(np.exp(1j * (phi - theta)))
    if cls == 0:  # EDH: thick lens touching the skull, short arc
        half = 0.5 * k * taper
        thick = 0.3 * k * taper * np.clip(1 - (dphi / half) ** 2, 0, None)
        return (depth >= 0) & (depth < thick) & (np.abs(dphi) < half)
    if cls == 1:  # IPH: round blob in the mid parenchyma
        r0 = 0.45
        cu, cv = r0 * np.cos(theta), r0 * np.sin(theta)
        return (u - cu) ** 2 + (v - cv) ** 2 < (0.17 * k * taper) ** 2
    if cls == 2:  # IVH: centre
        return u ** 2 + (v / 1.3) ** 2 < (0.17 * k * taper) ** 2
    if cls == 3:  # SAH: thin band separated from the skull by a brain margin, long arc
        lo = 0.14 * k
        return (depth >= lo) & (depth < lo + 0.08 * k) & (np.abs(dphi) < 1.8 * taper)
    # SDH: crescent touching the skull, medium arc
    return (depth >= 0) & (depth < 0.12 * k * (0.5 + 0.5 * taper)) & (np.abs(dphi) < 1.0 * taper)


def generate_series(spec: SynthSpec, index: int) -> tuple[HUVolume, np.ndarray]:
    """Return the volume and its (N, 6) 0/1 label matrix for one series."""
    if not 0 <= index < spec.num_series:
        raise IndexError(f"series index {index} outside [0, {spec.num_series})")
    rng = np.random.default_rng([spec.seed, index])
    n = int(rng.integers(spec.slices_min, spec.slices_max + 1))
    f = spec.frame_size
    cy, cx = f / 2 + rng.uniform(-0.03, 0.03, size=2) * f
    rx = f * 0.42 * rng.uniform(0.9, 1.0)
    ry = rx * rng.uniform(0.9, 1.05)
    skull = max(2.0, 0.05 * f) / rx

    # per-class slice runs
    runs = {}
    for c in range(5):
        if spec.force_negative or rng.random() >= spec.class_rates[c]:
            continue
        length = int(rng.integers(2, max(2, int(0.7 * n)) + 1)) if n > 1 else 1
        start = int(rng.integers(0, n - length + 1))
        runs[c] = (start, length, float(rng.uniform(-np.pi, np.pi)))

    yy, xx = np.mgrid[0:f, 0:f] + 0.5
    slices = np.empty((n, f, f), dtype=np.int16)
    labels = np.zeros((n, 6), dtype=np.int64)
    for k in range(n):
        z = (2 * k + 1) / n - 1 if n > 1 else 0.0
        zs = np.sqrt(1 - (0.6 * z) ** 2)
        u = (xx - cx) / (rx * zs)
        v = (yy - cy) / (ry * zs)
        rho = np.sqrt(u * u + v * v)
        phi = np.arctan2(v, u)
        inner = 1.0 - skull / zs
        hu = np.full((f, f), float(AIR_HU))
        head = rho < 1.0
        brain = rho < inner
        hu[head] = SKULL_HU
        hu[brain] = BRAIN_HU
        for c, (start, length, theta) in runs.items():
            if not start <= k < start + length:
                continue
            mid = start + (length - 1) / 2
            taper = max(0.35, np.sqrt(max(0.0, 1 - ((k - mid) / (length / 2)) ** 2)))
            blob = _zone_mask(c, u, v, rho, phi, inner, theta, taper, spec.blob_scale) & brain
            hu[blob] = BRAIN_HU + spec.signal_hu * DENSITY[c] * (0.6 + 0.4 * taper)
            labels[k, c] = 1
        hu[head] += rng.normal(0.0, spec.noise_hu, size=int(head.sum()))
        slices[k] = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)

    if spec.label_noise > 0:
        flips = rng.random((n, 5)) < spec.label_noise
        labels[:, :5] ^= flips
    labels[:, ANY] = labels[:, :5].max(axis=1)
    return HUVolume(series_id(index), slices), labels


def assign_splits(num_series: int, fractions, seed: int) -> list[str]:
    """Series-level split assignment with exact rounded counts."""
    fractions = tuple(float(x) for x in fractions)
    if len(fractions) != 3 or any(x < 0 for x in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * num_series))
    n_val = min(num_series - n_train, int(round(fractions[1] * num_series)))
    order = np.random.default_rng([seed, 7919]).permutation(num_series)
    split = [""] * num_series
    for rank, i in enumerate(order):
        split[i] = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
    return split


@dataclass
class SeriesRecord:
    series_id: str
    split: str
    volume: HUVolume
    labels: np.ndarray | None  # None when withheld


@dataclass
class Dataset:
    records: list[SeriesRecord] = field(default_factory=list)
    hidden: dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str) -> list[SeriesRecord]:
        return [r for r in self.records if r.split == name]


def generate_dataset(spec: SynthSpec, fractions=(0.7, 0.1, 0.2), out_dir: str | Path | None = None) -> Dataset:
    """Generate every series; optionally write volumes, manifest and hidden answers to ``out_dir``.

    The manifest carries blank label columns for the unlabeled split; its true
    labels go to ``answers.csv`` only.
    """
    splits = assign_splits(spec.num_series, fractions, spec.seed)
    records, hidden = [], {}
    for i in range(spec.num_series):
        volume, labels = generate_series(spec, i)
        if splits[i] == "unlabeled":
            hidden[volume.series_id] = labels
            records.append(SeriesRecord(volume.series_id, splits[i], volume, None))
        else:
            records.append(SeriesRecord(volume.series_id, splits[i], volume, labels))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        for r in records:
            write_volume(r.volume, out / "volumes" / f"{r.series_id}.hdr")
        write_manifest(out / "manifest.csv", [(r.series_id, r.split, r.labels, r.volume.num_slices) for r in records])
        write_manifest(
            out / "answers.csv",
            [(r.series_id, r.split, hidden[r.series_id], r.volume.num_slices) for r in records if r.series_id in hidden],
        )
    return Dataset(records, hidden)


def write_manifest(path: str | Path, rows, extra: dict[str, list] | None = None) -> None:
    """``rows`` are (series_id, split, labels-or-None, num_slices)."""
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS + tuple(extra))
        for r_i, (sid, split, labels, n) in enumerate(rows):
            for k in range(n):
                cols = [""] * 6 if labels is None else [str(int(x)) for x in labels[k]]
                w.writerow([sid, k, split] + cols + [extra[key][r_i] for key in extra])


def read_manifest(path: str | Path) -> dict[str, tuple[str, np.ndarray | None]]:
    """Map series_id -> (split, (N, 6) labels or None), slices ordered by index."""
    rows: dict[str, dict[int, list[str]]] = {}
    split_of: dict[str, str] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["series_id"]
            split_of[sid] = row["split"]
            rows.setdefault(sid, {})[int(row["slice_index"])] = [row[c] for c in CLASSES]
    out = {}
    for sid, by_slice in rows.items():
        if sorted(by_slice) != list(range(len(by_slice))):
            raise ValueError(f"{path}: series {sid} has non-contiguous slice indices")
        vals = [by_slice[k] for k in range(len(by_slice))]
        if all(v == "" for row in vals for v in row):
            out[sid] = (split_of[sid], None)
        else:
            out[sid] = (split_of[sid], np.array([[int(v) for v in row] for row in vals], dtype=np.int64))
    return out


def load_dataset(data_dir: str | Path, manifest: str = "manifest.csv") -> Dataset:
    data_dir = Path(data_dir)
    records = []
    for sid, (split, labels) in read_manifest(data_dir / manifest).items():
        volume = read_volume(data_dir / "volumes" / f"{sid}.hdr")
        records.append(SeriesRecord(sid, split, volume, labels))
    return Dataset(records)
