"""CT series preprocessing: HU windowing, black-edge crop, resize, stacking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"window width must be positive, got {self.width}")


BRAIN = WindowSpec(40, 80)
BLOOD = WindowSpec(80, 200)
SOFT_TISSUE = WindowSpec(40, 380)
DEFAULT_WINDOWS = (BRAIN, BLOOD, SOFT_TISSUE)


@dataclass
class HUVolume:
    """One CT series: ``slices`` is (N, H, W) int16, ``slice_order`` the stacking index of each slice."""

    series_id: str
    slices: np.ndarray
    slice_order: np.ndarray | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3 or self.slices.shape[0] < 1:
            raise ValueError(f"expected (N, H, W) slices, got {self.slices.shape}")
        n = self.slices.shape[0]
        if self.slice_order is None:
            self.slice_order = np.arange(n)
        self.slice_order = np.asarray(self.slice_order, dtype=np.int64)
        if sorted(self.slice_order.tolist()) != list(range(n)):
            raise ValueError("slice_order must be a permutation of 0..N-1")

    @property
    def num_slices(self) -> int:
        return self.slices.shape[0]

    def ordered(self) -> np.ndarray:
        """Slices sorted by ascending stacking index."""
        return self.slices[np.argsort(self.slice_order, kind="stable")]


@dataclass(frozen=True)
class CropRect:
    """Half-open pixel rectangle rows [top, bottom) x cols [left, right)."""

    top: int
    left: int
    bottom: int
    right: int


@dataclass
class SeriesBatch:
    series_id: str
    images: np.ndarray  # (N, 3, h, w) in [0, 1]
    crop: CropRect


def hu_window(hu: np.ndarray, w: WindowSpec) -> np.ndarray:
    lo = w.center - w.width / 2.0
    return np.clip((np.asarray(hu, dtype=np.float64) - lo) / w.width, 0.0, 1.0)


def compose_channels(hu: np.ndarray, windows=DEFAULT_WINDOWS) -> np.ndarray:
    if len(windows) != 3:
        raise ValueError(f"need exactly three windows, got {len(windows)}")
    return np.stack([hu_window(hu, w) for w in windows], axis=-3)


def brain_crop(volume: HUVolume, air_threshold: float = -500, opening_radius: int = 3) -> CropRect:
    """Bounding box of the union over slices of the opened foreground mask."""
    if opening_radius < 1:
        raise ValueError("opening_radius must be >= 1")
    n, h, w = volume.slices.shape
    structure = np.ones((2 * opening_radius + 1,) * 2, dtype=bool)
    union = np.zeros((h, w), dtype=bool)
    for sl in volume.slices:
        mask = sl > air_threshold
        union |= ndimage.binary_opening(mask, structure=structure)
    if not union.any():
        return CropRect(0, 0, h, w)
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    return CropRect(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # pixel centres at (i + 0.5) / n on both grids
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize over the last two axes."""
    if height < 1 or width < 1:
        raise ValueError("target size must be at least 1x1")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if (h, w) == (height, width):
        return image.copy()
    ry = _interp_matrix(h, height)
    rx = _interp_matrix(w, width)
    out = np.einsum("ij,...jk,lk->...il", ry, image, rx)
    # interpolation weights are convex; clip rounding drift to the input range
    return np.clip(out, image.min(), image.max())


def stack_series(
    volume: HUVolume,
    windows=DEFAULT_WINDOWS,
    crop: CropRect | None = None,
    size: int = 224,
) -> SeriesBatch:
    """Crop, window and resize every slice, stacked in ascending slice order."""
    n, h, w = volume.slices.shape
    if crop is None:
        crop = brain_crop(volume)
    if not (0 <= crop.top < crop.bottom <= h and 0 <= crop.left < crop.right <= w):
        raise ValueError(f"crop {crop} outside frame {h}x{w}")
    raw = volume.ordered()[:, crop.top:crop.bottom, crop.left:crop.right]
    images = resize_bilinear(compose_channels(raw, windows), size, size)
    return SeriesBatch(volume.series_id, images, crop)


def preprocess(volume: HUVolume, size: int, air_threshold: float = -500, opening_radius: int = 3) -> SeriesBatch:
    crop = brain_crop(volume, air_threshold, opening_radius)
    return stack_series(volume, DEFAULT_WINDOWS, crop, size)


# volume file pair ---------------------------------------------------------------

def write_volume(volume: HUVolume, header_path: str | Path, payload_path: str | Path | None = None) -> None:
    """Write the ``.hdr`` key:value header and the raw int16 little-endian payload."""
    header_path = Path(header_path)
    payload_path = Path(payload_path) if payload_path else header_path.with_suffix(".raw")
    n, h, w = volume.slices.shape
    lines = [
        f"series_id: {volume.series_id}",
        f"num_slices: {n}",
        f"height: {h}",
        f"width: {w}",
        "value_type: int16",
        "byte_order: little-endian",
        f"payload: {payload_path.name}",
        "slice_order: " + ",".join(str(int(i)) for i in volume.slice_order),
    ]
    header_path.write_text("\n".join(lines) + "\n")
    payload_path.write_bytes(np.asarray(volume.slices, dtype="<i2").tobytes(order="C"))


def read_volume(header_path: str | Path) -> HUVolume:
    header_path = Path(header_path)
    meta = {}
    for line in header_path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
    if meta.get("value_type", "int16") != "int16" or meta.get("byte_order", "little-endian") != "little-endian":
        raise ValueError(f"{header_path}: unsupported value_type/byte_order")
    n, h, w = int(meta["num_slices"]), int(meta["height"]), int(meta["width"])
    payload = header_path.parent / meta.get("payload", header_path.with_suffix(".raw").name)
    raw = np.frombuffer(payload.read_bytes(), dtype="<i2")
    if raw.size != n * h * w:
        raise ValueError(f"{payload}: expected {n * h * w} values, found {raw.size}")
    order = None
    if meta.get("slice_order"):
        order = [int(v) for v in meta["slice_order"].split(",")]
    return HUVolume(meta["series_id"], raw.reshape(n, h, w).astype(np.int16), order)
