"""Well ingestion, benchmark interval extraction, and depth alignment.

A well directory holds three CSV files:
  image.csv  - H rows x W comma-separated amplitudes, empty cell = missing
  depth.csv  - one physical depth (meters) per image row, strictly increasing
  logs.csv   - header ``depth,CAL,GR,...``; empty cell = missing sample

Intervals are fixed-height row slices of the image with logs interpolated
onto the image depth grid. Amplitudes are z-scored per interval and softly
squashed into (0,1) with tanh(./3); the inverse transform restores the
original amplitude domain exactly on non-saturated values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CHANNEL_ORDER = ("CAL", "GR", "DEN", "NEU", "DTC", "PE", "RES90")

TANH_SCALE = 3.0
SATURATION_EPS = 1e-6


class LoadError(ValueError):
    """Malformed well directory contents."""


class DegenerateIntervalError(ValueError):
    """Interval with zero amplitude variance; cannot be normalized."""


@dataclass
class WellDataset:
    well_id: str
    image: np.ndarray          # (rows, W) float64 with NaN for missing
    image_depths: np.ndarray   # (rows,) strictly increasing, meters
    log_depths: np.ndarray     # (L,) strictly increasing, meters
    log_values: np.ndarray     # (L, C) float64 with NaN for missing
    channel_names: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.image.shape[0]


@dataclass
class SliceConfig:
    slice_height: int = 600
    broad_step: int = 12000
    min_valid_height: int = 300
    seed: int = 42
    # explicit (well_id, start_row, end_row) entries
    heavy_intervals: tuple = ()
    channels: tuple[str, ...] = CHANNEL_ORDER

    def validate(self) -> None:
        if self.slice_height <= 0 or self.broad_step <= 0 or self.min_valid_height <= 0:
            raise ValueError("slice extents must be positive")


@dataclass
class IntervalBundle:
    well_id: str
    row_range: tuple[int, int]      # [start, end)
    kind: str                       # "broad" | "heavy"
    image_db: np.ndarray            # (H, W), median-filled amplitudes
    logs_aligned: np.ndarray        # (H, C) in [0,1], no missing values
    depth_grid: np.ndarray          # (H,)
    mu: float
    sigma: float
    channels: tuple[str, ...] = CHANNEL_ORDER
    n_filled: int = 0               # image cells that were median-filled

    @property
    def height(self) -> int:
        return self.image_db.shape[0]

    @property
    def width(self) -> int:
        return self.image_db.shape[1]

    @property
    def key(self) -> str:
        return f"{self.well_id}_{self.row_range[0]}_{self.row_range[1]}"

    def x01(self) -> np.ndarray:
        x01, _, _ = normalize_image(self.image_db, self.mu, self.sigma)
        return x01


# ---------------------------------------------------------------------------
# loading


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not path.is_file():
        raise LoadError(f"{path}: file not found")
    try:
        return pd.read_csv(path, **kwargs)
    except Exception as err:
        raise LoadError(f"{path}: malformed CSV ({err})") from err


def _require_strictly_increasing(depths: np.ndarray, path: Path) -> None:
    diffs = np.diff(depths)
    bad = np.nonzero(diffs <= 0)[0]
    if bad.size:
        row = int(bad[0]) + 2  # 1-based, the second row of the offending pair
        raise LoadError(f"{path}: depth not strictly increasing at line {row}")


def load_well(path, well_id: str | None = None) -> WellDataset:
    """Parse a well directory into arrays; missing cells become NaN."""
    root = Path(path)
    well_id = well_id or root.name

    image_df = _read_csv(root / "image.csv", header=None, dtype=np.float64)
    image = image_df.to_numpy(dtype=np.float64)

    depth_df = _read_csv(root / "depth.csv", header=None, dtype=np.float64)
    if depth_df.shape[1] != 1:
        raise LoadError(f"{root / 'depth.csv'}: expected a single column")
    image_depths = depth_df.to_numpy(dtype=np.float64).reshape(-1)
    if np.any(~np.isfinite(image_depths)):
        raise LoadError(f"{root / 'depth.csv'}: missing or non-finite depth values")
    _require_strictly_increasing(image_depths, root / "depth.csv")
    if image_depths.size != image.shape[0]:
        raise LoadError(
            f"{root}: image has {image.shape[0]} rows but depth.csv has "
            f"{image_depths.size}")

    logs_df = _read_csv(root / "logs.csv", header=0)
    cols = [str(c).strip() for c in logs_df.columns]
    if not cols or cols[0] != "depth":
        raise LoadError(f"{root / 'logs.csv'}: first column must be 'depth'")
    channel_names = tuple(cols[1:])
    if not channel_names:
        raise LoadError(f"{root / 'logs.csv'}: no log channels")
    unknown = [c for c in channel_names if c not in CHANNEL_ORDER]
    if unknown:
        raise LoadError(f"{root / 'logs.csv'}: unknown channel name {unknown[0]!r}")
    try:
        log_depths = logs_df["depth"].to_numpy(dtype=np.float64)
        log_values = logs_df[list(channel_names)].to_numpy(dtype=np.float64)
    except ValueError as err:
        raise LoadError(f"{root / 'logs.csv'}: non-numeric entries ({err})") from err
    if np.any(~np.isfinite(log_depths)):
        raise LoadError(f"{root / 'logs.csv'}: missing depth values")
    _require_strictly_increasing(log_depths, root / "logs.csv")

    return WellDataset(well_id=well_id, image=image, image_depths=image_depths,
                       log_depths=log_depths, log_values=log_values,
                       channel_names=channel_names)


# ---------------------------------------------------------------------------
# preprocessing primitives


def fill_missing_image(image: np.ndarray) -> tuple[np.ndarray, int]:
    """Replace missing (NaN) pixels by the interval median of valid pixels."""
    missing = ~np.isfinite(image)
    n_missing = int(missing.sum())
    if n_missing == 0:
        return image.astype(np.float64, copy=True), 0
    valid = image[~missing]
    if valid.size == 0:
        raise LoadError("all image values missing in interval")
    filled = image.astype(np.float64, copy=True)
    filled[missing] = np.median(valid)
    return filled, n_missing


def normalize_image(image: np.ndarray, mu: float | None = None,
                    sigma: float | None = None):
    """Z-score then squash: x01 = (1 + tanh(z/3)) / 2. Returns (x01, mu, sigma)."""
    if mu is None:
        mu = float(image.mean())
    if sigma is None:
        sigma = float(image.std())
    if sigma <= 0.0:
        raise DegenerateIntervalError("zero amplitude variance: sigma == 0")
    z = (image - mu) / sigma
    x01 = 0.5 * (1.0 + np.tanh(z / TANH_SCALE))
    return x01, mu, sigma


def denormalize_image(x01: np.ndarray, mu: float, sigma: float):
    """Exact algebraic inverse of normalize_image.

    Values at the (0,1) boundary are clamped to (eps, 1-eps) before arctanh;
    returns (amplitude field, number of clamped values).
    """
    lo, hi = SATURATION_EPS, 1.0 - SATURATION_EPS
    n_clamped = int(np.sum((x01 <= lo) | (x01 >= hi)))
    clipped = np.clip(x01, lo, hi)
    if n_clamped:
        log.warning("denormalize: clamped %d saturated values", n_clamped)
    return TANH_SCALE * sigma * np.arctanh(2.0 * clipped - 1.0) + mu, n_clamped


def align_logs(log_depths: np.ndarray, log_values: np.ndarray,
               channel_names: tuple[str, ...], requested: tuple[str, ...],
               depth_grid: np.ndarray) -> np.ndarray:
    """Median-fill, 1-99 percentile clip, rescale to [0,1], interpolate.

    Interpolation is linear onto the image depth grid with constant
    (nearest-value) extension beyond log coverage. A channel whose clipped
    range collapses (p1 == p99) maps to constant 0.5.
    """
    name_to_col = {c: i for i, c in enumerate(channel_names)}
    out = np.empty((depth_grid.size, len(requested)), dtype=np.float64)
    for j, name in enumerate(requested):
        if name not in name_to_col:
            raise LoadError(f"channel {name!r} not present in well logs")
        v = log_values[:, name_to_col[name]].astype(np.float64, copy=True)
        finite = np.isfinite(v)
        if finite.sum() < 2:
            raise LoadError(f"channel {name!r} has fewer than 2 valid samples")
        v[~finite] = np.median(v[finite])
        p1, p99 = np.percentile(v, [1.0, 99.0])
        if p99 <= p1:
            out[:, j] = 0.5
            continue
        v = (np.clip(v, p1, p99) - p1) / (p99 - p1)
        out[:, j] = np.interp(depth_grid, log_depths, v)
    return out


def replicate_logs(aligned: np.ndarray, width: int) -> np.ndarray:
    """Laterally replicate (H, C) aligned logs into C image-shaped channels."""
    h, c = aligned.shape
    return np.broadcast_to(aligned.T[:, :, None], (c, h, width)).copy()


# ---------------------------------------------------------------------------
# interval extraction


def _build_bundle(ds: WellDataset, start: int, end: int, kind: str,
                  channels: tuple[str, ...]) -> IntervalBundle:
    image, n_filled = fill_missing_image(ds.image[start:end])
    depth_grid = ds.image_depths[start:end]
    aligned = align_logs(ds.log_depths, ds.log_values, ds.channel_names,
                         channels, depth_grid)
    mu = float(image.mean())
    sigma = float(image.std())
    if sigma <= 0.0:
        raise DegenerateIntervalError(
            f"{ds.well_id} rows [{start},{end}): constant amplitude")
    return IntervalBundle(well_id=ds.well_id, row_range=(start, end), kind=kind,
                          image_db=image, logs_aligned=aligned,
                          depth_grid=depth_grid.copy(), mu=mu, sigma=sigma,
                          channels=tuple(channels), n_filled=n_filled)


def extract_intervals(ds: WellDataset, cfg: SliceConfig) -> list[IntervalBundle]:
    """Slice a well into broad benchmark intervals plus configured heavy ones.

    Broad slices start at multiples of broad_step; a trailing slice shorter
    than slice_height is kept iff its height >= min_valid_height. Degenerate
    broad slices are dropped with a warning; a degenerate or out-of-range
    heavy interval is a configuration error.
    """
    cfg.validate()
    bundles: list[IntervalBundle] = []
    for start in range(0, ds.n_rows, cfg.broad_step):
        end = min(start + cfg.slice_height, ds.n_rows)
        if end - start < cfg.min_valid_height:
            continue
        try:
            bundles.append(_build_bundle(ds, start, end, "broad", cfg.channels))
        except DegenerateIntervalError as err:
            log.warning("dropping degenerate broad interval: %s", err)
    for entry in cfg.heavy_intervals:
        well_id, start, end = entry
        if well_id != ds.well_id:
            continue
        start, end = int(start), int(end)
        if not (0 <= start < end <= ds.n_rows):
            raise ValueError(
                f"heavy interval [{start},{end}) outside {ds.well_id} "
                f"with {ds.n_rows} rows")
        bundles.append(_build_bundle(ds, start, end, "heavy", cfg.channels))
    return bundles
