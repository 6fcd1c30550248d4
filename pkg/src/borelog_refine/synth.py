"""Synthetic well generator with known ground truth.

Three morphology regimes: laterally banded, vertically columnar, and a
localized anomaly on a faintly striped background. Log channels are built
to have an exact in-sample correlation with the row-mean class signal at
the configured coefficient (noise components are orthogonalized against
the signal before mixing), so a zero coefficient means exactly decorrelated
channels at the log sample grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .intervals import CHANNEL_ORDER
from .substrate import stream_seed

REGIMES = ("banded", "columnar", "localized-anomaly")

# plausible display offsets/scales per channel, cosmetic only
_CHANNEL_UNITS = {
    "CAL": (22.0, 3.0), "GR": (60.0, 35.0), "DEN": (2.45, 0.25),
    "NEU": (0.18, 0.09), "DTC": (75.0, 18.0), "PE": (4.2, 1.5),
    "RES90": (120.0, 80.0),
}


@dataclass
class SyntheticSpec:
    regime: str = "banded"
    height: int = 600
    width: int = 144
    n_channels: int = 7
    class_contrast: float = 6.0
    noise_level: float = 3.0
    log_corr: float = 0.8
    seed: int = 42
    well_id: str = "synthwell"
    base_amplitude: float = 20.0
    row_meters: float = 0.005     # image depth step
    log_step_rows: int = 4        # log sampling coarseness vs image rows

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected {REGIMES}")
        if not 0.0 <= abs(self.log_corr) <= 1.0:
            raise ValueError("log_corr must lie in [-1, 1]")
        if self.n_channels < 1 or self.n_channels > len(CHANNEL_ORDER):
            raise ValueError(f"n_channels must be 1..{len(CHANNEL_ORDER)}")


def _banded_truth(spec: SyntheticSpec, rng) -> np.ndarray:
    # thin cycling bands: every 128-row tile sees all four classes, so the
    # local-threshold votes stay globally aligned
    rows = []
    cls = int(rng.integers(0, 4))
    while sum(r.size for r in rows) < spec.height:
        thickness = int(rng.integers(16, 33))
        rows.append(np.full(thickness, cls))
        cls = (cls + 1) % 4
    col = np.concatenate(rows)[:spec.height]
    return np.broadcast_to(col[:, None], (spec.height, spec.width)).copy()


def _columnar_truth(spec: SyntheticSpec, rng) -> np.ndarray:
    cols = []
    cls = int(rng.integers(0, 4))
    while sum(c.size for c in cols) < spec.width:
        thickness = int(rng.integers(8, 17))
        cols.append(np.full(thickness, cls))
        cls = (cls + 1) % 4
    row = np.concatenate(cols)[:spec.width]
    return np.broadcast_to(row[None, :], (spec.height, spec.width)).copy()


def _anomaly_truth(spec: SyntheticSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    truth = np.zeros((h, w), dtype=np.int64)
    # faint vertical stripes of class 1
    stripe_period = max(8, w // 8)
    for c0 in range(0, w, stripe_period):
        truth[:, c0:c0 + 2] = 1
    # compact elliptical anomaly of class 3 with a class-2 halo
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    ry, rx = max(6, h // 10), max(4, w // 6)
    halo = ((yy - cy) / (1.4 * ry)) ** 2 + ((xx - cx) / (1.4 * rx)) ** 2 <= 1.0
    core = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    truth[halo] = 2
    truth[core] = 3
    return truth


def generate_truth(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(stream_seed(spec.seed, "truth")))
    builder = {"banded": _banded_truth, "columnar": _columnar_truth,
               "localized-anomaly": _anomaly_truth}[spec.regime]
    return builder(spec, rng)


def generate_image(spec: SyntheticSpec, truth: np.ndarray) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(stream_seed(spec.seed, "image")))
    clean = spec.base_amplitude + truth * spec.class_contrast
    return clean + rng.normal(0.0, spec.noise_level, size=truth.shape)


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / (sd if sd > 0 else 1.0)


def generate_logs(spec: SyntheticSpec, truth: np.ndarray):
    """Depth-profiles with exact in-sample correlation to the class signal.

    Returns (log_depths, (L, C) values, channel names).
    """
    h = spec.height
    depths = 2000.0 + spec.row_meters * np.arange(h)
    log_depths = depths[::spec.log_step_rows].copy()
    signal = _standardize(truth.mean(axis=1))[::spec.log_step_rows]
    signal = _standardize(signal)
    n = signal.size
    channels = CHANNEL_ORDER[:spec.n_channels]
    values = np.empty((n, len(channels)))
    rho = spec.log_corr
    for j, name in enumerate(channels):
        rng = np.random.Generator(np.random.PCG64(
            stream_seed(spec.seed, f"log-{name}")))
        noise = rng.standard_normal(n)
        noise = noise - (noise @ signal) / (signal @ signal) * signal
        noise = _standardize(noise)
        mixed = rho * signal + np.sqrt(max(0.0, 1.0 - rho * rho)) * noise
        offset, scale = _CHANNEL_UNITS[name]
        values[:, j] = offset + scale * mixed
    return log_depths, values, channels


def write_well(spec: SyntheticSpec, root) -> Path:
    """Write image.csv, depth.csv, logs.csv, ground_truth.csv for the spec."""
    spec.validate()
    well_dir = Path(root) / spec.well_id
    well_dir.mkdir(parents=True, exist_ok=True)
    truth = generate_truth(spec)
    image = generate_image(spec, truth)
    depths = 2000.0 + spec.row_meters * np.arange(spec.height)
    log_depths, log_values, channels = generate_logs(spec, truth)

    np.savetxt(well_dir / "image.csv", image, fmt="%.17g", delimiter=",")
    np.savetxt(well_dir / "depth.csv", depths, fmt="%.17g")
    header = "depth," + ",".join(channels)
    table = np.concatenate([log_depths[:, None], log_values], axis=1)
    np.savetxt(well_dir / "logs.csv", table, fmt="%.17g", delimiter=",",
               header=header, comments="")
    np.savetxt(well_dir / "ground_truth.csv", truth, fmt="%d", delimiter=",")
    return well_dir
