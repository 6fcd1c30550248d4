"""Threshold-guided weak supervision.

Global and local four-class Multi-Otsu over a 256-bin histogram, tile-vote
aggregation, median regularization into pseudo-labels, and the per-pixel
confidence map mixing a global threshold-distance term with a local
vote-margin term.

The Multi-Otsu search is exhaustive over all ascending threshold triples:
segment masses and first moments come from integer prefix sums, so scores
for mathematically identical partitions are bitwise identical and the
documented lexicographic tie-break is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import coverage_origins

K_CLASSES = 4
HIST_BINS = 256
LOCAL_WINDOW = (128, 64)
LOCAL_OVERLAP = (32, 16)
CONF_FLOOR = 0.15      # lambda
CONF_GAMMA = 1.0
CONF_EPS = 1e-8


@dataclass
class ThresholdSet:
    thresholds: tuple[float, float, float]
    source: str = "raw"            # raw | denoised | local-tile
    degenerate: bool = False
    vmin: float = 0.0
    vmax: float = 0.0

    def __post_init__(self):
        t = self.thresholds
        if not (t[0] < t[1] < t[2]) or not np.all(np.isfinite(t)):
            raise ValueError(f"thresholds must be finite and ascending: {t}")


@dataclass
class PseudoSupervision:
    y_pseudo: np.ndarray         # (H, W) int, classes 0..3, median-regularized
    y_ae_otsu: np.ndarray        # (H, W) int, global thresholding of denoised
    vote_counts: np.ndarray      # (H, W, K) int32 local-tile votes
    confidence: np.ndarray       # (H, W) in [0, 1]
    conf_weights: np.ndarray     # (H, W) in [lambda, 1]
    thresholds_den: ThresholdSet
    conf_floor: float = CONF_FLOOR
    conf_gamma: float = CONF_GAMMA


def histogram_256(values: np.ndarray, bins: int = HIST_BINS):
    """Equal-width histogram over [min, max]; top edge closed like np.histogram."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    vmin = float(flat.min())
    vmax = float(flat.max())
    if vmax <= vmin:
        raise ValueError("constant input has no histogram range")
    idx = np.floor((flat - vmin) / (vmax - vmin) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    return counts, vmin, vmax


def _upper_pairs(bins: int):
    """All (t2, t3) with 2 <= t2 < t3 <= bins-1, t2-major ascending."""
    t2s, t3s = [], []
    for t2 in range(2, bins - 1):
        n = bins - 1 - t2
        t2s.append(np.full(n, t2, dtype=np.int64))
        t3s.append(np.arange(t2 + 1, bins, dtype=np.int64))
    t2 = np.concatenate(t2s)
    t3 = np.concatenate(t3s)
    # suffix offset per starting t2 value for fast slicing
    starts = np.zeros(bins + 1, dtype=np.int64)
    for v in range(2, bins - 1):
        starts[v + 1] = starts[v] + (bins - 1 - v)
    for v in range(bins - 1, bins + 1):
        starts[v] = t2.size
    return t2, t3, starts


def _seg_score(s: np.ndarray, w: np.ndarray) -> np.ndarray:
    """S^2/W with empty segments contributing zero."""
    out = np.zeros(np.broadcast(s, w).shape, dtype=np.float64)
    np.divide(s * s, w, out=out, where=w > 0)
    return out


def multi_otsu(values: np.ndarray, k: int = K_CLASSES, bins: int = HIST_BINS,
               source: str = "raw") -> ThresholdSet:
    """Four-class Multi-Otsu thresholds maximizing between-class variance.

    Exhaustive over all 1 <= t1 < t2 < t3 <= bins-1 bin-boundary triples;
    ties resolved to the lexicographically smallest triple. Constant input
    yields a degenerate set whose thresholds sit above the data so that
    quantization maps everything to class 0.
    """
    if k != 4:
        raise ValueError("only K=4 is supported")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    vmin = float(flat.min())
    vmax = float(flat.max())
    if vmax <= vmin:
        off = max(1.0, abs(vmax))
        return ThresholdSet((vmax + off, vmax + 2 * off, vmax + 3 * off),
                            source=source, degenerate=True, vmin=vmin, vmax=vmax)

    counts, vmin, vmax = histogram_256(flat, bins)
    p = np.concatenate([[0], np.cumsum(counts)])                    # masses
    q = np.concatenate([[0], np.cumsum(counts * np.arange(bins))])  # first moments

    t2s, t3s, starts = _upper_pairs(bins)
    w3 = p[t3s] - p[t2s]
    s3 = q[t3s] - q[t2s]
    w4 = p[bins] - p[t3s]
    s4 = q[bins] - q[t3s]
    f34 = _seg_score(s3, w3) + _seg_score(s4, w4)
    p2 = p[t2s]
    q2 = q[t2s]

    best = (-np.inf, None)
    for t1 in range(1, bins - 2):
        lo = starts[t1 + 1]
        w1 = p[t1]
        s1 = q[t1]
        f1 = (s1 * s1) / w1 if w1 > 0 else 0.0
        w2 = p2[lo:] - w1
        s2 = q2[lo:] - s1
        f = f1 + _seg_score(s2, w2) + f34[lo:]
        j = int(np.argmax(f))  # first occurrence = smallest (t2, t3)
        if f[j] > best[0]:
            best = (f[j], (t1, int(t2s[lo + j]), int(t3s[lo + j])))

    delta = (vmax - vmin) / bins
    taus = tuple(vmin + t * delta for t in best[1])
    return ThresholdSet(taus, source=source, degenerate=False,
                        vmin=vmin, vmax=vmax)


def quantize(field: np.ndarray, thresholds: ThresholdSet) -> np.ndarray:
    """Ordered class labels; a value equal to a threshold takes the upper class."""
    taus = np.asarray(thresholds.thresholds, dtype=np.float64)
    return np.searchsorted(taus, field, side="right").astype(np.int32)


def local_multi_otsu(field: np.ndarray, window: tuple = LOCAL_WINDOW,
                     overlap: tuple = LOCAL_OVERLAP) -> np.ndarray:
    """Per-tile Multi-Otsu votes accumulated into an (H, W, K) count field.

    Tiles step by window - overlap with the final tile clamped to the
    boundary. Intervals smaller than one window fall back to a single
    whole-image tile. A constant tile votes for class 0 only.
    """
    h, w = field.shape
    wh, ww = window
    if h < wh or w < ww:
        row_origins, col_origins = np.array([0]), np.array([0])
        wh, ww = h, w
    else:
        row_origins = coverage_origins(h, wh, wh - overlap[0])
        col_origins = coverage_origins(w, ww, ww - overlap[1])

    votes = np.zeros((h, w, K_CLASSES), dtype=np.int32)
    for r0 in row_origins:
        for c0 in col_origins:
            tile = field[r0:r0 + wh, c0:c0 + ww]
            ts = multi_otsu(tile, source="local-tile")
            labels = (np.zeros(tile.shape, dtype=np.int32) if ts.degenerate
                      else quantize(tile, ts))
            for cls in range(K_CLASSES):
                votes[r0:r0 + wh, c0:c0 + ww, cls] += labels == cls
    return votes


def pseudo_labels(vote_counts: np.ndarray) -> np.ndarray:
    """Argmax vote per pixel (ties to the lower class), 3x3 median smoothing."""
    if np.any(vote_counts.sum(axis=2) == 0):
        raise ValueError("every pixel needs at least one tile vote")
    winner = np.argmax(vote_counts, axis=2).astype(np.int32)
    return ndimage.median_filter(winner, size=3, mode="reflect")


def confidence_map(denoised_db: np.ndarray, thresholds: ThresholdSet,
                   vote_counts: np.ndarray, eps: float = CONF_EPS) -> np.ndarray:
    """C = clip(0.5 * C_global + 0.5 * C_local, 0, 1).

    C_global: distance to the nearest global threshold, scaled by a quarter
    of the field's standard deviation. C_local: winner-vs-runner-up vote
    margin. Degenerate global thresholds give C_global = 0.
    """
    if thresholds.degenerate:
        c_global = np.zeros_like(denoised_db)
    else:
        taus = np.asarray(thresholds.thresholds)
        dist = np.min(np.abs(denoised_db[..., None] - taus), axis=-1)
        scale = 0.25 * float(denoised_db.std()) + eps
        c_global = np.clip(dist / scale, 0.0, 1.0)
    top2 = np.partition(vote_counts, K_CLASSES - 2, axis=2)[:, :, -2:]
    v2 = top2[:, :, 0].astype(np.float64)
    v1 = top2[:, :, 1].astype(np.float64)
    c_local = (v1 - v2) / (v1 + eps)
    return np.clip(0.5 * c_global + 0.5 * c_local, 0.0, 1.0)


def confidence_weights(confidence: np.ndarray, floor: float = CONF_FLOOR,
                       gamma: float = CONF_GAMMA) -> np.ndarray:
    """Pixelwise loss weights W = floor + (1 - floor) * C^gamma."""
    return floor + (1.0 - floor) * np.power(confidence, gamma)


def build_pseudo_supervision(denoised_db: np.ndarray,
                             floor: float = CONF_FLOOR,
                             gamma: float = CONF_GAMMA) -> PseudoSupervision:
    """Full weak-supervision product for one denoised interval."""
    ts_den = multi_otsu(denoised_db, source="denoised")
    y_ae_otsu = quantize(denoised_db, ts_den)
    votes = local_multi_otsu(denoised_db)
    y_pseudo = pseudo_labels(votes)
    conf = confidence_map(denoised_db, ts_den, votes)
    weights = confidence_weights(conf, floor, gamma)
    return PseudoSupervision(y_pseudo=y_pseudo, y_ae_otsu=y_ae_otsu,
                             vote_counts=votes, confidence=conf,
                             conf_weights=weights, thresholds_den=ts_den,
                             conf_floor=floor, conf_gamma=gamma)
