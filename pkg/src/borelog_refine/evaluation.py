"""Permutation-invariant agreement and structural diagnostics.

With four classes the optimal label matching is an exhaustive search over
all 24 permutations of the contingency matrix; ties resolve to the
lexicographically smallest permutation. Canonical display order ranks
classes by mean acoustic amplitude.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

K_CLASSES = 4
MIN_COMPONENT_PX = 10

_PERMUTATIONS = tuple(itertools.permutations(range(K_CLASSES)))
_CC_STRUCTURE = np.ones((3, 3), dtype=int)  # 8-connectivity


def contingency(y_a: np.ndarray, y_b: np.ndarray, k: int = K_CLASSES) -> np.ndarray:
    """M[i, j] = #pixels with class i in y_a and class j in y_b."""
    if y_a.shape != y_b.shape:
        raise ValueError(f"shape mismatch: {y_a.shape} vs {y_b.shape}")
    joint = y_a.reshape(-1).astype(np.int64) * k + y_b.reshape(-1)
    return np.bincount(joint, minlength=k * k).reshape(k, k)


def perm_agreement(y_a: np.ndarray, y_b: np.ndarray):
    """Optimal class matching over all 24 label permutations.

    Returns (acc, pi_star, M): pi_star maximizes sum_i M[i, pi(i)] — label i
    of y_a matched to label pi_star[i] of y_b — with ties broken by the
    lexicographically smallest permutation; acc is matched mass / pixels.
    """
    m = contingency(y_a, y_b)
    total = m.sum()
    best_score = -1
    best_perm = None
    for perm in _PERMUTATIONS:  # itertools yields lexicographic order
        score = sum(m[i, perm[i]] for i in range(K_CLASSES))
        if score > best_score:
            best_score = score
            best_perm = perm
    return best_score / total, best_perm, m


def align_to_reference(y: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Relabel y with the optimal permutation against the reference map."""
    _, perm, _ = perm_agreement(reference, y)
    lut = np.empty(K_CLASSES, dtype=y.dtype)
    for ref_label, y_label in enumerate(perm):
        lut[y_label] = ref_label
    return lut[y]


def aligned_confusion(reference: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Contingency of (reference, y) after aligning y onto the reference."""
    return contingency(reference, align_to_reference(y, reference))


def confusion_masses(m: np.ndarray) -> tuple[float, float]:
    """(DiagMass, OffDiagMass) of an aligned confusion matrix."""
    total = m.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.trace(m) / total
    return float(diag), float(1.0 - diag)


def canonical_reorder(seg: np.ndarray, amplitude: np.ndarray) -> np.ndarray:
    """Relabel classes in ascending mean amplitude; empty classes sort last.

    Threshold-derived maps are already amplitude-ordered and need no call.
    """
    means = np.full(K_CLASSES, np.inf)
    empty = np.ones(K_CLASSES, dtype=bool)
    for k in range(K_CLASSES):
        mask = seg == k
        if mask.any():
            means[k] = amplitude[mask].mean()
            empty[k] = False
    # stable sort: non-empty ascending mean, then empties in original order
    order = np.lexsort((np.arange(K_CLASSES), means, empty))
    lut = np.empty(K_CLASSES, dtype=seg.dtype)
    lut[order] = np.arange(K_CLASSES)
    return lut[seg]


def changed_fraction(y_m: np.ndarray, y_concat: np.ndarray,
                     confidence: np.ndarray):
    """(ChangedFrac, LowConfChangeFrac) with both maps pre-aligned to pseudo.

    LowConfChangeFrac uses the first quartile of the confidence map
    (linear-interpolation percentile) and is None when nothing changed.
    """
    changed = y_m != y_concat
    changed_frac = float(changed.mean())
    if not changed.any():
        return changed_frac, None
    tau_low = np.percentile(confidence, 25.0)
    low = confidence < tau_low
    return changed_frac, float((changed & low).sum() / changed.sum())


def boundary_length(y: np.ndarray) -> int:
    """Count of 4-neighbor label transitions (horizontal + vertical)."""
    horiz = int(np.sum(y[:, 1:] != y[:, :-1]))
    vert = int(np.sum(y[1:, :] != y[:-1, :]))
    return horiz + vert


def total_components(y: np.ndarray, min_size: int = MIN_COMPONENT_PX) -> int:
    """8-connected components over all classes, discarding small ones."""
    total = 0
    for k in np.unique(y):
        labeled, n = ndimage.label(y == k, structure=_CC_STRUCTURE)
        if n == 0:
            continue
        sizes = np.bincount(labeled.reshape(-1))[1:]
        total += int(np.sum(sizes >= min_size))
    return total


def class_fractions(y: np.ndarray, k: int = K_CLASSES) -> np.ndarray:
    return np.bincount(y.reshape(-1), minlength=k) / y.size


# ---------------------------------------------------------------------------
# per-interval records and cross-well aggregation


@dataclass
class IntervalRecord:
    well_id: str
    interval_key: str
    kind: str
    method: str
    acc_vs_pseudo: float
    acc_vs_ae_otsu: float
    acc_vs_raw_otsu: float
    diag_mass: float
    off_diag_mass: float
    boundary_len: int
    n_components: int
    class_fracs: tuple
    changed_frac: float | None = None
    low_conf_change_frac: float | None = None
    confusion: np.ndarray | None = None


def evaluate_interval(method: str, seg: np.ndarray, references: dict,
                      confidence: np.ndarray, well_id: str, interval_key: str,
                      kind: str, concat_seg: np.ndarray | None = None) -> IntervalRecord:
    """All diagnostics for one method's segmentation of one interval.

    references: {"pseudo": ..., "ae_otsu": ..., "raw_otsu": ...}.
    Structural comparison against the concat baseline is filled in when a
    concat map is supplied and the method is not concat itself.
    """
    pseudo = references["pseudo"]
    acc_p, _, _ = perm_agreement(pseudo, seg)
    acc_a, _, _ = perm_agreement(references["ae_otsu"], seg)
    acc_r, _, _ = perm_agreement(references["raw_otsu"], seg)
    m_aligned = aligned_confusion(pseudo, seg)
    diag, off = confusion_masses(m_aligned)
    changed = low_conf = None
    if concat_seg is not None and method != "concat":
        aligned_m = align_to_reference(seg, pseudo)
        aligned_c = align_to_reference(concat_seg, pseudo)
        changed, low_conf = changed_fraction(aligned_m, aligned_c, confidence)
    return IntervalRecord(
        well_id=well_id, interval_key=interval_key, kind=kind, method=method,
        acc_vs_pseudo=acc_p, acc_vs_ae_otsu=acc_a, acc_vs_raw_otsu=acc_r,
        diag_mass=diag, off_diag_mass=off,
        boundary_len=boundary_length(seg), n_components=total_components(seg),
        class_fracs=tuple(class_fractions(seg)),
        changed_frac=changed, low_conf_change_frac=low_conf,
        confusion=m_aligned)


@dataclass
class WellSummary:
    method: str
    mean: float
    std: float
    min: float
    max: float
    range: float
    well_means: dict = field(default_factory=dict)


def aggregate_wells(records: list[IntervalRecord]) -> list[WellSummary]:
    """Per method: well means of acc_vs_pseudo, then stats over wells."""
    methods = sorted({r.method for r in records})
    out = []
    for method in methods:
        per_well: dict[str, list[float]] = {}
        for r in records:
            if r.method == method:
                per_well.setdefault(r.well_id, []).append(r.acc_vs_pseudo)
        well_means = {w: float(np.mean(v)) for w, v in sorted(per_well.items())}
        vals = np.array(list(well_means.values()))
        out.append(WellSummary(
            method=method, mean=float(vals.mean()), std=float(vals.std()),
            min=float(vals.min()), max=float(vals.max()),
            range=float(vals.max() - vals.min()), well_means=well_means))
    return out


def pairwise_wins(records: list[IntervalRecord], method_a: str,
                  method_b: str) -> tuple[int, int, int]:
    """Interval-level (wins_a, wins_b, ties) on acc_vs_pseudo; ties count neither."""
    scores: dict[str, dict[str, float]] = {}
    for r in records:
        scores.setdefault(r.interval_key, {})[r.method] = r.acc_vs_pseudo
    wins_a = wins_b = ties = 0
    for per_method in scores.values():
        if method_a in per_method and method_b in per_method:
            a, b = per_method[method_a], per_method[method_b]
            if a > b:
                wins_a += 1
            elif b > a:
                wins_b += 1
            else:
                ties += 1
    return wins_a, wins_b, ties
