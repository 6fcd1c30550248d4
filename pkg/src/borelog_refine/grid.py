"""Deterministic 1-D coverage enumeration shared by patches and tiles."""

from __future__ import annotations

import numpy as np


def coverage_origins(extent: int, window: int, step: int) -> np.ndarray:
    """Origins 0, step, 2*step, ... plus a final origin clamped to extent-window.

    Every position in [0, extent) is covered by at least one window and all
    windows lie fully inside the extent. Requires window <= extent.
    """
    if window > extent:
        raise ValueError(f"window {window} exceeds extent {extent}")
    last = extent - window
    origins = list(range(0, last + 1, step))
    if origins[-1] != last:
        origins.append(last)
    return np.asarray(origins, dtype=np.int64)
