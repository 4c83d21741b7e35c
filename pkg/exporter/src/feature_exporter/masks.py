"""Binary mask downsampling: exact area average, ties to foreground.

Must stay behaviourally identical to the inference engine's rule; the
shared fixture cases in ``fixtures/downsample`` pin the behaviour.
"""

from __future__ import annotations

import numpy as np


def _overlaps(n_target: int, n_source: int) -> np.ndarray:
    """Integer window/cell overlaps, all coordinates scaled by n_target."""
    out = np.zeros((n_target, n_source), dtype=np.int64)
    for i in range(n_target):
        lo, hi = i * n_source, (i + 1) * n_source
        first = lo // n_target
        last = min(n_source, -(-hi // n_target))
        for r in range(first, last):
            out[i, r] = max(0, min(hi, (r + 1) * n_target) - max(lo, r * n_target))
    return out


def downsample_mask(full: np.ndarray, target) -> np.ndarray:
    """Average-pool a {0,1} mask over fractional windows, threshold at 0.5.

    The pooled value is compared in integer arithmetic
    (``2 * weighted >= H0 * W0``), so exact ties always count as
    foreground regardless of the resolution ratio.
    """
    full = np.asarray(full)
    if full.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {full.shape}")
    th, tw = target
    h0, w0 = full.shape
    if not (1 <= th <= h0 and 1 <= tw <= w0):
        raise ValueError(f"target {target} out of range for source {full.shape}")
    weighted = _overlaps(th, h0) @ full.astype(np.int64) @ _overlaps(tw, w0).T
    return (2 * weighted >= h0 * w0).astype(np.uint8)
