"""Cosine-similarity linear classifier over pixel features.

The foreground score of pixel ``j`` is
``sigmoid(tau * (cos(z_j, w) - b))``; the background score is its
complement.  Also provides the reference initialisation: the prototype
is the mean of the foreground support features, the bias the mean
foreground soft prediction on the query under a zero-bias bootstrap.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .core import (
    ClassifierParams,
    DimensionMismatchError,
    EmptyForegroundError,
    FeatureMap,
    PixelMask,
    ProbMap,
    ZeroVectorError,
)


def cosine(z: np.ndarray, w: np.ndarray) -> float:
    """Cosine similarity of two vectors, clipped to [-1, 1] against rounding."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nz = float(np.linalg.norm(z))
    nw = float(np.linalg.norm(w))
    if nz == 0.0 or nw == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(z, w) / (nz * nw), -1.0, 1.0))


def cosine_map(features: FeatureMap, w: np.ndarray) -> np.ndarray:
    """Per-pixel cosine between every feature vector and ``w``, shape (H, W)."""
    w = np.asarray(w, dtype=np.float64)
    if features.channels != w.shape[0]:
        raise DimensionMismatchError(
            f"feature channels ({features.channels}) != prototype size ({w.shape[0]})"
        )
    nw = float(np.linalg.norm(w))
    if nw == 0.0:
        raise ZeroVectorError("prototype has zero norm")
    z = features.values
    norms = np.linalg.norm(z, axis=2)
    if norms.min() == 0.0:
        raise ZeroVectorError("a pixel feature vector has zero norm")
    return np.clip(z.dot(w) / (norms * nw), -1.0, 1.0)


def forward(features: FeatureMap, params: ClassifierParams) -> ProbMap:
    """Soft background/foreground prediction for every pixel."""
    cos = cosine_map(features, params.w)
    fg = expit(params.tau * (cos - params.b))
    return ProbMap(np.stack([1.0 - fg, fg], axis=2))


def init_prototype(supports) -> np.ndarray:
    """Mean of the foreground feature vectors pooled over all supports.

    The normaliser is the foreground pixel count, so the prototype norm
    stays commensurate with feature norms regardless of mask sparsity.
    """
    total = None
    count = 0
    for feats, mask in supports:
        m = mask.values.astype(np.float64)
        contrib = np.einsum("hw,hwc->c", m, feats.values)
        total = contrib if total is None else total + contrib
        count += mask.foreground_count()
    if count == 0:
        raise EmptyForegroundError("no support pixel is foreground")
    return total / count


def init_bias(query: FeatureMap, w0: np.ndarray, tau: float) -> float:
    """Mean foreground soft prediction on the query, bootstrapped with b = 0."""
    probs = forward(query, ClassifierParams(w=w0, b=0.0, tau=tau))
    return float(probs.foreground.mean())


def init_params(task, tau: float) -> ClassifierParams:
    """Reference initialisation for one task."""
    w0 = init_prototype(task.supports)
    b0 = init_bias(task.query, w0, tau)
    return ClassifierParams(w=w0, b=b0, tau=tau)


def hard_mask(probs: ProbMap) -> PixelMask:
    """Binarise a posterior: foreground iff its probability exceeds 0.5.

    Exact ties resolve to background.
    """
    return PixelMask((probs.foreground > 0.5).astype(np.uint8))
