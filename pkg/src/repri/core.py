"""Shared domain types, probability primitives, and hyperparameter defaults.

Conventions used across the whole package:

* arrays are row-major with layout ``(H, W, C)`` (channel-last),
* binary posteriors store background in channel 0 and foreground in
  channel 1,
* all loss and gradient arithmetic runs in float64 regardless of the
  float32 storage used by container files,
* probabilities are clamped to ``[EPS_CLAMP, 1 - EPS_CLAMP]`` inside
  logarithms and nowhere else (:func:`clamp_prob` is the single
  designated repair point; every other invariant violation raises).

All types below are immutable after construction: the wrapped numpy
arrays are marked read-only, so instances can be shared freely across
concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS_CLAMP = 1e-10
"""Default probability clamp applied inside every logarithm."""

SIMPLEX_ATOL = 1e-9
"""Tolerance for per-pixel "background + foreground = 1" checks."""

LOSS_CE = "ce"
LOSS_H = "h"
LOSS_KL = "kl"
ALL_LOSSES = frozenset((LOSS_CE, LOSS_H, LOSS_KL))

MODE_STANDARD = "standard"
MODE_ORACLE = "oracle"
MODE_PERTURBED = "perturbed"
MODES = (MODE_STANDARD, MODE_ORACLE, MODE_PERTURBED)


class RepriError(Exception):
    """Base class for every error raised by this package."""


class InvariantError(RepriError, ValueError):
    """A domain type was constructed with contents violating its invariants."""


class DimensionMismatchError(RepriError):
    """Channel dimensions of features and classifier parameters disagree."""


class ShapeMismatchError(RepriError):
    """Spatial shapes of two inputs disagree."""


class ZeroVectorError(RepriError):
    """A pixel feature vector or the prototype has zero norm."""


class EmptyForegroundError(RepriError):
    """No support pixel is labelled foreground."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def clamp_prob(p, eps: float = EPS_CLAMP):
    """Clamp a probability (scalar or array) to ``[eps, 1 - eps]``.

    This is the only place probabilities are silently repaired; it is
    meant for values about to enter a logarithm.
    """
    if np.isscalar(p):
        return float(min(max(p, eps), 1.0 - eps))
    return np.clip(p, eps, 1.0 - eps)


@dataclass(frozen=True)
class FeatureMap:
    """Dense ``(H, W, C)`` float embedding of one image at feature resolution."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InvariantError(f"feature map must have shape (H, W, C), got {v.shape}")
        if min(v.shape) < 1:
            raise InvariantError(f"feature map dimensions must all be >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvariantError("feature map contains NaN or Inf")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PixelMask:
    """Binary ``(H, W)`` mask at feature resolution; 1 means foreground."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvariantError(f"mask must have shape (H, W), got {v.shape}")
        if min(v.shape) < 1:
            raise InvariantError(f"mask dimensions must all be >= 1, got {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise InvariantError("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "values", _frozen(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def foreground_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel background/foreground posterior of shape ``(H, W, 2)``.

    Channel 0 is background, channel 1 foreground; each pixel row lies on
    the 2-simplex within ``SIMPLEX_ATOL``.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise InvariantError(f"probability map must have shape (H, W, 2), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise InvariantError(f"probability map dimensions must be >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvariantError("probability map contains NaN or Inf")
        if v.min() < 0.0 or v.max() > 1.0:
            raise InvariantError("probabilities must lie in [0, 1]")
        if np.abs(v.sum(axis=2) - 1.0).max() > SIMPLEX_ATOL:
            raise InvariantError("per-pixel background + foreground must sum to 1")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def foreground(self) -> np.ndarray:
        """The ``(H, W)`` foreground component."""
        return self.values[:, :, 1]


@dataclass(frozen=True)
class Proportion:
    """A background/foreground mass pair on the 2-simplex."""

    bg: float
    fg: float

    def __post_init__(self) -> None:
        bg, fg = float(self.bg), float(self.fg)
        if not (math.isfinite(bg) and math.isfinite(fg)):
            raise InvariantError("proportion components must be finite")
        if not (0.0 <= bg <= 1.0 and 0.0 <= fg <= 1.0):
            raise InvariantError(f"proportion components must lie in [0, 1], got ({bg}, {fg})")
        if abs(bg + fg - 1.0) > SIMPLEX_ATOL:
            raise InvariantError(f"proportion must sum to 1, got {bg + fg}")
        object.__setattr__(self, "bg", bg)
        object.__setattr__(self, "fg", fg)

    @classmethod
    def from_foreground(cls, fg: float) -> "Proportion":
        return cls(bg=1.0 - fg, fg=fg)

    def as_array(self) -> np.ndarray:
        return np.array([self.bg, self.fg], dtype=np.float64)


@dataclass(frozen=True)
class ClassifierParams:
    """Linear classifier state: foreground prototype ``w``, bias ``b``, temperature ``tau``."""

    w: np.ndarray
    b: float
    tau: float

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise InvariantError(f"prototype must be a 1-D vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or not math.isfinite(float(self.b)):
            raise InvariantError("classifier parameters must be finite")
        if float(np.linalg.norm(w)) == 0.0:
            raise InvariantError("zero prototype is rejected at construction")
        if not (float(self.tau) > 0.0):
            raise InvariantError(f"temperature must be positive, got {self.tau}")
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def channels(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class TaskInstance:
    """One few-shot episode: K labelled supports, one query, optional query truth."""

    supports: tuple
    query: FeatureMap
    query_gt: PixelMask | None = None

    def __post_init__(self) -> None:
        supports = tuple(self.supports)
        if len(supports) < 1:
            raise InvariantError("a task needs at least one support pair")
        h, w, c = self.query.height, self.query.width, self.query.channels
        fg_total = 0
        for feats, mask in supports:
            if (feats.height, feats.width, feats.channels) != (h, w, c):
                raise InvariantError(
                    "all feature maps must share the query's (H, W, C) "
                    f"({feats.values.shape} vs {(h, w, c)})"
                )
            if (mask.height, mask.width) != (h, w):
                raise InvariantError("support masks must share the feature maps' (H, W)")
            fg_total += mask.foreground_count()
        if self.query_gt is not None and (self.query_gt.height, self.query_gt.width) != (h, w):
            raise InvariantError("query ground truth must share the feature maps' (H, W)")
        if fg_total < 1:
            raise InvariantError("at least one support pixel must be foreground")
        object.__setattr__(self, "supports", supports)

    @property
    def shots(self) -> int:
        return len(self.supports)

    @property
    def pixel_count(self) -> int:
        return self.query.height * self.query.width


@dataclass(frozen=True)
class Hyperparams:
    """Inference settings; the defaults are the reference configuration.

    ``lambda_h_base`` and ``lambda_kl_base`` default to ``1 / K`` (resolved
    per task once the shot count is known).  From iteration ``t_pi`` on,
    the KL weight is raised by ``lambda_kl_increment``.
    """

    iterations: int = 50
    lr: float = 0.025
    t_pi: int = 10
    tau: float = 20.0
    lambda_h_base: float | None = None
    lambda_kl_base: float | None = None
    lambda_kl_increment: float = 1.0
    eps_clamp: float = EPS_CLAMP
    mode: str = MODE_STANDARD
    delta: float = 0.0
    loss_selector: frozenset = ALL_LOSSES

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise InvariantError("iterations must be >= 1")
        if not (self.lr > 0.0 and math.isfinite(self.lr)):
            raise InvariantError("lr must be positive and finite")
        if self.t_pi < 0:
            raise InvariantError("t_pi must be non-negative")
        if self.t_pi > self.iterations:
            raise InvariantError(f"t_pi ({self.t_pi}) must not exceed iterations ({self.iterations})")
        if not (self.tau > 0.0):
            raise InvariantError("tau must be positive")
        if not (0.0 < self.eps_clamp < 0.5):
            raise InvariantError("eps_clamp must lie in (0, 0.5)")
        for name in ("lambda_h_base", "lambda_kl_base"):
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0.0):
                raise InvariantError(f"{name} must be non-negative and finite")
        if not math.isfinite(self.lambda_kl_increment):
            raise InvariantError("lambda_kl_increment must be finite")
        if self.mode not in MODES:
            raise InvariantError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == MODE_PERTURBED and not math.isfinite(self.delta):
            raise InvariantError("delta must be finite in perturbed mode")
        selector = frozenset(self.loss_selector)
        if not selector <= ALL_LOSSES:
            raise InvariantError(f"loss selector must be a subset of {sorted(ALL_LOSSES)}")
        object.__setattr__(self, "loss_selector", selector)

    def lambda_h(self, shots: int) -> float:
        return self.lambda_h_base if self.lambda_h_base is not None else 1.0 / shots

    def lambda_kl(self, shots: int, t: int) -> float:
        """Effective KL weight at iteration ``t`` for a ``shots``-shot task."""
        base = self.lambda_kl_base if self.lambda_kl_base is not None else 1.0 / shots
        return base + self.lambda_kl_increment if t >= self.t_pi else base
