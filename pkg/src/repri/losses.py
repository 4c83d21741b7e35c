"""The three terms of the transductive objective and their gradients.

Terms (natural logarithms throughout):

* ``ce``      - cross-entropy of support predictions against support masks,
                normalised by ``K * H * W``,
* ``entropy`` - mean binary Shannon entropy of the query predictions,
* ``kl``      - divergence of the query's predicted label marginal from a
                reference proportion ``pi`` (``pi`` is a constant under
                differentiation; the marginal itself carries gradient).

Probabilities are clamped to ``[eps, 1 - eps]`` inside every logarithm,
and the analytic gradients differentiate exactly that clamped
expression, so they agree with central finite differences of the
computed loss even in saturated regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .core import (
    ALL_LOSSES,
    EPS_CLAMP,
    LOSS_CE,
    LOSS_H,
    LOSS_KL,
    ClassifierParams,
    DimensionMismatchError,
    InvariantError,
    ProbMap,
    Proportion,
    ShapeMismatchError,
    TaskInstance,
    ZeroVectorError,
    clamp_prob,
)

DEFAULT_FD_STEP = 1e-4


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the entropy and KL terms."""

    lambda_h: float
    lambda_kl: float

    def __post_init__(self) -> None:
        for name in ("lambda_h", "lambda_kl"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0.0):
                raise InvariantError(f"{name} must be non-negative and finite, got {v}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class LossBreakdown:
    """Individual term values plus the composed total.

    ``ce``, ``entropy`` and ``kl`` always hold the computed term values,
    even for terms excluded from ``total`` by the loss selector.
    ``lambda_h`` / ``lambda_kl`` are the effective weights the total was
    composed with (zero for deselected terms), so whenever the CE term
    is selected, ``total == ce + lambda_h * entropy + lambda_kl * kl``.
    """

    ce: float
    entropy: float
    kl: float
    total: float
    lambda_h: float
    lambda_kl: float


def support_ce(support_probs, support_masks, eps: float = EPS_CLAMP) -> float:
    """Cross-entropy of support predictions against the binary masks.

    Double sum over shots and pixels of ``-y^T log(p)``, divided by
    ``K * H * W``.
    """
    if len(support_probs) != len(support_masks) or len(support_probs) < 1:
        raise ShapeMismatchError("need equally many (>= 1) probability maps and masks")
    total = 0.0
    pixels = None
    for probs, mask in zip(support_probs, support_masks):
        if (probs.height, probs.width) != (mask.height, mask.width):
            raise ShapeMismatchError(
                f"probability map {probs.values.shape[:2]} vs mask {mask.values.shape}"
            )
        if pixels is None:
            pixels = probs.height * probs.width
        elif probs.height * probs.width != pixels:
            raise ShapeMismatchError("all supports must share one resolution")
        y = mask.values.astype(np.float64)
        log_fg = np.log(clamp_prob(probs.values[:, :, 1], eps))
        log_bg = np.log(clamp_prob(probs.values[:, :, 0], eps))
        total += -float((y * log_fg + (1.0 - y) * log_bg).sum())
    return total / (len(support_probs) * pixels)


def query_entropy(query_probs: ProbMap, eps: float = EPS_CLAMP) -> float:
    """Mean binary Shannon entropy of a posterior map."""
    p = query_probs.values
    h = -(p * np.log(clamp_prob(p, eps))).sum(axis=2)
    return float(h.mean())


def marginal(query_probs: ProbMap) -> Proportion:
    """Predicted label marginal: per-component mean over all pixels."""
    mean = query_probs.values.mean(axis=(0, 1))
    return Proportion(bg=float(mean[0]), fg=float(mean[1]))


def kl_to_prior(p_hat: Proportion, pi: Proportion, eps: float = EPS_CLAMP) -> float:
    """Divergence of the predicted marginal from the reference proportion."""
    total = 0.0
    for p, q in ((p_hat.bg, pi.bg), (p_hat.fg, pi.fg)):
        total += p * (math.log(clamp_prob(p, eps)) - math.log(clamp_prob(q, eps)))
    return total


class TaskTensors:
    """Flattened per-task arrays reused across optimisation iterations."""

    def __init__(self, task: TaskInstance):
        self.shots = task.shots
        self.pixels = task.pixel_count
        self.channels = task.query.channels
        self.height = task.query.height
        self.width = task.query.width
        # supports stacked to (K * N, C); labels to (K * N,)
        zs = np.concatenate([f.values.reshape(-1, self.channels) for f, _ in task.supports])
        self.support_z = zs
        self.support_y = np.concatenate(
            [m.values.reshape(-1).astype(np.float64) for _, m in task.supports]
        )
        self.query_z = task.query.values.reshape(-1, self.channels)
        self.support_norm = _norms(self.support_z)
        self.query_norm = _norms(self.query_z)


def _norms(z: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(z, axis=1)
    if n.min() == 0.0:
        raise ZeroVectorError("a pixel feature vector has zero norm")
    return n


class _Scores:
    """Per-pixel classifier outputs of one image under fixed parameters.

    ``s`` and its complement ``sm`` are both evaluated directly from the
    logit (``sm = sigmoid(-u)``), and the clamped logs are taken in log
    space, so deeply saturated pixels keep full float64 accuracy; the
    naive ``log(1 - s)`` would lose ~8 digits to cancellation and drown
    the finite-difference oracle in round-off.
    """

    def __init__(self, z, znorm, params, eps):
        nw = float(np.linalg.norm(params.w))
        self.cos = np.clip(z.dot(params.w) / (znorm * nw), -1.0, 1.0)
        u = params.tau * (self.cos - params.b)
        self.s = expit(u)
        self.sm = expit(-u)
        lo, hi = math.log(eps), math.log1p(-eps)
        self.log_s = np.clip(log_expit(u), lo, hi)
        self.log_sm = np.clip(log_expit(-u), lo, hi)
        # 1 where the clamp is inactive (the log is differentiable in s)
        self.inside = np.asarray((self.s > eps) & (self.sm > eps), dtype=np.float64)


def query_scores(tensors: TaskTensors, params: ClassifierParams) -> np.ndarray:
    """Flat per-pixel foreground scores of the query under ``params``."""
    sc = _Scores(tensors.query_z, tensors.query_norm, params, EPS_CLAMP)
    return sc.s


def _inside(x, eps):
    """1 where the clamp is inactive (the log is differentiable in x)."""
    return np.asarray((x > eps) & (x < 1.0 - eps), dtype=np.float64)


def evaluate_task(
    tensors: TaskTensors,
    params: ClassifierParams,
    pi: Proportion,
    weights: LossWeights,
    selector=ALL_LOSSES,
    eps: float = EPS_CLAMP,
    with_gradients: bool = False,
):
    """Loss breakdown and, optionally, the analytic gradient at ``params``.

    Returns ``breakdown`` or ``(breakdown, grad_w, grad_b)``.
    """
    if tensors.channels != params.channels:
        raise DimensionMismatchError(
            f"feature channels ({tensors.channels}) != prototype size ({params.channels})"
        )
    k, n = tensors.shots, tensors.pixels
    sup = _Scores(tensors.support_z, tensors.support_norm, params, eps)
    qry = _Scores(tensors.query_z, tensors.query_norm, params, eps)
    y = tensors.support_y

    ce = -float((y * sup.log_s + (1.0 - y) * sup.log_sm).sum()) / (k * n)
    entropy = -float((qry.s * qry.log_s + qry.sm * qry.log_sm).sum()) / n
    p_fg = float(qry.s.mean())
    p_bg = 1.0 - p_fg
    kl = p_fg * (math.log(clamp_prob(p_fg, eps)) - math.log(clamp_prob(pi.fg, eps))) + p_bg * (
        math.log(clamp_prob(p_bg, eps)) - math.log(clamp_prob(pi.bg, eps))
    )

    lam_h = weights.lambda_h if LOSS_H in selector else 0.0
    lam_kl = weights.lambda_kl if LOSS_KL in selector else 0.0
    ce_coeff = 1.0 if LOSS_CE in selector else 0.0
    total = ce_coeff * ce + lam_h * entropy + lam_kl * kl
    breakdown = LossBreakdown(
        ce=ce, entropy=entropy, kl=kl, total=total, lambda_h=lam_h, lambda_kl=lam_kl
    )
    if not with_gradients:
        return breakdown

    # dL/ds per pixel; each clamp contributes a zero derivative where active.
    dce_ds = -sup.inside * (
        y / clamp_prob(sup.s, eps) - (1.0 - y) / clamp_prob(sup.sm, eps)
    ) / (k * n)

    dh_ds = -(
        qry.log_s
        - qry.log_sm
        + qry.inside * (qry.s / clamp_prob(qry.s, eps) - qry.sm / clamp_prob(qry.sm, eps))
    ) / n

    dkl_dpfg = (
        math.log(clamp_prob(p_fg, eps))
        - math.log(clamp_prob(pi.fg, eps))
        + p_fg * _inside(p_fg, eps) / clamp_prob(p_fg, eps)
        - (math.log(clamp_prob(p_bg, eps)) - math.log(clamp_prob(pi.bg, eps)))
        - p_bg * _inside(p_bg, eps) / clamp_prob(p_bg, eps)
    )
    dkl_ds = np.full(n, dkl_dpfg / n)

    dl_ds_support = ce_coeff * dce_ds
    dl_ds_query = lam_h * dh_ds + lam_kl * dkl_ds

    nw = float(np.linalg.norm(params.w))
    gw = np.zeros(tensors.channels)
    gb = 0.0
    for z, znorm, sc, dl_ds in (
        (tensors.support_z, tensors.support_norm, sup, dl_ds_support),
        (tensors.query_z, tensors.query_norm, qry, dl_ds_query),
    ):
        alpha = dl_ds * sc.s * sc.sm
        gw += params.tau * (z.T.dot(alpha / znorm) / nw - float(alpha.dot(sc.cos)) / nw**2 * params.w)
        gb += -params.tau * float(alpha.sum())
    return breakdown, gw, gb


def total_loss(
    task: TaskInstance,
    params: ClassifierParams,
    pi: Proportion,
    weights: LossWeights,
    selector=ALL_LOSSES,
    eps: float = EPS_CLAMP,
) -> LossBreakdown:
    """Compose the weighted objective on a task (terms excluded by the
    selector still appear in the breakdown but contribute zero to the total)."""
    return evaluate_task(TaskTensors(task), params, pi, weights, selector, eps)


def loss_gradients(
    task: TaskInstance,
    params: ClassifierParams,
    pi: Proportion,
    weights: LossWeights,
    selector=ALL_LOSSES,
    eps: float = EPS_CLAMP,
):
    """Analytic gradient of :func:`total_loss` with respect to ``(w, b)``."""
    _, gw, gb = evaluate_task(
        TaskTensors(task), params, pi, weights, selector, eps, with_gradients=True
    )
    return gw, gb


def central_difference_gradients(fn, w: np.ndarray, b: float, h: float = DEFAULT_FD_STEP):
    """Central differences of a scalar ``fn(w, b)`` in every coordinate.

    ``[f(x + h e_i) - f(x - h e_i)] / 2h``, evaluated in float64; exact on
    quadratics up to round-off.
    """
    w = np.asarray(w, dtype=np.float64)
    gw = np.zeros_like(w)
    for i in range(w.shape[0]):
        step = np.zeros_like(w)
        step[i] = h
        gw[i] = (fn(w + step, b) - fn(w - step, b)) / (2.0 * h)
    gb = (fn(w, b + h) - fn(w, b - h)) / (2.0 * h)
    return gw, gb


def finite_diff_gradients(
    task: TaskInstance,
    params: ClassifierParams,
    pi: Proportion,
    weights: LossWeights,
    selector=ALL_LOSSES,
    h: float = DEFAULT_FD_STEP,
    eps: float = EPS_CLAMP,
):
    """Finite-difference oracle for :func:`loss_gradients`.

    Independent of the analytic path: only re-evaluates the loss value at
    perturbed parameters.
    """
    tensors = TaskTensors(task)

    def value(w, b):
        probe = ClassifierParams(w=w, b=b, tau=params.tau)
        return evaluate_task(tensors, probe, pi, weights, selector, eps).total

    return central_difference_gradients(value, params.w, params.b, h)
