"""Per-task transductive optimisation of the linear classifier.

Plain full-batch gradient descent (fixed learning rate, no momentum)
over the weighted objective.  The reference proportion ``pi`` follows a
two-plateau schedule in standard mode: it holds the initial predicted
marginal up to and including iteration ``t_pi``, then the marginal
snapshotted at iteration ``t_pi``.  Oracle and perturbed-oracle modes
pin ``pi`` for every iteration instead.  The KL weight is raised by
``lambda_kl_increment`` from iteration ``t_pi`` on (the boundary
iteration already uses the raised weight).

Everything here is deterministic: identical task contents and settings
produce bit-identical results.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import classifier
from .core import (
    EPS_CLAMP,
    MODE_ORACLE,
    MODE_PERTURBED,
    MODE_STANDARD,
    ClassifierParams,
    Hyperparams,
    PixelMask,
    ProbMap,
    Proportion,
    RepriError,
    TaskInstance,
    ZeroVectorError,
    clamp_prob,
)
from .losses import LossBreakdown, LossWeights, TaskTensors, evaluate_task, query_scores

COLLAPSE_NORM = 1e-12


class MissingGroundTruthError(RepriError):
    """Oracle-style inference was requested on a task without query truth."""


class InvalidDeltaError(RepriError):
    """A perturbation factor of -1 or below would empty the foreground."""


@dataclass(frozen=True)
class InferenceResult:
    """Everything one optimisation run produces.

    ``loss_trajectory``, ``pi_history`` and ``delta_history`` have one
    entry per optimisation state ``t = 0 .. iterations`` (the t = 0 entry
    describes initialisation).  ``delta_history`` is present iff the task
    carries query ground truth with a non-empty foreground.
    """

    final_probs: ProbMap
    final_mask: PixelMask
    loss_trajectory: tuple
    pi_history: tuple
    delta_history: tuple | None
    params_final: ClassifierParams
    wall_time: float


def oracle_pi(query_gt: PixelMask) -> Proportion:
    """True background/foreground proportion of a ground-truth mask."""
    fg = query_gt.foreground_count() / (query_gt.height * query_gt.width)
    return Proportion.from_foreground(fg)


def perturbed_pi(pi_star: Proportion, delta: float, eps: float = EPS_CLAMP) -> Proportion:
    """Oracle proportion with a relative error ``delta`` forced onto the
    foreground component (clamped to the open simplex)."""
    if delta <= -1.0:
        raise InvalidDeltaError(f"delta must be > -1, got {delta}")
    return Proportion.from_foreground(clamp_prob(pi_star.fg * (1.0 + delta), eps))


def pi_at(t: int, t_pi: int, marginal_at_0: Proportion, marginal_at_tpi: Proportion) -> Proportion:
    """Two-plateau schedule: the initial marginal through iteration ``t_pi``
    inclusive, the snapshotted one afterwards."""
    return marginal_at_0 if t <= t_pi else marginal_at_tpi


def repri_infer(task: TaskInstance, hp: Hyperparams = Hyperparams()) -> InferenceResult:
    """Run the full optimisation loop on one task."""
    start = time.perf_counter()
    pi_star = oracle_pi(task.query_gt) if task.query_gt is not None else None
    if hp.mode in (MODE_ORACLE, MODE_PERTURBED) and pi_star is None:
        raise MissingGroundTruthError(f"mode {hp.mode!r} requires query ground truth")
    fixed_pi = None
    if hp.mode == MODE_ORACLE:
        fixed_pi = pi_star
    elif hp.mode == MODE_PERTURBED:
        fixed_pi = perturbed_pi(pi_star, hp.delta, hp.eps_clamp)

    tensors = TaskTensors(task)
    params = classifier.init_params(task, hp.tau)
    w = params.w.copy()
    b = params.b
    k = task.shots
    lam_h = hp.lambda_h(k)

    track_delta = pi_star is not None and pi_star.fg > 0.0
    loss_trajectory = []
    pi_history = []
    delta_history = [] if track_delta else None
    marginal_0 = None
    marginal_tpi = None
    s_q = None

    for t in range(hp.iterations + 1):
        params_t = ClassifierParams(w=w, b=b, tau=hp.tau)
        s_q = query_scores(tensors, params_t)
        phat = Proportion.from_foreground(float(s_q.mean()))
        if t == 0:
            marginal_0 = phat
        if hp.mode == MODE_STANDARD and t == hp.t_pi:
            marginal_tpi = phat

        if fixed_pi is not None:
            pi_t = fixed_pi
        else:
            pi_t = pi_at(t, hp.t_pi, marginal_0, marginal_tpi if marginal_tpi is not None else marginal_0)
        weights_t = LossWeights(lambda_h=lam_h, lambda_kl=hp.lambda_kl(k, t))

        if t < hp.iterations:
            breakdown, gw, gb = evaluate_task(
                tensors, params_t, pi_t, weights_t, hp.loss_selector, hp.eps_clamp,
                with_gradients=True,
            )
        else:
            breakdown = evaluate_task(
                tensors, params_t, pi_t, weights_t, hp.loss_selector, hp.eps_clamp
            )
        loss_trajectory.append(breakdown)
        pi_history.append(pi_t)
        if track_delta:
            delta_history.append(phat.fg / pi_star.fg - 1.0)
        if t == hp.iterations:
            params = params_t
            break

        w = w - hp.lr * gw
        b = b - hp.lr * gb
        if float(np.linalg.norm(w)) < COLLAPSE_NORM:
            raise ZeroVectorError(
                f"prototype norm collapsed below {COLLAPSE_NORM} at iteration {t + 1}; "
                "the learning rate is likely too large for this task"
            )

    fg = s_q.reshape(task.query.height, task.query.width)
    final_probs = ProbMap(np.stack([1.0 - fg, fg], axis=2))
    return InferenceResult(
        final_probs=final_probs,
        final_mask=classifier.hard_mask(final_probs),
        loss_trajectory=tuple(loss_trajectory),
        pi_history=tuple(pi_history),
        delta_history=tuple(delta_history) if delta_history is not None else None,
        params_final=params,
        wall_time=time.perf_counter() - start,
    )
