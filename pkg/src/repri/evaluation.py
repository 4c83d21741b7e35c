"""Metrics and benchmark orchestration.

Class-wise IoU is aggregated sum-then-divide: intersections and unions
are summed over every task of a class before the single division, and
the mean IoU averages those per-class ratios.  Only the episode's
foreground class is scored.

Benchmarks derive one sub-seed per (seed, run, task index), so serial
and parallel execution produce identical reports; wall-clock throughput
is measured but kept out of the canonical report bytes.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    ALL_LOSSES,
    ClassifierParams,
    FeatureMap,
    Hyperparams,
    LOSS_CE,
    LOSS_H,
    LOSS_KL,
    MODE_PERTURBED,
    PixelMask,
    Proportion,
    RepriError,
    ShapeMismatchError,
    TaskInstance,
)
from .engine import repri_infer
from .losses import LossWeights, finite_diff_gradients, loss_gradients
from .taskio import (
    DatasetIndex,
    SynthConfig,
    derive_seed,
    read_task_container,
    rng_from,
    sample_episodes,
    synth_episode,
)

ABLATION_SELECTORS = (
    ("ce", frozenset({LOSS_CE})),
    ("ce+h", frozenset({LOSS_CE, LOSS_H})),
    ("ce+h+kl", frozenset({LOSS_CE, LOSS_H, LOSS_KL})),
)

FAILURE_CEILING = 0.01


def mismatch_suite_config(k: int = 1) -> SynthConfig:
    """The frozen synthetic suite for directional studies.

    Antipodal background, class-correlated distractor clutter, jittered
    supports, and a rotated/enlarged query foreground: initial
    predictions overestimate the foreground (mean relative size error
    around +0.3), support-only fitting over-thresholds the query, and
    proportion regularisation recovers it, so loss ablations, oracle
    gains, and shot scaling all resolve cleanly at a few hundred tasks.
    """
    return SynthConfig(
        height=16,
        width=16,
        channels=16,
        fg_mean_scale=2.0,
        noise_sigma=0.12,
        fg_proportion_range=(0.1, 0.35),
        support_query_shift=0.3,
        k=k,
        distractor_rate=0.2,
        distractor_angle=0.4,
        support_jitter=0.3,
    )


class EmptyClassError(RepriError):
    """A scored class accumulated zero union (degenerate episode sample)."""


class DegenerateTruthError(RepriError):
    """Relative size error is undefined for an empty true foreground."""


class MissingQueryTruthError(RepriError):
    """A benchmark task arrived without query ground truth."""


class TooManyFailuresError(RepriError):
    """More than the tolerated share of benchmark tasks failed."""


class IoUAccumulator:
    """Per-class running sums of intersections and unions (a commutative
    monoid: ``add`` and ``merge`` in any order give the same totals)."""

    def __init__(self) -> None:
        self.per_class: dict = {}

    def add(self, class_id: int, intersection: int, union: int) -> None:
        if intersection < 0 or union < 0 or intersection > union:
            raise RepriError(f"invalid counts ({intersection}, {union})")
        i, u = self.per_class.get(class_id, (0, 0))
        self.per_class[class_id] = (i + intersection, u + union)

    def merge(self, other: "IoUAccumulator") -> None:
        for cid, (i, u) in other.per_class.items():
            self.add(cid, i, u)

    def class_iou(self) -> dict:
        out = {}
        for cid in sorted(self.per_class):
            i, u = self.per_class[cid]
            if u == 0:
                raise EmptyClassError(f"class {cid} accumulated zero union")
            out[cid] = i / u
        return out


def mask_counts(pred: PixelMask, gt: PixelMask):
    """Foreground intersection and union pixel counts of two masks."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatchError(f"mask shapes differ: {pred.values.shape} vs {gt.values.shape}")
    p = pred.values.astype(bool)
    g = gt.values.astype(bool)
    return int((p & g).sum()), int((p | g).sum())


def accumulate_iou(acc: IoUAccumulator, class_id: int, pred: PixelMask, gt: PixelMask) -> IoUAccumulator:
    """Add one prediction/truth pair to the class's running sums."""
    inter, union = mask_counts(pred, gt)
    acc.add(class_id, inter, union)
    return acc


def miou(acc: IoUAccumulator) -> float:
    """Mean over classes of summed-intersection / summed-union."""
    per_class = acc.class_iou()
    if not per_class:
        raise EmptyClassError("no class was accumulated")
    return float(sum(per_class.values()) / len(per_class))


def delta_error(fg_estimate: float, fg_true: float) -> float:
    """Signed relative error of a foreground-proportion estimate."""
    if fg_true == 0.0:
        raise DegenerateTruthError("true foreground proportion is zero")
    return fg_estimate / fg_true - 1.0


# ---------------------------------------------------------------------------
# task sources


@dataclass(frozen=True)
class SynthTaskSource:
    """Generates one synthetic episode per sub-seed."""

    cfg: SynthConfig

    def make(self, task_seed: int):
        return synth_episode(self.cfg, task_seed)


@dataclass(frozen=True)
class DatasetTaskSource:
    """Samples one episode per sub-seed from an image index."""

    index: DatasetIndex
    k: int

    def make(self, task_seed: int):
        return sample_episodes(self.index, self.k, 1, task_seed)[0]


@dataclass(frozen=True)
class TaskDirSource:
    """Draws uniformly (with replacement) from a fixed pool of task files."""

    paths: tuple

    def make(self, task_seed: int):
        rng = rng_from(task_seed, 4)
        path = self.paths[int(rng.integers(len(self.paths)))]
        task, class_id = read_task_container(path)
        return (class_id if class_id is not None else 0), task


# ---------------------------------------------------------------------------
# benchmark harness


@dataclass(frozen=True)
class BenchmarkReport:
    per_run_miou: tuple
    mean_miou: float
    per_class_iou: dict
    delta0_stats: dict | None
    delta_tpi_stats: dict | None
    failures: int
    tasks_total: int
    config: dict
    tasks_per_second: float
    delta_pairs: tuple | None = None

    def as_dict(self, include_timing: bool = False) -> dict:
        out = {
            "config": self.config,
            "per_run_miou": list(self.per_run_miou),
            "mean_miou": self.mean_miou,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "delta0_stats": self.delta0_stats,
            "delta_tpi_stats": self.delta_tpi_stats,
            "failures": self.failures,
            "tasks_total": self.tasks_total,
        }
        if include_timing:
            out["tasks_per_second"] = self.tasks_per_second
        return out


def hyperparams_dict(hp: Hyperparams) -> dict:
    out = dataclasses.asdict(hp)
    out["loss_selector"] = sorted(hp.loss_selector)
    return out


def _task_result(source, hp, task_seed):
    """One benchmark task: returns (class_id, inter, union, delta0, delta_tpi)
    or (None, message) on failure."""
    try:
        class_id, task = source.make(task_seed)
        if task.query_gt is None:
            raise MissingQueryTruthError("benchmark tasks need query ground truth")
        result = repri_infer(task, hp)
        inter, union = mask_counts(result.final_mask, task.query_gt)
        delta0 = delta_tpi = None
        if result.delta_history is not None:
            delta0 = result.delta_history[0]
            delta_tpi = result.delta_history[hp.t_pi]
        return (class_id, inter, union, delta0, delta_tpi)
    except RepriError as exc:
        return (None, f"{type(exc).__name__}: {exc}")


def _worker(args):
    return _task_result(*args)


def _quartile_stats(values) -> dict | None:
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
    }


def run_benchmark(
    task_source,
    hp: Hyperparams,
    runs: int = 5,
    tasks_per_run: int = 1000,
    seed: int = 0,
    jobs: int = 1,
) -> BenchmarkReport:
    """Episodic benchmark: ``runs`` independent runs of ``tasks_per_run``
    tasks each; reports per-run mean IoU and their average.

    Per-task failures are excluded and counted; the whole benchmark
    fails if more than 1% of tasks errored.
    """
    jobs = max(1, int(jobs))
    work = [
        (task_source, hp, derive_seed(seed, r, i))
        for r in range(runs)
        for i in range(tasks_per_run)
    ]
    start = time.perf_counter()
    if jobs == 1:
        outcomes = [_worker(args) for args in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_worker, work, chunksize=max(1, len(work) // (jobs * 8))))
    elapsed = time.perf_counter() - start

    overall = IoUAccumulator()
    per_run_miou = []
    delta0_all = []
    delta_tpi_all = []
    failures = 0
    for r in range(runs):
        run_acc = IoUAccumulator()
        for i in range(tasks_per_run):
            outcome = outcomes[r * tasks_per_run + i]
            if outcome[0] is None:
                failures += 1
                continue
            class_id, inter, union, delta0, delta_tpi = outcome
            run_acc.add(class_id, inter, union)
            overall.add(class_id, inter, union)
            if delta0 is not None:
                delta0_all.append(delta0)
                delta_tpi_all.append(delta_tpi)
        per_run_miou.append(miou(run_acc))

    total = runs * tasks_per_run
    if failures > FAILURE_CEILING * total:
        raise TooManyFailuresError(f"{failures}/{total} tasks failed (> {FAILURE_CEILING:.0%})")

    return BenchmarkReport(
        per_run_miou=tuple(per_run_miou),
        mean_miou=float(sum(per_run_miou) / len(per_run_miou)),
        per_class_iou=overall.class_iou(),
        delta0_stats=_quartile_stats(delta0_all),
        delta_tpi_stats=_quartile_stats(delta_tpi_all),
        failures=failures,
        tasks_total=total,
        config={
            "hyperparams": hyperparams_dict(hp),
            "seed": seed,
            "runs": runs,
            "tasks_per_run": tasks_per_run,
            "source": repr(task_source),
        },
        tasks_per_second=total / elapsed if elapsed > 0 else float("inf"),
        delta_pairs=tuple(zip(delta0_all, delta_tpi_all)),
    )


def perturbation_sweep(
    task_source,
    hp: Hyperparams,
    deltas,
    n_tasks: int,
    seed: int = 0,
    jobs: int = 1,
):
    """Mean IoU as a function of the enforced foreground-size error.

    Every delta runs the byte-identical task set (same seed), in
    perturbed-oracle mode; only the pinned proportion differs.
    """
    rows = []
    for delta in deltas:
        hp_d = replace(hp, mode=MODE_PERTURBED, delta=float(delta))
        report = run_benchmark(task_source, hp_d, runs=1, tasks_per_run=n_tasks, seed=seed, jobs=jobs)
        rows.append({"delta": float(delta), "mean_miou": report.mean_miou})
    return rows


def ablation_suite(task_source, hp: Hyperparams, n_tasks: int, seed: int = 0, jobs: int = 1):
    """Mean IoU of the three loss configurations on identical task sets."""
    rows = []
    for name, selector in ABLATION_SELECTORS:
        hp_s = replace(hp, loss_selector=selector)
        report = run_benchmark(task_source, hp_s, runs=1, tasks_per_run=n_tasks, seed=seed, jobs=jobs)
        rows.append({"losses": name, "mean_miou": report.mean_miou})
    return rows


# ---------------------------------------------------------------------------
# gradient certification

GRADCHECK_TERMS = (
    ("ce", frozenset({LOSS_CE})),
    ("h", frozenset({LOSS_H})),
    ("kl", frozenset({LOSS_KL})),
    ("total", ALL_LOSSES),
)


def relative_error(a: float, f: float, floor: float = 1e-6) -> float:
    """|a - f| over the larger magnitude, floored so that near-zero pairs
    compare absolutely at the floor's scale."""
    return abs(a - f) / max(abs(a), abs(f), floor)


def max_gradient_error(a_w, a_b, f_w, f_b) -> float:
    """Largest per-coordinate relative error between two gradients.

    Each coordinate's difference is measured against the larger of its
    own magnitudes and the gradient's overall scale (its largest
    magnitude), so coordinates that happen to be tiny are compared at
    the scale of the vector they belong to rather than against
    finite-difference round-off.
    """
    a = np.append(np.asarray(a_w, dtype=np.float64), a_b)
    f = np.append(np.asarray(f_w, dtype=np.float64), f_b)
    scale = max(float(np.abs(a).max()), float(np.abs(f).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), scale)
    return float((np.abs(a - f) / denom).max())


def random_check_instance(seed: int):
    """A seeded random (task, params, pi, weights) tuple for gradient checks.

    Sizes stay small (C <= 32, H*W <= 64, K in {1, 5}) so a full
    finite-difference sweep is cheap.
    """
    rng = rng_from(seed, 7)
    c = int(rng.integers(2, 33))
    h = int(rng.integers(1, 9))
    w = int(rng.integers(1, 9))
    k = int(rng.choice([1, 5]))
    supports = []
    for _ in range(k):
        feats = FeatureMap(rng.standard_normal((h, w, c)))
        mask = (rng.random((h, w)) < 0.5).astype(np.uint8)
        supports.append((feats, mask))
    if not any(m.sum() for _, m in supports):
        supports[0][1][0, 0] = 1
    task = TaskInstance(
        supports=tuple((f, PixelMask(m)) for f, m in supports),
        query=FeatureMap(rng.standard_normal((h, w, c))),
    )
    params = ClassifierParams(
        w=rng.standard_normal(c),
        b=float(rng.uniform(-1.0, 1.0)),
        tau=float(rng.choice([5.0, 10.0, 20.0])),
    )
    pi = Proportion.from_foreground(float(rng.uniform(0.02, 0.98)))
    weights = LossWeights(lambda_h=float(rng.uniform(0.0, 2.0)), lambda_kl=float(rng.uniform(0.0, 2.0)))
    return task, params, pi, weights


def gradcheck_trial(seed: int, h: float = 1e-4) -> dict:
    """Max relative analytic-vs-central-difference error per loss term.

    Each term is checked in isolation at unit weight; "total" uses the
    instance's drawn weights.
    """
    task, params, pi, weights = random_check_instance(seed)
    unit = LossWeights(lambda_h=1.0, lambda_kl=1.0)
    out = {}
    for name, selector in GRADCHECK_TERMS:
        wts = weights if name == "total" else unit
        gw, gb = loss_gradients(task, params, pi, wts, selector)
        fw, fb = finite_diff_gradients(task, params, pi, wts, selector, h=h)
        out[name] = max_gradient_error(gw, gb, fw, fb)
    return out


# ---------------------------------------------------------------------------
# canonical report serialisation (17 significant digits, stable layout)


def format_real(x: float) -> str:
    """Render a float at 17 significant digits (round-trip exact)."""
    if not math.isfinite(x):
        raise RepriError(f"refusing to serialise non-finite value {x}")
    s = format(float(x), ".17g")
    # make sure the token stays a JSON float
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


def to_canonical_json(obj, indent: int = 0) -> str:
    """Deterministic JSON with every real at 17 significant digits."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_real(float(obj))
    if isinstance(obj, str):
        import json

        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f'{inner}{to_canonical_json(str(k))}: {to_canonical_json(v, indent + 1)}'
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{to_canonical_json(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    raise RepriError(f"cannot serialise {type(obj).__name__}")
