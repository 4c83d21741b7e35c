"""Transductive few-shot foreground/background segmentation on
pre-extracted feature maps: a per-task linear classifier optimised
against support cross-entropy, query entropy, and a proportion-matching
KL regulariser, plus the episodic benchmarking protocol around it."""

from .core import (
    ALL_LOSSES,
    EPS_CLAMP,
    LOSS_CE,
    LOSS_H,
    LOSS_KL,
    MODE_ORACLE,
    MODE_PERTURBED,
    MODE_STANDARD,
    ClassifierParams,
    FeatureMap,
    Hyperparams,
    PixelMask,
    ProbMap,
    Proportion,
    RepriError,
    TaskInstance,
    clamp_prob,
)
from .classifier import cosine, forward, hard_mask, init_bias, init_params, init_prototype
from .losses import (
    LossBreakdown,
    LossWeights,
    finite_diff_gradients,
    kl_to_prior,
    loss_gradients,
    marginal,
    query_entropy,
    support_ce,
    total_loss,
)
from .engine import InferenceResult, oracle_pi, perturbed_pi, pi_at, repri_infer
from .evaluation import (
    BenchmarkReport,
    IoUAccumulator,
    SynthTaskSource,
    DatasetTaskSource,
    TaskDirSource,
    ablation_suite,
    accumulate_iou,
    delta_error,
    gradcheck_trial,
    miou,
    mismatch_suite_config,
    perturbation_sweep,
    run_benchmark,
    to_canonical_json,
)
from .taskio import (
    ContainerFile,
    DatasetIndex,
    SynthConfig,
    downsample_mask,
    load_index,
    read_container,
    read_task_container,
    sample_episodes,
    synth_episode,
    synth_task,
    write_container,
    write_index,
    write_task_container,
)

__version__ = "0.1.0"
