"""Rank-adaptive low-rank network training with spectral conditioning,
adversarial attack evaluation, and a numerical verification suite."""

from .attacks import AttackSpec, blackbox_transfer, clamp_linf, evaluate_under_attack, fgsm, jitter, mixup, run_attack
from .data import Dataset, load_idx, normalization_stats, normalize, synth_spirals
from .diagnostics import SpectralReport, compression_rate, measured_sensitivity, sensitivity_bound, spectral_report
from .engine import (
    AugmentedState,
    EngineConfig,
    TrainResult,
    adversarial_train,
    augment,
    coefficient_update,
    dlrt_step,
    init_factorized_linear,
    init_lowrank_conv,
    train,
    truncate,
)
from .layers import Batch, FactorizedLinear, LowRankConv2D, Network, cross_entropy
from .linalg import SvdResult, condition_number, orth, svd, truncate_by_threshold, unfold_output_mode
from .persist import load_checkpoint, save_checkpoint, write_metrics
from .regularizer import (
    FlowTrace,
    RegularizerEval,
    conv_reg_value,
    kappa_bound,
    reg_gradient,
    reg_value,
    stability_flow,
)

__version__ = "0.1.0"
