"""Dropout training of two-layer ReLU networks in the lazy regime, with the
analysis objects and empirical checks for its convergence, generalization and
compression behavior."""

from .data import (
    Dataset,
    Example,
    MarginSpec,
    certified_margin,
    estimate_margin,
    halfspace_spec,
    load_mnist_binary,
    sample_halfspace,
)
from .model import (
    DropoutMask,
    NetworkParams,
    forward_full,
    forward_sub,
    grad_sub,
    init_network,
    init_network_conditioned,
    sample_mask,
)
from .numerics import RngStream, logistic_loss, logistic_neg_deriv, sample_gaussian_vector
from .theory import (
    BoundReport,
    Competitor,
    LemmaReport,
    build_competitor,
    compute_bounds,
    estimate_risk,
    flip_count,
    linearized_loss,
    verify_lemmas,
)
from .trainer import (
    IterateRecord,
    RunResult,
    TrainConfig,
    dropout_step,
    project_maxnorm,
    train,
)
from .experiment import ExperimentSpec, parse_config, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BoundReport",
    "Competitor",
    "Dataset",
    "DropoutMask",
    "Example",
    "ExperimentSpec",
    "IterateRecord",
    "LemmaReport",
    "MarginSpec",
    "NetworkParams",
    "RngStream",
    "RunResult",
    "TrainConfig",
    "build_competitor",
    "certified_margin",
    "compute_bounds",
    "dropout_step",
    "estimate_margin",
    "estimate_risk",
    "flip_count",
    "forward_full",
    "forward_sub",
    "grad_sub",
    "halfspace_spec",
    "init_network",
    "init_network_conditioned",
    "linearized_loss",
    "load_mnist_binary",
    "logistic_loss",
    "logistic_neg_deriv",
    "parse_config",
    "project_maxnorm",
    "run_experiment",
    "sample_gaussian_vector",
    "sample_halfspace",
    "sample_mask",
    "train",
    "verify_lemmas",
]
