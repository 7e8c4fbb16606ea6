"""Differentiable-compute substrate: tensors, autodiff, RNG, checkpoints."""

from .rng import derive_seed, make_rng
from .tensor import GradientSet, ParameterSet, TensorError, TensorRecord
from .autodiff import (
    Node,
    NumericsError,
    ShapeError,
    UsageError,
    add,
    avg_pool3d,
    backward,
    bce,
    bce_logits,
    collect_parameters,
    concat,
    constant,
    dropout,
    dropout_mask,
    linear,
    log,
    log_softmax,
    mean,
    moveaxis,
    mse,
    mul,
    parameter,
    pixel_outer,
    pooled_extent,
    relu,
    reshape,
    sigmoid,
    softmax,
    tsum,
)
from .graph import (
    AdamState,
    Graph,
    adam_step,
    bind_params,
    differentiate,
    evaluate,
    finite_difference_directional,
    finite_difference_gradient,
    sgd_step,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "derive_seed",
    "make_rng",
    "TensorRecord",
    "TensorError",
    "ParameterSet",
    "GradientSet",
    "Node",
    "NumericsError",
    "ShapeError",
    "UsageError",
    "constant",
    "parameter",
    "linear",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "log_softmax",
    "add",
    "mul",
    "tsum",
    "mean",
    "mse",
    "bce",
    "bce_logits",
    "pixel_outer",
    "avg_pool3d",
    "pooled_extent",
    "reshape",
    "moveaxis",
    "concat",
    "dropout",
    "dropout_mask",
    "backward",
    "collect_parameters",
    "Graph",
    "bind_params",
    "evaluate",
    "differentiate",
    "finite_difference_gradient",
    "finite_difference_directional",
    "sgd_step",
    "AdamState",
    "adam_step",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]
