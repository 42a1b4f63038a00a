"""Minimal reverse-mode differentiation and optimization substrate."""
from .autodiff import (
    ShapeError,
    Tape,
    Var,
    add,
    backward,
    concat,
    conv1d,
    dense,
    exp,
    hadamard,
    log_softmax,
    mean,
    mean_pool,
    mse,
    mul,
    neg,
    pointwise,
    sigmoid,
    split,
    sq_dist,
    stack,
    sub,
    take,
    tanh,
    value,
)
from .autodiff import sum as reduce_sum
from .gradcheck import GradCheckReport, grad_check, rel_error
from .params import ParamStore, adam_step, seeded_init
from .rng import SplitMix64, derive_seed

__all__ = [
    "GradCheckReport", "ParamStore", "ShapeError", "SplitMix64", "Tape", "Var",
    "adam_step", "add", "backward", "concat", "conv1d", "dense", "derive_seed",
    "exp", "grad_check", "hadamard", "log_softmax", "mean", "mean_pool", "mse",
    "mul", "neg", "pointwise", "reduce_sum", "rel_error", "seeded_init",
    "sigmoid", "split", "sq_dist", "stack", "sub", "take", "tanh", "value",
]
