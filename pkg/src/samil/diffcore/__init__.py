"""Minimal tensor math with reverse-mode differentiation, SGD and schedules."""

from samil.diffcore.checkpoint import load_checkpoint, save_checkpoint
from samil.diffcore.optim import OptimizerState, ParameterSet, cosine_lr, sgd_step
from samil.diffcore.tensor import (
    EPS,
    Tensor,
    add,
    backward,
    broadcast_segments,
    concat,
    div,
    exp,
    kl_div,
    l2_normalize,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    softmax_temp,
    sub,
    take,
    tanh,
    transpose,
)

__all__ = [
    "EPS",
    "OptimizerState",
    "ParameterSet",
    "Tensor",
    "add",
    "backward",
    "broadcast_segments",
    "concat",
    "cosine_lr",
    "div",
    "exp",
    "kl_div",
    "l2_normalize",
    "load_checkpoint",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "segment_softmax",
    "segment_sum",
    "sgd_step",
    "sigmoid",
    "softmax",
    "softmax_temp",
    "sub",
    "take",
    "tanh",
    "transpose",
]
