from fastbat.autodiff.functional import (
    hvp_delta,
    mixed_partial_apply,
    mixed_partial_apply_t,
    value_and_grad,
)
from fastbat.autodiff.params import ParamVector, Segment
from fastbat.autodiff.tensor import (
    ACTIVATIONS,
    SUPPORTED_OPS,
    Tape,
    Tensor,
    add,
    broadcast_to,
    grad,
    matmul,
    mean,
    mul,
    neg,
    no_record,
    reciprocal,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    softplus,
    sqrt,
    sub,
    sum_,
    swish,
    transpose,
)

__all__ = [
    "ACTIVATIONS",
    "SUPPORTED_OPS",
    "ParamVector",
    "Segment",
    "Tape",
    "Tensor",
    "add",
    "broadcast_to",
    "grad",
    "hvp_delta",
    "matmul",
    "mean",
    "mixed_partial_apply",
    "mixed_partial_apply_t",
    "mul",
    "neg",
    "no_record",
    "reciprocal",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "softplus",
    "sqrt",
    "sub",
    "sum_",
    "swish",
    "transpose",
    "value_and_grad",
]
