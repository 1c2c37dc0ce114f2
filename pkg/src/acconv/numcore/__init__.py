"""Minimal dense-tensor engine: float64 arrays, tape autodiff, TNSR I/O."""

import ctypes as _ctypes
import os as _os


def _tune_allocator():
    # The tape keeps every activation alive until backward, so glibc's
    # default 128 KiB mmap threshold makes each large array a fresh
    # mmap/munmap pair (page-fault churn, ~30x slowdown at full widths).
    # Raising the threshold lets freed arenas be reused. Opt out with
    # ACCONV_NO_MALLOPT=1; silently skipped on non-glibc platforms.
    if _os.environ.get("ACCONV_NO_MALLOPT"):
        return
    try:
        _ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .cells import GruParams, LstmParams, gru_cell, lstm_cell, zero_state
from .conv import conv1d, conv2d, maxpool1d_w2
from .gradcheck import CheckResult, gradcheck, numeric_grad, primitive_suite, scaled_rel_err
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bmm,
    concat,
    constant,
    div,
    dropout,
    embedding,
    exp,
    glorot,
    is_grad_enabled,
    log,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    sub,
    tanh,
    tape,
    tmean,
    transpose,
    tsum,
    zeros,
)
from .tnsr import read_bundle, read_tensor, write_bundle, write_tensor

__all__ = [
    "Tape", "Tensor", "add", "backward", "bmm", "concat", "constant", "div",
    "dropout", "embedding", "exp", "glorot", "is_grad_enabled", "log",
    "matmul", "mul", "narrow", "neg", "no_grad", "relu",
    "reshape", "sigmoid", "softmax", "sqrt", "square", "sub", "tanh", "tape",
    "tmean", "transpose", "tsum", "zeros",
    "GruParams", "LstmParams", "gru_cell", "lstm_cell", "zero_state",
    "conv1d", "conv2d", "maxpool1d_w2",
    "CheckResult", "gradcheck", "numeric_grad", "primitive_suite", "scaled_rel_err",
    "read_bundle", "read_tensor", "write_bundle", "write_tensor",
]
