"""Gated recurrent cells composed from the tensor primitives.

Both cells take [B, D] (or [D], promoted) inputs and use packed gate
matrices over the concatenated [x, h] input, the usual layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .tensor import Tensor


@dataclass
class GruParams:
    """w_gates/b_gates produce (reset, update); w_cand/b_cand the candidate."""

    w_gates: Tensor  # [(din + dh), 2*dh]
    b_gates: Tensor  # [2*dh]
    w_cand: Tensor   # [(din + dh), dh]
    b_cand: Tensor   # [dh]

    @property
    def hidden(self) -> int:
        return self.w_cand.shape[1]

    @classmethod
    def create(cls, din, dh, rng):
        return cls(
            w_gates=T.glorot((din + dh, 2 * dh), rng),
            b_gates=T.zeros(2 * dh),
            w_cand=T.glorot((din + dh, dh), rng),
            b_cand=T.zeros(dh),
        )


@dataclass
class LstmParams:
    """Packed i, f, g, o gates."""

    w: Tensor  # [(din + dh), 4*dh]
    b: Tensor  # [4*dh]

    @property
    def hidden(self) -> int:
        return self.w.shape[1] // 4

    @classmethod
    def create(cls, din, dh, rng):
        return cls(w=T.glorot((din + dh, 4 * dh), rng), b=T.zeros(4 * dh))


def _promote(x):
    return (T.reshape(x, (1, x.shape[0])), True) if x.ndim == 1 else (x, False)


def gru_cell(x, h, params: GruParams):
    """h' = (1 - z) * n + z * h with reset/update gates r, z."""
    x, squeeze = _promote(x)
    h, _ = _promote(h)
    dh = params.hidden
    if x.shape[1] + h.shape[1] != params.w_gates.shape[0] or h.shape[1] != dh:
        raise DimensionError(
            f"gru_cell: x {x.shape}, h {h.shape} vs gates {params.w_gates.shape}")
    xh = T.concat([x, h], axis=1)
    gates = T.sigmoid(T.matmul(xh, params.w_gates) + params.b_gates)
    r = T.narrow(gates, 1, 0, dh)
    z = T.narrow(gates, 1, dh, dh)
    xrh = T.concat([x, r * h], axis=1)
    n = T.tanh(T.matmul(xrh, params.w_cand) + params.b_cand)
    out = (1.0 - z) * n + z * h
    return T.reshape(out, (dh,)) if squeeze else out


def lstm_cell(x, h, c, params: LstmParams):
    """Standard LSTM step; returns (h', c')."""
    x, squeeze = _promote(x)
    h, _ = _promote(h)
    c, _ = _promote(c)
    dh = params.hidden
    if x.shape[1] + h.shape[1] != params.w.shape[0] or h.shape[1] != dh:
        raise DimensionError(f"lstm_cell: x {x.shape}, h {h.shape} vs w {params.w.shape}")
    xh = T.concat([x, h], axis=1)
    acts = T.matmul(xh, params.w) + params.b
    i = T.sigmoid(T.narrow(acts, 1, 0, dh))
    f = T.sigmoid(T.narrow(acts, 1, dh, dh))
    g = T.tanh(T.narrow(acts, 1, 2 * dh, dh))
    o = T.sigmoid(T.narrow(acts, 1, 3 * dh, dh))
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    if squeeze:
        return T.reshape(h_new, (dh,)), T.reshape(c_new, (dh,))
    return h_new, c_new


def zero_state(batch, dh) -> Tensor:
    return Tensor(np.zeros((batch, dh)))
