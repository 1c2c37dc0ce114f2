"""The two alignment mechanisms under study.

GMM attention is purely location-based: an MLP over the attention-RNN state
yields (omega_hat, delta_hat, sigma_hat); weights are an *unnormalized*
mixture of K Gaussians over encoder positions whose means only ever move
forward (mu' = mu + exp(delta_hat) > mu), which is what buys monotonicity
and length generalization.

The baseline is content+location attention restricted to a 20-wide window
whose center is scheduled by the decoder step times the encoder/decoder
length ratio; weights outside the window are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from . import numcore as nc
from .numcore import Tensor

MASK_OFF = -1e30  # exp(MASK_OFF - max) underflows to exactly 0.0


# ---------------------------------------------------------------------------
# GMM attention
# ---------------------------------------------------------------------------


@dataclass
class GmmAttentionParams:
    """MLP state -> 3K intermediates: head = v.T tanh(w.T s + b)."""

    k: int
    w: Tensor  # [query_dim, hidden]
    b: Tensor  # [hidden]
    v: Tensor  # [hidden, 3k]
    sigma_form: str = "v2"    # "v2": sigma = sqrt(exp(-s)/2); "draft": sigma = exp(s)
    renormalize: bool = False  # divide weights by their sum before the context dot

    def __post_init__(self):
        if self.v.shape[1] != 3 * self.k:
            raise DimensionError(
                f"gmm head width {self.v.shape[1]} != 3K = {3 * self.k}")
        if self.sigma_form not in ("v2", "draft"):
            raise ContractError(f"unknown sigma_form {self.sigma_form!r}")

    @classmethod
    def create(cls, query_dim, k, rng, hidden=128, **kw):
        return cls(k=k, w=nc.glorot((query_dim, hidden), rng), b=nc.zeros(hidden),
                   v=nc.glorot((hidden, 3 * k), rng), **kw)

    def tensors(self):
        return [self.w, self.b, self.v]


@dataclass
class GmmAttentionState:
    """Running means plus the last step's mixture parameters (snapshots)."""

    mu: Tensor                    # [B, K], in-graph across steps
    step: int = 0
    omega: np.ndarray | None = None
    delta: np.ndarray | None = None
    sigma: np.ndarray | None = None


def gmm_init_state(k, batch=1) -> GmmAttentionState:
    """Means start at position 0: attention begins at the sequence head."""
    return GmmAttentionState(mu=Tensor(np.zeros((batch, k))))


def gmm_step(s, state: GmmAttentionState, enc_len, params: GmmAttentionParams):
    """One decoder step of GMM attention.

    s: attention-RNN state, [B, D] or [D]. Returns (alpha, new state) with
    alpha [B, enc_len] (or [enc_len] for a 1-D query). alpha is NOT
    normalized to sum 1 unless params.renormalize is set; callers take the
    context as alpha @ encoder_outputs either way.
    """
    squeeze = s.ndim == 1
    if squeeze:
        s = nc.reshape(s, (1, s.shape[0]))
    if enc_len < 1:
        raise ContractError(f"enc_len must be >= 1, got {enc_len}")
    if not np.isfinite(state.mu.data).all():
        raise NumericError(f"gmm attention state non-finite at step {state.step}")
    b, k = s.shape[0], params.k

    head = nc.matmul(nc.tanh(nc.matmul(s, params.w) + params.b), params.v)
    omega_hat = nc.narrow(head, 1, 0, k)
    delta_hat = nc.narrow(head, 1, k, k)
    sigma_hat = nc.narrow(head, 1, 2 * k, k)

    omega = nc.exp(omega_hat)
    delta = nc.exp(delta_hat)
    if params.sigma_form == "v2":
        two_sigma_sq = nc.exp(nc.neg(sigma_hat))      # 2 sigma^2 = exp(-sigma_hat)
    else:
        two_sigma_sq = 2.0 * nc.square(nc.exp(sigma_hat))
    mu = state.mu + delta

    pos = Tensor(np.arange(enc_len, dtype=np.float64).reshape(1, 1, enc_len))
    diff = pos - nc.reshape(mu, (b, k, 1))
    comp = nc.exp(nc.neg(nc.square(diff) / nc.reshape(two_sigma_sq, (b, k, 1))))
    alpha = nc.tsum(nc.reshape(omega, (b, k, 1)) * comp, axis=1)
    if params.renormalize:
        alpha = alpha / nc.tsum(alpha, axis=1, keepdims=True)
    if not np.isfinite(alpha.data).all():
        raise NumericError(f"gmm attention weights non-finite at step {state.step}")

    sigma = np.sqrt(two_sigma_sq.data / 2.0)
    new_state = GmmAttentionState(mu=mu, step=state.step + 1,
                                  omega=omega.data.copy(), delta=delta.data.copy(),
                                  sigma=sigma)
    if squeeze:
        alpha = nc.reshape(alpha, (enc_len,))
    return alpha, new_state


def gmm_alpha_oracle(omega, delta, sigma_hat_unused=None, *, mu_prev, sigma,
                     enc_len) -> np.ndarray:
    """Direct termwise evaluation of the mixture for one query.

    alpha_j = sum_k omega_k * exp(-(j - (mu_prev_k + delta_k))^2 / (2 sigma_k^2)),
    computed with plain Python floats; the independent check for gmm_step.
    """
    import math

    k = len(omega)
    out = np.zeros(enc_len)
    for j in range(enc_len):
        acc = 0.0
        for i in range(k):
            mu = mu_prev[i] + delta[i]
            acc += omega[i] * math.exp(-((j - mu) ** 2) / (2.0 * sigma[i] ** 2))
        out[j] = acc
    return out


# ---------------------------------------------------------------------------
# windowed location-sensitive attention (baseline)
# ---------------------------------------------------------------------------


@dataclass
class WindowedLsaParams:
    """Tacotron2-style content+location attention plus a hard window."""

    w_query: Tensor    # [query_dim, att_dim]
    w_memory: Tensor   # [memory_dim, att_dim]
    loc_kernel: Tensor  # [kernel, 2, filters] over (prev, cumulative) weights
    w_loc: Tensor      # [filters, att_dim]
    b: Tensor          # [att_dim]
    v: Tensor          # [att_dim, 1]
    window_size: int = 20

    def __post_init__(self):
        if self.window_size < 1:
            raise ContractError(f"window_size must be >= 1, got {self.window_size}")

    @classmethod
    def create(cls, query_dim, memory_dim, rng, att_dim=128, filters=32,
               kernel=31, window_size=20):
        return cls(
            w_query=nc.glorot((query_dim, att_dim), rng),
            w_memory=nc.glorot((memory_dim, att_dim), rng),
            loc_kernel=nc.glorot((kernel, 2, filters), rng),
            w_loc=nc.glorot((filters, att_dim), rng),
            b=nc.zeros(att_dim),
            v=nc.glorot((att_dim, 1), rng),
            window_size=window_size,
        )

    def tensors(self):
        return [self.w_query, self.w_memory, self.loc_kernel, self.w_loc,
                self.b, self.v]


@dataclass
class LsaState:
    prev_alpha: Tensor  # [B, enc_len], sums to 1 over valid positions
    cum_alpha: Tensor   # [B, enc_len]
    step: int = 0


def lsa_init_state(enc_len, batch=1) -> LsaState:
    """Attention starts as a one-hot on position 0; cumulative starts at 0."""
    a0 = np.zeros((batch, enc_len))
    a0[:, 0] = 1.0
    return LsaState(prev_alpha=Tensor(a0), cum_alpha=Tensor(np.zeros((batch, enc_len))))


def lsa_process_memory(memory, params: WindowedLsaParams):
    """Precompute w_memory projections once per utterance: [B, J, A]."""
    b, j, d = memory.shape
    flat = nc.matmul(nc.reshape(memory, (b * j, d)), params.w_memory)
    return nc.reshape(flat, (b, j, params.w_memory.shape[1]))


def window_bounds(step_index, len_ratio, enc_len, window_size) -> tuple[int, int]:
    """Inclusive [lo, hi] of the window at one decoder step.

    Center = round(step * ratio), clamped into the valid index range; the
    window is then intersected with [0, enc_len-1], so it never empties.
    """
    center = int(round(step_index * len_ratio))
    center = min(max(center, 0), enc_len - 1)
    lo = max(0, center - window_size // 2)
    hi = min(enc_len - 1, center + (window_size - 1) // 2)
    return lo, hi


def lsa_windowed_step(s, state: LsaState, step_index, len_ratio, memory,
                      processed_memory, params: WindowedLsaParams, enc_lens=None):
    """One decoder step of windowed LSA.

    s: [B, D] or [D] query; memory/processed_memory: [B, J, *]; len_ratio:
    scalar or per-utterance array of encoder positions per decoder step;
    enc_lens: true encoder lengths (defaults to the padded J). Returns
    (alpha, new state); alpha rows sum to 1 and are exactly zero outside
    the window.
    """
    squeeze = s.ndim == 1
    if squeeze:
        s = nc.reshape(s, (1, s.shape[0]))
    b, j = state.prev_alpha.shape
    ratios = np.broadcast_to(np.asarray(len_ratio, dtype=np.float64), (b,))
    lens = np.broadcast_to(np.asarray(enc_lens if enc_lens is not None else j,
                                      dtype=np.int64), (b,))

    q = nc.reshape(nc.matmul(s, params.w_query), (b, 1, -1))
    loc_in = nc.concat([nc.reshape(state.prev_alpha, (b, j, 1)),
                        nc.reshape(state.cum_alpha, (b, j, 1))], axis=2)
    loc = nc.conv1d(loc_in, params.loc_kernel, stride=1, padding="same")
    loc = nc.reshape(nc.matmul(nc.reshape(loc, (b * j, -1)), params.w_loc),
                     (b, j, -1))
    e = nc.matmul(nc.reshape(nc.tanh(q + processed_memory + loc + params.b),
                             (b * j, -1)), params.v)
    e = nc.reshape(e, (b, j))

    mask = np.full((b, j), MASK_OFF)
    for i in range(b):
        lo, hi = window_bounds(step_index, float(ratios[i]), int(lens[i]),
                               params.window_size)
        mask[i, lo : hi + 1] = 0.0
    alpha = nc.softmax(e + Tensor(mask), axis=1)

    new_state = LsaState(prev_alpha=alpha, cum_alpha=state.cum_alpha + alpha,
                         step=state.step + 1)
    out = nc.reshape(alpha, (j,)) if squeeze else alpha
    return out, new_state


# ---------------------------------------------------------------------------
# alignment diagnostics and exports
# ---------------------------------------------------------------------------


def alignment_error(alpha_matrix: np.ndarray, oracle: np.ndarray) -> float:
    """Mean |expected attention position - oracle| / enc_len.

    Rows are renormalized to sum 1 first (GMM weights are unnormalized);
    an all-zero row counts as uniform.
    """
    alpha = np.asarray(alpha_matrix, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[0] != oracle.shape[0]:
        raise DimensionError(
            f"alignment_error: alpha {alpha.shape} vs oracle {oracle.shape}")
    t, j = alpha.shape
    sums = alpha.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, alpha / np.where(sums == 0, 1.0, sums),
                    np.full_like(alpha, 1.0 / j))
    expected = safe @ np.arange(j, dtype=np.float64)
    return float(np.mean(np.abs(expected - oracle)) / j)


def decoder_position_oracle(n_steps, reduction, enc_len,
                            mel_per_ppg=3) -> np.ndarray:
    """Ideal encoder position per decoder step for the fixed 3:1 frame-rate
    corpus: step i covers mel frames [i*r, i*r + r), whose time center maps
    to ppg position (i*r + (r-1)/2) / 3."""
    centers = (np.arange(n_steps) * reduction + (reduction - 1) / 2.0) / mel_per_ppg
    return np.clip(centers, 0.0, enc_len - 1.0)


def save_alignment_csv(path, alpha_matrix: np.ndarray):
    np.savetxt(path, np.asarray(alpha_matrix), delimiter=",", fmt="%.17g")


def save_alignment_pgm(path, alpha_matrix: np.ndarray):
    """8-bit binary PGM; the matrix is scaled linearly onto [0, 255]."""
    a = np.asarray(alpha_matrix, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((a - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
