"""The two alignment mechanisms, by hand and by module.

Shows the Gaussian-mixture step against a termwise recomputation, why its
means can only move forward, and the hard 20-wide window of the baseline.

Run:  python demos/02_attention_mechanics.py
"""

import math
from pathlib import Path

import numpy as np

import acconv.numcore as nc
from acconv import attention as att
from acconv.numcore import Tensor

OUT = Path(__file__).parent / "out" / "02_attention"
OUT.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(7)

# --- one mixture-attention step, recomputed termwise ------------------------
k, enc_len = 3, 12
params = att.GmmAttentionParams.create(query_dim=8, k=k, rng=rng, hidden=16)
query = rng.standard_normal(8)
state = att.gmm_init_state(k)
alpha, state = att.gmm_step(Tensor(query), state, enc_len, params)

head = np.tanh(query @ params.w.data + params.b.data) @ params.v.data
omega, delta = np.exp(head[:k]), np.exp(head[k : 2 * k])
sigma = np.sqrt(np.exp(-head[2 * k :]) / 2.0)
by_hand = np.array([
    sum(omega[i] * math.exp(-((j - delta[i]) ** 2) / (2 * sigma[i] ** 2))
        for i in range(k))
    for j in range(enc_len)
])
print(f"module vs termwise sum over {k} Gaussians: "
      f"max |diff| = {np.max(np.abs(alpha.data - by_hand)):.2e}")
print(f"weights sum to {alpha.data.sum():.3f} (unnormalized by design)")

# --- the means only ever advance --------------------------------------------
state = att.gmm_init_state(k)
trail = [state.mu.data.copy()]
for _ in range(30):
    _, state = att.gmm_step(Tensor(rng.standard_normal(8)), state, enc_len, params)
    trail.append(state.mu.data.copy())
trail = np.concatenate(trail)
print(f"means after 30 steps: {np.round(trail[-1], 2)}; "
      f"monotone: {bool(np.all(np.diff(trail, axis=0) >= 0))}")

# a fresh random walk makes a readable alignment band
steps = 40
params2 = att.GmmAttentionParams.create(8, 2, rng, hidden=16)
state = att.gmm_init_state(2)
rows = []
for _ in range(steps):
    a, state = att.gmm_step(Tensor(rng.standard_normal(8)), state, 60, params2)
    rows.append(a.data.reshape(-1))
att.save_alignment_pgm(OUT / "gmm_walk.pgm", np.stack(rows))
print(f"wrote {OUT / 'gmm_walk.pgm'}")

# --- the windowed baseline: hard zeros outside 20 positions -----------------
enc_len = 50
lsa = att.WindowedLsaParams.create(query_dim=8, memory_dim=6, rng=rng,
                                   att_dim=16, filters=4, kernel=7)
memory = Tensor(rng.standard_normal((1, enc_len, 6)))
pm = att.lsa_process_memory(memory, lsa)
state = att.lsa_init_state(enc_len)
rows = []
for i in range(35):
    a, state = att.lsa_windowed_step(Tensor(rng.standard_normal(8)), state,
                                     i, 2.0 / 3.0, memory, pm, lsa)
    rows.append(a.data.reshape(-1))
rows = np.stack(rows)
lo, hi = att.window_bounds(20, 2.0 / 3.0, enc_len, 20)
print(f"step 20 window = [{lo}, {hi}]; outside zero: "
      f"{bool((rows[20][:lo] == 0).all() and (rows[20][hi + 1:] == 0).all())}; "
      f"inside sums to {rows[20].sum():.12f}")
att.save_alignment_pgm(OUT / "lsa_window.pgm", rows)
att.save_alignment_csv(OUT / "lsa_window.csv", rows)
print(f"wrote {OUT / 'lsa_window.pgm'} and .csv")

# --- the shared metric -------------------------------------------------------
oracle = att.decoder_position_oracle(35, reduction=2, enc_len=enc_len)
print(f"windowed walk alignment error vs the 3:1 diagonal: "
      f"{att.alignment_error(rows, oracle):.4f}")
