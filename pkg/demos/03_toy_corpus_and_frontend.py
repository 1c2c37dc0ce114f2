"""Synthetic corpora and the deterministic feature frontend.

Run:  python demos/03_toy_corpus_and_frontend.py
"""

from pathlib import Path

import numpy as np

from acconv import features as F
from acconv import synthdata as sd

OUT = Path(__file__).parent / "out" / "03_corpus"
OUT.mkdir(parents=True, exist_ok=True)

# a toy language: 12 phonemes, each with a mel template and a sparse
# confusion row over 87 posterior classes
lang = sd.gen_language(seed=5)
print(f"language: {lang.n_phonemes} phonemes -> {lang.ppg_dim}-dim PPGs, "
      f"template separation {sd.template_separation(lang.mel_templates):.2f}")

utts = sd.gen_corpus(lang, n=20, seed=6, length_range=(2, 6))
u = utts[0]
print(f"utterance {u.utt_id}: phones {u.phonemes}, durations {u.durations_mel}")
print(f"  mel {u.mel.frames.shape}, ppg {u.ppg.shape}, "
      f"T_ppg == ceil(T_mel/3): {u.n_ppg_frames == -(-u.n_mel_frames // 3)}")
print(f"  ppg rows sum to 1: {np.allclose(u.ppg.sum(axis=1), 1.0)}")
print(f"  oracle alignment (phone position per ppg frame): {u.oracle_align}")

acc = sd.nearest_template_accuracy(lang, utts)
print(f"nearest-template classification of noisy frames: {acc:.1%}")

# the conversion-time reference is a second noise realization
ref = sd.reference_mel(lang, u, seed=99)
print(f"reference mel same shape {ref.frames.shape}, "
      f"different noise: {not np.array_equal(ref.frames, u.mel.frames)}")

# --- ASR-side frame compaction ----------------------------------------------
asr_frames = np.random.default_rng(0).standard_normal((25, 28))
stacked = F.stack_and_skip(asr_frames)  # stack 8, skip 3
print(f"stack/skip: {asr_frames.shape} -> {stacked.shape} "
      f"(ceil(25/3) = 9 rows, 8*28 = 224 cols)")

# --- min-max mel normalization onto [-4, 4] ---------------------------------
raw = [F.MelSpectrogram(6.0 * np.random.default_rng(i).random((30, 80)) - 2.0)
       for i in range(8)]
stats = F.fit_norm(raw)
normed = F.normalize(raw[0], stats)
print(f"normalized range: [{normed.frames.min():.2f}, {normed.frames.max():.2f}]")
back = F.denormalize(normed, stats)
print(f"round trip error: {np.max(np.abs(back.frames - raw[0].frames)):.2e}")
F.save_stats(OUT / "norm_stats.tnsr", stats)

# --- corpora persist as TNSR + a JSON index ---------------------------------
sd.export_corpus(OUT / "corpus", lang, utts[:5])
lang2, utts2 = sd.import_corpus(OUT / "corpus")
print(f"export/import round trip: "
      f"{np.array_equal(utts2[0].mel.frames, utts[0].mel.frames)}")
print(f"wrote {OUT / 'corpus'}")
