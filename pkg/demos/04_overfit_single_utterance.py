"""Train a small conversion model until it memorizes one utterance, then
decode it free-running and inspect the alignment.

Takes ~30 s at the reduced widths used here.

Run:  python demos/04_overfit_single_utterance.py
"""

from pathlib import Path

import acconv.numcore as nc
from acconv import attention as att
from acconv import convmodel as cm
from acconv import synthdata as sd
from acconv import training as tr

OUT = Path(__file__).parent / "out" / "04_overfit"
OUT.mkdir(parents=True, exist_ok=True)

lang = sd.gen_language(seed=3)
utt = sd.gen_utterance(lang, seed=4, min_phones=3, max_phones=5)
print(f"target: {utt.n_mel_frames} mel frames from phones {utt.phonemes}")

widths = dict(prenet_units=16, conv_bank_size=8, conv_channels=16,
              highway_layers=2, enc_rnn_units=16, dec_prenet_units=32,
              rnn_units=32, att_hidden=32, gmm_k=5, postnet_layers=3,
              postnet_channels=16)
model = cm.ConversionModel(cm.SystemConfig.for_system("s1", **widths), seed=1)
print(f"System 1 at demo widths: {model.parameter_count():,} parameters")

cfg = tr.TrainConfig(max_steps=400, batch_size=1, val_every=50, seed=2)
result = tr.train(model, [utt], cfg, stop_below_val=0.02, out_dir=OUT / "run")
for step, train_mse, val_mse in result.curve:
    print(f"  step {step:4d}: teacher-forced MSE {val_mse:.4f}")
print(f"stopped after {result.steps} steps, best {result.best_val:.4f}")

for k, p in model.named_parameters().items():
    p.data[...] = result.best_params[k]

with nc.no_grad():
    batch = tr.assemble_batch([utt], model.config)
    enc = model.encode(batch["ppg"])
    aug = model.augment(enc, batch["enc_lens"])
    res = model.decode(aug, batch["enc_lens"], max_steps=3 * utt.n_ppg_frames,
                       mode="free_running")
n = int(res.out_lens[0])
mel = res.mel_after.data[0, : n * model.config.reduction]
print(f"free-running decode: {mel.shape[0]} frames (target {utt.n_mel_frames})")

alpha = res.alpha[0, :n]
oracle = att.decoder_position_oracle(n, model.config.reduction, utt.n_ppg_frames)
print(f"alignment error vs the 3:1 diagonal: "
      f"{att.alignment_error(alpha, oracle):.4f}")
att.save_alignment_pgm(OUT / "alignment.pgm", alpha)
nc.write_tensor(OUT / "decoded_mel.tnsr", mel)
print(f"wrote {OUT / 'alignment.pgm'} and decoded_mel.tnsr")
