"""The four-system ablation at toy scale: baseline (conv+BiLSTM encoder with
windowed attention), System 1 (CBHG + mixture attention), System 2 (+ mel
reference encoder), System 3 (+ phoneme reference encoder).

Runs each arm for a couple hundred steps (several minutes total), then
compares validation MSE, alignment error at 1x/1.5x/2x the training length,
and the structural checkpoint diffs between systems.

Run:  python demos/05_four_system_ablation.py
"""

import json
from pathlib import Path

from acconv import convmodel as cm
from acconv import numcore as nc
from acconv import synthdata as sd
from acconv import training as tr

OUT = Path(__file__).parent / "out" / "05_ablation"
OUT.mkdir(parents=True, exist_ok=True)

lang = sd.gen_language(seed=8)
train_utts = sd.gen_corpus(lang, 24, seed=9, length_range=(2, 4))
val_utts = sd.gen_corpus(lang, 6, seed=10, length_range=(2, 4))

widths = dict(prenet_units=16, conv_bank_size=8, conv_channels=16,
              highway_layers=2, enc_rnn_units=16, taco2_conv_layers=2,
              taco2_conv_channels=16, dec_prenet_units=32, rnn_units=32,
              att_hidden=32, gmm_k=5, lsa_filters=8, lsa_kernel=15,
              postnet_layers=3, postnet_channels=16,
              mel_ref_channels=(4, 4, 8, 8, 16, 16),
              phone_embed_dim=16, phone_ref_channels=(4, 4, 8, 8, 16, 16),
              phone_ref_units=16)

report = tr.run_ablation(
    ["baseline", "s1", "s2", "s3"], lang, train_utts, val_utts,
    tr.TrainConfig(max_steps=200, batch_size=8, val_every=100, seed=11),
    model_overrides=widths, out_dir=OUT, eval_utts_per_length=2)

print(f"{'system':<9} {'params':>9} {'val MSE':>9} "
      f"{'err@1x':>8} {'err@1.5x':>9} {'err@2x':>8}")
for name, arm in report.arms.items():
    al = arm.alignment
    print(f"{name:<9} {arm.param_count:>9,} {arm.final_val_mse:>9.4f} "
          f"{al[1.0]:>8.4f} {al[1.5]:>9.4f} {al[2.0]:>8.4f}")

bundles = {n: nc.read_bundle(OUT / n / "best" / "params.bundle")
           for n in report.arms}
d12 = cm.checkpoint_diff(bundles["s1"], bundles["s2"])
d23 = cm.checkpoint_diff(bundles["s2"], bundles["s3"])
print(f"\nS1 -> S2 adds {len(d12['added'])} tensors "
      f"({sorted(set(k.split('.')[0] for k in d12['added']))}), removes none")
print(f"S2 -> S3 adds {len(d23['added'])} tensors "
      f"({sorted(set(k.split('.')[0] for k in d23['added']))}), removes none")
print(f"\nfull report: {OUT / 'report.json'}")
print(json.dumps({k: v["alignment_error"]
                  for k, v in report.to_dict()["arms"].items()}, indent=1))
