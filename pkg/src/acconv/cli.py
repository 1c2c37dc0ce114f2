"""Operator entry point: corpus generation, training, conversion, gradient
checking, and the four-system ablation.

Commands compose through files (TNSR tensors, JSON configs/reports, PGM
images). Every run writes exactly one manifest.json into --out and never
writes outside it. Exit codes: 0 success, 1 usage, 2 data/format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as att
from . import convmodel as cm
from . import numcore as nc
from . import synthdata as sd
from . import training as tr
from .errors import (ContractError, DegenerateStatsError, DimensionError,
                     FormatError, LoadError, NumericError, SchemaError,
                     UsageError, VocabularyError)

CONFIG_VERSION = 1
SWITCH_KEYS = {"encoder", "attention", "use_mel_ref", "use_phone_ref"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def parse_config(path):
    """Read a run config: {"version": 1, "system": ..., "model": {...},
    "train": {...}}. Unknown keys raise SchemaError naming them."""
    try:
        blob = json.loads(Path(path).read_text())
    except OSError as e:
        raise SchemaError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise SchemaError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(blob, dict):
        raise SchemaError("config root must be a JSON object")
    bad = sorted(set(blob) - {"version", "system", "model", "train"})
    if bad:
        raise SchemaError(f"unknown config keys: {bad}")
    if blob.get("version") != CONFIG_VERSION:
        raise SchemaError(f"config version must be {CONFIG_VERSION}, "
                          f"got {blob.get('version')!r}")
    system = blob.get("system", "s1")
    if system not in cm.SYSTEM_NAMES:
        raise SchemaError(f"unknown system {system!r}; expected one of "
                          f"{list(cm.SYSTEM_NAMES)}")
    model_over = dict(blob.get("model", {}))
    known_model = {f.name for f in dataclasses.fields(cm.SystemConfig)}
    bad = sorted((set(model_over) - known_model) | (set(model_over) & SWITCH_KEYS))
    if bad:
        raise SchemaError(f"bad model override keys: {bad}")
    for k in ("mel_ref_channels", "phone_ref_channels"):
        if k in model_over:
            model_over[k] = tuple(model_over[k])
    train_over = blob.get("train", {})
    known_train = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    bad = sorted(set(train_over) - known_train)
    if bad:
        raise SchemaError(f"bad train keys: {bad}")
    try:
        syscfg = cm.SystemConfig.for_system(system, **model_over)
        traincfg = tr.TrainConfig(**train_over)
    except (ContractError, TypeError) as e:
        raise SchemaError(f"config values rejected: {e}") from e
    return system, syscfg, traincfg, model_over


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir, command, args, seed, started, config_path=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": [str(a) for a in args],
        "config": None if config_path is None else str(config_path),
        "seed": seed,
        "git_describe": _git_describe(),
        "out_dir": str(out),
        "started_utc": started,
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "package_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _check_out_dir(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output dir {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_corpus(utts):
    """Deterministic train/val split: last tenth (at least 1) validates."""
    n_val = max(1, len(utts) // 10) if len(utts) > 1 else 0
    if n_val == 0:
        return utts, []
    return utts[:-n_val], utts[-n_val:]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if args.min_phones < 1 or args.max_phones < args.min_phones:
        raise UsageError("need 1 <= --min-phones <= --max-phones")
    started = _now()
    out = _check_out_dir(args.out, args.force)
    lang = sd.gen_language(args.seed, speaker=args.speaker)
    utts = sd.gen_corpus(lang, args.n, args.seed,
                         length_range=(args.min_phones, args.max_phones))
    sd.export_corpus(out, lang, utts)
    write_manifest(out, "gen", sys.argv[1:], args.seed, started)
    print(f"wrote {len(utts)} utterances to {out}")
    return 0


def _load_train_inputs(args):
    system, syscfg, traincfg, _ = parse_config(args.config)
    lang, utts = sd.import_corpus(args.corpus)
    train_utts, val_utts = _split_corpus(utts)
    return system, syscfg, traincfg, lang, train_utts, val_utts


def cmd_train(args):
    started = _now()
    system, syscfg, traincfg, lang, train_utts, val_utts = _load_train_inputs(args)
    out = _check_out_dir(args.out, args.force)
    model = cm.ConversionModel(syscfg, seed=traincfg.seed)
    result = tr.train(model, train_utts, traincfg, val_utts=val_utts, out_dir=out)
    write_manifest(out, "train", sys.argv[1:], traincfg.seed, started,
                   config_path=args.config)
    print(f"{system}: {result.steps} steps, best val MSE {result.best_val:.6f}")
    return 0


def cmd_finetune(args):
    started = _now()
    system, syscfg, traincfg, lang, train_utts, val_utts = _load_train_inputs(args)
    ckpt_config, _, _ = cm.load_checkpoint(args.from_ckpt)
    if ckpt_config.to_dict() != syscfg.to_dict():
        raise LoadError("checkpoint config does not match --config "
                        f"(checkpoint is {ckpt_config.system_name!r})")
    out = _check_out_dir(args.out, args.force)
    model, _ = cm.restore_model(args.from_ckpt)
    result = tr.train(model, train_utts, traincfg, val_utts=val_utts, out_dir=out)
    write_manifest(out, "finetune", sys.argv[1:], traincfg.seed, started,
                   config_path=args.config)
    print(f"{system}: fine-tuned {result.steps} steps, "
          f"best val MSE {result.best_val:.6f}")
    return 0


def cmd_convert(args):
    started = _now()
    model, _ = cm.restore_model(args.checkpoint)
    cfg = model.config
    if cfg.use_mel_ref and args.ref_mel is None:
        raise UsageError("this checkpoint has use_mel_ref=true: --ref-mel is required")
    if cfg.use_phone_ref and args.phones is None:
        raise UsageError("this checkpoint has use_phone_ref=true: --phones is required")
    ppg = nc.read_tensor(args.ppg)
    if ppg.ndim != 2 or ppg.shape[1] != cfg.ppg_dim:
        raise DimensionError(f"--ppg must be [T, {cfg.ppg_dim}], got {ppg.shape}")
    out = _check_out_dir(args.out, args.force)
    ref_mels = None
    if args.ref_mel is not None:
        ref_mels = [nc.read_tensor(args.ref_mel)]
    ref_phones = None
    if args.phones is not None:
        try:
            ref_phones = [[int(tok) for tok in args.phones.split(",") if tok]]
        except ValueError as e:
            raise UsageError(f"--phones must be comma-separated ids: {e}") from e

    t_ppg = ppg.shape[0]
    max_steps = args.max_steps or 2 * (-(-3 * t_ppg // cfg.reduction))
    with nc.no_grad():
        enc = model.encode(ppg[None])
        membs, pembs = model.encode_refs(ref_mels, ref_phones)
        aug = model.augment(enc, [t_ppg], membs, pembs)
        res = model.decode(aug, [t_ppg], max_steps=max_steps, mode="free_running")
    n = int(res.out_lens[0])
    mel = res.mel_after.data[0, : n * cfg.reduction]
    stop_trace = 1.0 / (1.0 + np.exp(-res.stop_logits.data[0, :n]))
    alpha = res.alpha[0, :n]
    nc.write_tensor(out / "mel_after.tnsr", mel)
    nc.write_tensor(out / "stop.tnsr", stop_trace)
    nc.write_tensor(out / "alignment.tnsr", alpha)
    att.save_alignment_csv(out / "alignment.csv", alpha)
    att.save_alignment_pgm(out / "alignment.pgm", alpha)
    write_manifest(out, "convert", sys.argv[1:], 0, started)
    print(f"decoded {mel.shape[0]} mel frames ({n} steps) from {t_ppg} ppg frames")
    return 0


GRADCHECK_THRESH_PRIMITIVE = 1e-6
GRADCHECK_THRESH_MODEL = 1e-4


def run_gradcheck(scale="micro", seed=0):
    """Primitive FD suite plus end-to-end micro models; returns row dicts."""
    rows = [
        {"component": f"primitive.{r.name}", "max_rel_err": r.max_err,
         "threshold": r.threshold, "passed": r.passed}
        for r in nc.primitive_suite(seed=seed)
    ]
    systems = ("s3", "baseline") if scale == "micro" else cm.SYSTEM_NAMES
    coords = 2 if scale == "micro" else 4
    for name in systems:
        worst, _ = cm.model_gradcheck(cm.SystemConfig.micro(name), seed=seed,
                                      coords_per_group=coords)
        rows.append({"component": f"model.{name}.micro", "max_rel_err": worst,
                     "threshold": GRADCHECK_THRESH_MODEL, "passed":
                         worst < GRADCHECK_THRESH_MODEL})
    return rows


def cmd_gradcheck(args):
    started = _now()
    out = _check_out_dir(args.out, args.force)
    rows = run_gradcheck(scale=args.scale, seed=args.seed)
    width = max(len(r["component"]) for r in rows)
    for r in rows:
        verdict = "PASS" if r["passed"] else "FAIL"
        print(f"{r['component']:<{width}}  {r['max_rel_err']:.3e}  "
              f"< {r['threshold']:.0e}  {verdict}")
    (out / "gradcheck.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    write_manifest(out, "gradcheck", sys.argv[1:], args.seed, started)
    failed = [r for r in rows if not r["passed"]]
    if failed:
        print(f"{len(failed)} component(s) FAILED")
        raise NumericError(f"gradient check failed for "
                           f"{[r['component'] for r in failed]}")
    print(f"all {len(rows)} components passed")
    return 0


def cmd_ablate(args):
    started = _now()
    systems = [s for s in args.systems.split(",") if s]
    for s in systems:
        if s not in cm.SYSTEM_NAMES:
            raise UsageError(f"unknown system {s!r}; choose from "
                             f"{','.join(cm.SYSTEM_NAMES)}")
    if not systems:
        raise UsageError("--systems must name at least one system")
    _, syscfg, traincfg, model_over = parse_config(args.config)
    lang, utts = sd.import_corpus(args.corpus)
    train_utts, val_utts = _split_corpus(utts)
    out = _check_out_dir(args.out, args.force)
    report = tr.run_ablation(systems, lang, train_utts, val_utts, traincfg,
                             model_overrides=model_over, out_dir=out,
                             eval_utts_per_length=args.eval_utts)
    write_manifest(out, "ablate", sys.argv[1:], traincfg.seed, started,
                   config_path=args.config)
    for name, arm in report.arms.items():
        status = arm.error or f"val MSE {arm.final_val_mse:.6f}"
        print(f"{name}: {status}")
    if any(a.error for a in report.arms.values()):
        raise NumericError("one or more ablation arms failed; see report.json")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="acconv",
                description="Desk-scale PPG-to-mel accent conversion lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--speaker", choices=["a", "b"], default="a")
    g.add_argument("--min-phones", type=int, default=1)
    g.add_argument("--max-phones", type=int, default=8)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a system on a corpus")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    f.add_argument("--config", required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--from", dest="from_ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--force", action="store_true")
    f.set_defaults(fn=cmd_finetune)

    c = sub.add_parser("convert", help="free-running PPG -> mel conversion")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--ppg", required=True)
    c.add_argument("--ref-mel")
    c.add_argument("--phones")
    c.add_argument("--max-steps", type=int)
    c.add_argument("--out", required=True)
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_convert)

    gc = sub.add_parser("gradcheck", help="finite-difference verification")
    gc.add_argument("--scale", choices=["micro", "small"], default="micro")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out", required=True)
    gc.add_argument("--force", action="store_true")
    gc.set_defaults(fn=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="train and compare ablation systems")
    ab.add_argument("--systems", required=True,
                    help="comma list from baseline,s1,s2,s3")
    ab.add_argument("--config", required=True)
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--eval-utts", type=int, default=4)
    ab.add_argument("--force", action="store_true")
    ab.set_defaults(fn=cmd_ablate)
    return p


USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3
_DATA_ERRORS = (SchemaError, FormatError, LoadError, DegenerateStatsError,
                ContractError, VocabularyError, DimensionError,
                FileNotFoundError, IsADirectoryError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_EXIT
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
