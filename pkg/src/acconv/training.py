"""Optimizer, training/fine-tuning loops, and the four-system ablation harness.

Every stochastic choice (shuffling order, dropout masks) is derived from
(config.seed, step), so a run is a pure function of its inputs and resuming
from a checkpoint reproduces the continuation bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as att
from . import convmodel as cm
from . import numcore as nc
from .errors import ContractError, DimensionError, NumericError
from .synthdata import ToyLanguage, Utterance, gen_utterance_fixed_len

PRODUCTION_BATCH_SIZE = 64  # desk-scale default below is 8


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    grad_clip_norm: float = 1.0
    val_every: int = 100
    schedule: str = "constant"  # "constant" | "noam"
    noam_warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ContractError("lr must be > 0 and batch_size >= 1")
        if self.schedule not in ("constant", "noam"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step) -> float:
        if self.schedule == "constant":
            return self.lr
        w = self.noam_warmup
        return self.lr * min((step + 1) / w, np.sqrt(w / (step + 1)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """In-place Adam update with bias correction over name-keyed arrays."""
    state.t += 1
    t = state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} vs param {p.shape} at {k}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def clip_grad_norm(grads: dict, max_norm) -> float:
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------


def assemble_batch(utts: list[Utterance], cfg: cm.SystemConfig) -> dict:
    """Pad a list of utterances into masked arrays ready for the model.

    Each target mel is first padded to a multiple of r by repeating its last
    frame (those frames count as valid); batch padding beyond that is masked
    out of the loss entirely.
    """
    b = len(utts)
    r = cfg.reduction
    ppg_lens = np.array([u.n_ppg_frames for u in utts])
    tgts = [cm.pad_target_mel(u.mel.frames, r) for u in utts]
    mel_lens = np.array([t.shape[0] for t in tgts])
    t_enc, t_out = ppg_lens.max(), mel_lens.max()
    ppg = np.zeros((b, t_enc, cfg.ppg_dim))
    target = np.zeros((b, t_out, cfg.mel_dim))
    for i, u in enumerate(utts):
        ppg[i, : ppg_lens[i]] = u.ppg
        target[i, : mel_lens[i]] = tgts[i]
    dec_lens = mel_lens // r
    enc_mask = (np.arange(t_enc)[None] < ppg_lens[:, None]).astype(float)
    frame_mask = (np.arange(t_out)[None] < mel_lens[:, None]).astype(float)
    step_mask = (np.arange(t_out // r)[None] < dec_lens[:, None]).astype(float)
    t_stop = np.zeros((b, t_out // r))
    t_stop[np.arange(b), dec_lens - 1] = 1.0
    batch = dict(ppg=ppg, target=target, enc_lens=ppg_lens, dec_lens=dec_lens,
                 enc_mask=enc_mask, frame_mask=frame_mask, step_mask=step_mask,
                 t_stop=t_stop, ids=[u.utt_id for u in utts])
    if cfg.use_mel_ref:
        batch["ref_mels"] = [t for t in tgts]  # training ref = ground truth
    if cfg.use_phone_ref:
        batch["ref_phones"] = [u.phonemes for u in utts]
    return batch


def forward_batch(model: cm.ConversionModel, batch: dict, training=False, rng=None):
    enc = model.encode(batch["ppg"], batch["enc_mask"], training=training, rng=rng)
    membs, pembs = model.encode_refs(batch.get("ref_mels"), batch.get("ref_phones"))
    aug = model.augment(enc, batch["enc_lens"], membs, pembs, batch["enc_mask"])
    res = model.decode(aug, batch["enc_lens"], target_mel=batch["target"],
                       dec_lens=batch["dec_lens"], frame_mask=batch["frame_mask"],
                       training=training, rng=rng)
    total, parts = model.loss(res, batch["target"], batch["t_stop"],
                              batch["frame_mask"], batch["step_mask"])
    return total, parts, res


def evaluate_mse(model: cm.ConversionModel, utts: list[Utterance],
                 batch_size=8) -> float:
    """Teacher-forced post-net MSE (eval mode), averaged per utterance."""
    vals = []
    with nc.no_grad():
        for lo in range(0, len(utts), batch_size):
            chunk = utts[lo : lo + batch_size]
            batch = assemble_batch(chunk, model.config)
            _, parts, res = forward_batch(model, batch, training=False)
            d = model.config.mel_dim
            se = ((res.mel_after.data - batch["target"]) ** 2
                  * batch["frame_mask"][:, :, None])
            per = se.reshape(len(chunk), -1).sum(axis=1) \
                / (batch["frame_mask"].sum(axis=1) * d)
            vals.extend(per.tolist())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    losses: list            # per-step training loss
    curve: list             # (step, train_mse, val_mse) at validation points
    best_val: float
    best_params: dict       # name -> ndarray snapshot
    final_params: dict
    wall_clock_s: float


def _batch_for_step(utts, cfg, step, batch_size, seed):
    n = len(utts)
    per_epoch = max(n // batch_size, 1)
    epoch, slot = divmod(step, per_epoch)
    order = np.random.default_rng(
        np.random.SeedSequence([seed, 0x5851, epoch])).permutation(n)
    picks = [utts[i] for i in order[(slot * batch_size) % n :][:batch_size]]
    if not picks:
        picks = [utts[order[0]]]
    return assemble_batch(picks, cfg)


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def train(model: cm.ConversionModel, train_utts, config: TrainConfig,
          val_utts=None, out_dir=None, start_step=0,
          adam: AdamState | None = None, stop_below_val=None) -> TrainResult:
    """Teacher-forced training with gradient clipping and best-val tracking.

    Returns the best-validation parameters (training MSE stands in when no
    validation set is given). With out_dir set, writes best/ and last/
    checkpoints plus curve.csv. stop_below_val ends the run early once the
    validation MSE drops under the target.
    """
    if not train_utts:
        raise ContractError("training corpus is empty")
    cfg = model.config
    params = model.named_parameters()
    if adam is None:
        adam = AdamState.init({k: p.data for k, p in params.items()})
    t0 = time.perf_counter()
    losses, curve = [], []
    best_val, best_params = np.inf, _snapshot(model)

    def validate(step):
        nonlocal best_val, best_params
        probe = val_utts if val_utts else train_utts
        val = evaluate_mse(model, probe)
        train_mse = evaluate_mse(model, train_utts[: max(len(probe), 8)])
        curve.append((step, train_mse, val))
        if val < best_val:
            best_val = val
            best_params = _snapshot(model)

    steps_done = start_step
    for step in range(start_step, config.max_steps):
        batch = _batch_for_step(train_utts, cfg, step, config.batch_size,
                                config.seed)
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, 0xD0, step]))
        for p in params.values():
            p.zero_grad()
        loss, parts, _ = forward_batch(model, batch, training=True, rng=rng)
        if not np.isfinite(loss.data).all():
            raise NumericError(
                f"training loss non-finite at step {step}, batch {batch['ids']}")
        nc.backward(loss)
        losses.append(loss.item())
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
        clip_grad_norm(grads, config.grad_clip_norm)
        adam_step({k: p.data for k, p in params.items()}, grads, adam,
                  config.lr_at(step), config.beta1, config.beta2, config.eps)
        steps_done = step + 1
        if steps_done % config.val_every == 0 or steps_done == config.max_steps:
            validate(steps_done)
            if stop_below_val is not None and best_val < stop_below_val:
                break
    if not curve:
        validate(steps_done)

    result = TrainResult(
        steps=steps_done, losses=losses, curve=curve, best_val=best_val,
        best_params=best_params, final_params=_snapshot(model),
        wall_clock_s=time.perf_counter() - t0)
    if out_dir is not None:
        _write_outputs(Path(out_dir), model, adam, config, result)
    return result


def _write_outputs(out, model, adam, config, result: TrainResult):
    out.mkdir(parents=True, exist_ok=True)
    final = _snapshot(model)
    # best/ holds the returned weights; last/ carries the optimizer for resume
    for name, snap in (("best", result.best_params), ("last", final)):
        for k, p in model.named_parameters().items():
            p.data[...] = snap[k]
        extra = None
        if name == "last":
            extra = {"step": np.array(float(result.steps)),
                     "best_val": np.array(result.best_val)}
            extra.update({f"adam.m.{k}": v for k, v in adam.m.items()})
            extra.update({f"adam.v.{k}": v for k, v in adam.v.items()})
            extra["adam.t"] = np.array(float(adam.t))
        cm.save_checkpoint(out / name, model, extra=extra)
    for k, p in model.named_parameters().items():
        p.data[...] = final[k]
    with open(out / "curve.csv", "w") as f:
        f.write("step,train_mse,val_mse\n")
        for step, tr, va in result.curve:
            f.write(f"{step},{tr!r},{va!r}\n")


def resume_state(ckpt_dir) -> tuple:
    """(config, params, AdamState, start_step) from a last/ checkpoint."""
    config, params, trainer = cm.load_checkpoint(ckpt_dir)
    if trainer is None:
        raise ContractError(f"{ckpt_dir} has no trainer state to resume from")
    m = {k[len("adam.m."):]: v for k, v in trainer.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in trainer.items() if k.startswith("adam.v.")}
    adam = AdamState(m=m, v=v, t=int(trainer["adam.t"]))
    return config, params, adam, int(trainer["step"])


def finetune(ckpt_dir, new_utts, config: TrainConfig, out_dir=None) -> tuple:
    """Continue from a checkpoint's weights on a new corpus; the optimizer
    state is reset. Returns (model, TrainResult)."""
    model, _ = cm.restore_model(ckpt_dir)
    result = train(model, new_utts, config, out_dir=out_dir)
    return model, result


# ---------------------------------------------------------------------------
# length-generalization evaluation and the ablation harness
# ---------------------------------------------------------------------------


@dataclass
class AlignmentEval:
    multiplier: float
    mean_error: float
    nan_free: bool
    mean_steps: float
    alphas: list = field(repr=False, default_factory=list)


def eval_alignment(model: cm.ConversionModel, lang: ToyLanguage, t_ppg,
                   seed, n_utts=4, multiplier=1.0) -> AlignmentEval:
    """Free-running decode on fresh utterances of a controlled PPG length."""
    cfg = model.config
    r = cfg.reduction
    errors, alphas, steps = [], [], []
    finite = True
    with nc.no_grad():
        for i in range(n_utts):
            u = gen_utterance_fixed_len(lang, seed * 1000 + i, int(t_ppg) * 3)
            enc_len = u.n_ppg_frames
            expected = u.n_mel_frames // r
            batch = assemble_batch([u], cfg)
            enc = model.encode(batch["ppg"], None)
            membs, pembs = model.encode_refs(batch.get("ref_mels"),
                                             batch.get("ref_phones"))
            aug = model.augment(enc, batch["enc_lens"], membs, pembs, None)
            res = model.decode(aug, batch["enc_lens"], max_steps=2 * expected,
                               mode="free_running")
            n = int(res.out_lens[0])
            alpha = res.alpha[0, :n]
            oracle = att.decoder_position_oracle(n, r, enc_len)
            errors.append(att.alignment_error(alpha, oracle))
            finite &= bool(np.isfinite(res.mel_after.data).all())
            alphas.append(alpha)
            steps.append(n)
    return AlignmentEval(multiplier=multiplier, mean_error=float(np.mean(errors)),
                         nan_free=finite, mean_steps=float(np.mean(steps)),
                         alphas=alphas)


@dataclass
class AblationArm:
    system: str
    param_count: int = 0
    final_train_mse: float = float("nan")
    final_val_mse: float = float("nan")
    alignment: dict = field(default_factory=dict)  # multiplier -> mean error
    wall_clock_s: float = 0.0
    steps: int = 0
    error: str | None = None


@dataclass
class AblationReport:
    systems: list
    arms: dict            # name -> AblationArm
    train_config: dict
    base_ppg_len: int

    def to_dict(self) -> dict:
        return {
            "systems": list(self.systems),
            "base_ppg_len": self.base_ppg_len,
            "train_config": self.train_config,
            "arms": {
                name: {
                    "system": a.system,
                    "param_count": a.param_count,
                    "final_train_mse": a.final_train_mse,
                    "final_val_mse": a.final_val_mse,
                    "alignment_error": {str(k): v for k, v in a.alignment.items()},
                    "wall_clock_s": a.wall_clock_s,
                    "steps": a.steps,
                    "error": a.error,
                }
                for name, a in self.arms.items()
            },
        }


MULTIPLIERS = (1.0, 1.5, 2.0)


def run_ablation(systems, lang: ToyLanguage, train_utts, val_utts,
                 config: TrainConfig, model_overrides=None, model_seed=0,
                 out_dir=None, eval_utts_per_length=4) -> AblationReport:
    """Train each requested system on the same data and seeds; evaluate
    teacher-forced MSE plus free-running alignment error at 1x/1.5x/2x the
    longest training PPG length. One arm failing does not stop the others."""
    for s in systems:
        if s not in cm.SYSTEM_NAMES:
            raise ContractError(f"unknown system {s!r}; expected {cm.SYSTEM_NAMES}")
    base_len = max(u.n_ppg_frames for u in train_utts)
    arms = {}
    out = Path(out_dir) if out_dir is not None else None
    for name in systems:
        arm = AblationArm(system=name)
        t0 = time.perf_counter()
        try:
            syscfg = cm.SystemConfig.for_system(name, **(model_overrides or {}))
            model = cm.ConversionModel(syscfg, seed=model_seed)
            arm.param_count = model.parameter_count()
            result = train(model, train_utts, config, val_utts=val_utts,
                           out_dir=None if out is None else out / name)
            for k, p in model.named_parameters().items():
                p.data[...] = result.best_params[k]
            arm.steps = result.steps
            arm.final_train_mse = evaluate_mse(model, train_utts)
            arm.final_val_mse = evaluate_mse(model, val_utts or train_utts)
            for mult in MULTIPLIERS:
                ev = eval_alignment(model, lang, round(base_len * mult),
                                    seed=config.seed + int(mult * 10),
                                    n_utts=eval_utts_per_length, multiplier=mult)
                arm.alignment[mult] = ev.mean_error
                if out is not None:
                    for j, alpha in enumerate(ev.alphas):
                        att.save_alignment_pgm(
                            out / name / f"align_{mult}x_{j}.pgm", alpha)
        except Exception as e:  # keep other arms alive
            arm.error = f"{type(e).__name__}: {e}"
        arm.wall_clock_s = time.perf_counter() - t0
        arms[name] = arm
    report = AblationReport(systems=list(systems), arms=arms,
                            train_config=dataclass_dict(config),
                            base_ppg_len=int(base_len))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return report


def dataclass_dict(cfg) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)
