"""The PPG-to-mel conversion network and its four ablation variants.

Wiring: PPG PreNet -> encoder (CBHG or the baseline conv+BiLSTM stack) ->
optional reference-embedding concat -> attention-RNN decoder emitting r mel
frames and one stop logit per step -> residual PostNet.

Batched paths mask padded positions so a padded batch computes exactly what
the per-utterance forward would; the reference encoders run per utterance
because their stride-3 "same" padding depends on the true length.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention as att
from . import numcore as nc
from .errors import ContractError, DimensionError, LoadError, NumericError, VocabularyError
from .numcore import GruParams, LstmParams, Tensor, gru_cell, lstm_cell

SYSTEM_NAMES = ("baseline", "s1", "s2", "s3")


@dataclass
class SystemConfig:
    """One ablation variant plus every layer width.

    The four canonical systems differ only in `encoder`, `attention` and the
    two reference switches; widths default to the production values.
    """

    encoder: str = "cbhg"              # "cbhg" | "taco2"
    attention: str = "gmm"             # "gmm" | "lsa_windowed"
    use_mel_ref: bool = False
    use_phone_ref: bool = False

    ppg_dim: int = 87
    mel_dim: int = 80
    n_phonemes: int = 12

    prenet_units: int = 128
    conv_bank_size: int = 16
    conv_channels: int = 128
    highway_layers: int = 4
    enc_rnn_units: int = 128           # per direction
    taco2_conv_layers: int = 3
    taco2_conv_channels: int = 256
    taco2_kernel: int = 5

    mel_ref_channels: tuple = (32, 32, 64, 64, 128, 128)
    mel_ref_units: int = 4
    phone_embed_dim: int = 128
    phone_ref_channels: tuple = (32, 32, 64, 64, 128, 128)
    phone_ref_units: int = 128

    dec_prenet_units: int = 300
    rnn_units: int = 300               # attention LSTM and decoder LSTM
    att_hidden: int = 128
    gmm_k: int = 10
    gmm_sigma_form: str = "v2"
    gmm_renormalize: bool = False
    lsa_window: int = 20
    lsa_filters: int = 32
    lsa_kernel: int = 31
    postnet_layers: int = 5
    postnet_channels: int = 512
    postnet_kernel: int = 5
    reduction: int = 2
    use_stop_token: bool = True

    dropout_prenet: float = 0.5
    dropout_rnn: float = 0.1

    def __post_init__(self):
        if self.encoder not in ("cbhg", "taco2"):
            raise ContractError(f"unknown encoder {self.encoder!r}")
        if self.attention not in ("gmm", "lsa_windowed"):
            raise ContractError(f"unknown attention {self.attention!r}")
        if self.reduction < 1:
            raise ContractError("reduction factor must be >= 1")

    # -- the four systems ---------------------------------------------------

    @classmethod
    def for_system(cls, name, **overrides) -> "SystemConfig":
        base = {
            "baseline": dict(encoder="taco2", attention="lsa_windowed",
                             use_mel_ref=False, use_phone_ref=False),
            "s1": dict(encoder="cbhg", attention="gmm",
                       use_mel_ref=False, use_phone_ref=False),
            "s2": dict(encoder="cbhg", attention="gmm",
                       use_mel_ref=True, use_phone_ref=False),
            "s3": dict(encoder="cbhg", attention="gmm",
                       use_mel_ref=True, use_phone_ref=True),
        }
        if name not in base:
            raise ContractError(f"unknown system {name!r}; expected one of {SYSTEM_NAMES}")
        return cls(**{**base[name], **overrides})

    @property
    def system_name(self) -> str:
        key = (self.encoder, self.attention, self.use_mel_ref, self.use_phone_ref)
        return {
            ("taco2", "lsa_windowed", False, False): "baseline",
            ("cbhg", "gmm", False, False): "s1",
            ("cbhg", "gmm", True, False): "s2",
            ("cbhg", "gmm", True, True): "s3",
        }.get(key, "custom")

    @classmethod
    def micro(cls, name, **overrides) -> "SystemConfig":
        """Tiny widths for gradient checks and fast tests."""
        small = dict(prenet_units=8, conv_bank_size=4, conv_channels=8,
                     highway_layers=2, enc_rnn_units=4, taco2_conv_layers=2,
                     taco2_conv_channels=8, taco2_kernel=3,
                     mel_ref_channels=(2, 2, 2, 2, 2, 2), mel_ref_units=4,
                     phone_embed_dim=8, phone_ref_channels=(2, 2, 2, 2, 2, 2),
                     phone_ref_units=8, dec_prenet_units=8, rnn_units=8,
                     att_hidden=8, gmm_k=2, lsa_filters=4, lsa_kernel=7,
                     postnet_layers=3, postnet_channels=8, postnet_kernel=3)
        return cls.for_system(name, **{**small, **overrides})

    # -- derived widths -----------------------------------------------------

    @property
    def enc_out_dim(self) -> int:
        return 2 * self.enc_rnn_units

    @property
    def aug_dim(self) -> int:
        return (self.enc_out_dim
                + (self.mel_ref_units if self.use_mel_ref else 0)
                + (self.phone_ref_units if self.use_phone_ref else 0))

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mel_ref_channels"] = list(d["mel_ref_channels"])
        d["phone_ref_channels"] = list(d["phone_ref_channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ContractError(f"unknown SystemConfig keys: {bad}")
        d = dict(d)
        for k in ("mel_ref_channels", "phone_ref_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Parameter container; discovery walks attributes in insertion order."""

    def named_parameters(self, prefix="") -> dict:
        out = {}
        _walk(self, prefix, out)
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(obj, prefix, out):
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
        return
    if isinstance(obj, Module):
        items = obj.__dict__.items()
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        items = ((f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj))
    elif isinstance(obj, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(obj))
    else:
        return
    for name, value in items:
        key = f"{prefix}.{name}" if prefix else name
        _walk(value, key, out)


class Linear(Module):
    def __init__(self, din, dout, rng, bias=True):
        self.w = nc.glorot((din, dout), rng)
        self.b = nc.zeros(dout) if bias else None

    def __call__(self, x):
        lead = x.shape[:-1]
        flat = nc.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        y = nc.matmul(flat, self.w)
        if self.b is not None:
            y = y + self.b
        return nc.reshape(y, (*lead, self.w.shape[1])) if x.ndim != 2 else y


class Conv1dLayer(Module):
    def __init__(self, k, cin, cout, rng, stride=1, bias=True):
        self.kernel = nc.glorot((k, cin, cout), rng)
        self.b = nc.zeros(cout) if bias else None
        self.stride = stride

    def __call__(self, x):
        y = nc.conv1d(x, self.kernel, stride=self.stride, padding="same")
        return y if self.b is None else y + self.b


class Conv2dLayer(Module):
    def __init__(self, kh, kw, cin, cout, stride, rng, bias=True):
        self.kernel = nc.glorot((kh, kw, cin, cout), rng)
        self.b = nc.zeros(cout) if bias else None
        self.stride = stride

    def __call__(self, x):
        y = nc.conv2d(x, self.kernel, stride=self.stride, padding="same")
        return y if self.b is None else y + self.b


class Highway(Module):
    """t * relu(Wh x + bh) + (1 - t) * x, t = sigmoid(Wt x + bt)."""

    def __init__(self, units, rng):
        self.wh = nc.glorot((units, units), rng)
        self.bh = nc.zeros(units)
        self.wt = nc.glorot((units, units), rng)
        self.bt = nc.zeros(units)

    def __call__(self, x):
        lead = x.shape[:-1]
        flat = nc.reshape(x, (-1, x.shape[-1]))
        h = nc.relu(nc.matmul(flat, self.wh) + self.bh)
        t = nc.sigmoid(nc.matmul(flat, self.wt) + self.bt)
        y = t * h + (1.0 - t) * flat
        return nc.reshape(y, (*lead, x.shape[-1]))


def _masked_update(new, old, m_t):
    # m_t: [B, 1] constant; padded rows keep the previous state
    return new * m_t + old * (1.0 - m_t)


class BiGru(Module):
    """Bidirectional GRU over [B, T, D]; merge "concat" or "sum"."""

    def __init__(self, din, units, rng, merge="concat"):
        self.fwd = GruParams.create(din, units, rng)
        self.bwd = GruParams.create(din, units, rng)
        self.units = units
        self.merge = merge

    def __call__(self, x, mask=None):
        """Returns (seq [B,T,2u|u], final_fwd [B,u], final_bwd [B,u])."""
        b, t, _ = x.shape
        steps = [nc.reshape(nc.narrow(x, 1, i, 1), (b, x.shape[2])) for i in range(t)]
        masks = None if mask is None else [
            Tensor(mask[:, i : i + 1].astype(np.float64)) for i in range(t)]
        h = Tensor(np.zeros((b, self.units)))
        outs_f = []
        for i in range(t):
            hn = gru_cell(steps[i], h, self.fwd)
            h = hn if masks is None else _masked_update(hn, h, masks[i])
            outs_f.append(h)
        final_f = h
        h = Tensor(np.zeros((b, self.units)))
        outs_b = [None] * t
        for i in reversed(range(t)):
            hn = gru_cell(steps[i], h, self.bwd)
            h = hn if masks is None else _masked_update(hn, h, masks[i])
            outs_b[i] = h
        final_b = h
        if self.merge == "concat":
            rows = [nc.concat([f, bk], axis=1) for f, bk in zip(outs_f, outs_b)]
        else:
            rows = [f + bk for f, bk in zip(outs_f, outs_b)]
        width = rows[0].shape[1]
        seq = nc.concat([nc.reshape(r, (b, 1, width)) for r in rows], axis=1)
        return seq, final_f, final_b


class BiLstm(Module):
    def __init__(self, din, units, rng):
        self.fwd = LstmParams.create(din, units, rng)
        self.bwd = LstmParams.create(din, units, rng)
        self.units = units

    def __call__(self, x, mask=None):
        b, t, _ = x.shape
        steps = [nc.reshape(nc.narrow(x, 1, i, 1), (b, x.shape[2])) for i in range(t)]
        masks = None if mask is None else [
            Tensor(mask[:, i : i + 1].astype(np.float64)) for i in range(t)]

        def run(params, order):
            h = Tensor(np.zeros((b, self.units)))
            c = Tensor(np.zeros((b, self.units)))
            outs = [None] * t
            for i in order:
                hn, cn = lstm_cell(steps[i], h, c, params)
                if masks is not None:
                    hn = _masked_update(hn, h, masks[i])
                    cn = _masked_update(cn, c, masks[i])
                h, c = hn, cn
                outs[i] = h
            return outs

        outs_f = run(self.fwd, range(t))
        outs_b = run(self.bwd, reversed(range(t)))
        rows = [nc.concat([f, bk], axis=1) for f, bk in zip(outs_f, outs_b)]
        seq = nc.concat([nc.reshape(r, (b, 1, 2 * self.units)) for r in rows], axis=1)
        return seq, None, None


def _apply_mask(x, mask):
    """x: [B, T, D] tensor; mask: [B, T] ndarray or None."""
    if mask is None:
        return x
    return x * Tensor(mask[:, :, None].astype(np.float64))


# ---------------------------------------------------------------------------
# encoder stacks
# ---------------------------------------------------------------------------


class PpgPrenet(Module):
    def __init__(self, cfg: SystemConfig, rng):
        self.fc1 = Linear(cfg.ppg_dim, cfg.prenet_units, rng)
        self.fc2 = Linear(cfg.prenet_units, cfg.prenet_units, rng)
        self.rate = cfg.dropout_prenet

    def __call__(self, x, training=False, rng=None):
        if x.shape[-1] != self.fc1.w.shape[0]:
            raise DimensionError(
                f"ppg prenet expects width {self.fc1.w.shape[0]}, got {x.shape[-1]}")
        h = nc.relu(self.fc1(x))
        h = nc.dropout(h, self.rate, rng, training)
        h = nc.relu(self.fc2(h))
        return nc.dropout(h, self.rate, rng, training)


class CbhgEncoder(Module):
    """Conv bank (k = 1..K) + max pool + projections + highway + BiGRU."""

    def __init__(self, cfg: SystemConfig, rng):
        ch = cfg.conv_channels
        self.bank = [Conv1dLayer(k, cfg.prenet_units, ch, rng)
                     for k in range(1, cfg.conv_bank_size + 1)]
        self.proj1 = Conv1dLayer(3, cfg.conv_bank_size * ch, ch, rng)
        self.proj2 = Conv1dLayer(3, ch, cfg.prenet_units, rng)
        self.highways = [Highway(cfg.prenet_units, rng)
                         for _ in range(cfg.highway_layers)]
        self.gru = BiGru(cfg.prenet_units, cfg.enc_rnn_units, rng, merge="concat")

    def __call__(self, x, mask=None):
        stacks = [_apply_mask(nc.relu(conv(x)), mask) for conv in self.bank]
        h = nc.concat(stacks, axis=2)
        h = _apply_mask(nc.maxpool1d_w2(h), mask)
        h = _apply_mask(nc.relu(self.proj1(h)), mask)
        h = _apply_mask(self.proj2(h), mask)
        h = h + x  # residual over the prenet output
        for hw in self.highways:
            h = hw(h)
        h = _apply_mask(h, mask)
        seq, _, _ = self.gru(h, mask)
        return _apply_mask(seq, mask)


class Taco2Encoder(Module):
    """Baseline encoder: conv stack then BiLSTM."""

    def __init__(self, cfg: SystemConfig, rng):
        self.convs = []
        cin = cfg.prenet_units
        for _ in range(cfg.taco2_conv_layers):
            self.convs.append(Conv1dLayer(cfg.taco2_kernel, cin,
                                          cfg.taco2_conv_channels, rng))
            cin = cfg.taco2_conv_channels
        self.lstm = BiLstm(cin, cfg.enc_rnn_units, rng)

    def __call__(self, x, mask=None):
        h = x
        for conv in self.convs:
            h = _apply_mask(nc.relu(conv(h)), mask)
        seq, _, _ = self.lstm(h, mask)
        return _apply_mask(seq, mask)


# ---------------------------------------------------------------------------
# reference encoders (run per utterance: stride-3 same-padding is
# length-dependent, so batching them would change the math)
# ---------------------------------------------------------------------------


class MelRefEncoder(Module):
    """[T_ref, 80] -> [ceil(T_ref/3), mel_ref_units] in (-1, 1)."""

    def __init__(self, cfg: SystemConfig, rng):
        chans = cfg.mel_ref_channels
        self.convs = []
        cin = 1
        for cout in chans[:-1]:
            self.convs.append(Conv2dLayer(3, 3, cin, cout, (1, 2), rng))
            cin = cout
        self.final_conv = Conv2dLayer(3, 3, cin, chans[-1], (3, 2), rng)
        freq = cfg.mel_dim
        for _ in chans:
            freq = -(-freq // 2)
        self.gru = BiGru(freq * chans[-1], cfg.mel_ref_units, rng, merge="sum")
        self.out_units = cfg.mel_ref_units

    def __call__(self, ref: np.ndarray):
        if ref.ndim != 2 or ref.shape[0] < 3:
            raise ContractError(
                f"mel reference needs at least 3 frames, got shape {ref.shape}")
        h = Tensor(ref[:, :, None])  # [T, F, 1]
        for conv in self.convs:
            h = nc.relu(conv(h))
        h = nc.relu(self.final_conv(h))  # [T', F', C]
        t_out = h.shape[0]
        h = nc.reshape(h, (1, t_out, h.shape[1] * h.shape[2]))
        seq, _, _ = self.gru(h)
        return nc.tanh(nc.reshape(seq, (t_out, self.out_units)))


class PhoneRefEncoder(Module):
    """Phoneme id list -> fixed [phone_ref_units] embedding."""

    def __init__(self, cfg: SystemConfig, rng):
        self.table = nc.glorot((cfg.n_phonemes, cfg.phone_embed_dim), rng)
        chans = cfg.phone_ref_channels
        self.convs = []
        cin = 1
        for cout in chans:
            self.convs.append(Conv2dLayer(3, 3, cin, cout, (1, 2), rng))
            cin = cout
        freq = cfg.phone_embed_dim
        for _ in chans:
            freq = -(-freq // 2)
        self.gru = BiGru(freq * chans[-1], cfg.phone_ref_units, rng, merge="sum")
        self.out_units = cfg.phone_ref_units

    def __call__(self, phones):
        ids = np.asarray(phones, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ContractError("phone reference needs a nonempty id list")
        if ids.min() < 0 or ids.max() >= self.table.shape[0]:
            raise VocabularyError(
                f"phoneme id outside [0, {self.table.shape[0]})")
        h = nc.embedding(self.table, ids)          # [T, E]
        h = nc.reshape(h, (ids.size, h.shape[1], 1))
        for conv in self.convs:
            h = nc.relu(conv(h))
        t_out = h.shape[0]
        h = nc.reshape(h, (1, t_out, h.shape[1] * h.shape[2]))
        _, final_f, final_b = self.gru(h)
        return nc.tanh(nc.reshape(final_f + final_b, (self.out_units,)))


def interp_matrix(src_len, dst_len) -> np.ndarray:
    """[dst_len, src_len] linear time-resampling weights (endpoint aligned)."""
    w = np.zeros((dst_len, src_len))
    if src_len == 1:
        w[:, 0] = 1.0
        return w
    pos = (np.arange(dst_len) * (src_len - 1) / max(dst_len - 1, 1))
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    hi = np.minimum(lo + 1, src_len - 1)
    w[np.arange(dst_len), lo] += 1.0 - frac
    w[np.arange(dst_len), hi] += frac
    return w


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


@dataclass
class DecodeResult:
    mel_before: Tensor       # [B, T_out, mel_dim]
    mel_after: Tensor        # [B, T_out, mel_dim]
    stop_logits: Tensor      # [B, T_out / r]
    alpha: np.ndarray        # [B, T_out / r, enc_len]
    out_lens: np.ndarray | None = None  # free-running decoded lengths (steps)


class Decoder(Module):
    def __init__(self, cfg: SystemConfig, rng):
        self.cfg = cfg
        d_ctx = cfg.aug_dim
        self.pre1 = Linear(cfg.mel_dim, cfg.dec_prenet_units, rng)
        self.pre2 = Linear(cfg.dec_prenet_units, cfg.dec_prenet_units, rng)
        self.att_lstm = LstmParams.create(cfg.dec_prenet_units + d_ctx,
                                          cfg.rnn_units, rng)
        if cfg.attention == "gmm":
            self.att = att.GmmAttentionParams.create(
                cfg.rnn_units, cfg.gmm_k, rng, hidden=cfg.att_hidden,
                sigma_form=cfg.gmm_sigma_form, renormalize=cfg.gmm_renormalize)
        else:
            self.att = att.WindowedLsaParams.create(
                cfg.rnn_units, d_ctx, rng, att_dim=cfg.att_hidden,
                filters=cfg.lsa_filters, kernel=cfg.lsa_kernel,
                window_size=cfg.lsa_window)
        self.dec_lstm = LstmParams.create(cfg.rnn_units + d_ctx, cfg.rnn_units, rng)
        self.mel_proj = Linear(cfg.rnn_units + d_ctx,
                               cfg.reduction * cfg.mel_dim, rng)
        self.stop_proj = Linear(cfg.rnn_units + d_ctx, 1, rng)

    def _prenet(self, frame, training, rng):
        h = nc.relu(self.pre1(frame))
        h = nc.dropout(h, self.cfg.dropout_prenet, rng, training)
        h = nc.relu(self.pre2(h))
        return nc.dropout(h, self.cfg.dropout_prenet, rng, training)


class PostNet(Module):
    def __init__(self, cfg: SystemConfig, rng):
        self.convs = []
        cin = cfg.mel_dim
        for i in range(cfg.postnet_layers):
            last = i == cfg.postnet_layers - 1
            cout = cfg.mel_dim if last else cfg.postnet_channels
            self.convs.append(Conv1dLayer(cfg.postnet_kernel, cin, cout, rng))
            cin = cout

    def __call__(self, x, mask=None):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i != len(self.convs) - 1:
                h = nc.tanh(h)
            h = _apply_mask(h, mask)
        return h


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------


class ConversionModel(Module):
    def __init__(self, config: SystemConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0]))
        self.ppg_prenet = PpgPrenet(config, rng)
        if config.encoder == "cbhg":
            self.encoder = CbhgEncoder(config, rng)
        else:
            self.encoder = Taco2Encoder(config, rng)
        if config.use_mel_ref:
            self.mel_ref = MelRefEncoder(config, rng)
        if config.use_phone_ref:
            self.phone_ref = PhoneRefEncoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.postnet = PostNet(config, rng)
        self.audit()

    # -- width bookkeeping --------------------------------------------------

    def audit(self) -> dict:
        """Closed-form widths from the config vs the parameters actually built."""
        cfg = self.config
        widths = {
            "prenet_out": cfg.prenet_units,
            "enc_out": cfg.enc_out_dim,
            "mel_ref_out": cfg.mel_ref_units if cfg.use_mel_ref else 0,
            "phone_ref_out": cfg.phone_ref_units if cfg.use_phone_ref else 0,
            "aug": cfg.aug_dim,
            "dec_in": cfg.dec_prenet_units + cfg.aug_dim,
            "mel_per_step": cfg.reduction * cfg.mel_dim,
        }
        checks = [
            (self.ppg_prenet.fc2.w.shape[1], widths["prenet_out"], "ppg prenet"),
            (2 * (self.encoder.gru.units if cfg.encoder == "cbhg"
                  else self.encoder.lstm.units), widths["enc_out"], "encoder"),
            (self.decoder.att_lstm.w.shape[0],
             widths["dec_in"] + cfg.rnn_units, "attention LSTM input"),
            (self.decoder.mel_proj.w.shape[1], widths["mel_per_step"], "mel head"),
        ]
        if cfg.use_mel_ref:
            checks.append((self.mel_ref.out_units, cfg.mel_ref_units, "mel ref"))
        if cfg.use_phone_ref:
            checks.append((self.phone_ref.out_units, cfg.phone_ref_units, "phone ref"))
        for got, want, name in checks:
            if got != want:
                raise DimensionError(f"width audit: {name} is {got}, expected {want}")
        return widths

    # -- forward pieces -----------------------------------------------------

    def encode(self, ppg, mask=None, training=False, rng=None):
        """ppg: [B, T, ppg_dim] ndarray -> [B, T, enc_out_dim] tensor."""
        x = self.ppg_prenet(Tensor(ppg), training=training, rng=rng)
        x = _apply_mask(x, mask)
        return self.encoder(x, mask)

    def encode_refs(self, ref_mels=None, ref_phones=None):
        """Per-utterance reference embeddings.

        ref_mels: list of [T_ref_b, mel_dim] arrays; ref_phones: list of id
        lists. Returns (mel_embs | None, phone_embs | None).
        """
        mel_embs = phone_embs = None
        if self.config.use_mel_ref:
            if ref_mels is None:
                raise ContractError("config.use_mel_ref requires reference mels")
            mel_embs = [self.mel_ref(np.asarray(r)) for r in ref_mels]
        if self.config.use_phone_ref:
            if ref_phones is None:
                raise ContractError("config.use_phone_ref requires phoneme ids")
            phone_embs = [self.phone_ref(p) for p in ref_phones]
        return mel_embs, phone_embs

    def augment(self, enc, enc_lens, mel_embs=None, phone_embs=None, mask=None):
        """Concat interpolated mel-ref rows and broadcast phone-ref vector."""
        cfg = self.config
        b, t, _ = enc.shape
        parts = [enc]
        if cfg.use_mel_ref:
            ru = cfg.mel_ref_units
            rows = []
            for i, emb in enumerate(mel_embs):
                w = np.zeros((t, emb.shape[0]))
                tl = int(enc_lens[i])
                w[:tl] = interp_matrix(emb.shape[0], tl)
                rows.append(nc.reshape(nc.matmul(Tensor(w), emb), (1, t, ru)))
            parts.append(nc.concat(rows, axis=0))
        if cfg.use_phone_ref:
            pu = cfg.phone_ref_units
            ones = Tensor(np.ones((t, 1)))
            stack = [nc.reshape(nc.matmul(ones, nc.reshape(e, (1, pu))), (1, t, pu))
                     for e in phone_embs]
            stacked = nc.concat(stack, axis=0)
            parts.append(_apply_mask(stacked, mask))
        return nc.concat(parts, axis=2) if len(parts) > 1 else enc

    def _att_init(self, batch, enc_len):
        if self.config.attention == "gmm":
            return att.gmm_init_state(self.config.gmm_k, batch=batch)
        return att.lsa_init_state(enc_len, batch=batch)

    def _att_step(self, query, state, step_index, memory, processed_memory,
                  enc_lens, len_ratio):
        if self.config.attention == "gmm":
            return att.gmm_step(query, state, memory.shape[1], self.decoder.att)
        return att.lsa_windowed_step(query, state, step_index, len_ratio,
                                     memory, processed_memory, self.decoder.att,
                                     enc_lens=enc_lens)

    def decode(self, enc_aug, enc_lens, target_mel=None, dec_lens=None,
               max_steps=None, mode="teacher_forced", training=False, rng=None,
               frame_mask=None, len_ratio=None, mel_per_enc=3) -> DecodeResult:
        """Run the attention decoder.

        teacher_forced: target_mel [B, T, mel_dim] padded to a multiple of r
        (pad_target_mel does this) and to the batch max; dec_lens gives true
        step counts. free_running: decode until every stop fires or
        max_steps. len_ratio (encoder positions per decoder step, used by the
        windowed baseline) defaults to enc_len/dec_len when teacher forcing
        and to r/mel_per_enc when free running, the corpus frame-rate ratio.
        """
        cfg = self.config
        dec = self.decoder
        b, t_enc, d_aug = enc_aug.shape
        r = cfg.reduction
        teacher = mode == "teacher_forced"
        if teacher:
            if target_mel is None:
                raise ContractError("teacher_forced decoding needs target_mel")
            if target_mel.shape[1] % r:
                # repetition-pad to the step grid; padded frames count as valid
                target_mel = np.stack([pad_target_mel(t, r) for t in target_mel])
            n_steps = target_mel.shape[1] // r
        else:
            if max_steps is None:
                raise ContractError("free_running decoding needs max_steps")
            n_steps = int(max_steps)
        enc_lens = np.asarray(enc_lens, dtype=np.int64)
        if dec_lens is None:
            dec_lens = np.full(b, n_steps, dtype=np.int64)
        if len_ratio is None:
            if teacher:
                len_ratio = enc_lens / np.maximum(
                    np.asarray(dec_lens, dtype=np.float64), 1.0)
            else:
                len_ratio = np.full(b, r / mel_per_enc)

        processed = (att.lsa_process_memory(enc_aug, dec.att)
                     if cfg.attention == "lsa_windowed" else None)
        state = self._att_init(b, t_enc)
        context = Tensor(np.zeros((b, d_aug)))
        zeros_h = Tensor(np.zeros((b, cfg.rnn_units)))
        h_a, c_a, h_d, c_d = zeros_h, zeros_h, zeros_h, zeros_h
        go = Tensor(np.zeros((b, cfg.mel_dim)))

        mel_steps, stop_steps, alphas = [], [], []
        done = np.zeros(b, dtype=bool)
        out_lens = np.full(b, n_steps, dtype=np.int64)
        prev_out = None
        for i in range(n_steps):
            if teacher:
                frame = (go if i == 0 else
                         Tensor(target_mel[:, i * r - 1, :]))
            else:
                frame = go if i == 0 else prev_out
            pn = dec._prenet(frame, training, rng)
            h_a, c_a = lstm_cell(nc.concat([pn, context], axis=1), h_a, c_a,
                                 dec.att_lstm)
            query = nc.dropout(h_a, cfg.dropout_rnn, rng, training)
            alpha, state = self._att_step(query, state, i, enc_aug, processed,
                                          enc_lens, len_ratio)
            context = nc.reshape(
                nc.bmm(nc.reshape(alpha, (b, 1, t_enc)), enc_aug), (b, d_aug))
            h_d, c_d = lstm_cell(nc.concat([query, context], axis=1), h_d, c_d,
                                 dec.dec_lstm)
            hidden = nc.dropout(h_d, cfg.dropout_rnn, rng, training)
            proj_in = nc.concat([hidden, context], axis=1)
            mel_step = dec.mel_proj(proj_in)          # [B, r*mel_dim]
            stop_logit = dec.stop_proj(proj_in)       # [B, 1]
            if not np.isfinite(mel_step.data).all():
                raise NumericError(f"non-finite decoder output at step {i}")
            mel_steps.append(mel_step)
            stop_steps.append(stop_logit)
            alphas.append(alpha.data.reshape(b, t_enc).copy())
            if not teacher:
                prev_out = nc.narrow(mel_step, 1, (r - 1) * cfg.mel_dim, cfg.mel_dim)
                fired = np.zeros(b, dtype=bool)
                if cfg.use_stop_token:
                    fired |= 1.0 / (1.0 + np.exp(-stop_logit.data[:, 0])) > 0.5
                if cfg.attention == "gmm":
                    # attention exhaustion: every mixture mean is past the
                    # sequence end, so the context integrates ~zero mass and
                    # decoding cannot produce content anymore
                    fired |= state.mu.data.min(axis=1) > enc_lens + 1.0
                fired &= ~done
                out_lens[fired] = i + 1
                done |= fired
                if done.all():
                    break

        n_got = len(mel_steps)
        mel_before = nc.reshape(nc.concat(mel_steps, axis=1),
                                (b, n_got * r, cfg.mel_dim))
        stop_logits = nc.concat(stop_steps, axis=1)
        if teacher and frame_mask is not None:
            mel_before = _apply_mask(mel_before, frame_mask)
        residual = self.postnet(mel_before, mask=frame_mask if teacher else None)
        mel_after = mel_before + residual
        if not teacher:
            out_lens = np.minimum(out_lens, n_got)
        return DecodeResult(
            mel_before=mel_before, mel_after=mel_after, stop_logits=stop_logits,
            alpha=np.stack(alphas, axis=1),
            out_lens=None if teacher else out_lens)

    # -- losses ---------------------------------------------------------------

    def loss(self, result: DecodeResult, target_mel, target_stop,
             frame_mask=None, step_mask=None):
        """MSE(before) + MSE(after) + stop BCE, averaged per utterance then
        over the batch; masked elements contribute exactly zero."""
        cfg = self.config
        b, t_out, d = result.mel_before.shape
        tgt = Tensor(target_mel)
        if frame_mask is None:
            frame_mask = np.ones((b, t_out))
        if step_mask is None:
            step_mask = np.ones((b, result.stop_logits.shape[1]))
        fm = Tensor(frame_mask[:, :, None].astype(np.float64))
        sm = Tensor(step_mask.astype(np.float64))
        frames_per = frame_mask.sum(axis=1) * d
        steps_per = step_mask.sum(axis=1)

        def masked_mse(pred):
            se = nc.square(pred - tgt) * fm
            return nc.tsum(nc.reshape(se, (b, t_out * d)), axis=1) / Tensor(frames_per)

        mse_before = masked_mse(result.mel_before)
        mse_after = masked_mse(result.mel_after)

        z = result.stop_logits
        t_stop = Tensor(target_stop.astype(np.float64))
        absz = nc.relu(z) + nc.relu(nc.neg(z))
        bce = (nc.relu(z) - z * t_stop + nc.log(1.0 + nc.exp(nc.neg(absz)))) * sm
        bce = nc.tsum(bce, axis=1) / Tensor(steps_per)
        if not cfg.use_stop_token:
            bce = bce * 0.0

        per_utt = mse_before + mse_after + bce
        total = nc.tmean(per_utt)
        parts = {
            "mse_before": float(mse_before.data.mean()),
            "mse_after": float(mse_after.data.mean()),
            "stop_bce": float(bce.data.mean()),
        }
        return total, parts


def conversion_loss(mel_before, mel_after, stop_logits, target_mel, target_stop):
    """Single-utterance loss with no masking (the documented contract)."""
    mb = mel_before if isinstance(mel_before, Tensor) else Tensor(mel_before)
    ma = mel_after if isinstance(mel_after, Tensor) else Tensor(mel_after)
    z = stop_logits if isinstance(stop_logits, Tensor) else Tensor(stop_logits)
    tgt = Tensor(np.asarray(target_mel))
    ts = Tensor(np.asarray(target_stop, dtype=np.float64))
    mse_b = nc.tmean(nc.square(mb - tgt))
    mse_a = nc.tmean(nc.square(ma - tgt))
    absz = nc.relu(z) + nc.relu(nc.neg(z))
    bce = nc.tmean(nc.relu(z) - z * ts + nc.log(1.0 + nc.exp(nc.neg(absz))))
    return mse_b + mse_a + bce


def pad_target_mel(mel: np.ndarray, r: int) -> np.ndarray:
    """Repeat the final frame until the length divides the reduction factor."""
    t = mel.shape[0]
    pad = (-t) % r
    if pad:
        mel = np.concatenate([mel, np.repeat(mel[-1:], pad, axis=0)])
    return mel


def model_gradcheck(config: SystemConfig, seed=0, t_ppg=5, t_mel=12,
                    coords_per_group=4, h=1e-5):
    """Finite-difference check of the full training loss (eval-mode forward).

    Analytic gradients come from one backward pass; each parameter group is
    then probed at a seeded sample of coordinates. Returns
    (worst_err, per_group dict).
    """
    from .numcore.gradcheck import numeric_grad, scaled_rel_err

    model = ConversionModel(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    # nudge every parameter off the init point: zero biases put the step-0
    # prenet relus exactly on their kink, where FD and the subgradient
    # convention legitimately disagree
    for p in model.parameters():
        p.data += 0.05 * rng.standard_normal(p.data.shape)
    b = 2
    ppg = rng.random((b, t_ppg, config.ppg_dim))
    ppg /= ppg.sum(axis=2, keepdims=True)
    enc_lens = np.array([t_ppg, max(t_ppg - 1, 1)])
    enc_mask = (np.arange(t_ppg)[None, :] < enc_lens[:, None]).astype(float)
    ppg *= enc_mask[:, :, None]
    r = config.reduction
    t_pad = -(-t_mel // r) * r
    target = 0.5 * rng.standard_normal((b, t_pad, config.mel_dim))
    dec_lens = np.array([t_pad // r, max(t_pad // r - 1, 1)])
    frame_mask = (np.arange(t_pad)[None, :] < (dec_lens * r)[:, None]).astype(float)
    step_mask = (np.arange(t_pad // r)[None, :] < dec_lens[:, None]).astype(float)
    target *= frame_mask[:, :, None]
    t_stop = np.zeros((b, t_pad // r))
    t_stop[np.arange(b), dec_lens - 1] = 1.0
    ref_mels = [target[i, : dec_lens[i] * r] for i in range(b)] \
        if config.use_mel_ref else None
    ref_phones = [[0, 1, 2], [1, 0]] if config.use_phone_ref else None

    def loss_fn():
        enc = model.encode(ppg, enc_mask)
        membs, pembs = model.encode_refs(ref_mels, ref_phones)
        aug = model.augment(enc, enc_lens, membs, pembs, enc_mask)
        res = model.decode(aug, enc_lens, target_mel=target, dec_lens=dec_lens,
                           frame_mask=frame_mask)
        total, _ = model.loss(res, target, t_stop, frame_mask, step_mask)
        return total

    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    nc.backward(loss_fn())
    sample_rng = np.random.default_rng(seed + 2)
    per_group, worst = {}, 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if p.data.size > coords_per_group:
            coords = sample_rng.choice(p.data.size, coords_per_group, replace=False)
        fd = numeric_grad(loss_fn, p, h=h, coords=coords)
        err = scaled_rel_err(analytic, fd)
        per_group[name] = err
        worst = max(worst, err)
    return worst, per_group


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(out_dir, model: ConversionModel, extra: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    named = {k: v.data for k, v in model.named_parameters().items()}
    nc.write_bundle(out / "params.bundle", named)
    (out / "config.json").write_text(
        json.dumps({"version": 1, "config": model.config.to_dict()},
                   indent=1, sort_keys=True))
    if extra:
        nc.write_bundle(out / "trainer.bundle", extra)


def load_checkpoint(ckpt_dir):
    """Returns (SystemConfig, params dict, trainer dict | None)."""
    root = Path(ckpt_dir)
    try:
        blob = json.loads((root / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError(f"unreadable checkpoint config: {e}") from e
    if blob.get("version") != 1:
        raise LoadError(f"unsupported checkpoint version {blob.get('version')}")
    try:
        config = SystemConfig.from_dict(blob["config"])
    except (KeyError, ContractError, TypeError) as e:
        raise LoadError(f"bad checkpoint config: {e}") from e
    params = nc.read_bundle(root / "params.bundle")
    trainer = None
    if (root / "trainer.bundle").exists():
        trainer = nc.read_bundle(root / "trainer.bundle")
    return config, params, trainer


def restore_model(ckpt_dir, expect_config: SystemConfig | None = None):
    config, params, trainer = load_checkpoint(ckpt_dir)
    if expect_config is not None and expect_config.to_dict() != config.to_dict():
        raise LoadError("checkpoint config does not match the requested config")
    model = ConversionModel(config, seed=0)
    load_params(model, params)
    return model, trainer


def load_params(model: ConversionModel, params: dict):
    own = model.named_parameters()
    missing = sorted(set(own) - set(params))
    surplus = sorted(set(params) - set(own))
    if missing or surplus:
        raise LoadError(f"checkpoint mismatch: missing={missing[:4]} "
                        f"surplus={surplus[:4]}")
    for name, tensor in own.items():
        if params[name].shape != tensor.data.shape:
            raise LoadError(f"checkpoint shape mismatch at {name}: "
                            f"{params[name].shape} vs {tensor.data.shape}")
        tensor.data[...] = params[name]


def checkpoint_diff(params_a: dict, params_b: dict) -> dict:
    """Structural diff of two named-parameter bundles."""
    a, b = set(params_a), set(params_b)
    changed = sorted(k for k in a & b if params_a[k].shape != params_b[k].shape)
    return {"added": sorted(b - a), "removed": sorted(a - b),
            "shape_changed": changed}
