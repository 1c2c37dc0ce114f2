"""Seeded toy corpora: (phonemes, PPGs, mel, oracle alignment) quadruples.

A ToyLanguage assigns each phoneme a mel template and a row-stochastic
confusion row over PPG classes. Utterances are template sequences plus
Gaussian noise; PPGs run at a third of the mel frame rate, which is exactly
the length mismatch the decoder's attention has to bridge.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .features import MelSpectrogram
from .numcore import read_bundle, read_tensor, write_bundle, write_tensor

MEL_PER_PPG = 3          # mel frames per PPG frame (stack-8/skip-3 rate)
TEMPLATE_CLIP = 3.0      # templates live well inside the normalized [-4, 4]
NOISE_SCALE = 0.05
DURATION_RANGE = (3, 9)  # mel frames per phoneme, inclusive
CONFUSION_MAIN = 0.7
UNIFORM_MIX = 0.1


@dataclass
class ToyLanguage:
    n_phonemes: int
    ppg_dim: int
    mel_templates: np.ndarray  # [n_phonemes, n_mels]
    confusion: np.ndarray      # [n_phonemes, ppg_dim], rows sum to 1
    speaker: str = "a"

    def __post_init__(self):
        rowsum = self.confusion.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-9:
            raise ContractError("confusion rows must sum to 1")
        if template_separation(self.mel_templates) <= 0.5:
            raise ContractError("mel templates are not distinguishable")

    @property
    def n_mels(self) -> int:
        return self.mel_templates.shape[1]


@dataclass
class Utterance:
    utt_id: str
    phonemes: list          # phoneme ids
    durations_mel: list     # mel frames per phoneme
    mel: MelSpectrogram     # [T_mel, n_mels], normalized scale
    ppg: np.ndarray         # [T_ppg, ppg_dim], rows on the simplex
    oracle_align: np.ndarray  # [T_ppg] position of each ppg frame in `phonemes`

    @property
    def n_mel_frames(self) -> int:
        return self.mel.n_frames

    @property
    def n_ppg_frames(self) -> int:
        return self.ppg.shape[0]


def template_separation(templates: np.ndarray) -> float:
    """Smallest pairwise L2 distance between rows."""
    n = templates.shape[0]
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, float(np.linalg.norm(templates[i] - templates[j])))
    return best


def gen_language(seed, n_phonemes=12, ppg_dim=87, n_mels=80, speaker="a") -> ToyLanguage:
    """Deterministic language; speaker "b" perturbs speaker "a" templates."""
    if speaker not in ("a", "b"):
        raise ContractError(f"unknown speaker {speaker!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A]))
    templates = np.clip(rng.standard_normal((n_phonemes, n_mels)),
                        -TEMPLATE_CLIP, TEMPLATE_CLIP)
    while template_separation(templates) <= 0.5:  # vanishingly rare at 80 dims
        templates = np.clip(rng.standard_normal((n_phonemes, n_mels)),
                            -TEMPLATE_CLIP, TEMPLATE_CLIP)
    if speaker == "b":
        brng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1B]))
        templates = np.clip(templates + 0.6 * brng.standard_normal(templates.shape),
                            -TEMPLATE_CLIP, TEMPLATE_CLIP)
    primary = rng.choice(ppg_dim, size=n_phonemes, replace=False)
    confusion = np.zeros((n_phonemes, ppg_dim))
    for p in range(n_phonemes):
        confusion[p, primary[p]] = CONFUSION_MAIN
        others = rng.choice(ppg_dim, size=2, replace=False)
        confusion[p, others[0]] += 0.2
        confusion[p, others[1]] += 0.1
    return ToyLanguage(n_phonemes, ppg_dim, templates, confusion, speaker)


def _render_mel(lang, phones, durations, rng) -> np.ndarray:
    rows = np.repeat(np.asarray(phones), durations)
    mel = lang.mel_templates[rows] + NOISE_SCALE * rng.standard_normal(
        (len(rows), lang.n_mels))
    return np.clip(mel, -4.0, 4.0)


def _phone_position_at(durations, t_mel) -> np.ndarray:
    """Map each mel frame index to its position in the phoneme list."""
    ends = np.cumsum(durations)
    return np.searchsorted(ends, np.arange(t_mel), side="right")


def gen_utterance(lang: ToyLanguage, seed, min_phones=1, max_phones=8,
                  utt_id=None) -> Utterance:
    if not 1 <= min_phones <= max_phones:
        raise ContractError(f"bad phone range [{min_phones}, {max_phones}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2A]))
    n_phones = int(rng.integers(min_phones, max_phones + 1))
    phones = rng.integers(0, lang.n_phonemes, size=n_phones).tolist()
    durations = rng.integers(DURATION_RANGE[0], DURATION_RANGE[1] + 1,
                             size=n_phones).tolist()
    t_mel = int(sum(durations))
    mel = _render_mel(lang, phones, durations, rng)

    t_ppg = -(-t_mel // MEL_PER_PPG)
    centers = np.minimum(np.arange(t_ppg) * MEL_PER_PPG + 1, t_mel - 1)
    positions = _phone_position_at(durations, t_mel)[centers]
    ppg = (1.0 - UNIFORM_MIX) * lang.confusion[np.asarray(phones)[positions]]
    ppg = ppg + UNIFORM_MIX / lang.ppg_dim
    return Utterance(
        utt_id=utt_id or f"utt{seed:08d}",
        phonemes=phones,
        durations_mel=durations,
        mel=MelSpectrogram(mel, state="normalized"),
        ppg=ppg,
        oracle_align=positions,
    )


def gen_corpus(lang: ToyLanguage, n, seed, length_range=(1, 8)) -> list[Utterance]:
    if n < 1:
        raise ContractError(f"corpus size must be >= 1, got {n}")
    lo, hi = length_range
    seeds = np.random.SeedSequence([int(seed), 0x3A]).generate_state(n)
    return [gen_utterance(lang, int(s), lo, hi, utt_id=f"utt{i:05d}")
            for i, s in enumerate(seeds)]


def gen_utterance_fixed_len(lang: ToyLanguage, seed, t_mel,
                            utt_id=None) -> Utterance:
    """Like gen_utterance but with an exact mel frame count (the last
    phoneme's duration is truncated to land on t_mel); used by the
    length-generalization evaluations."""
    if t_mel < 1:
        raise ContractError(f"t_mel must be >= 1, got {t_mel}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x2B]))
    phones, durations, total = [], [], 0
    while total < t_mel:
        phones.append(int(rng.integers(0, lang.n_phonemes)))
        d = int(rng.integers(DURATION_RANGE[0], DURATION_RANGE[1] + 1))
        d = min(d, t_mel - total)
        durations.append(d)
        total += d
    mel = _render_mel(lang, phones, durations, rng)
    t_ppg = -(-t_mel // MEL_PER_PPG)
    centers = np.minimum(np.arange(t_ppg) * MEL_PER_PPG + 1, t_mel - 1)
    positions = _phone_position_at(durations, t_mel)[centers]
    ppg = (1.0 - UNIFORM_MIX) * lang.confusion[np.asarray(phones)[positions]]
    ppg = ppg + UNIFORM_MIX / lang.ppg_dim
    return Utterance(utt_id or f"fixed{seed:08d}", phones, durations,
                     MelSpectrogram(mel, state="normalized"), ppg, positions)


def reference_mel(lang: ToyLanguage, utt: Utterance, seed) -> MelSpectrogram:
    """A fresh noise realization of the same content; stands in for the
    native-TTS reference at conversion time."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4A]))
    return MelSpectrogram(
        _render_mel(lang, utt.phonemes, utt.durations_mel, rng), state="normalized")


def nearest_template_accuracy(lang: ToyLanguage, utts: list[Utterance]) -> float:
    """Fraction of mel frames whose nearest template is the generating one."""
    hits = total = 0
    for u in utts:
        truth = np.asarray(u.phonemes)[_phone_position_at(u.durations_mel,
                                                          u.n_mel_frames)]
        d = ((u.mel.frames[:, None, :] - lang.mel_templates[None, :, :]) ** 2).sum(-1)
        hits += int((d.argmin(axis=1) == truth).sum())
        total += u.n_mel_frames
    return hits / total


# ---------------------------------------------------------------------------
# corpus directory layout: TNSR per array + corpus.json index
# ---------------------------------------------------------------------------


def export_corpus(out_dir, lang: ToyLanguage, utts: list[Utterance]):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bundle(out / "language.bundle",
                 {"mel_templates": lang.mel_templates, "confusion": lang.confusion})
    entries = []
    for u in utts:
        files = {"mel": f"{u.utt_id}.mel.tnsr", "ppg": f"{u.utt_id}.ppg.tnsr",
                 "align": f"{u.utt_id}.align.tnsr"}
        write_tensor(out / files["mel"], u.mel.frames)
        write_tensor(out / files["ppg"], u.ppg)
        write_tensor(out / files["align"], u.oracle_align.astype(np.float64))
        entries.append({"id": u.utt_id, "phonemes": list(map(int, u.phonemes)),
                        "durations_mel": list(map(int, u.durations_mel)),
                        "files": files})
    manifest = {"version": 1, "speaker": lang.speaker,
                "n_phonemes": lang.n_phonemes, "ppg_dim": lang.ppg_dim,
                "utterances": entries}
    (out / "corpus.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def import_corpus(corpus_dir):
    """Returns (ToyLanguage, list[Utterance])."""
    root = Path(corpus_dir)
    try:
        manifest = json.loads((root / "corpus.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable corpus index in {corpus_dir}: {e}") from e
    if manifest.get("version") != 1:
        raise FormatError(f"unsupported corpus manifest version {manifest.get('version')}")
    bun = read_bundle(root / "language.bundle")
    lang = ToyLanguage(manifest["n_phonemes"], manifest["ppg_dim"],
                       bun["mel_templates"], bun["confusion"],
                       speaker=manifest["speaker"])
    utts = []
    for e in manifest["utterances"]:
        mel = MelSpectrogram(read_tensor(root / e["files"]["mel"]), state="normalized")
        ppg = read_tensor(root / e["files"]["ppg"])
        align = read_tensor(root / e["files"]["align"]).astype(np.int64)
        utts.append(Utterance(e["id"], list(e["phonemes"]),
                              list(e["durations_mel"]), mel, ppg, align))
    return lang, utts
