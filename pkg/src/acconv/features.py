"""Deterministic feature-frontend transforms.

Two jobs: the ASR-side stack-8/skip-3 frame compaction, and per-dimension
min-max normalization of mel spectrograms into [-4, 4]. Everything here is
a pure function over numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateStatsError
from .numcore import read_tensor, write_tensor

NORM_LO, NORM_HI = -4.0, 4.0


@dataclass
class MelSpectrogram:
    """[T, n_mels] frames plus their normalization state."""

    frames: np.ndarray
    state: str = "raw"  # "raw" | "normalized"
    frame_shift_ms: int = 10
    window_ms: int = 50

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"mel frames must be [T>=1, D], got {self.frames.shape}")
        if self.state not in ("raw", "normalized"):
            raise ContractError(f"unknown mel state {self.state!r}")
        if self.state == "normalized" and (
                self.frames.min() < NORM_LO or self.frames.max() > NORM_HI):
            raise ContractError("normalized mel outside [-4, 4]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass
class StackSpec:
    stack: int = 8
    skip: int = 3

    def __post_init__(self):
        if self.stack < 1 or self.skip < 1:
            raise ContractError(f"stack/skip must be >= 1, got {self.stack}/{self.skip}")


@dataclass
class NormStats:
    """Per-dimension extrema fitted on a training corpus."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        flat = np.flatnonzero(self.maximum <= self.minimum)
        if flat.size:
            raise DegenerateStatsError(
                f"max <= min in dimension(s) {flat.tolist()}: constant feature")

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum


def stack_and_skip(x: np.ndarray, spec: StackSpec = StackSpec()) -> np.ndarray:
    """Concatenate `stack` consecutive rows, advancing `skip` rows per output.

    Output row r holds input rows r*skip .. r*skip+stack-1; indices past the
    end are clamped to the final row (edge replication). Output length is
    ceil(T / skip).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"stack_and_skip needs a [T>=1, D] matrix, got {x.shape}")
    t = x.shape[0]
    t_out = -(-t // spec.skip)
    idx = np.arange(t_out)[:, None] * spec.skip + np.arange(spec.stack)[None, :]
    idx = np.minimum(idx, t - 1)
    return x[idx].reshape(t_out, spec.stack * x.shape[1])


def fit_norm(corpus: list[MelSpectrogram]) -> NormStats:
    """Per-dimension extrema over every frame of every utterance."""
    if not corpus:
        raise ContractError("fit_norm needs a nonempty corpus")
    stacked = np.vstack([m.frames for m in corpus])
    return NormStats(minimum=stacked.min(axis=0), maximum=stacked.max(axis=0))


def normalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    """Map [min, max] -> [-4, 4]; out-of-range values clip."""
    if mel.state != "raw":
        raise ContractError("normalize: input is already normalized")
    y = NORM_LO + (NORM_HI - NORM_LO) * (mel.frames - stats.minimum) / stats.span
    np.clip(y, NORM_LO, NORM_HI, out=y)
    return MelSpectrogram(y, state="normalized",
                          frame_shift_ms=mel.frame_shift_ms, window_ms=mel.window_ms)


def denormalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    """Exact inverse of normalize for in-range values."""
    if mel.state != "normalized":
        raise ContractError("denormalize: input is not normalized")
    x = stats.minimum + (mel.frames - NORM_LO) * stats.span / (NORM_HI - NORM_LO)
    return MelSpectrogram(x, state="raw",
                          frame_shift_ms=mel.frame_shift_ms, window_ms=mel.window_ms)


def save_stats(path, stats: NormStats):
    """Stats file is a [2, D] tensor: row 0 = min, row 1 = max."""
    write_tensor(path, np.stack([stats.minimum, stats.maximum]))


def load_stats(path) -> NormStats:
    arr = read_tensor(path)
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise ContractError(f"stats tensor must be [2, D], got {arr.shape}")
    return NormStats(minimum=arr[0], maximum=arr[1])


def save_mel(path, mel: MelSpectrogram):
    write_tensor(path, mel.frames)


def load_mel(path, state="raw") -> MelSpectrogram:
    return MelSpectrogram(read_tensor(path), state=state)
