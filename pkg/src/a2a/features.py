"""Acoustic front end.

Log mel filterbanks, per-utterance CMVN, context splicing, dynamic
(delta) features for articulatory targets and speed perturbation.
All functions are pure and operate on 64-bit arrays.
"""

from __future__ import annotations

import enum
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, EmptyFeatureError
from .mlpg import DeltaWindows, apply_windows


class Kind(enum.IntEnum):
    FBK = 0
    SPLICED = 1
    BOTTLENECK = 2
    ARTICULATORY = 3
    CONCAT = 4
    LOGPOST = 5


@dataclass(frozen=True)
class ArticulatoryLayout:
    articulators: tuple = ("TT", "TM", "TB", "UL", "LL", "LI")
    axes: tuple = ("X", "Y", "Z")
    units: str = "mm"

    @property
    def dim(self) -> int:
        return len(self.articulators) * len(self.axes)

    @property
    def names(self) -> list[str]:
        return [f"{a}_{x}" for a in self.articulators for x in self.axes]


LAYOUT = ArticulatoryLayout()
N_ARTIC = LAYOUT.dim


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class FeatureMatrix:
    data: np.ndarray
    frame_shift: float = 10.0
    kind: Kind = Kind.FBK

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"feature matrix must be T x D with T, D >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("feature matrix contains non-finite values")
        self.kind = Kind(self.kind)
        if self.kind == Kind.ARTICULATORY and data.shape[1] not in (N_ARTIC, 3 * N_ARTIC):
            raise DataError(f"articulatory features need {N_ARTIC} or {3 * N_ARTIC} columns, got {data.shape[1]}")
        self.data = data

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class FbankConfig:
    n_mels: int = 40
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    preemphasis: float = 0.97
    window: str = "povey"
    dither: float = 0.0
    log_floor: float = 1e-10
    low_freq: float = 20.0
    high_freq: float = 0.0  # <= 0 means offset from Nyquist
    remove_dc: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.frame_length_ms < self.frame_shift_ms:
            raise ConfigError("frame_length_ms must be >= frame_shift_ms")
        if self.n_mels < 2:
            raise ConfigError("n_mels must be >= 2")
        if self.window not in ("hamming", "povey"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def inverse_mel_scale(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def frame_geometry(sample_rate: int, cfg: FbankConfig) -> tuple[int, int]:
    """Return (frame_len, shift) in samples."""
    frame_len = int(round(sample_rate * cfg.frame_length_ms / 1000.0))
    shift = int(round(sample_rate * cfg.frame_shift_ms / 1000.0))
    return frame_len, shift


def num_frames(n_samples: int, frame_len: int, shift: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // shift + 1


def _band_edges(sample_rate: int, cfg: FbankConfig) -> tuple[float, float]:
    nyquist = 0.5 * sample_rate
    high = cfg.high_freq if cfg.high_freq > 0 else nyquist + cfg.high_freq
    if not 0 <= cfg.low_freq < high <= nyquist:
        raise ConfigError(f"invalid mel band edges low={cfg.low_freq} high={high} for rate {sample_rate}")
    return cfg.low_freq, high


def mel_center_frequencies(sample_rate: int, cfg: FbankConfig) -> np.ndarray:
    low, high = _band_edges(sample_rate, cfg)
    pts = np.linspace(mel_scale(low), mel_scale(high), cfg.n_mels + 2)
    return inverse_mel_scale(pts[1:-1])


def mel_banks(sample_rate: int, n_fft: int, cfg: FbankConfig) -> np.ndarray:
    """Triangular filters in the mel domain, shape (n_mels, n_fft // 2 + 1)."""
    low, high = _band_edges(sample_rate, cfg)
    pts = np.linspace(mel_scale(low), mel_scale(high), cfg.n_mels + 2)
    bin_mel = mel_scale(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def _window(frame_len: int, kind: str) -> np.ndarray:
    n = np.arange(frame_len)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / (frame_len - 1))
    if kind == "povey":
        return hann ** 0.85
    return 0.54 - 0.46 * np.cos(2 * np.pi * n / (frame_len - 1))


def mel_filterbank(wav: Waveform, cfg: FbankConfig | None = None) -> FeatureMatrix:
    """Natural-log mel filterbank energies, one row per frame."""
    cfg = cfg or FbankConfig()
    frame_len, shift = frame_geometry(wav.sample_rate, cfg)
    n_frames = num_frames(len(wav), frame_len, shift)
    if n_frames == 0:
        raise EmptyFeatureError(
            f"audio of {len(wav)} samples is shorter than one frame ({frame_len} samples)")
    x = wav.samples
    if cfg.dither > 0:
        x = x + cfg.dither * np.random.default_rng(cfg.seed).standard_normal(x.shape[0])
    idx = np.arange(frame_len)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = x[idx]
    if cfg.remove_dc:
        frames = frames - frames.mean(axis=1, keepdims=True)
    if cfg.preemphasis:
        frames = np.concatenate(
            [frames[:, :1] * (1 - cfg.preemphasis), frames[:, 1:] - cfg.preemphasis * frames[:, :-1]], axis=1)
    frames = frames * _window(frame_len, cfg.window)
    n_fft = 1 << (frame_len - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_banks(wav.sample_rate, n_fft, cfg).T
    return FeatureMatrix(np.log(np.maximum(energies, cfg.log_floor)), cfg.frame_shift_ms, Kind.FBK)


def utterance_cmvn(fm: FeatureMatrix, var_floor: float = 1e-8) -> FeatureMatrix:
    x = fm.data
    if x.shape[0] < 2:
        raise DegenerateInputError("CMVN needs at least 2 frames")
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), var_floor)
    return FeatureMatrix((x - mean) / np.sqrt(var), fm.frame_shift, fm.kind)


def splice_context(fm: FeatureMatrix, left: int = 1, right: int = 1) -> FeatureMatrix:
    """Stack neighbouring frames, replicating the first/last frame at the edges."""
    if left < 0 or right < 0:
        raise ConfigError("context sizes must be non-negative")
    x = fm.data
    T = x.shape[0]
    offsets = np.arange(-left, right + 1)
    idx = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    out = x[idx].reshape(T, -1)
    kind = fm.kind if left == right == 0 else Kind.SPLICED
    return FeatureMatrix(out, fm.frame_shift, kind)


def append_deltas(fm: FeatureMatrix, win: DeltaWindows | None = None) -> FeatureMatrix:
    """[static | delta | delta-delta] for an 18-dim articulatory matrix."""
    if fm.kind != Kind.ARTICULATORY or fm.dim != N_ARTIC:
        raise DataError(f"append_deltas needs {N_ARTIC}-dim articulatory features, got {fm.kind.name} x {fm.dim}")
    streams = apply_windows(fm.data, win or DeltaWindows())
    return FeatureMatrix(np.concatenate(streams, axis=1), fm.frame_shift, Kind.ARTICULATORY)


def speed_perturb(wav: Waveform, factor: float) -> Waveform:
    """Resample by linear interpolation at positions t * factor.

    Tempo and pitch both scale by ``factor`` (sox ``speed`` semantics).
    """
    if not 0.5 <= factor <= 2.0:
        raise ConfigError(f"speed factor {factor} outside [0.5, 2.0]")
    n = len(wav)
    n_out = max(1, int(np.floor(n / factor + 0.5)))
    pos = np.arange(n_out) * float(factor)
    y = np.interp(pos, np.arange(n, dtype=np.float64), wav.samples)
    return Waveform(y, wav.sample_rate)


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2 or f.getnchannels() != 1:
            raise DataError(f"{path}: only 16-bit mono PCM is supported")
        raw = f.readframes(f.getnframes())
        rate = f.getframerate()
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path: str | Path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(pcm.tobytes())


@dataclass
class Standardizer:
    """Frozen per-column mean/std, e.g. fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-8) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.sqrt(np.maximum(x.var(axis=0), floor)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))
