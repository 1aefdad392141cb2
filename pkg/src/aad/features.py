"""Log-Mel features, model input shaping, normalization and valve preprocessing."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from . import ConfigurationError, DimensionError, EmptyInputError, FormatError

FRAME_SIZE = 1024
HOP_SIZE = 512
N_MELS = 64
N_STACK = 5
WINDOW_WIDTH = 64
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

FEAT_MAGIC = b"AADF"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHIH4x")  # 16 bytes


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # [n_frames, n_mels]
    frame_size: int = FRAME_SIZE
    hop_size: int = HOP_SIZE
    n_mels: int = N_MELS
    sample_rate: int = 16000

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "LogMelSpectrogram":
        return LogMelSpectrogram(values, self.frame_size, self.hop_size, self.n_mels, self.sample_rate)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def to_dict(self):
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["std"]))


@dataclass
class FeatureBatch:
    ae_vectors: np.ndarray | None  # [n_vectors, 320]
    svdd_windows: np.ndarray | None  # [n_windows, 64, 64]
    clip_id: str = ""


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(signal, frame_size: int = FRAME_SIZE, hop_size: int = HOP_SIZE) -> np.ndarray:
    """Centered, Hann-windowed power spectrogram, shape [n_frames, frame_size // 2 + 1].

    The signal is reflect-padded by ``frame_size // 2`` at both ends, giving
    ``len(signal) // hop_size + 1`` frames.
    """
    x = np.asarray(signal, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyInputError("stft_power: empty signal")
    if frame_size % 2:
        raise ConfigurationError("frame_size must be even")
    half = frame_size // 2
    mode = "reflect" if x.size > 1 else "edge"
    padded = np.pad(x, half, mode=mode)
    n_frames = x.size // hop_size + 1
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_size)[::hop_size][:n_frames]
    spec = np.fft.rfft(frames * hann(frame_size), axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, frame_size: int = FRAME_SIZE, sample_rate: int = 16000) -> np.ndarray:
    """HTK-scale triangular filters with unit peaks, shape [n_mels, frame_size // 2 + 1]."""
    if n_mels < 1:
        raise ConfigurationError("n_mels must be >= 1")
    if sample_rate <= 0:
        raise ConfigurationError("sample_rate must be positive")
    n_bins = frame_size // 2 + 1
    if n_mels > n_bins:
        raise ConfigurationError(f"{n_mels} Mel filters exceed {n_bins} FFT bins")
    bin_hz = np.arange(n_bins) * sample_rate / frame_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_hz - lo) / (mid - lo)
    down = (hi - bin_hz) / (hi - mid)
    fbank = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fbank.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"{n_mels} Mel filters too many for {frame_size}-point frames: "
            f"filters {empty.tolist()} cover no FFT bin"
        )
    return fbank


def mel_centers(n_mels: int = N_MELS, sample_rate: int = 16000) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def log_mel(power, fbank, sample_rate: int = 16000, hop_size: int = HOP_SIZE) -> LogMelSpectrogram:
    power = np.asarray(power, dtype=np.float64)
    fbank = np.asarray(fbank, dtype=np.float64)
    if power.ndim != 2 or fbank.ndim != 2 or power.shape[1] != fbank.shape[1]:
        raise DimensionError(f"power {power.shape} and filterbank {fbank.shape} do not agree")
    mel = power @ fbank.T
    values = np.log(np.maximum(mel, LOG_FLOOR))
    return LogMelSpectrogram(values, 2 * (fbank.shape[1] - 1), hop_size, fbank.shape[0], sample_rate)


_FBANK_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def compute_log_mel(signal, sample_rate: int = 16000) -> LogMelSpectrogram:
    """Signal -> log-Mel spectrogram with the fixed analysis configuration."""
    key = (N_MELS, FRAME_SIZE, sample_rate)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = mel_filterbank(*key)
    return log_mel(stft_power(signal), _FBANK_CACHE[key], sample_rate)


def _values(spec):
    return spec.values if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)


def stack_frames(spec, n_stack: int = N_STACK) -> np.ndarray:
    v = _values(spec)
    n_frames, n_mels = v.shape
    if n_frames < n_stack:
        raise DimensionError(f"need at least {n_stack} frames, got {n_frames}")
    win = np.lib.stride_tricks.sliding_window_view(v, (n_stack, n_mels))[:, 0]
    return win.reshape(n_frames - n_stack + 1, n_stack * n_mels).copy()


def tile_windows(spec, width: int = WINDOW_WIDTH) -> np.ndarray:
    """Cut [n_frames, width] into non-overlapping [width, width] windows, zero-padding the last."""
    v = _values(spec)
    n_frames, n_mels = v.shape
    if n_mels != width:
        raise DimensionError(f"n_mels {n_mels} != window width {width}")
    n_windows = math.ceil(n_frames / width)
    out = np.zeros((n_windows * width, width), dtype=v.dtype)
    out[:n_frames] = v
    return out.reshape(n_windows, width, width)


def fit_normalizer(train_specs) -> NormStats:
    specs = list(train_specs)
    if not specs:
        raise EmptyInputError("fit_normalizer: no training spectrograms")
    # two-pass: global mean, then population variance
    total = sum(float(np.sum(_values(s), dtype=np.float64)) for s in specs)
    count = sum(_values(s).size for s in specs)
    mean = total / count
    sq = sum(float(np.sum((_values(s).astype(np.float64) - mean) ** 2)) for s in specs)
    std = max(math.sqrt(sq / count), STD_FLOOR)
    return NormStats(mean, std)


def apply_normalizer(spec, stats: NormStats):
    v = (_values(spec) - stats.mean) / stats.std
    return spec.with_values(v) if isinstance(spec, LogMelSpectrogram) else v


def make_feature_batch(spec, stats: NormStats | None = None, clip_id: str = "", kinds=("ae", "svdd")) -> FeatureBatch:
    """Normalize (if ``stats`` given) then derive the model inputs."""
    if stats is not None:
        spec = apply_normalizer(spec, stats)
    return FeatureBatch(
        stack_frames(spec).astype(np.float32) if "ae" in kinds else None,
        tile_windows(spec).astype(np.float32) if "svdd" in kinds else None,
        clip_id,
    )


def amplitude_envelope(signal, sample_rate: int) -> np.ndarray:
    """|x| smoothed by a centered ~10 ms moving average (odd length, so peaks stay centered)."""
    n = 2 * (sample_rate // 200) + 1
    return np.convolve(np.abs(signal), np.full(n, 1.0 / n), mode="same")


def detect_valve_peaks(signal, sample_rate: int, threshold_factor: float = 5.0) -> np.ndarray:
    env = amplitude_envelope(signal, sample_rate)
    threshold = threshold_factor * float(np.median(env))
    # strict threshold; find_peaks' `distance` keeps the largest peak in each conflict
    peaks, _ = find_peaks(env, height=np.nextafter(threshold, np.inf), distance=sample_rate)
    return peaks


def preprocess_valve(signal, sample_rate: int = 16000) -> np.ndarray:
    """Keep only 1-second segments centered on detected envelope peaks.

    Segments are concatenated in time order; a clip without qualifying
    peaks is returned unchanged.
    """
    x = np.asarray(signal, dtype=np.float64).ravel()
    if x.size < sample_rate:
        raise EmptyInputError(f"valve preprocessing needs >= 1 s of audio, got {x.size} samples")
    peaks = detect_valve_peaks(x, sample_rate)
    if peaks.size == 0:
        return x.copy()
    half = sample_rate // 2
    starts = np.clip(peaks - half, 0, x.size - sample_rate)
    return np.concatenate([x[s : s + sample_rate] for s in starts])


# -- on-disk cache -----------------------------------------------------------

def write_feat(path, spec: LogMelSpectrogram) -> None:
    v = np.ascontiguousarray(spec.values, dtype="<f4")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, v.shape[0], v.shape[1]))
        fh.write(v.tobytes())
    os.replace(tmp, path)


def read_feat(path, sample_rate: int = 16000) -> LogMelSpectrogram:
    buf = Path(path).read_bytes()
    if len(buf) < _FEAT_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, n_frames, n_mels = _FEAT_HEADER.unpack_from(buf)
    if magic != FEAT_MAGIC or version != FEAT_VERSION:
        raise FormatError(f"{path}: not an AADF v{FEAT_VERSION} feature file")
    expected = _FEAT_HEADER.size + 4 * n_frames * n_mels
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    v = np.frombuffer(buf, dtype="<f4", offset=_FEAT_HEADER.size).reshape(n_frames, n_mels)
    return LogMelSpectrogram(v.astype(np.float64), FRAME_SIZE, HOP_SIZE, n_mels, sample_rate)
