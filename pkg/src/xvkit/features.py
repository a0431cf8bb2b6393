"""Acoustic front-end: MFCC / log-mel filterbank features, energy VAD, noise augmentation."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, rfft

from .errors import ConfigError, DegenerateEnergyError, EmptyInputError, ShapeError

PREEMPH = 0.97
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ConfigError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FeatureConfig:
    num_coeffs: int = 23
    low_freq: float = 20.0
    high_freq: float = 3700.0
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    feature_kind: str = "mfcc"
    num_mel_bins: int | None = None  # defaults to num_coeffs
    cmn_window: int = 0  # sliding CMN window in frames, 0 disables

    @property
    def mel_bins(self) -> int:
        return self.num_mel_bins if self.num_mel_bins is not None else self.num_coeffs

    def validate(self, sample_rate: int) -> None:
        if self.feature_kind not in ("mfcc", "fbank"):
            raise ConfigError(f"unknown feature_kind {self.feature_kind!r}")
        if self.num_coeffs < 1:
            raise ConfigError("num_coeffs must be >= 1")
        if self.feature_kind == "mfcc" and self.num_coeffs > self.mel_bins:
            raise ConfigError("num_coeffs cannot exceed num_mel_bins for mfcc")
        if not 0 <= self.low_freq < self.high_freq <= sample_rate / 2:
            raise ConfigError(
                f"need 0 <= low_freq < high_freq <= {sample_rate / 2}, "
                f"got [{self.low_freq}, {self.high_freq}]"
            )
        if self.frame_length_ms <= 0 or self.frame_shift_ms <= 0:
            raise ConfigError("frame length and shift must be positive")


@dataclass
class FeatureMatrix:
    """frames x coeffs. For MFCC, column 0 is C0 (energy-carrying)."""

    values: np.ndarray
    frame_shift_ms: float = 10.0
    kind: str = "mfcc"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"feature matrix must be 2-D, got shape {self.values.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_coeffs(self) -> int:
        return self.values.shape[1]


@dataclass
class FrameMask:
    keep: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)

    def __len__(self):
        return len(self.keep)


def _mel(hz):
    return 1127.0 * np.log1p(np.asarray(hz, dtype=np.float64) / 700.0)


def _inv_mel(mel):
    return 700.0 * (np.exp(np.asarray(mel, dtype=np.float64) / 1127.0) - 1.0)


def frame_count(num_samples: int, sample_rate: int, cfg: FeatureConfig) -> int:
    flen = int(round(cfg.frame_length_ms * sample_rate / 1000.0))
    fshift = int(round(cfg.frame_shift_ms * sample_rate / 1000.0))
    if num_samples < flen:
        return 0
    return (num_samples - flen) // fshift + 1


def mel_filterbank(num_bins: int, fft_size: int, sample_rate: int, low_freq: float, high_freq: float):
    """Triangular filters on the mel scale, shape (num_bins, fft_size // 2 + 1)."""
    mel_lo, mel_hi = _mel(low_freq), _mel(high_freq)
    edges = np.linspace(mel_lo, mel_hi, num_bins + 2)
    fft_mel = _mel(np.arange(fft_size // 2 + 1) * sample_rate / fft_size)
    banks = np.zeros((num_bins, fft_size // 2 + 1))
    for b in range(num_bins):
        left, center, right = edges[b], edges[b + 1], edges[b + 2]
        up = (fft_mel - left) / (center - left)
        down = (right - fft_mel) / (right - center)
        banks[b] = np.maximum(0.0, np.minimum(up, down))
    return banks


def mel_bin_centers(num_bins: int, low_freq: float, high_freq: float) -> np.ndarray:
    edges = np.linspace(_mel(low_freq), _mel(high_freq), num_bins + 2)
    return _inv_mel(edges[1:-1])


def frame_signal(samples: np.ndarray, sample_rate: int, cfg: FeatureConfig) -> np.ndarray:
    flen = int(round(cfg.frame_length_ms * sample_rate / 1000.0))
    fshift = int(round(cfg.frame_shift_ms * sample_rate / 1000.0))
    n = frame_count(len(samples), sample_rate, cfg)
    idx = np.arange(flen)[None, :] + fshift * np.arange(n)[:, None]
    return samples[idx]


def log_mel_energies(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    cfg.validate(w.sample_rate)
    frames = frame_signal(w.samples, w.sample_rate, cfg)
    if frames.shape[0] == 0:
        raise EmptyInputError("waveform is shorter than one frame")
    flen = frames.shape[1]
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = np.concatenate([frames[:, :1] * (1.0 - PREEMPH), frames[:, 1:] - PREEMPH * frames[:, :-1]], axis=1)
    frames = frames * np.hamming(flen)
    fft_size = 1 << (flen - 1).bit_length()
    power = np.abs(rfft(frames, n=fft_size, axis=1)) ** 2
    banks = mel_filterbank(cfg.mel_bins, fft_size, w.sample_rate, cfg.low_freq, cfg.high_freq)
    return np.log(np.maximum(power @ banks.T, LOG_FLOOR))


def sliding_cmn(values: np.ndarray, window: int) -> np.ndarray:
    """Subtract a centered moving-average mean (window clipped at the edges)."""
    if window <= 0 or len(values) == 0:
        return values
    half = window // 2
    csum = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(values, axis=0)])
    t = np.arange(len(values))
    lo = np.clip(t - half, 0, len(values))
    hi = np.clip(t + half + 1, 0, len(values))
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return values - means


def compute_features(w: Waveform, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """MFCC (C0 retained, orthonormal DCT-II) or log-mel filterbank features."""
    logmel = log_mel_energies(w, cfg)
    if cfg.feature_kind == "fbank":
        values = logmel[:, : cfg.num_coeffs]
    else:
        values = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.num_coeffs]
    values = sliding_cmn(values, cfg.cmn_window)
    return FeatureMatrix(values, frame_shift_ms=cfg.frame_shift_ms, kind=cfg.feature_kind)


def mfcc_to_log_mel(mfcc: np.ndarray) -> np.ndarray:
    """Inverse DCT; exact when the MFCC kept every mel bin."""
    from scipy.fft import idct

    return idct(mfcc, type=2, norm="ortho", axis=1)


def _majority_smooth(raw: np.ndarray, context: int) -> np.ndarray:
    if context <= 0:
        return raw.copy()
    n = len(raw)
    csum = np.concatenate([[0], np.cumsum(raw.astype(np.int64))])
    t = np.arange(n)
    lo = np.clip(t - context, 0, n)
    hi = np.clip(t + context + 1, 0, n)
    votes = csum[hi] - csum[lo]
    size = hi - lo
    out = 2 * votes > size
    tie = 2 * votes == size
    out[tie] = raw[tie]
    return out


def energy_vad(f: FeatureMatrix, threshold_offset: float = 0.0, context: int = 2) -> FrameMask:
    """Keep frames whose C0 exceeds the utterance mean plus an offset.

    The raw decision is smoothed by a majority vote over +-context frames
    (window clipped at the edges; an exact tie keeps the raw decision).
    """
    if f.num_frames == 0:
        return FrameMask(np.zeros(0, dtype=bool))
    c0 = f.values[:, 0]
    raw = c0 > c0.mean() + threshold_offset
    return FrameMask(_majority_smooth(raw, context))


def apply_mask(f: FeatureMatrix, m: FrameMask) -> FeatureMatrix:
    if len(m) != f.num_frames:
        raise ShapeError(f"mask length {len(m)} != frame count {f.num_frames}")
    return FeatureMatrix(f.values[m.keep], frame_shift_ms=f.frame_shift_ms, kind=f.kind)


def snr_gain(signal_power: float, noise_power: float, snr_db: float) -> float:
    if signal_power <= 0 or noise_power <= 0:
        raise DegenerateEnergyError("signal and noise must both have nonzero energy")
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def crop_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Loop the noise and take `length` samples starting at a random offset."""
    start = int(rng.integers(len(noise)))
    return np.take(noise, np.arange(start, start + length), mode="wrap")


def augment_noise(w: Waveform, noise: Waveform, snr_db: float, seed: int) -> Waveform:
    """Add `noise` to `w` at the requested SNR. ``snr_db=inf`` returns the input unchanged."""
    if w.sample_rate != noise.sample_rate:
        raise ConfigError("signal and noise sample rates differ")
    if len(noise) == 0:
        raise EmptyInputError("noise waveform is empty")
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    rng = np.random.default_rng(seed)
    seg = crop_noise(noise.samples, len(w), rng)
    g = snr_gain(float(np.mean(w.samples**2)), float(np.mean(seg**2)), snr_db)
    return Waveform(w.samples + g * seg, w.sample_rate)


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ConfigError(f"{path}: only 16-bit PCM is supported")
        if fh.getnchannels() != 1:
            raise ConfigError(f"{path}: only mono audio is supported")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
