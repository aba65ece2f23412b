"""MFCC front end: framing, windowed FFT magnitudes, mel filters, DCT."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .errors import ConfigError, TooShortError


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x F
    frame_hop: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 40
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10
    window: str = "hamming"
    cms: bool = True
    cmvn: bool = False

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_ms / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def validate(self):
        if self.frame_len < 1 or self.hop < 1:
            raise ConfigError("frame length and hop must be at least one sample")
        _check_n_fft(self.n_fft, self.frame_len)
        if self.n_ceps < 1 or self.n_ceps > self.n_mels:
            raise ConfigError(f"n_ceps must be in [1, n_mels], got {self.n_ceps}")
        if self.window not in ("hamming", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        return self


def n_frames(length: int, frame_len: int, hop: int) -> int:
    if length < frame_len:
        return 0
    return 1 + (length - frame_len) // hop


def frame_signal(wave, frame_len: int, hop: int) -> np.ndarray:
    """Slice a signal into overlapping frames.

    Returns a read-only ``(n_frames, frame_len)`` view; row ``i`` holds
    samples ``[i*hop, i*hop + frame_len)``. Leading axes of a batched input
    are kept, so a ``(B, L)`` array gives ``(B, n_frames, frame_len)``.
    """
    x = wave.samples if isinstance(wave, Waveform) else np.asarray(wave)
    if frame_len < 1 or hop < 1:
        raise ConfigError("frame_len and hop must be >= 1")
    length = x.shape[-1]
    if length < frame_len:
        raise TooShortError(
            f"too-short input: {length} samples, need at least {frame_len}"
        )
    count = n_frames(length, frame_len, hop)
    windows = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=-1)
    return windows[..., : (count - 1) * hop + 1 : hop, :]


def _check_n_fft(n_fft: int, frame_len: int):
    if n_fft < 1 or n_fft & (n_fft - 1):
        raise ConfigError(f"n_fft must be a power of two, got {n_fft}")
    if n_fft < frame_len:
        raise ConfigError(f"n_fft={n_fft} is shorter than the frame ({frame_len})")


@lru_cache(maxsize=16)
def _window(kind: str, length: int) -> np.ndarray:
    if kind == "hamming":
        # symmetric Hamming, as in most speech toolkits
        w = np.hamming(length)
    elif kind == "rect":
        w = np.ones(length)
    else:
        raise ConfigError(f"unknown window {kind!r}")
    w.setflags(write=False)
    return w


def magnitude_spectrum(frame, n_fft: int, window: str = "hamming") -> np.ndarray:
    """|DFT| of the windowed frame(s), bins 0..n_fft/2 along the last axis."""
    frame = np.asarray(frame, dtype=np.float64)
    _check_n_fft(n_fft, frame.shape[-1])
    spec = np.fft.rfft(frame * _window(window, frame.shape[-1]), n=n_fft, axis=-1)
    return np.abs(spec)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Band edges in Hz: ``n_mels + 2`` points equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_center_frequencies(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    return mel_points(n_mels, f_min, f_max)[1:-1]


def _check_bands(n_mels, sample_rate, f_min, f_max):
    if n_mels < 2:
        raise ConfigError(f"n_mels must be >= 2, got {n_mels}")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ConfigError(
            f"invalid band edges f_min={f_min}, f_max={f_max} for sample_rate={sample_rate}"
        )


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Triangles are evaluated at the exact bin frequencies, so any bin strictly
    inside ``(f_min, f_max)`` gets a nonzero weight from some filter.
    """
    if f_max is None:
        f_max = sample_rate / 2
    _check_bands(n_mels, sample_rate, f_min, f_max)
    _check_n_fft(n_fft, 1)
    edges = mel_points(n_mels, f_min, f_max)
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"mel filters {empty.tolist()} contain no FFT bin; lower n_mels or raise n_fft"
        )
    return fb


@lru_cache(maxsize=8)
def _filterbank_for(cfg: FrontendConfig) -> np.ndarray:
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)
    fb.setflags(write=False)
    return fb


def log_mel_energies(samples, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Per-frame log mel energies, ``(..., T, n_mels)``."""
    cfg.validate()
    frames = frame_signal(np.asarray(samples, dtype=np.float64), cfg.frame_len, cfg.hop)
    power = magnitude_spectrum(frames, cfg.n_fft, cfg.window) ** 2
    return np.log(cfg.log_floor + power @ _filterbank_for(cfg).T)


def mfcc_frames(samples, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """MFCC array ``(..., T, n_ceps)`` for one signal or a batch of equal-length signals."""
    logmel = log_mel_energies(samples, cfg)
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=-1)[..., : cfg.n_ceps]
    if cfg.cms or cfg.cmvn:
        ceps = ceps - ceps.mean(axis=-2, keepdims=True)
    if cfg.cmvn:
        ceps = ceps / np.maximum(ceps.std(axis=-2, keepdims=True), 1e-8)
    return ceps


def mfcc(wave: Waveform, cfg: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    if wave.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"waveform is {wave.sample_rate} Hz but the front end expects {cfg.sample_rate} Hz"
        )
    return FeatureMatrix(mfcc_frames(wave.samples, cfg), cfg.hop / cfg.sample_rate)
