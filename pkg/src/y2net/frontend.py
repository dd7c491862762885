"""Time/frequency front-end: DC-blocking high-pass, sqrt-Hann STFT analysis,
overlap-add synthesis, feature packing, and 16-bit WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import _kernels

HP_POLE = 0.99


@dataclass(frozen=True)
class FrameConfig:
    sample_rate_hz: int = 16000
    frame_len: int = 424
    frame_shift: int = 212
    dft_size: int = 512
    feature_dim: int = 260

    def __post_init__(self):
        if self.frame_shift * 2 != self.frame_len:
            raise ValueError("frame_shift must be half the frame length")
        if self.dft_size < self.frame_len:
            raise ValueError("dft_size must be >= frame_len")
        if self.feature_dim < self.n_bins or self.feature_dim % 4:
            raise ValueError("feature_dim must be >= n_bins and divisible by 4")
        if self.latency_s > 0.040 + 1e-12:
            raise ValueError(f"algorithmic latency {self.latency_s * 1e3:.2f} ms exceeds 40 ms")

    @property
    def n_bins(self) -> int:
        return self.dft_size // 2 + 1

    @property
    def latency_s(self) -> float:
        return (self.frame_len + self.frame_shift) / self.sample_rate_hz

    @property
    def frame_duration_s(self) -> float:
        return self.frame_len / self.sample_rate_hz

    @property
    def shift_duration_s(self) -> float:
        return self.frame_shift / self.sample_rate_hz

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.frame_shift

    def output_len(self, n_frames: int) -> int:
        return (n_frames - 1) * self.frame_shift + self.frame_len


DEFAULT_FRAME = FrameConfig()


def sqrt_hann(n: int) -> np.ndarray:
    # periodic Hann: squares sum to one at 50 % overlap
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


def _as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite values")
    return x


def highpass(x, r: float = HP_POLE) -> np.ndarray:
    """First-order DC blocker ``y[n] = x[n] - x[n-1] + r*y[n-1]`` from zero state."""
    x = _as_signal(x)
    if x.size == 0:
        raise ValueError("highpass of an empty signal")
    return np.asarray(_kernels.dc_block(x, r), dtype=np.float64)


def analyze(x, config: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Frame, window and DFT a signal. Returns complex (n_frames, n_bins).

    Frame l covers samples [l*shift, l*shift + frame_len); a trailing
    partial frame is dropped.
    """
    x = _as_signal(x)
    n_frames = config.n_frames(x.size)
    if n_frames == 0:
        raise ValueError(f"signal of {x.size} samples is shorter than one frame")
    idx = np.arange(config.frame_len)[None, :] + config.frame_shift * np.arange(n_frames)[:, None]
    frames = x[idx] * sqrt_hann(config.frame_len)
    return np.fft.rfft(frames, n=config.dft_size, axis=1)


def synthesize(spectra, config: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Inverse DFT, truncate to frame_len, sqrt-Hann window, overlap-add."""
    spectra = np.asarray(spectra)
    if spectra.ndim != 2 or spectra.shape[0] == 0:
        raise ValueError("expected a non-empty (n_frames, n_bins) array")
    if spectra.shape[1] != config.n_bins:
        raise ValueError(f"frames must have {config.n_bins} bins, got {spectra.shape[1]}")
    frames = np.fft.irfft(spectra, n=config.dft_size, axis=1)[:, : config.frame_len]
    frames *= sqrt_hann(config.frame_len)
    n_frames = frames.shape[0]
    out = np.zeros(config.output_len(n_frames))
    shift = config.frame_shift
    # two interleaved halves: even frames never overlap each other
    for parity in (0, 1):
        sel = frames[parity::2]
        starts = shift * (parity + 2 * np.arange(sel.shape[0]))
        idx = starts[:, None] + np.arange(config.frame_len)[None, :]
        out[idx.ravel()] += sel.ravel()
    return out


def interior(n_frames: int, config: FrameConfig = DEFAULT_FRAME) -> slice:
    """Sample range covered by two overlapping frames (perfect reconstruction)."""
    return slice(config.frame_shift, n_frames * config.frame_shift)


def pack_features(spec, config: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Complex bins (..., n_bins) -> real features (..., M, 1, 2), zero-padded rows."""
    spec = np.asarray(spec)
    if spec.shape[-1] != config.n_bins:
        raise ValueError(f"expected {config.n_bins} bins, got {spec.shape[-1]}")
    out = np.zeros(spec.shape[:-1] + (config.feature_dim, 1, 2))
    out[..., : config.n_bins, 0, 0] = spec.real
    out[..., : config.n_bins, 0, 1] = spec.imag
    return out


def unpack_features(t, config: FrameConfig = DEFAULT_FRAME) -> np.ndarray:
    """Inverse of :func:`pack_features`; padding rows are dropped and the
    DC/Nyquist imaginary parts forced to zero."""
    t = np.asarray(t)
    if t.shape[-3:] != (config.feature_dim, 1, 2):
        raise ValueError(f"expected trailing shape ({config.feature_dim}, 1, 2), got {t.shape}")
    nb = config.n_bins
    spec = t[..., :nb, 0, 0] + 1j * t[..., :nb, 0, 1]
    spec[..., 0] = spec[..., 0].real
    spec[..., nb - 1] = spec[..., nb - 1].real
    return spec


class StreamingAnalyzer:
    """Block-wise front-end: push ``frame_shift`` samples, get one spectrum.

    Holds the high-pass state and the previous half frame. The first call
    only primes the buffer and returns ``None``.
    """

    def __init__(self, config: FrameConfig = DEFAULT_FRAME, hp_pole: float | None = HP_POLE):
        self.config = config
        self.hp_pole = hp_pole
        self.window = sqrt_hann(config.frame_len)
        self.reset()

    def reset(self):
        self._buf = np.zeros(self.config.frame_len)
        self._filled = 0
        self._zi = np.zeros(1)

    def push(self, block) -> np.ndarray | None:
        block = _as_signal(block)
        shift = self.config.frame_shift
        if block.size != shift:
            raise ValueError(f"blocks must have {shift} samples")
        if self.hp_pole is not None:
            block, self._zi = lfilter([1.0, -1.0], [1.0, -self.hp_pole], block, zi=self._zi)
        self._buf[:-shift] = self._buf[shift:]
        self._buf[-shift:] = block
        self._filled += shift
        if self._filled < self.config.frame_len:
            return None
        return np.fft.rfft(self._buf * self.window, n=self.config.dft_size)


class StreamingSynthesizer:
    """Overlap-add one spectrum at a time; each call emits ``frame_shift``
    finished samples (the first half of the newest frame plus the tail of
    the previous one)."""

    def __init__(self, config: FrameConfig = DEFAULT_FRAME):
        self.config = config
        self.window = sqrt_hann(config.frame_len)
        self.reset()

    def reset(self):
        self._tail = np.zeros(self.config.frame_shift)

    def push(self, spectrum) -> np.ndarray:
        c = self.config
        frame = np.fft.irfft(np.asarray(spectrum), n=c.dft_size)[: c.frame_len] * self.window
        out = self._tail + frame[: c.frame_shift]
        self._tail = frame[c.frame_shift :].copy()
        return out

    def flush(self) -> np.ndarray:
        out = self._tail
        self._tail = np.zeros(self.config.frame_shift)
        return out


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read mono 16-bit PCM; samples scaled to [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: only mono 16-bit PCM is supported")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def to_pcm16(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, x, sample_rate_hz: int = 16000) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate_hz)
        f.writeframes(to_pcm16(x).tobytes())
