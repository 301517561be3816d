"""STFT analysis/synthesis, mask application and log-mel features.

Shape conventions used throughout the package:

    wave samples:      (channels, samples)
    spectrogram data:  (channels, frames, bins)
    T-F mask values:   (classes, frames, bins)

Frames are centred: the signal is reflect-padded by half a frame on both
ends, so frame ``t`` is centred on sample ``t * frame_shift`` of the
original signal.  Round-trip guarantees hold for every original sample
covered by a frame; the padded region itself is discarded on synthesis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .maskmodel import TFMask

__all__ = [
    "MultiChannelWave",
    "StftConfig",
    "Spectrogram",
    "FeatureSequence",
    "stft",
    "istft",
    "apply_mask",
    "mel_filterbank",
    "mel_band_centers",
    "logmel_features",
    "FEATURE_FLOOR",
]

FEATURE_FLOOR = 1e-10


@dataclass(frozen=True, eq=False)
class MultiChannelWave:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"samples must be (channels, time), got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite values")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, index: int) -> "MultiChannelWave":
        return MultiChannelWave(self.samples[index:index + 1], self.sample_rate)


def _window(kind: str, length: int) -> np.ndarray:
    # periodic hann; sqrt-hann pairs are COLA for shifts length/2 and length/4
    n = np.arange(length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / length)
    if kind == "hann":
        return hann
    if kind == "sqrt-hann":
        return np.sqrt(hann)
    raise ValueError(f"unknown window {kind!r}")


@dataclass(frozen=True)
class StftConfig:
    """Frame geometry in samples.

    ``window`` is used for both analysis and synthesis.  The configuration is
    valid when the squared window overlap-adds to a constant at the chosen
    shift; synthesis still normalises by the exact overlap sum.
    """

    frame_len: int = 1024
    frame_shift: int = 256
    window: str = "sqrt-hann"
    fft_size: int | None = None

    def __post_init__(self):
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.frame_len)
        if self.frame_len <= 0 or not 0 < self.frame_shift <= self.frame_len:
            raise ValueError(
                f"need 0 < frame_shift <= frame_len, got {self.frame_shift}/{self.frame_len}")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be >= frame_len")
        if self.window not in ("hann", "sqrt-hann"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.frame_len % self.frame_shift:
            raise ValueError("frame_len must be a multiple of frame_shift for COLA")
        w2 = self.window_array() ** 2
        ola = w2.reshape(-1, self.frame_shift).sum(axis=0)
        if np.ptp(ola) > 1e-8 * ola.max():
            raise ValueError(
                f"{self.window} window is not COLA at shift {self.frame_shift}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.frame_len)

    def num_frames(self, num_samples: int) -> int:
        # after padding by frame_len // 2 on both sides
        padded = num_samples + 2 * (self.frame_len // 2)
        return (padded - self.frame_len) // self.frame_shift + 1

    def frame_shift_seconds(self, sample_rate: int) -> float:
        return self.frame_shift / sample_rate


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """Complex STFT ``data`` of shape (channels, frames, bins).

    ``length`` is the number of time samples of the analysed signal; ``istft``
    uses it to restore the exact input length.
    """

    data: np.ndarray
    cfg: StftConfig
    sample_rate: int
    length: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"spectrogram data must be 3-D, got shape {data.shape}")
        if data.shape[2] != self.cfg.bins:
            raise ValueError(
                f"bins {data.shape[2]} inconsistent with fft_size {self.cfg.fft_size}")
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def bins(self) -> int:
        return self.data.shape[2]

    @property
    def frame_shift_seconds(self) -> float:
        return self.cfg.frame_shift / self.sample_rate

    @property
    def frame_offset(self) -> float:
        # frame t is centred on t * shift, i.e. covers [t - 1/2, t + 1/2) shifts
        return -0.5 * self.frame_shift_seconds

    def replace(self, data: np.ndarray) -> "Spectrogram":
        return Spectrogram(data, self.cfg, self.sample_rate, self.length)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    vectors: np.ndarray
    times: np.ndarray
    frame_shift: float = field(default=0.01)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("feature vectors must be (frames, dim)")
        if not np.all(np.isfinite(v)):
            raise ValueError("features contain non-finite values")
        t = np.asarray(self.times, dtype=np.float64)
        if t.shape != (v.shape[0],):
            raise ValueError("one time stamp per frame required")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "times", t)

    @property
    def duration(self) -> float:
        return self.vectors.shape[0] * self.frame_shift


def stft(wave: MultiChannelWave, cfg: StftConfig = StftConfig()) -> Spectrogram:
    x = wave.samples
    n = x.shape[1]
    if n < cfg.frame_len:
        raise ValueError(
            f"signal of {n} samples is shorter than one frame ({cfg.frame_len})")
    pad = cfg.frame_len // 2
    xp = np.pad(x, ((0, 0), (pad, pad)), mode="reflect")
    frames = cfg.num_frames(n)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.frame_shift * np.arange(frames)[:, None]
    segments = xp[:, idx] * cfg.window_array()
    data = np.fft.rfft(segments, n=cfg.fft_size, axis=-1)
    return Spectrogram(data, cfg, wave.sample_rate, n)


def istft(spec: Spectrogram, length: int | None = None) -> MultiChannelWave:
    """Weighted overlap-add synthesis.

    Each frame is windowed again and the sum is divided by the overlap sum of
    the squared window, which inverts ``stft`` exactly wherever the frames
    cover the signal.
    """
    cfg = spec.cfg
    if spec.bins != cfg.bins:
        raise ValueError("spectrogram bins inconsistent with its configuration")
    if length is None:
        length = spec.length
    pad = cfg.frame_len // 2
    win = cfg.window_array()
    frames = spec.frames
    segs = np.fft.irfft(spec.data, n=cfg.fft_size, axis=-1)[..., :cfg.frame_len] * win
    total = (frames - 1) * cfg.frame_shift + cfg.frame_len
    out = np.zeros((spec.channels, total))
    norm = np.zeros(total)
    for t in range(frames):
        s = t * cfg.frame_shift
        out[:, s:s + cfg.frame_len] += segs[:, t]
        norm[s:s + cfg.frame_len] += win ** 2
    nz = norm > 1e-10 * norm.max()
    out[:, nz] /= norm[nz]
    out = out[:, pad:]
    if length is None:
        length = (frames - 1) * cfg.frame_shift
    if out.shape[1] < length:
        out = np.pad(out, ((0, 0), (0, length - out.shape[1])))
    return MultiChannelWave(out[:, :length], spec.sample_rate)


def apply_mask(spec: Spectrogram, mask: "TFMask", class_index: int) -> Spectrogram:
    m = mask.values[class_index]
    if m.shape != spec.data.shape[1:]:
        raise ValueError(
            f"mask grid {m.shape} does not match spectrogram grid {spec.data.shape[1:]}")
    return spec.replace(spec.data * m[None])


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None):
    """Centre frequencies (Hz) of the triangular mel bands."""
    fmax = sample_rate / 2 if fmax is None else fmax
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mels[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filterbank, shape (n_mels, n_fft // 2 + 1)."""
    bins = n_fft // 2 + 1
    if n_mels > bins:
        raise ValueError(f"n_mels={n_mels} exceeds the number of FFT bins ({bins})")
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(bins) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lower) / (center - lower)
    down = (upper - freqs[None]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


def logmel_features(wave: MultiChannelWave, n_mels: int = 40, win: float = 0.025,
                    hop: float = 0.010) -> FeatureSequence:
    """Log mel-filterbank energies of a single-channel wave.

    ``win`` and ``hop`` are in seconds; the FFT size is the next power of two
    of the window length.  Energies are floored at ``FEATURE_FLOOR`` before
    the log, so digital silence maps to ``log(FEATURE_FLOOR)``.
    """
    if wave.channels != 1:
        raise ValueError("logmel_features expects a single-channel wave")
    sr = wave.sample_rate
    if sr < 8000:
        raise ValueError("sample rate must be at least 8 kHz")
    frame_len = int(round(win * sr))
    shift = int(round(hop * sr))
    n_fft = 1 << (frame_len - 1).bit_length()
    fb = mel_filterbank(n_mels, n_fft, sr)
    x = wave.samples[0]
    if x.size < frame_len:
        raise ValueError("signal shorter than one feature frame")
    frames = (x.size - frame_len) // shift + 1
    idx = np.arange(frame_len)[None, :] + shift * np.arange(frames)[:, None]
    power = np.abs(np.fft.rfft(x[idx] * np.hanning(frame_len + 2)[1:-1], n=n_fft)) ** 2
    feats = np.log(np.maximum(power @ fb.T, FEATURE_FLOOR))
    times = (np.arange(frames) * shift + frame_len / 2) / sr
    return FeatureSequence(feats, times, shift / sr)
