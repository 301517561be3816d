"""Offline multi-channel WPE dereverberation.

Each frequency bin is solved independently.  Iterations alternate between
the time-varying variance of the desired signal and the delayed linear
prediction filter, which makes the weighted prediction-error objective

    sum_t ||z_t||^2 / lambda_t + D log lambda_t

non-increasing from one iteration to the next.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d

from .spectral import MultiChannelWave, Spectrogram, StftConfig, istft, stft

__all__ = ["WpeConfig", "WPE_STFT", "wpe", "dereverberate", "stack_delayed"]

# WPE runs on a finer grid than separation: with 512/128 the 3-frame delay
# spans 24 ms, so the early part of the response is left intact.
WPE_STFT = StftConfig(frame_len=512, frame_shift=128)

_BIN_CHUNK = 32


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    psd_context: int = 0
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ValueError("taps, delay and iterations must be >= 1")
        if self.psd_context < 0 or self.epsilon <= 0:
            raise ValueError("psd_context must be >= 0 and epsilon > 0")


def stack_delayed(y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """Delayed observation stack.

    ``y``: (bins, frames, channels) -> (bins, frames, taps * channels) where
    block ``k`` holds ``y[:, t - delay - k]`` (zero before the signal start).
    """
    f, t, d = y.shape
    out = np.zeros((f, t, taps * d), dtype=y.dtype)
    for k in range(taps):
        lag = delay + k
        if lag < t:
            out[:, lag:, k * d:(k + 1) * d] = y[:, :t - lag]
    return out


def _variance(z, context, floor):
    lam = np.mean(np.abs(z) ** 2, axis=-1)
    if context:
        lam = uniform_filter1d(lam, size=2 * context + 1, axis=1, mode="nearest")
    return np.maximum(lam, floor)


def _solve_filters(ytil, ytil_conj, y_conj, lam, eps, bin_offset):
    weighted = np.swapaxes(ytil * (1.0 / lam)[..., None], 1, 2)
    r = weighted @ ytil_conj
    p = weighted @ y_conj
    dk = r.shape[-1]
    trace = np.einsum("fdd->f", r).real
    live = trace > 0
    g = np.zeros((r.shape[0], dk, y_conj.shape[-1]), dtype=np.complex128)
    if not np.any(live):
        return g
    reg = r[live] + (eps * trace[live] / dk)[:, None, None] * np.eye(dk)
    try:
        np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        for i, m in zip(np.flatnonzero(live), reg):
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(
                    f"WPE correlation matrix is rank deficient at bin {bin_offset + i}") from None
        raise
    g[live] = np.linalg.solve(reg, p[live])
    return g


def wpe(spec: Spectrogram, cfg: WpeConfig = WpeConfig()) -> tuple[Spectrogram, np.ndarray]:
    """Dereverberate ``spec``; returns the output and the objective per iteration.

    The objective is the weighted prediction-error cost averaged over all
    T-F points.  The variance floor is ``epsilon`` times the mean input
    power, so the method is equivariant to positive scaling of the input.
    """
    if spec.frames <= cfg.taps + cfg.delay:
        raise ValueError(f"need more than taps + delay = {cfg.taps + cfg.delay} frames, "
                         f"got {spec.frames}")
    y_all = np.transpose(spec.data, (2, 1, 0))  # bins, frames, channels
    d = y_all.shape[-1]
    floor = cfg.epsilon * max(float(np.mean(np.abs(y_all) ** 2)), np.finfo(float).tiny)
    out = np.empty_like(y_all)
    objective = np.zeros(cfg.iterations)
    for lo in range(0, y_all.shape[0], _BIN_CHUNK):
        y = y_all[lo:lo + _BIN_CHUNK]
        ytil = stack_delayed(y, cfg.taps, cfg.delay)
        ytil_conj, y_conj = ytil.conj(), y.conj()
        z = y
        for it in range(cfg.iterations):
            lam = _variance(z, cfg.psd_context, floor)
            g = _solve_filters(ytil, ytil_conj, y_conj, lam, cfg.epsilon, lo)
            z = y - ytil @ g.conj()
            objective[it] += float(np.sum(np.sum(np.abs(z) ** 2, axis=-1) / lam
                                          + d * np.log(lam)))
        out[lo:lo + _BIN_CHUNK] = z
    objective /= y_all.shape[0] * y_all.shape[1]
    return spec.replace(np.transpose(out, (2, 1, 0))), objective


def dereverberate(wave: MultiChannelWave, cfg: WpeConfig = WpeConfig(),
                  stft_cfg: StftConfig = WPE_STFT) -> MultiChannelWave:
    """Time-domain convenience wrapper: STFT, WPE, inverse STFT."""
    out, _ = wpe(stft(wave, stft_cfg), cfg)
    return istft(out, wave.num_samples)
