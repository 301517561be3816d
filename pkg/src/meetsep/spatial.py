"""Mask-based spatial covariance estimation and MVDR beamforming."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .maskmodel import TFMask
from .spectral import Spectrogram

__all__ = [
    "SpatialCovariance",
    "BeamWeights",
    "MvdrConfig",
    "estimate_psd",
    "mvdr_weights",
    "beamform",
    "posterior_snr",
]


@dataclass(frozen=True, eq=False)
class SpatialCovariance:
    """Per-bin spatial covariance matrices, shape (bins, channels, channels)."""

    matrices: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=np.complex128)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValueError(f"expected (bins, channels, channels), got {m.shape}")
        object.__setattr__(self, "matrices", m)

    @property
    def channels(self) -> int:
        return self.matrices.shape[1]

    def scaled(self, alpha: float) -> "SpatialCovariance":
        return SpatialCovariance(alpha * self.matrices)


@dataclass(frozen=True, eq=False)
class BeamWeights:
    weights: np.ndarray
    ref: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ValueError("beam weights must be a finite (bins, channels) array")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class MvdrConfig:
    epsilon: float = 1e-6
    max_condition: float = 1e8
    escalations: int = 3


def estimate_psd(spec: Spectrogram, mask: TFMask | np.ndarray, class_index: int | None = None,
                 complement: bool = False) -> SpatialCovariance:
    """Mask-weighted PSD: sum_t m x x^H / sum_t m, per frequency bin.

    ``mask`` may be a :class:`TFMask` (select ``class_index``) or a plain
    (frames, bins) array.  With ``complement`` the weight is ``1 - m``.
    """
    if isinstance(mask, TFMask):
        m = mask.values[class_index]
    else:
        m = np.asarray(mask, dtype=np.float64)
    if m.shape != (spec.frames, spec.bins):
        raise ValueError(f"mask grid {m.shape} does not match spectrogram "
                         f"({spec.frames}, {spec.bins})")
    if complement:
        m = 1.0 - m
    mass = m.sum(axis=0)
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise ValueError(f"mask has zero mass at bin {int(empty[0])}")
    x = np.transpose(spec.data, (2, 0, 1))  # bins, channels, frames
    psd = (x * m.T[:, None, :]) @ np.swapaxes(x.conj(), 1, 2)
    psd /= mass[:, None, None]
    psd = 0.5 * (psd + np.swapaxes(psd.conj(), 1, 2))
    return SpatialCovariance(psd)


def _regularized_inverse(phi: np.ndarray, cfg: MvdrConfig) -> np.ndarray:
    d = phi.shape[-1]
    trace = np.einsum("fdd->f", phi).real
    eps = cfg.epsilon
    for _ in range(cfg.escalations + 1):
        reg = phi + (eps * trace / d)[:, None, None] * np.eye(d)
        cond = np.linalg.cond(reg)
        if np.all(np.isfinite(cond)) and np.all(cond <= cfg.max_condition):
            return np.linalg.inv(reg)
        eps *= 10
    bad = int(np.flatnonzero(~(np.isfinite(cond) & (cond <= cfg.max_condition)))[0])
    raise np.linalg.LinAlgError(
        f"noise PSD not invertible after regularisation (bin {bad}, cond {cond[bad]:.3g})")


def posterior_snr(w: np.ndarray, target: np.ndarray, noise: np.ndarray) -> float:
    """Mean over bins of w^H Phi_s w / w^H Phi_n w."""
    num = np.einsum("fd,fde,fe->f", w.conj(), target, w).real
    den = np.einsum("fd,fde,fe->f", w.conj(), noise, w).real
    return float(np.mean(num / np.maximum(den, np.finfo(float).tiny)))


def mvdr_weights(target: SpatialCovariance, noise: SpatialCovariance, ref: int | None = None,
                 cfg: MvdrConfig = MvdrConfig()) -> BeamWeights:
    """Souden MVDR: w = (Phi_n^-1 Phi_s / tr(Phi_n^-1 Phi_s)) u_ref.

    Without ``ref`` the channel with the highest average posterior SNR is
    used.
    """
    if target.matrices.shape != noise.matrices.shape:
        raise ValueError("target and noise PSDs must have identical shapes")
    inv_n = _regularized_inverse(noise.matrices, cfg)
    numer = inv_n @ target.matrices
    trace = np.einsum("fdd->f", numer)
    small = np.abs(trace) < np.finfo(float).tiny
    trace = np.where(small, 1.0, trace)
    filt = numer / trace[:, None, None]
    filt[small] = 0.0
    d = target.channels
    if ref is None:
        scores = [posterior_snr(filt[:, :, c], target.matrices, noise.matrices)
                  for c in range(d)]
        ref = int(np.argmax(scores))
    if not 0 <= ref < d:
        raise ValueError(f"reference channel {ref} out of range")
    return BeamWeights(filt[:, :, ref], ref)


def beamform(spec: Spectrogram, w: BeamWeights) -> Spectrogram:
    """y(t, f) = w(f)^H x(t, f), returned as a single-channel spectrogram."""
    if w.weights.shape != (spec.bins, spec.channels):
        raise ValueError(f"weights {w.weights.shape} do not match spectrogram "
                         f"({spec.bins} bins, {spec.channels} channels)")
    y = np.einsum("fc,ctf->tf", w.weights.conj(), spec.data)
    return spec.replace(y[None])
