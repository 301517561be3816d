"""Guided cACGMM mask estimation.

The complex angular central Gaussian mixture is fitted independently per
frequency bin on unit-normalised multi-channel observations.  Speaker
activity (the *guide*) restricts which classes may explain a frame: a
speaker class gets zero posterior wherever its guide is inactive, while the
noise class is always allowed.

Shapes inside the EM loop follow ``(bins, classes, frames[, channels])``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.special import logsumexp

from .spectral import Spectrogram

__all__ = [
    "ActivityMatrix",
    "TFMask",
    "CacgmmConfig",
    "GuideError",
    "NOISE_ID",
    "prepare_guide",
    "broadcast_initialization",
    "guided_cacgmm",
    "sliding_window_gss",
    "window_starts",
    "rectify_activity",
]

NOISE_ID = "noise"
_BIN_CHUNK = 64


class GuideError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActivityMatrix:
    """Per-speaker frame activity in [0, 1].

    Frame ``t`` covers ``[offset + t * frame_shift, offset + (t + 1) * frame_shift)``
    seconds.
    """

    values: np.ndarray
    frame_shift: float
    speakers: tuple = ()
    offset: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[None]
        if v.ndim != 2:
            raise ValueError(f"activity must be (speakers, frames), got {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1 or not np.all(np.isfinite(v))):
            raise ValueError("activity values must lie in [0, 1]")
        speakers = tuple(self.speakers) or tuple(f"spk{i}" for i in range(v.shape[0]))
        if len(speakers) != v.shape[0]:
            raise ValueError("one speaker id per activity row required")
        if self.frame_shift <= 0:
            raise ValueError("frame_shift must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "speakers", speakers)

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold


@dataclass(frozen=True, eq=False)
class TFMask:
    """Soft masks of shape (classes, frames, bins); the noise class is last."""

    values: np.ndarray
    class_ids: tuple = ()
    frame_shift: float = 0.016
    offset: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"mask must be (classes, frames, bins), got {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1 + 1e-9 or not np.all(np.isfinite(v))):
            raise ValueError("mask values must lie in [0, 1]")
        ids = tuple(self.class_ids) or tuple(
            [f"spk{i}" for i in range(v.shape[0] - 1)] + [NOISE_ID])
        if len(ids) != v.shape[0]:
            raise ValueError("one class id per mask class required")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "class_ids", ids)

    @property
    def speaker_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.class_ids) if c != NOISE_ID]


@dataclass(frozen=True)
class CacgmmConfig:
    iterations: int = 20
    epsilon: float = 1e-10
    noise_floor: float = 1.0
    window_len: float = 120.0
    window_shift: float = 60.0
    rectify_threshold: float = 0.5
    context: float = 0.2
    guide_threshold: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.window_shift <= self.window_len:
            raise ValueError("need 0 < window_shift <= window_len")
        if not 0 < self.rectify_threshold < 1:
            raise ValueError("rectify_threshold must lie in (0, 1)")
        if self.epsilon <= 0 or self.noise_floor <= 0 or self.context < 0:
            raise ValueError("epsilon and noise_floor must be positive, context >= 0")


def prepare_guide(guide: ActivityMatrix, cfg: CacgmmConfig) -> np.ndarray:
    """Class prior weights (speakers + noise, frames).

    The guide is dilated by ``cfg.context`` seconds (running maximum), then
    entries below ``cfg.guide_threshold`` are zeroed; surviving soft values
    act as per-frame prior weights.  The noise row is ``cfg.noise_floor``.
    """
    radius = int(round(cfg.context / guide.frame_shift))
    g = guide.values
    if radius > 0:
        g = maximum_filter1d(g, size=2 * radius + 1, axis=1, mode="constant", cval=0.0)
    g = np.where(g >= cfg.guide_threshold, g, 0.0)
    noise = np.full((1, g.shape[1]), cfg.noise_floor)
    return np.concatenate([g, noise], axis=0)


def broadcast_initialization(weights: np.ndarray, bins: int) -> np.ndarray:
    """Time-only initial posteriors, shape (classes, frames, bins)."""
    gamma = weights / weights.sum(axis=0, keepdims=True)
    return np.repeat(gamma[:, :, None], bins, axis=2)


def _normalize_observations(data: np.ndarray) -> np.ndarray:
    # (channels, frames, bins) -> (bins, frames, channels), unit norm
    y = np.transpose(data, (2, 1, 0))
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    return y / np.maximum(norm, np.finfo(float).tiny)


def _log_pdf_terms(z, cov):
    """Return log cACG density without the constant, shape (bins, classes, frames)."""
    d = z.shape[-1]
    eigval, eigvec = np.linalg.eigh(cov)
    eigval = np.maximum(eigval, np.finfo(float).tiny)
    proj = z[:, None] @ eigvec.conj()
    quad = np.einsum("fktd,fkd->fkt", np.abs(proj) ** 2, 1.0 / eigval)
    quad = np.maximum(quad, np.finfo(float).tiny)
    logdet = np.log(eigval).sum(axis=-1)
    return -logdet[..., None] - d * np.log(quad), quad


def _m_step(z, gamma, quad, eps):
    d = z.shape[-1]
    mass = gamma.sum(axis=-1)
    pi = mass / gamma.shape[-1]
    w = gamma / quad / np.maximum(mass, np.finfo(float).tiny)[..., None]
    cov = d * (np.swapaxes(z[:, None] * w[..., None], -1, -2) @ z.conj()[:, None])
    cov = 0.5 * (cov + np.swapaxes(cov.conj(), -1, -2))
    trace = np.einsum("...dd->...", cov).real
    cov = cov + (eps * trace / d)[..., None, None] * np.eye(d)
    # classes without mass (speaker silent in this window) get a neutral shape
    cov[trace <= 0] = np.eye(d)
    return pi, cov


def _em_chunk(z, log_weights, gamma, iterations, eps):
    """EM on a block of frequency bins.

    ``z``: (bins, frames, channels); ``log_weights``: (classes, frames);
    ``gamma``: initial posteriors (bins, classes, frames).
    Returns final posteriors and per-iteration log-likelihood sums.
    """
    f, t, d = z.shape
    k = gamma.shape[1]
    const = math.lgamma(d) - math.log(2.0) - d * math.log(math.pi)
    quad = np.ones((f, k, t))
    cov = None
    trace = []
    for _ in range(iterations):
        pi, cov = _m_step(z, gamma, quad, eps)
        logp, quad = _log_pdf_terms(z, cov)
        with np.errstate(divide="ignore"):
            logits = np.log(pi)[..., None] + log_weights[None] + logp + const
        norm = logsumexp(logits, axis=1, keepdims=True)
        gamma = np.exp(logits - norm)
        trace.append(float(norm.sum()))
    return gamma, np.array(trace)


def _validate(spec: Spectrogram, guide: ActivityMatrix, init: TFMask | None):
    if spec.channels < 2:
        raise ValueError("cACGMM needs at least two channels; directional statistics "
                         "are undefined for a single channel")
    if guide.frames != spec.frames:
        raise ValueError(
            f"guide has {guide.frames} frames, spectrogram has {spec.frames}")
    if init is not None:
        if init.values.shape[1:] != (spec.frames, spec.bins):
            raise ValueError("initial mask grid does not match the spectrogram")
        if init.values.shape[0] != guide.values.shape[0] + 1:
            raise ValueError("initial mask needs one class per speaker plus noise")


def _fit(data, weights, init_values, cfg):
    """Run EM for an already-prepared weight matrix; returns (values, trace)."""
    if not np.any(weights[:-1] > 0):
        raise GuideError("guide is inactive for every speaker over the whole window")
    bins = data.shape[2]
    z = _normalize_observations(data)
    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)
    if init_values is None:
        init_values = broadcast_initialization(weights, bins)
    gamma0 = np.transpose(init_values, (2, 0, 1))
    out = np.empty_like(gamma0)
    trace = np.zeros(cfg.iterations)
    for lo in range(0, bins, _BIN_CHUNK):
        hi = min(lo + _BIN_CHUNK, bins)
        g, tr = _em_chunk(z[lo:hi], log_weights, gamma0[lo:hi], cfg.iterations, cfg.epsilon)
        out[lo:hi] = g
        trace += tr
    values = np.transpose(out, (1, 2, 0))
    return values, trace / (bins * data.shape[1])


def guided_cacgmm(spec: Spectrogram, guide: ActivityMatrix, init: TFMask | None = None,
                  cfg: CacgmmConfig = CacgmmConfig()) -> tuple[TFMask, np.ndarray]:
    """Fit a guided cACGMM and return class posteriors plus the log-likelihood trace.

    When ``init`` is given it replaces the time-broadcast initial posteriors;
    the guide still constrains every E-step.  The trace holds the mean
    guided log-likelihood per T-F observation after each iteration.
    """
    _validate(spec, guide, init)
    weights = prepare_guide(guide, cfg)
    values, trace = _fit(spec.data, weights, None if init is None else init.values, cfg)
    mask = TFMask(values, guide.speakers + (NOISE_ID,), guide.frame_shift, guide.offset)
    return mask, trace


def window_starts(frames: int, window: int, shift: int) -> list[int]:
    """Window start frames; the last window is aligned to the session end."""
    if frames <= window:
        return [0]
    starts = list(range(0, frames - window + 1, shift))
    if starts[-1] + window < frames:
        starts.append(frames - window)
    return starts


def _crossfade_weights(starts, window, frames):
    # triangular weights, normalised per frame -> linear cross-fade in overlaps
    w = np.zeros((len(starts), frames))
    for i, s in enumerate(starts):
        e = min(s + window, frames)
        t = np.arange(s, e)
        rise = t - s + 0.5 if i > 0 else np.full(t.size, np.inf)
        fall = e - t - 0.5 if i < len(starts) - 1 else np.full(t.size, np.inf)
        w[i, s:e] = np.minimum(np.minimum(rise, fall), window)
    return w / w.sum(axis=0, keepdims=True)


def sliding_window_gss(spec: Spectrogram, guide: ActivityMatrix,
                       cfg: CacgmmConfig = CacgmmConfig(),
                       init: TFMask | None = None) -> TFMask:
    """Guided cACGMM over overlapping windows, stitched by linear cross-fade.

    Classes stay tied to guide rows, so no permutation alignment between
    windows is needed.  The guide is dilated over the whole session before
    it is cut into windows.
    """
    _validate(spec, guide, init)
    weights = prepare_guide(guide, cfg)
    shift_s = guide.frame_shift
    window = max(1, int(round(cfg.window_len / shift_s)))
    hop = max(1, int(round(cfg.window_shift / shift_s)))
    frames = spec.frames
    starts = window_starts(frames, window, hop)
    fade = _crossfade_weights(starts, window, frames)
    k = weights.shape[0]
    result = np.zeros((k, frames, spec.bins))
    for i, s in enumerate(starts):
        e = min(s + window, frames)
        init_values = None if init is None else init.values[:, s:e]
        try:
            values, _ = _fit(spec.data[:, s:e], weights[:, s:e], init_values, cfg)
        except (GuideError, np.linalg.LinAlgError) as exc:
            raise type(exc)(f"window {i} (frames {s}-{e}): {exc}") from exc
        if len(starts) == 1:
            result = values
        else:
            result[:, s:e] += values * fade[i, s:e][None, :, None]
    return TFMask(result, guide.speakers + (NOISE_ID,), guide.frame_shift, guide.offset)


def rectify_activity(mask: TFMask, cfg: CacgmmConfig = CacgmmConfig(),
                     weights: np.ndarray | None = None) -> ActivityMatrix:
    """Frame activity = 1 where the frequency-averaged speaker mask reaches the threshold.

    ``weights`` (frames x bins, e.g. the observed power) turn the plain average
    into a weighted one, so that bins carrying no energy cannot outvote the
    bins where the speaker actually is.
    """
    idx = mask.speaker_indices
    if weights is None:
        avg = mask.values[idx].mean(axis=2)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != mask.values.shape[1:]:
            raise ValueError(f"weights shape {w.shape} does not match mask grid "
                             f"{mask.values.shape[1:]}")
        total = w.sum(axis=1)
        safe = np.where(total > 0, total, 1.0)
        avg = np.einsum("ktf,tf->kt", mask.values[idx], w) / safe
        avg = np.where(total > 0, avg, mask.values[idx].mean(axis=2))
    act = (avg >= cfg.rectify_threshold).astype(np.float64)
    speakers = tuple(mask.class_ids[i] for i in idx)
    return ActivityMatrix(act, mask.frame_shift, speakers, mask.offset)
