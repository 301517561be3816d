"""Deterministic synthetic multi-channel meetings with ground truth.

Speakers are amplitude-modulated noise sources with speaker-specific
spectral envelopes, talking in turns on a 10 ms grid.  Each speaker is
imaged onto the array by a fixed fractional delay and gain per channel and,
when ``reverb_t60 > 0``, an exponentially decaying noise tail.  Spatially
uncorrelated noise is added at the requested SNR.

All randomness comes from numpy's Philox4x64-10 counter-based generator
keyed by ``SimConfig.seed`` (sub-streams derived with ``jumped``), so a
session is reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .diarize import Annotation, Segment, annotation_to_activity
from .maskmodel import NOISE_ID, ActivityMatrix, TFMask
from .scoring import WordSegment
from .spectral import MultiChannelWave, Spectrogram

__all__ = [
    "SimConfig",
    "SimSession",
    "simulate_session",
    "ideal_ratio_mask",
    "measured_overlap_ratio",
    "make_rng",
    "BAND_EDGES",
    "EARLY_BOUNDARY",
]

BAND_EDGES = (0.0, 500.0, 1500.0, 3500.0, 8000.0)
EARLY_BOUNDARY = 0.05
SYLLABIC_RATE = 4.0
GRID = 0.01
TURN_RANGE = (2.0, 5.0)
MIN_TURN = 0.3
OVERLAP_BOUNDARY_SHARE = 0.5
MAX_OVERLAP_FRACTION = 0.9
GAP_RANGE = (0.2, 0.6)
MAX_DELAY = 8.0
# band levels relative to a speaker's main band: broadband enough that an
# active speaker dominates most bins at moderate SNR
SECOND_BAND_DB = -4.0
OFF_BAND_DB = -10.0


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    bitgen = np.random.Philox(seed)
    if stream:
        bitgen = bitgen.jumped(stream)
    return np.random.Generator(bitgen)


@dataclass(frozen=True)
class SimConfig:
    speakers: int = 2
    channels: int = 4
    duration: float = 10.0
    overlap_ratio: float = 0.0
    snr: float = 20.0
    reverb_t60: float = 0.0
    seed: int = 0
    sample_rate: int = 16000
    drr: float = 0.0

    def __post_init__(self):
        if self.speakers < 1 or self.channels < 1 or self.duration <= 0:
            raise ValueError("need speakers >= 1, channels >= 1 and duration > 0")
        if not 0 <= self.overlap_ratio < 1:
            raise ValueError("overlap_ratio must lie in [0, 1)")
        if self.reverb_t60 < 0 or self.sample_rate < 8000:
            raise ValueError("reverb_t60 must be >= 0 and sample_rate >= 8000")


@dataclass(frozen=True, eq=False)
class SimSession:
    """Ground truth for one simulated meeting.

    ``sources[k]`` is speaker k's multi-channel image before noise, so
    ``mixture == sum(sources) + noise`` exactly.  ``direct`` and ``early``
    hold the direct-path image and the image up to ``EARLY_BOUNDARY``
    seconds of the room response; ``dry`` is the mono source signal.
    """

    cfg: SimConfig
    mixture: MultiChannelWave
    sources: list
    noise: MultiChannelWave
    dry: list
    direct: list
    early: list
    activity: ActivityMatrix
    annotation: Annotation
    words: list
    delays: np.ndarray
    gains: np.ndarray

    @property
    def speaker_ids(self) -> tuple:
        return self.activity.speakers

    def activity_on_grid(self, frames: int, frame_shift: float, offset: float = 0.0):
        return annotation_to_activity(self.annotation, frames, frame_shift,
                                      self.speaker_ids, offset)

    def activity_for(self, spec: Spectrogram) -> ActivityMatrix:
        """Oracle activity on the frame grid of ``spec``."""
        return self.activity_on_grid(spec.frames, spec.frame_shift_seconds, spec.frame_offset)


def _place(durations, speakers, gaps, overlapping, c, duration):
    """Lay turns out in order; an overlapping boundary starts the new turn
    ``c`` times its own length before the previous turn ends, a pause
    boundary leaves a gap.  At most two turns are ever active at once."""
    turns = []
    end_limit = round(duration - 0.2, 2)
    for i, (spk, d) in enumerate(zip(speakers, durations)):
        if not turns:
            start = 0.3
        elif overlapping[i] and c > 0:
            start = round(turns[-1][2] - round(c * d, 2), 2)
            floor = turns[-1][1] + MIN_TURN
            if len(turns) > 1:
                floor = max(floor, turns[-2][2])
            start = round(max(start, floor), 2)
        else:
            start = round(turns[-1][2] + gaps[i], 2)
        end = round(min(start + d, end_limit), 2)
        if end - start < MIN_TURN:
            break
        turns.append((spk, start, end))
        if end >= end_limit:
            break
    return turns


def _turn_overlap(turns) -> float:
    if not turns:
        return 0.0
    frames = int(round(max(e for _, _, e in turns) / GRID)) + 1
    count = np.zeros(frames, dtype=int)
    for _, s, e in turns:
        count[int(round(s / GRID)):int(round(e / GRID))] += 1
    speech = np.count_nonzero(count)
    return np.count_nonzero(count >= 2) / speech if speech else 0.0


def _schedule(cfg: SimConfig, rng: np.random.Generator) -> list[tuple[int, float, float]]:
    """Turn list ``(speaker, start, end)`` on the 10 ms grid.

    Each boundary between consecutive turns is either a pause or an
    overlap (a seeded ``OVERLAP_BOUNDARY_SHARE`` of them, more if the target
    needs it) in which the new turn
    starts a fraction ``c`` of its own length early.  ``c`` is found by
    bisection so that the realised overlap ratio (overlapped / total speech
    time) matches the target.
    """
    r = cfg.overlap_ratio
    if r > 0 and cfg.speakers < 2:
        raise ValueError("overlap requires at least two speakers")
    lo, hi = TURN_RANGE
    n = int(cfg.duration / (lo * 0.5)) + 2
    speakers: list[int] = []
    while len(speakers) < n:
        order = [int(k) for k in rng.permutation(cfg.speakers)]
        if speakers and order[0] == speakers[-1] and len(order) > 1:
            order[0], order[1] = order[1], order[0]
        speakers.extend(order)
    speakers = speakers[:n]
    durations = [round(float(d), 2) for d in rng.uniform(lo, hi, n)]
    gaps = [float(g) for g in rng.uniform(*GAP_RANGE, n)]
    order = rng.permutation(n)
    overlapping = np.zeros(n, dtype=bool)
    overlapping[order[:int(round(OVERLAP_BOUNDARY_SHARE * n))]] = True
    if r == 0:
        return _place(durations, speakers, gaps, overlapping, 0.0, cfg.duration)
    c_lo, c_hi = 0.0, MAX_OVERLAP_FRACTION
    # too few overlapping boundaries for the target: convert pauses, in a seeded order
    extra = iter(order[int(round(OVERLAP_BOUNDARY_SHARE * n)):])
    while _turn_overlap(_place(durations, speakers, gaps, overlapping, c_hi, cfg.duration)) < r:
        nxt = next(extra, None)
        if nxt is None:
            raise ValueError(f"overlap ratio {r} not achievable with turns of {lo}-{hi} s")
        overlapping[nxt] = True
    # the ratio is monotone but not continuous in c (turns drop off the end),
    # so keep the closest point seen
    best = (np.inf, c_hi)
    for _ in range(40):
        mid = 0.5 * (c_lo + c_hi)
        got = _turn_overlap(_place(durations, speakers, gaps, overlapping, mid, cfg.duration))
        best = min(best, (abs(got - r), mid))
        if got < r:
            c_lo = mid
        else:
            c_hi = mid
    return _place(durations, speakers, gaps, overlapping, best[1], cfg.duration)


def _envelope(speaker: int, freqs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    centers = [0.5 * (a + b) for a, b in zip(BAND_EDGES[:-1], BAND_EDGES[1:])]
    gains = np.full(4, OFF_BAND_DB)
    gains[speaker % 4] = 0.0
    gains[(speaker // 4 + speaker + 1) % 4] = SECOND_BAND_DB
    gains += rng.uniform(-1.5, 1.5, 4)
    db = np.interp(freqs, centers, gains)
    return 10 ** (db / 20)


def _speech_like(n: int, sr: int, env: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise) * np.interp(np.fft.rfftfreq(n, 1 / sr),
                                          np.fft.rfftfreq(env.size * 2 - 2, 1 / sr), env)
    x = np.fft.irfft(spec, n)
    t = np.arange(n) / sr
    rate = SYLLABIC_RATE * float(rng.uniform(0.8, 1.2))
    mod = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + float(rng.uniform(0, 2 * np.pi)))
    ramp = min(int(0.01 * sr), n // 2)
    fade = np.ones(n)
    fade[:ramp] = np.linspace(0, 1, ramp, endpoint=False)
    fade[n - ramp:] = fade[:ramp][::-1]
    x = x * mod * fade
    return x / np.sqrt(np.mean(x ** 2))


def _fractional_delay(x: np.ndarray, delay: float) -> np.ndarray:
    n = x.size
    size = 1 << int(np.ceil(np.log2(n + int(np.ceil(abs(delay))) + 1)))
    f = np.fft.rfftfreq(size)
    y = np.fft.irfft(np.fft.rfft(x, size) * np.exp(-2j * np.pi * f * delay), size)
    return y[:n]


def _tail(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    sr = cfg.sample_rate
    n = int(round(cfg.reverb_t60 * sr))
    t = np.arange(n) / sr
    h = rng.standard_normal(n) * np.exp(-3 * np.log(10) * t / cfg.reverb_t60)
    h[: int(0.002 * sr)] = 0.0
    return h * np.sqrt(10 ** (-cfg.drr / 10) / np.sum(h ** 2))


def simulate_session(cfg: SimConfig) -> SimSession:
    sr = cfg.sample_rate
    n = int(round(cfg.duration * sr))
    rng_sched = make_rng(cfg.seed, 0)
    turns = _schedule(cfg, rng_sched)

    rng_src = make_rng(cfg.seed, 1)
    rng_space = make_rng(cfg.seed, 2)
    rng_noise = make_rng(cfg.seed, 3)
    rng_words = make_rng(cfg.seed, 4)

    freqs = np.fft.rfftfreq(1024, 1 / sr)
    envs = [_envelope(k, freqs, rng_src) for k in range(cfg.speakers)]
    levels = 10 ** (rng_src.uniform(-3, 3, cfg.speakers) / 20)
    dry = np.zeros((cfg.speakers, n))
    for spk, start, end in turns:
        a, b = int(round(start * sr)), int(round(end * sr))
        dry[spk, a:b] += levels[spk] * _speech_like(b - a, sr, envs[spk], rng_src)

    delays = rng_space.uniform(-MAX_DELAY, MAX_DELAY, (cfg.speakers, cfg.channels))
    delays[:, 0] = 0.0
    delays += MAX_DELAY
    gains = rng_space.uniform(0.7, 1.0, (cfg.speakers, cfg.channels))
    early_len = int(round(EARLY_BOUNDARY * sr))
    sources, direct, early = [], [], []
    for k in range(cfg.speakers):
        d = np.stack([gains[k, c] * _fractional_delay(dry[k], delays[k, c])
                      for c in range(cfg.channels)])
        if cfg.reverb_t60 > 0:
            img = np.empty_like(d)
            ear = np.empty_like(d)
            for c in range(cfg.channels):
                h = _tail(cfg, rng_space)
                img[c] = d[c] + fftconvolve(d[c], h)[:n]
                ear[c] = d[c] + fftconvolve(d[c], h[:early_len])[:n]
        else:
            img, ear = d, d.copy()
        direct.append(MultiChannelWave(d, sr))
        early.append(MultiChannelWave(ear, sr))
        sources.append(img)

    speech = np.sum(sources, axis=0)
    noise = rng_noise.standard_normal((cfg.channels, n))
    p_speech = np.mean(speech ** 2)
    noise *= np.sqrt(p_speech / np.mean(noise ** 2) * 10 ** (-cfg.snr / 10))
    mixture = speech + noise

    ids = tuple(f"spk{k}" for k in range(cfg.speakers))
    ann = Annotation(tuple(Segment(s, e, ids[k]) for k, s, e in turns), f"sim{cfg.seed}").canonical()
    activity = annotation_to_activity(ann, int(np.ceil(cfg.duration / GRID)), GRID, ids)

    words = []
    for spk, start, end in turns:
        t = start + float(rng_words.uniform(0.0, 0.1))
        while True:
            dur = float(rng_words.uniform(0.2, 0.4))
            if t + dur > end:
                break
            token = f"w{int(rng_words.integers(0, 200)):03d}"
            words.append(WordSegment(token, round(t, 3), round(t + dur, 3), ids[spk]))
            t += dur + float(rng_words.uniform(0.02, 0.1))
    words.sort(key=lambda w: (w.start, w.speaker))

    return SimSession(cfg, MultiChannelWave(mixture, sr),
                      [MultiChannelWave(s, sr) for s in sources],
                      MultiChannelWave(noise, sr),
                      [MultiChannelWave(d, sr) for d in dry],
                      direct, early, activity, ann, words, delays, gains)


def measured_overlap_ratio(activity: ActivityMatrix) -> float:
    """Overlapped speech time divided by total (union) speech time."""
    count = activity.binarize().sum(axis=0)
    speech = np.count_nonzero(count >= 1)
    return float(np.count_nonzero(count >= 2) / speech) if speech else 0.0


def ideal_ratio_mask(sources: list[Spectrogram], noise: Spectrogram | None = None,
                     channel: int = 0, eps: float = 1e-10,
                     class_ids: tuple | None = None) -> TFMask:
    """m_k = |S_k|^2 / (sum_j |S_j|^2 + |N|^2 + eps) on one reference channel.

    The noise class is appended last when ``noise`` is given.
    """
    shape = sources[0].data.shape[1:]
    for s in sources[1:] + ([noise] if noise is not None else []):
        if s.data.shape[1:] != shape:
            raise ValueError("source and noise spectrograms must share one T-F grid")
    powers = [np.abs(s.data[channel]) ** 2 for s in sources]
    if noise is not None:
        powers.append(np.abs(noise.data[channel]) ** 2)
    p = np.stack(powers)
    values = p / (p.sum(axis=0, keepdims=True) + eps)
    if class_ids is None:
        class_ids = tuple(f"spk{k}" for k in range(len(sources)))
        if noise is not None:
            class_ids += (NOISE_ID,)
    return TFMask(values, class_ids, sources[0].frame_shift_seconds, sources[0].frame_offset)
