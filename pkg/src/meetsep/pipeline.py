"""End-to-end orchestration: staged diarization and V1/V2/V3 separation.

Diarization stages, in order:

``csd``
    spectral clustering of embeddings computed on WPE + MVDR enhanced audio
    (replaced by the supplied priors when given);
``rectified``
    guided cACGMM over sliding windows initialised from the previous stage,
    thresholded back to frame activity;
``recluster_fixed`` / ``recluster_free``
    GSS-separated speaker streams re-clustered with the speaker count held
    fixed, or chosen by the eigengap.

A disabled stage passes the previous artifact through unchanged.

Separation variants:

``v1``  WPE -> sliding-window guided cACGMM (time prior) -> MVDR per speaker
``v2``  as v1, but the cACGMM starts from a T-F prior
``v3``  the T-F prior drives the MVDR directly; the time prior only cuts segments
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy
from scipy.ndimage import binary_closing, binary_opening

from . import __version__
from .config import PipelineConfig, config_hash, config_to_dict
from .dereverb import dereverberate
from .diarize import (Annotation, Segment, activity_to_annotation, annotation_to_activity,
                      close_gaps,
                      energy_vad, extract_embeddings, recluster, spectral_cluster,
                      window_labels_to_activity)
from .maskmodel import (NOISE_ID, ActivityMatrix, CacgmmConfig, TFMask, broadcast_initialization,
                        prepare_guide, rectify_activity, sliding_window_gss)
from .spatial import beamform, estimate_psd, mvdr_weights
from .spectral import MultiChannelWave, Spectrogram, istft, logmel_features, stft

__all__ = [
    "PipelineError",
    "SeparationResult",
    "enhance_for_clustering",
    "csd",
    "activity_on_spec",
    "time_broadcast_prior",
    "internal_tf_prior",
    "run_diarization_stages",
    "run_separation",
    "cut_segments",
    "run_pipeline",
    "STAGES",
]

STAGES = ("csd", "rectified", "recluster_fixed", "recluster_free")
_MASK_FLOOR = 1e-10

Refiner = Callable[[Spectrogram, ActivityMatrix], ActivityMatrix]


class PipelineError(RuntimeError):
    """A stage failed; ``artifacts`` holds the outputs of the stages before it."""

    def __init__(self, stage: str, cause: Exception, artifacts: list):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.artifacts = artifacts


@dataclass
class SeparationResult:
    waves: dict
    segments: list
    annotation: Annotation
    mask: TFMask
    refs: dict = field(default_factory=dict)


def activity_on_spec(priors: Annotation | ActivityMatrix, spec: Spectrogram,
                     speakers: Sequence[str] | None = None) -> ActivityMatrix:
    """Express a time prior on the frame grid of ``spec``."""
    if isinstance(priors, Annotation):
        return annotation_to_activity(priors, spec.frames, spec.frame_shift_seconds,
                                      speakers if speakers is not None else priors.speakers,
                                      spec.frame_offset)
    if (priors.frames == spec.frames and np.isclose(priors.frame_shift, spec.frame_shift_seconds)):
        return priors
    # nearest-frame resampling by frame-centre time
    centres = spec.frame_offset + (np.arange(spec.frames) + 0.5) * spec.frame_shift_seconds
    idx = np.floor((centres - priors.offset) / priors.frame_shift).astype(int)
    valid = (idx >= 0) & (idx < priors.frames)
    values = np.zeros((priors.values.shape[0], spec.frames))
    values[:, valid] = priors.values[:, idx[valid]]
    return ActivityMatrix(values, spec.frame_shift_seconds, priors.speakers, spec.frame_offset)



def _clean_vad(speech: np.ndarray, frame_shift: float, min_dur: float) -> np.ndarray:
    """Close pauses and remove bursts shorter than ``min_dur``."""
    width = max(1, int(round(min_dur / frame_shift)))
    s = np.pad(speech, width, mode="edge")
    s = binary_opening(binary_closing(s, np.ones(width)), np.ones(width))
    return s[width:-width]


def enhance_for_clustering(wave: MultiChannelWave, cfg: PipelineConfig) -> MultiChannelWave:
    """WPE (optional) then a speech-vs-pause MVDR; returns a mono wave."""
    if cfg.wpe_enabled:
        wave = dereverberate(wave, cfg.wpe, cfg.wpe_stft)
    spec = stft(wave, cfg.stft)
    mono = wave.channel(0)
    if spec.channels < 2:
        return mono
    feats = logmel_features(mono, cfg.diarize.n_mels, hop=cfg.activity_frame_shift)
    speech = _clean_vad(energy_vad(feats, cfg.diarize.vad_threshold_db), feats.frame_shift,
                        cfg.diarize.min_segment)
    times = spec.frame_offset + (np.arange(spec.frames) + 0.5) * spec.frame_shift_seconds
    idx = np.clip(np.round((times - feats.times[0]) / feats.frame_shift).astype(int), 0,
                  len(speech) - 1)
    frame_speech = speech[idx].astype(np.float64)
    if frame_speech.min() == frame_speech.max():
        return mono
    m = np.repeat(frame_speech[:, None], spec.bins, axis=1)
    target = estimate_psd(spec, m)
    noise = estimate_psd(spec, 1.0 - m)
    w = mvdr_weights(target, noise, 0, cfg.mvdr)
    return istft(beamform(spec, w), wave.num_samples)


def csd(wave: MultiChannelWave, cfg: PipelineConfig, session: str = "session",
        max_speakers: int | None = None) -> Annotation:
    """Clustering-based diarization on a (possibly enhanced) mono wave."""
    dcfg = cfg.diarize
    if max_speakers is not None:
        dcfg = dataclasses.replace(dcfg, max_speakers=max_speakers)
    feats = logmel_features(wave.channel(0), dcfg.n_mels, hop=cfg.activity_frame_shift)
    speech = _clean_vad(energy_vad(feats, dcfg.vad_threshold_db), feats.frame_shift,
                        dcfg.min_segment)
    emb = extract_embeddings(feats, dcfg.embed_win, dcfg.embed_hop, speech)
    if len(emb) == 0:
        return Annotation((), session)
    labels = spectral_cluster(emb, None, dcfg) if len(emb) > 1 else np.zeros(1, dtype=int)
    k = int(labels.max()) + 1
    act = window_labels_to_activity(emb, labels, k, len(speech), feats.frame_shift, speech)
    names = tuple(f"spk{i}" for i in range(k))
    offset = feats.times[0] - 0.5 * feats.frame_shift
    return activity_to_annotation(ActivityMatrix(act, feats.frame_shift, names, offset),
                                  session, min_duration=dcfg.min_segment)


def _cacgmm_rectifier(cfg: PipelineConfig) -> Refiner:
    def refine(spec: Spectrogram, guide: ActivityMatrix) -> ActivityMatrix:
        mask = sliding_window_gss(spec, guide, cfg.cacgmm)
        power = (np.mean(np.abs(spec.data) ** 2, axis=0)
                 if cfg.rectify_weighting == "energy" else None)
        return rectify_activity(mask, cfg.cacgmm, weights=power)
    return refine


def _separated_streams(spec: Spectrogram, guide: ActivityMatrix, cfg: PipelineConfig,
                       num_samples: int) -> tuple[TFMask, dict, dict]:
    mask = sliding_window_gss(spec, guide, cfg.cacgmm)
    return (mask, *_mvdr_streams(spec, mask, cfg, num_samples))


def _mvdr_streams(spec: Spectrogram, mask: TFMask, cfg: PipelineConfig, num_samples: int):
    waves, refs = {}, {}
    values = np.clip(mask.values, _MASK_FLOOR, 1.0 - _MASK_FLOOR)
    for k in mask.speaker_indices:
        spk = mask.class_ids[k]
        target = estimate_psd(spec, values[k])
        noise = estimate_psd(spec, values[k], complement=True)
        w = mvdr_weights(target, noise, None, cfg.mvdr)
        waves[spk] = istft(beamform(spec, w), num_samples)
        refs[spk] = w.ref
    return waves, refs


def _recluster_stage(wave: MultiChannelWave, spec_w: Spectrogram, prev: Annotation,
                     cfg: PipelineConfig, session: str, fixed: bool) -> Annotation:
    speakers = prev.speakers
    if not speakers:
        return prev
    guide = activity_on_spec(prev, spec_w, speakers)
    _, waves, _ = _separated_streams(spec_w, guide, cfg, wave.num_samples)
    dcfg = cfg.diarize
    streams, speech = [], []
    for spk in speakers:
        feats = logmel_features(waves[spk], dcfg.n_mels, hop=cfg.activity_frame_shift)
        act = annotation_to_activity(prev, feats.vectors.shape[0], feats.frame_shift, [spk],
                                     feats.times[0] - 0.5 * feats.frame_shift).values[0] > 0
        streams.append(extract_embeddings(feats, dcfg.embed_win, dcfg.embed_hop, act))
        speech.append(act)
    total = sum(len(s) for s in streams)
    if total == 0:
        return prev
    fixed_k = min(len(speakers), total) if fixed else None
    ann = recluster(streams, fixed_k, dcfg, session, cfg.activity_frame_shift, speech)
    return Annotation(tuple(s for s in ann.segments if s.duration >= dcfg.min_segment), session)


def run_diarization_stages(wave: MultiChannelWave, priors: Annotation | None = None,
                           cfg: PipelineConfig = PipelineConfig(), session: str = "session",
                           refiner: Refiner | None = None) -> list[tuple[str, Annotation]]:
    """Run the staged diarization and return ``[(stage, annotation), ...]``.

    ``refiner`` replaces the default cACGMM rectifier; it receives the
    spectrogram and a guide on its grid and returns refined activity.
    """
    artifacts: list[tuple[str, Annotation]] = []

    def run(stage, fn):
        try:
            return fn()
        except Exception as exc:
            raise PipelineError(stage, exc, list(artifacts)) from exc

    if priors is not None:
        stage_a = priors
    else:
        stage_a = run("csd", lambda: csd(enhance_for_clustering(wave, cfg), cfg, session))
    artifacts.append(("csd", stage_a))

    multi = wave.channels >= 2
    spec = stft(wave, cfg.stft)
    spec_w = None
    if cfg.wpe_enabled and (cfg.rectify_on_wpe or cfg.recluster != "off"):
        spec_w = run("wpe", lambda: stft(dereverberate(wave, cfg.wpe, cfg.wpe_stft), cfg.stft))
    if spec_w is None:
        spec_w = spec

    stage_b = stage_a
    if cfg.rectify_enabled and stage_a.speakers:
        if not multi:
            raise PipelineError("rectified", ValueError(
                "rectification needs >= 2 channels; disable it for single-channel input"),
                list(artifacts))
        refine = refiner or _cacgmm_rectifier(cfg)

        def rectify():
            src = spec_w if cfg.rectify_on_wpe else spec
            guide = activity_on_spec(stage_a, src, stage_a.speakers)
            act = close_gaps(refine(src, guide), cfg.diarize.min_segment)
            return activity_to_annotation(act, session, min_duration=cfg.diarize.min_segment)

        stage_b = run("rectified", rectify)
    artifacts.append(("rectified", stage_b))

    for name, fixed in (("recluster_fixed", True), ("recluster_free", False)):
        enabled = cfg.recluster in ("both", "fixed" if fixed else "free")
        if enabled and multi and stage_b.speakers:
            out = run(name, lambda: _recluster_stage(wave, spec_w, stage_b, cfg, session, fixed))
        else:
            out = stage_b
        artifacts.append((name, out))
    return artifacts


def time_broadcast_prior(guide: ActivityMatrix, bins: int,
                         cfg: CacgmmConfig = CacgmmConfig()) -> TFMask:
    """The cACGMM's own time-only initialisation, as a T-F prior."""
    values = broadcast_initialization(prepare_guide(guide, cfg), bins)
    return TFMask(values, guide.speakers + (NOISE_ID,), guide.frame_shift, guide.offset)


def internal_tf_prior(spec: Spectrogram, guide: ActivityMatrix, cfg: PipelineConfig) -> TFMask:
    """Short-window cACGMM masks standing in for a learned T-F estimator."""
    short = dataclasses.replace(cfg.cacgmm, window_len=cfg.tfprior.window_len,
                                window_shift=cfg.tfprior.window_shift,
                                iterations=cfg.tfprior.iterations)
    return sliding_window_gss(spec, guide, short)


def cut_segments(wave: MultiChannelWave, annotation: Annotation) -> list:
    """Sample-accurate cuts ``(speaker, wave, start, end)`` ordered by start time."""
    sr = wave.sample_rate
    n = wave.num_samples
    out = []
    for seg in sorted(annotation.segments, key=lambda s: (s.start, s.speaker, s.end)):
        a, b = int(round(seg.start * sr)), int(round(seg.end * sr))
        if a < 0 or b > n:
            warnings.warn(f"segment {seg} exceeds the {n / sr:.3f} s wave; clamped")
            a, b = max(a, 0), min(b, n)
        if b <= a:
            continue
        out.append((seg.speaker, MultiChannelWave(wave.samples[:, a:b], sr), a / sr, b / sr))
    return out


def run_separation(wave: MultiChannelWave, priors: Annotation | ActivityMatrix,
                   tf_prior: TFMask | None = None,
                   cfg: PipelineConfig = PipelineConfig()) -> SeparationResult:
    """Separate every speaker of ``priors``; returns waves, cut segments and masks."""
    if wave.channels < 2:
        raise ValueError("multi-channel separation needs at least two channels")
    if cfg.wpe_enabled:
        wave = dereverberate(wave, cfg.wpe, cfg.wpe_stft)
    spec = stft(wave, cfg.stft)
    speakers = priors.speakers if isinstance(priors, Annotation) else list(priors.speakers)
    guide = activity_on_spec(priors, spec, speakers)
    if tf_prior is not None:
        if tf_prior.speaker_indices != list(range(len(speakers))):
            raise ValueError(f"T-F prior has {len(tf_prior.speaker_indices)} speaker classes, "
                             f"time prior has {len(speakers)}")
        if tf_prior.values.shape[1:] != (spec.frames, spec.bins):
            raise ValueError("T-F prior grid does not match the STFT grid")
    if cfg.variant == "v1":
        mask = sliding_window_gss(spec, guide, cfg.cacgmm)
    elif cfg.variant == "v2":
        if tf_prior is None:
            tf_prior = internal_tf_prior(spec, guide, cfg)
        mask = sliding_window_gss(spec, guide, cfg.cacgmm, init=tf_prior)
    else:
        if tf_prior is None:
            raise ValueError("variant v3 needs a T-F prior")
        mask = TFMask(tf_prior.values, guide.speakers + (NOISE_ID,), guide.frame_shift,
                      guide.offset)
    waves, refs = _mvdr_streams(spec, mask, cfg, wave.num_samples)
    ann = priors if isinstance(priors, Annotation) else activity_to_annotation(priors)
    segments = []
    for spk, w in waves.items():
        own = Annotation(tuple(s for s in ann.segments if s.speaker == spk), ann.session)
        segments.extend(cut_segments(w, own))
    segments.sort(key=lambda s: (s[2], s[0]))
    return SeparationResult(waves, segments, ann, mask, refs)


def run_pipeline(wave: MultiChannelWave, out_dir, cfg: PipelineConfig = PipelineConfig(),
                 priors: Annotation | None = None, tf_prior: TFMask | None = None,
                 session: str = "session") -> dict:
    """Diarize, separate with the final stage, and write a run directory.

    The directory holds one RTTM per stage, one WAV per separated speaker
    and ``manifest.json`` (config hash, versions, file list).  Nothing
    time-dependent is written, so equal inputs give byte-identical output.
    """
    from .sessionio import write_mask, write_rttm, write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = run_diarization_stages(wave, priors, cfg, session)
    files = []
    for name, ann in stages:
        fname = f"{name}.rttm"
        write_rttm(Annotation(ann.segments, session), out / fname)
        files.append(fname)
    final = stages[-1][1]
    if cfg.recluster in ("fixed",):
        final = dict(stages)["recluster_fixed"]
    result = None
    if final.speakers and wave.channels >= 2 and not (cfg.variant == "v3" and tf_prior is None):
        result = run_separation(wave, final, tf_prior, cfg)
        for spk, w in sorted(result.waves.items()):
            fname = f"separated_{spk}.wav"
            write_wav(w, out / fname)
            files.append(fname)
        write_mask(result.mask, out / "mask.mctf")
        files += ["mask.mctf", "mask.mctf.json"]
    manifest = {
        "session": session,
        "config_sha256": config_hash(cfg),
        "config": config_to_dict(cfg),
        "versions": {"meetsep": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "stages": [name for name, _ in stages],
        "speakers": final.speakers,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
