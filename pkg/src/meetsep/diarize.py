"""Clustering-based speaker diarization and activity utilities.

Embeddings here are lightweight statistics of log-mel features (per-window
mean and standard deviation after session-level mean normalisation).  Users
with a trained speaker model can ingest their own vectors through
``sessionio`` and reuse the clustering.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import eigh

from .maskmodel import ActivityMatrix
from .spectral import FeatureSequence

__all__ = [
    "Segment",
    "Annotation",
    "EmbeddingSequence",
    "DiarizeConfig",
    "annotation_to_activity",
    "activity_to_annotation",
    "close_gaps",
    "extract_embeddings",
    "affinity_matrix",
    "laplacian_eigen",
    "estimate_speaker_count",
    "spectral_cluster",
    "kmeans",
    "recluster",
    "average_posteriors",
    "overlap_segments",
    "energy_vad",
    "window_labels_to_activity",
]


@dataclass(frozen=True, order=True)
class Segment:
    start: float
    end: float
    speaker: str

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")
        if not isinstance(self.speaker, str) or not self.speaker:
            raise ValueError("speaker id must be a non-empty string")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Annotation:
    segments: tuple = ()
    session: str = "session"

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(s[1], s[2], s[0])
                     for s in self.segments)
        object.__setattr__(self, "segments", segs)

    @property
    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    @property
    def end(self) -> float:
        return max((s.end for s in self.segments), default=0.0)

    def canonical(self) -> "Annotation":
        return Annotation(tuple(sorted(self.segments, key=lambda s: (s.start, s.speaker, s.end))),
                          self.session)

    def rename(self, mapping: dict) -> "Annotation":
        return Annotation(tuple(Segment(s.start, s.end, mapping.get(s.speaker, s.speaker))
                                for s in self.segments), self.session)


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    vectors: np.ndarray
    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("embeddings must be (windows, dim)")
        norms = np.linalg.norm(v, axis=1)
        if v.shape[0] and np.any(np.abs(norms - 1) > 1e-6):
            raise ValueError("embedding rows must be L2-normalised")
        starts = np.asarray(self.starts, dtype=np.float64)
        ends = np.asarray(self.ends, dtype=np.float64)
        if starts.shape != (v.shape[0],) or ends.shape != (v.shape[0],):
            raise ValueError("one start/end time per embedding row")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)

    def __len__(self):
        return self.vectors.shape[0]

    @classmethod
    def from_raw(cls, vectors, starts, ends) -> "EmbeddingSequence":
        v = np.asarray(vectors, dtype=np.float64)
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v / np.maximum(n, 1e-12), starts, ends)


@dataclass(frozen=True)
class DiarizeConfig:
    n_mels: int = 40
    embed_win: float = 1.5
    embed_hop: float = 0.75
    p_percentile: float = 0.7
    max_speakers: int = 8
    seed: int = 42
    vad_threshold_db: float = 6.0
    min_segment: float = 0.3
    overlap_min_dur: float = 0.1


def annotation_to_activity(ann: Annotation, frames: int, frame_shift: float,
                           speakers: Sequence[str] | None = None,
                           offset: float = 0.0) -> ActivityMatrix:
    """Binary activity; frame t is active when its centre lies inside a segment."""
    speakers = list(speakers) if speakers is not None else ann.speakers
    act = np.zeros((len(speakers), frames))
    index = {s: i for i, s in enumerate(speakers)}
    for seg in ann.segments:
        if seg.speaker not in index:
            continue
        lo = int(np.ceil((seg.start - offset) / frame_shift - 0.5))
        hi = int(np.ceil((seg.end - offset) / frame_shift - 0.5))
        act[index[seg.speaker], max(lo, 0):max(min(hi, frames), 0)] = 1.0
    return ActivityMatrix(act, frame_shift, tuple(speakers), offset)


def activity_to_annotation(act: ActivityMatrix, session: str = "session",
                           threshold: float = 0.5, min_duration: float = 0.0) -> Annotation:
    """Runs of active frames become segments; runs shorter than ``min_duration`` are dropped."""
    segs = []
    binary = act.values >= threshold
    for spk, row in zip(act.speakers, binary):
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for lo, hi in zip(edges[::2], edges[1::2]):
            start = act.offset + lo * act.frame_shift
            end = act.offset + hi * act.frame_shift
            start = max(start, 0.0)
            if end - start >= max(min_duration, 1e-9):
                segs.append(Segment(float(round(start, 6)), float(round(end, 6)), spk))
    return Annotation(tuple(segs), session).canonical()


def close_gaps(act: ActivityMatrix, max_gap: float) -> ActivityMatrix:
    """Fill inactive runs shorter than ``max_gap`` seconds that lie between active frames."""
    values = act.values.copy()
    limit = max_gap / act.frame_shift
    for row in values:
        on = row >= 0.5
        padded = np.concatenate([[True], on, [True]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        for lo, hi in zip(edges[::2], edges[1::2]):
            if 0 < lo and hi < len(row) and hi - lo < limit:
                row[lo:hi] = 1.0
    return ActivityMatrix(values, act.frame_shift, act.speakers, act.offset)


def energy_vad(features: FeatureSequence, threshold_db: float = 6.0) -> np.ndarray:
    """Frames whose log energy exceeds the 10th-percentile floor by ``threshold_db``."""
    energy = np.log(np.sum(np.exp(features.vectors), axis=1))
    floor = np.percentile(energy, 10)
    return energy > floor + threshold_db * np.log(10) / 10


def _window_count(duration: float, win: float, hop: float) -> int:
    return int(np.floor((duration - win) / hop + 1e-9)) + 1


def extract_embeddings(features: FeatureSequence, win: float = 1.5, hop: float = 0.75,
                       speech: np.ndarray | None = None,
                       normalize_mean: np.ndarray | None = None) -> EmbeddingSequence:
    """Per-window mean+std of mean-normalised log-mel features, L2-normalised.

    Window count is ``floor((T - win) / hop) + 1`` for a feature span of ``T``
    seconds.  With a ``speech`` frame mask only speech frames enter the
    statistics and windows holding less than half a window of speech are
    skipped.
    """
    fs = features.frame_shift
    duration = features.duration
    if duration + 1e-9 < win:
        raise ValueError(f"features span {duration:.3f} s, shorter than one {win} s window")
    x = features.vectors
    mean = x.mean(axis=0) if normalize_mean is None else normalize_mean
    x = x - mean
    count = _window_count(duration, win, hop)
    n = int(round(win / fs))
    vectors, starts, ends = [], [], []
    for i in range(count):
        lo = int(round(i * hop / fs))
        block = x[lo:lo + n]
        if speech is not None:
            keep = speech[lo:lo + n]
            if keep.sum() < n / 2:
                continue
            block = block[keep]
        vectors.append(np.concatenate([block.mean(axis=0), block.std(axis=0)]))
        starts.append(i * hop)
        ends.append(i * hop + win)
    dim = 2 * x.shape[1]
    vectors = np.asarray(vectors).reshape(-1, dim)
    return EmbeddingSequence.from_raw(vectors, starts, ends)


def affinity_matrix(vectors: np.ndarray, p_percentile: float = 0.7) -> np.ndarray:
    """Cosine affinity, negatives clipped, row-wise pruned below the p-quantile, symmetrised."""
    a = np.clip(vectors @ vectors.T, 0.0, None)
    if a.shape[0] > 2:
        thresh = np.quantile(a, p_percentile, axis=1, method="lower")
        a = np.where(a >= thresh[:, None], a, 0.0)
    return 0.5 * (a + a.T)


def laplacian_eigen(affinity: np.ndarray):
    """Ascending eigenpairs of the symmetric normalised Laplacian."""
    deg = affinity.sum(axis=1)
    if np.any(deg <= 0):
        raise np.linalg.LinAlgError("affinity has an isolated node")
    inv = 1.0 / np.sqrt(deg)
    lap = np.eye(len(deg)) - inv[:, None] * affinity * inv[None, :]
    vals, vecs = eigh(0.5 * (lap + lap.T))
    if not np.all(np.isfinite(vals)):
        raise np.linalg.LinAlgError("degenerate Laplacian eigensolve")
    return vals, vecs


def _eigengap(vals: np.ndarray, max_k: int) -> int:
    top = min(max_k, len(vals) - 1)
    if top < 1:
        return 1
    gaps = np.diff(vals[:top + 1])
    return int(np.argmax(gaps)) + 1


def estimate_speaker_count(embeddings: EmbeddingSequence | np.ndarray, max_k: int = 8,
                           p_percentile: float = 0.7) -> int:
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    v = embeddings.vectors if isinstance(embeddings, EmbeddingSequence) else embeddings
    if v.shape[0] < 2:
        raise ValueError("speaker counting needs at least two windows")
    vals, _ = laplacian_eigen(affinity_matrix(v, p_percentile))
    return _eigengap(vals, max_k)


def kmeans(x: np.ndarray, k: int, seed: int = 42, iterations: int = 100) -> np.ndarray:
    """Lloyd's k-means with seeded farthest-point initialisation."""
    rng = np.random.Generator(np.random.Philox(seed))
    centers = [x[rng.integers(x.shape[0])]]
    for _ in range(1, k):
        d = np.min(((x[:, None] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        centers.append(x[int(np.argmax(d))])
    centers = np.asarray(centers)
    labels = np.full(x.shape[0], -1)
    for _ in range(iterations):
        d = ((x[:, None] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                centers[j] = x[labels == j].mean(axis=0)
    return labels


def _relabel_by_first_occurrence(labels: np.ndarray) -> np.ndarray:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=int)


def spectral_cluster(embeddings: EmbeddingSequence | np.ndarray, k: int | None = None,
                     cfg: DiarizeConfig = DiarizeConfig()) -> np.ndarray:
    """Cluster labels per window (0-based, numbered by first occurrence)."""
    v = embeddings.vectors if isinstance(embeddings, EmbeddingSequence) else embeddings
    n = v.shape[0]
    if k is not None and not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if n == 1:
        return np.zeros(1, dtype=int)
    vals, vecs = laplacian_eigen(affinity_matrix(v, cfg.p_percentile))
    if k is None:
        k = _eigengap(vals, cfg.max_speakers)
    if k == 1:
        return np.zeros(n, dtype=int)
    emb = vecs[:, :k]
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return _relabel_by_first_occurrence(kmeans(emb, k, cfg.seed))


def window_labels_to_activity(emb: EmbeddingSequence, labels: np.ndarray, n_labels: int,
                              frames: int, frame_shift: float,
                              speech: np.ndarray | None = None) -> np.ndarray:
    """Assign each frame to the label of the nearest window centre covering it."""
    act = np.zeros((n_labels, frames))
    if len(emb) == 0:
        return act
    centers = 0.5 * (emb.starts + emb.ends)
    t = (np.arange(frames) + 0.5) * frame_shift
    covered = np.zeros(frames, dtype=bool)
    for s, e in zip(emb.starts, emb.ends):
        covered |= (t >= s) & (t < e)
    nearest = np.argmin(np.abs(t[:, None] - centers[None]), axis=1)
    mask = covered if speech is None else covered & speech[:frames]
    act[labels[nearest[mask]], np.flatnonzero(mask)] = 1.0
    return act


def recluster(streams: Sequence[EmbeddingSequence], fixed_k: int | None = None,
              cfg: DiarizeConfig = DiarizeConfig(), session: str = "session",
              frame_shift: float = 0.01,
              speech: Sequence[np.ndarray] | None = None) -> Annotation:
    """Pool windows from separated streams and assign global speaker identities.

    With ``fixed_k`` the cluster count is forced; otherwise the eigengap
    decides.  Windows are sorted canonically before clustering, so the
    result does not depend on the order of ``streams``.  Each window
    contributes its span (restricted to ``speech`` frames of its stream when
    given) to the label it receives.
    """
    if not streams:
        raise ValueError("recluster needs at least one stream")
    rows = []
    for si, st in enumerate(streams):
        for w in range(len(st)):
            rows.append((st.starts[w], st.ends[w], tuple(st.vectors[w]), si, w))
    total = len(rows)
    if fixed_k is not None and fixed_k > total:
        raise ValueError(f"fixed_k={fixed_k} exceeds the {total} pooled windows")
    if total == 0:
        return Annotation((), session)
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    pooled = np.array([r[2] for r in rows])
    if total == 1:
        labels = np.zeros(1, dtype=int)
    else:
        labels = spectral_cluster(pooled, fixed_k, cfg)
    n_labels = int(labels.max()) + 1
    horizon = max(st.ends.max() for st in streams if len(st)) + frame_shift
    frames = int(np.ceil(horizon / frame_shift))
    act = np.zeros((n_labels, frames))
    for si, st in enumerate(streams):
        idx = [i for i, r in enumerate(rows) if r[3] == si]
        if not idx:
            continue
        order = [rows[i][4] for i in idx]
        sub = EmbeddingSequence(st.vectors[order], st.starts[order], st.ends[order])
        sp = None if speech is None else speech[si]
        act = np.maximum(act, window_labels_to_activity(sub, labels[idx], n_labels, frames,
                                                        frame_shift, sp))
    names = tuple(f"spk{i}" for i in range(n_labels))
    return activity_to_annotation(ActivityMatrix(act, frame_shift, names), session)


def average_posteriors(activities: Sequence[ActivityMatrix]) -> ActivityMatrix:
    if not activities:
        raise ValueError("need at least one activity matrix")
    first = activities[0]
    for a in activities[1:]:
        if a.values.shape != first.values.shape or a.speakers != first.speakers:
            raise ValueError("activity matrices differ in shape or speaker order")
        if a.frame_shift != first.frame_shift:
            raise ValueError("activity matrices differ in frame shift")
    stacked = np.stack([a.values for a in activities])
    return ActivityMatrix(np.clip(stacked.mean(axis=0), 0.0, 1.0), first.frame_shift,
                          first.speakers, first.offset)


def overlap_segments(activity: ActivityMatrix, min_dur: float = 0.1) -> list[tuple[float, float]]:
    """Maximal intervals with at least two active speakers.

    Gaps shorter than ``min_dur`` are closed first, then intervals shorter
    than ``min_dur`` are dropped.
    """
    fs = activity.frame_shift
    over = activity.binarize(0.5).sum(axis=0) >= 2
    padded = np.concatenate([[False], over, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    runs = [[lo, hi] for lo, hi in zip(edges[::2], edges[1::2])]
    merged = []
    for lo, hi in runs:
        if merged and (lo - merged[-1][1]) * fs < min_dur - 1e-9:
            merged[-1][1] = hi
        else:
            merged.append([lo, hi])
    out = []
    for lo, hi in merged:
        if (hi - lo) * fs >= min_dur - 1e-9:
            out.append((round(activity.offset + lo * fs, 6), round(activity.offset + hi * fs, 6)))
    return out
