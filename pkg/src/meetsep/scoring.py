"""Diarization and transcription metrics: DER, tcpWER, SI-SDR."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .diarize import Annotation

__all__ = [
    "DerBreakdown",
    "WordSegment",
    "TcpWerReport",
    "der",
    "combine_der",
    "tcpwer",
    "time_constrained_distance",
    "normalize_word",
    "parse_segments_jsonl",
    "emit_segments_jsonl",
    "si_sdr",
    "SI_SDR_CAP",
    "DER_RESOLUTION",
]

DER_RESOLUTION = 0.01
SI_SDR_CAP = 60.0


@dataclass(frozen=True)
class DerBreakdown:
    """Error rates in percent of scored reference speech."""

    fa: float
    miss: float
    spkerr: float
    der: float
    scored_speech: float
    mapping: dict = field(default_factory=dict, compare=False)


def _frame_matrix(ann: Annotation, speakers: list[str], frames: int, res: float) -> np.ndarray:
    m = np.zeros((len(speakers), frames), dtype=bool)
    idx = {s: i for i, s in enumerate(speakers)}
    for seg in ann.segments:
        # frame i is active when its centre (i + 0.5) * res lies in [start, end)
        lo = int(np.ceil(seg.start / res - 0.5 - 1e-9))
        hi = int(np.ceil(seg.end / res - 0.5 - 1e-9))
        m[idx[seg.speaker], max(lo, 0):max(min(hi, frames), 0)] = True
    return m


def der(ref: Annotation, hyp: Annotation, collar: float = 0.0,
        resolution: float = DER_RESOLUTION) -> DerBreakdown:
    """Frame-based DER with an optimal one-to-one speaker mapping.

    Frames within ``collar`` seconds of any reference boundary are not
    scored.  The mapping maximises the matched speaking time.
    """
    if not ref.segments:
        raise ValueError("reference annotation is empty; DER is undefined")
    frames = int(np.ceil(max(ref.end, hyp.end) / resolution)) + 1
    rs, hs = ref.speakers, hyp.speakers
    r = _frame_matrix(ref, rs, frames, resolution)
    h = _frame_matrix(hyp, hs, frames, resolution)
    scored = np.ones(frames, dtype=bool)
    if collar > 0:
        centres = (np.arange(frames) + 0.5) * resolution
        for seg in ref.segments:
            for b in (seg.start, seg.end):
                scored &= np.abs(centres - b) >= collar
    r, h = r[:, scored], h[:, scored]
    n_ref, n_hyp = r.sum(axis=0), h.sum(axis=0)
    total = int(n_ref.sum())
    if total == 0:
        raise ValueError("no scored reference speech (collar removes everything)")
    miss = int(np.maximum(n_ref - n_hyp, 0).sum())
    fa = int(np.maximum(n_hyp - n_ref, 0).sum())
    mapping = {}
    correct = 0
    if rs and hs:
        overlap = r.astype(np.int64) @ h.T.astype(np.int64)
        ri, hi = linear_sum_assignment(-overlap)
        correct = int(overlap[ri, hi].sum())
        mapping = {hs[j]: rs[i] for i, j in zip(ri, hi) if overlap[i, j] > 0}
    conf = int(np.minimum(n_ref, n_hyp).sum()) - correct
    scale = 100.0 / total
    fa_p, miss_p, conf_p = fa * scale, miss * scale, conf * scale
    return DerBreakdown(fa_p, miss_p, conf_p, combine_der(fa_p, miss_p, conf_p),
                        total * resolution, mapping)


def combine_der(fa: float, miss: float, spkerr: float) -> float:
    """DER as the sum of its three error components (all in percent)."""
    for name, v in (("fa", fa), ("miss", miss), ("spkerr", spkerr)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    return fa + miss + spkerr


@dataclass(frozen=True)
class WordSegment:
    word: str
    start: float
    end: float
    speaker: str

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"word {self.word!r} ends before it starts")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass(frozen=True)
class TcpWerReport:
    substitutions: int
    insertions: int
    deletions: int
    reference_words: int
    tcpwer: float
    assignment: dict

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


_PUNCT = re.compile(r"[^\w\s']|_")


def normalize_word(word: str) -> str:
    return _PUNCT.sub("", word.lower()).strip()


def _can_match(a: WordSegment, b: WordSegment, collar: float, rule: str) -> bool:
    if rule == "midpoint":
        return abs(a.midpoint - b.midpoint) <= collar
    if rule == "overlap":
        return a.start - collar <= b.end and b.start - collar <= a.end
    raise ValueError(f"unknown time-constraint rule {rule!r}")


def time_constrained_distance(ref: Sequence[WordSegment], hyp: Sequence[WordSegment],
                              collar: float, rule: str = "midpoint") -> tuple[int, int, int]:
    """Levenshtein alignment where a word pair may align only if time-compatible.

    Returns ``(substitutions, insertions, deletions)`` of a minimum-cost
    alignment; both sides are taken in temporal order.
    """
    ref = sorted(ref, key=lambda w: (w.start, w.end))
    hyp = sorted(hyp, key=lambda w: (w.start, w.end))
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    back = np.zeros((n + 1, m + 1), dtype=np.int8)  # 0 diag, 1 del, 2 ins
    cost[1:, 0] = np.arange(1, n + 1)
    back[1:, 0] = 1
    cost[0, 1:] = np.arange(1, m + 1)
    back[0, 1:] = 2
    ref_w = [normalize_word(w.word) for w in ref]
    hyp_w = [normalize_word(w.word) for w in hyp]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best, arg = cost[i - 1, j] + 1, 1
            if cost[i, j - 1] + 1 < best:
                best, arg = cost[i, j - 1] + 1, 2
            if _can_match(ref[i - 1], hyp[j - 1], collar, rule):
                diag = cost[i - 1, j - 1] + (ref_w[i - 1] != hyp_w[j - 1])
                if diag <= best:
                    best, arg = diag, 0
            cost[i, j], back[i, j] = best, arg
    subs = ins = dels = 0
    i, j = n, m
    while i or j:
        b = back[i, j]
        if b == 0:
            subs += ref_w[i - 1] != hyp_w[j - 1]
            i, j = i - 1, j - 1
        elif b == 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, ins, dels


def _by_speaker(words: Iterable[WordSegment]) -> dict[str, list[WordSegment]]:
    out: dict[str, list[WordSegment]] = {}
    for w in words:
        out.setdefault(w.speaker, []).append(w)
    return out


def tcpwer(ref: Sequence[WordSegment], hyp: Sequence[WordSegment], collar: float = 5.0,
           rule: str = "midpoint") -> TcpWerReport:
    """Time-constrained minimum-permutation WER.

    Hypothesis streams are assigned one-to-one to reference speakers so that
    the total time-constrained edit distance is minimal.  Unassigned
    hypothesis streams count as insertions, unassigned reference speakers as
    deletions.
    """
    if not ref:
        raise ValueError("reference is empty; tcpWER is undefined")
    rsp, hsp = _by_speaker(ref), _by_speaker(hyp)
    rk, hk = sorted(rsp), sorted(hsp)
    nr, nh = len(rk), len(hk)
    big = 10 ** 9
    pair = {}
    cost = np.full((nr + nh, nr + nh), 0, dtype=np.int64)
    for i, r in enumerate(rk):
        for j, h in enumerate(hk):
            pair[i, j] = time_constrained_distance(rsp[r], hsp[h], collar, rule)
            cost[i, j] = sum(pair[i, j])
        cost[i, nh:] = big
        cost[i, nh + i] = len(rsp[r])
    for j, h in enumerate(hk):
        cost[nr:, j] = big
        cost[nr + j, j] = len(hsp[h])
    rows, cols = linear_sum_assignment(cost)
    subs = ins = dels = 0
    assignment = {}
    for i, j in zip(rows, cols):
        if i < nr and j < nh:
            s, a, d = pair[i, j]
            subs, ins, dels = subs + s, ins + a, dels + d
            assignment[hk[j]] = rk[i]
        elif i < nr:
            dels += len(rsp[rk[i]])
        elif j < nh:
            ins += len(hsp[hk[j]])
    n = len(ref)
    return TcpWerReport(subs, ins, dels, n, 100.0 * (subs + ins + dels) / n, assignment)


def _interpolate_words(speaker: str, start: float, end: float, text: str) -> list[WordSegment]:
    tokens = text.split()
    if not tokens:
        return []
    step = (end - start) / len(tokens)
    return [WordSegment(tok, start + i * step, start + (i + 1) * step, speaker)
            for i, tok in enumerate(tokens)]


def parse_segments_jsonl(text: str, session: str | None = None) -> list[WordSegment]:
    """Read segment-level JSON lines into words with linearly interpolated times.

    Each line: ``{"session", "speaker", "start_s", "end_s", "words"}`` where
    ``words`` is a space-separated string.
    """
    words: list[WordSegment] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if session is not None and obj.get("session") != session:
                continue
            words.extend(_interpolate_words(str(obj["speaker"]), float(obj["start_s"]),
                                            float(obj["end_s"]), str(obj["words"])))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"line {lineno}: malformed segment record ({exc})") from exc
    return words


def emit_segments_jsonl(words: Sequence[WordSegment], session: str = "session") -> str:
    """One record per word (a segment holding exactly that word)."""
    lines = []
    for w in sorted(words, key=lambda w: (w.start, w.speaker)):
        lines.append(json.dumps({"session": session, "speaker": w.speaker,
                                 "start_s": w.start, "end_s": w.end, "words": w.word}))
    return "\n".join(lines) + ("\n" if lines else "")


def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at ``SI_SDR_CAP``."""
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.size} vs {ref.size}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    t, e = float(target @ target), float(noise @ noise)
    if t == 0:
        return -SI_SDR_CAP
    if e <= t * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * np.log10(t / e))
