"""Serialization of pipeline artifacts.

Formats
-------
WAV
    RIFF/WAVE, PCM16 (format 1) or IEEE float32 (format 3), interleaved.
    PCM16 maps to floats by dividing by 32768, so -32768 reads as -1.0.
RTTM
    ``SPEAKER <session> 1 <tbeg> <tdur> <NA> <NA> <speaker> <NA> <NA>``;
    emitted sorted by (start, speaker) with two decimals.
MCTF tensor
    ``b"MCTF"``, version u16, dtype code u8 (1 = float32), ndim u8, one u32
    per dimension, then the float32 payload, little-endian, row-major.
    Dimension order per artifact: TFMask (classes, frames, bins),
    ActivityMatrix (speakers, frames), EmbeddingSequence (windows, dim).
    Metadata (ids, frame shift) goes to a JSON sidecar ``<path>.json``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .config import load_config as _load_config
from .diarize import Annotation, EmbeddingSequence, Segment
from .maskmodel import ActivityMatrix, TFMask
from .spectral import MultiChannelWave

__all__ = [
    "FormatError",
    "read_wav",
    "write_wav",
    "parse_rttm",
    "emit_rttm",
    "read_rttm",
    "write_rttm",
    "encode_tensor_header",
    "read_tensor",
    "write_tensor",
    "write_mask",
    "read_mask",
    "write_activity",
    "read_activity",
    "write_embeddings",
    "read_embeddings",
    "load_config",
]

MAGIC = b"MCTF"
VERSION = 1
DTYPE_F32 = 1
_U32_MAX = 2 ** 32 - 1
_MAX_ELEMENTS = 2 ** 40


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------- WAV

def write_wav(wave: MultiChannelWave, path, fmt: str = "float32") -> None:
    x = wave.samples
    channels = x.shape[0]
    if fmt == "float32":
        code, width = 3, 4
        payload = x.T.astype("<f4").tobytes()
    elif fmt == "pcm16":
        code, width = 1, 2
        payload = np.clip(np.round(x.T * 32768), -32768, 32767).astype("<i2").tobytes()
    else:
        raise ValueError(f"unsupported WAV sample format {fmt!r}")
    block = channels * width
    fmt_chunk = struct.pack("<HHIIHH", code, channels, wave.sample_rate,
                            wave.sample_rate * block, block, 8 * width)
    body = (b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
            + b"data" + struct.pack("<I", len(payload)) + payload)
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path) -> MultiChannelWave:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"truncated RIFF header at byte offset {len(raw)}")
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError("missing RIFF/WAVE signature at byte offset 0")
    pos = 12
    fmt = None
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise FormatError(f"truncated chunk header at byte offset {pos}")
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(raw):
                raise FormatError(f"truncated fmt chunk at byte offset {body}")
            code, channels, rate, _, block, bits = struct.unpack("<HHIIHH", raw[body:body + 16])
            if code == 0xFFFE and size >= 40:
                code = struct.unpack("<H", raw[body + 24:body + 26])[0]
            if (code, bits) not in ((1, 16), (3, 32)):
                raise FormatError(f"unsupported codec (format {code}, {bits} bit) "
                                  f"at byte offset {body}")
            if channels < 1:
                raise FormatError(f"invalid channel count at byte offset {body + 2}")
            fmt = (code, channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise FormatError(f"data chunk before fmt chunk at byte offset {pos}")
            if body + size > len(raw):
                raise FormatError(f"truncated data chunk: expected {size} bytes at byte "
                                  f"offset {body}, file ends at {len(raw)}")
            code, channels, rate = fmt
            width = 2 if code == 1 else 4
            if size % (width * channels):
                raise FormatError(f"data size {size} not a multiple of the frame size "
                                  f"at byte offset {pos + 4}")
            data = raw[body:body + size]
            if code == 1:
                x = np.frombuffer(data, "<i2").astype(np.float64) / 32768.0
            else:
                x = np.frombuffer(data, "<f4").astype(np.float64)
            return MultiChannelWave(x.reshape(-1, channels).T.copy(), rate)
        pos = body + size + (size & 1)
    raise FormatError(f"no data chunk found (scanned to byte offset {pos})")


# -------------------------------------------------------------------- RTTM

def parse_rttm(text: str) -> Annotation:
    segs = []
    session = None
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) < 8 or fields[0] != "SPEAKER":
            raise FormatError(f"line {lineno}: malformed RTTM record")
        try:
            start, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric time field") from None
        if dur <= 0 or start < 0:
            raise FormatError(f"line {lineno}: negative start or non-positive duration")
        session = fields[1] if session is None else session
        segs.append(Segment(round(start, 10), round(start + dur, 10), fields[7]))
    return Annotation(tuple(segs), session or "session")


def emit_rttm(ann: Annotation) -> str:
    lines = []
    for s in ann.canonical().segments:
        lines.append(f"SPEAKER {ann.session} 1 {s.start:.2f} {s.end - s.start:.2f} "
                     f"<NA> <NA> {s.speaker} <NA> <NA>")
    return "\n".join(lines) + ("\n" if lines else "")


def read_rttm(path) -> Annotation:
    return parse_rttm(Path(path).read_text(encoding="utf-8"))


def write_rttm(ann: Annotation, path) -> None:
    Path(path).write_text(emit_rttm(ann), encoding="utf-8", newline="\n")


# ------------------------------------------------------------------ tensor

def encode_tensor_header(dims) -> bytes:
    dims = [int(d) for d in dims]
    if len(dims) > 255:
        raise FormatError("tensor rank exceeds 255")
    total = 1
    for d in dims:
        if d < 0 or d > _U32_MAX:
            raise FormatError(f"dimension {d} does not fit in u32")
        total *= d
        if total > _MAX_ELEMENTS:
            raise FormatError(f"dims {dims} overflow the element-count guard")
    return MAGIC + struct.pack("<HBB", VERSION, DTYPE_F32, len(dims)) + struct.pack(
        f"<{len(dims)}I", *dims)


def write_tensor(array, path) -> None:
    a = np.asarray(array)
    header = encode_tensor_header(a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError("bad magic; not an MCTF tensor file")
    if len(raw) < 8:
        raise FormatError("truncated tensor header")
    version, dtype, ndim = struct.unpack("<HBB", raw[4:8])
    if version != VERSION or dtype != DTYPE_F32:
        raise FormatError(f"unsupported tensor version {version} / dtype {dtype}")
    end = 8 + 4 * ndim
    if len(raw) < end:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack(f"<{ndim}I", raw[8:end])
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError(f"dims {dims} overflow the element-count guard")
    if len(raw) - end != 4 * count:
        raise FormatError(f"payload holds {len(raw) - end} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(raw[end:], "<f4").reshape(dims).copy()


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_mask(mask: TFMask, path) -> None:
    write_tensor(mask.values, path)
    _sidecar(path).write_text(json.dumps({"kind": "TFMask", "class_ids": list(mask.class_ids),
                                          "frame_shift": mask.frame_shift,
                                          "offset": mask.offset}, sort_keys=True))


def read_mask(path) -> TFMask:
    meta = json.loads(_sidecar(path).read_text())
    values = np.clip(read_tensor(path).astype(np.float64), 0.0, 1.0)
    return TFMask(values, tuple(meta["class_ids"]), meta["frame_shift"], meta["offset"])


def write_activity(act: ActivityMatrix, path) -> None:
    write_tensor(act.values, path)
    _sidecar(path).write_text(json.dumps({"kind": "ActivityMatrix", "speakers": list(act.speakers),
                                          "frame_shift": act.frame_shift,
                                          "offset": act.offset}, sort_keys=True))


def read_activity(path) -> ActivityMatrix:
    meta = json.loads(_sidecar(path).read_text())
    values = np.clip(read_tensor(path).astype(np.float64), 0.0, 1.0)
    return ActivityMatrix(values, meta["frame_shift"], tuple(meta["speakers"]), meta["offset"])


def write_embeddings(emb: EmbeddingSequence, path) -> None:
    write_tensor(emb.vectors, path)
    _sidecar(path).write_text(json.dumps({"kind": "EmbeddingSequence",
                                          "starts": emb.starts.tolist(),
                                          "ends": emb.ends.tolist()}, sort_keys=True))


def read_embeddings(path) -> EmbeddingSequence:
    meta = json.loads(_sidecar(path).read_text())
    return EmbeddingSequence.from_raw(read_tensor(path), meta["starts"], meta["ends"])


def load_config(path=None) -> PipelineConfig:
    """Read a TOML pipeline config (defaults when ``path`` is None)."""
    return _load_config(path)
