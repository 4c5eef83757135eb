"""File formats: CTM alignments, DKF1 feature dumps, DKC1 checkpoints,
RTTM segment lists, and token transcripts."""

from __future__ import annotations

import math
import struct
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import (
    SILENCE,
    CategoricalFrameSequence,
    PhoneSpan,
    TimeAlignment,
    WordSpan,
)
from .scoring import Segment

FRAMES_PER_SECOND = 100  # 10 ms grid

_TAG_SUFFIXES = {"_B": "begin", "_I": "internal", "_E": "end", "_S": "singleton"}


def _seconds_to_span(start_text: str, duration_text: str) -> tuple[int, int]:
    """CTM seconds to frame indices: floor the start, ceil the end."""
    start = Fraction(start_text) * FRAMES_PER_SECOND
    end = (Fraction(start_text) + Fraction(duration_text)) * FRAMES_PER_SECOND
    return math.floor(start), math.ceil(end)


def _span_to_seconds(start: int, end: int) -> tuple[str, str]:
    return f"{start / FRAMES_PER_SECOND:.2f}", f"{(end - start) / FRAMES_PER_SECOND:.2f}"


def write_word_ctm(path: str | Path, recording_id: str, alignment: TimeAlignment):
    lines = []
    for w in alignment.words:
        start, duration = _span_to_seconds(w.start, w.end)
        lines.append(f"{recording_id} 1 {start} {duration} {w.word} {w.speaker}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def write_phone_ctm(path: str | Path, recording_id: str, alignment: TimeAlignment):
    lines = []
    for p in alignment.phones:
        start, duration = _span_to_seconds(p.start, p.end)
        speaker = _speaker_of_phone(alignment, p)
        lines.append(f"{recording_id} 1 {start} {duration} {p.phone} {speaker}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def _speaker_of_phone(alignment: TimeAlignment, phone: PhoneSpan) -> str:
    if phone.tag == SILENCE:
        return "-"
    for w in alignment.words:
        if w.start <= phone.start and phone.end <= w.end:
            return w.speaker
    return "-"


def read_alignment(word_path: str | Path, phone_path: str | Path) -> tuple[str, TimeAlignment]:
    """Read word + phone CTM files back into a validated TimeAlignment."""
    words: list[WordSpan] = []
    recording_id = None
    for line in Path(word_path).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        rec, _channel, start_s, dur_s, word, speaker = fields
        recording_id = recording_id or rec
        start, end = _seconds_to_span(start_s, dur_s)
        words.append(WordSpan(start, end, word, speaker))
    phones: list[PhoneSpan] = []
    for line in Path(phone_path).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        rec, _channel, start_s, dur_s, phone, _speaker = fields
        recording_id = recording_id or rec
        start, end = _seconds_to_span(start_s, dur_s)
        tag = SILENCE
        for suffix, name in _TAG_SUFFIXES.items():
            if phone.endswith(suffix):
                tag = name
                break
        phones.append(PhoneSpan(start, end, phone, tag))
    if recording_id is None:
        raise ValueError(f"no alignment records in {word_path} / {phone_path}")
    frames_total = phones[-1].end if phones else 0
    return recording_id, TimeAlignment(frames_total, words, phones).validate()


# --- DKF1 feature container -------------------------------------------------

FEATURES_MAGIC = b"DKF1"
_KIND_FLOAT = 0
_KIND_CATEGORICAL = 1
_HEADER = struct.Struct("<4sBHII")  # magic, kind, frame_rate_ms, num_frames, cols


def write_frame_features(path: str | Path, matrix: np.ndarray, frame_rate_ms: int = 10):
    """Write a T x F float32 feature matrix (row-major, little-endian)."""
    data = np.ascontiguousarray(matrix, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    header = _HEADER.pack(
        FEATURES_MAGIC, _KIND_FLOAT, frame_rate_ms, data.shape[0], data.shape[1]
    )
    Path(path).write_bytes(header + data.tobytes())


def read_frame_features(path: str | Path) -> tuple[np.ndarray, int]:
    kind, frame_rate_ms, rows, cols, payload = _read_container(path)
    if kind != _KIND_FLOAT:
        raise ValueError(f"{path} holds categorical data, not a float matrix")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return matrix.copy(), frame_rate_ms


def write_categorical_features(path: str | Path, seq: CategoricalFrameSequence):
    data = np.ascontiguousarray(seq.labels, dtype="<i4")
    header = _HEADER.pack(
        FEATURES_MAGIC, _KIND_CATEGORICAL, seq.frame_rate_ms, len(data), seq.num_classes
    )
    Path(path).write_bytes(header + data.tobytes())


def read_categorical_features(
    path: str | Path, feature_name: str = "feature"
) -> CategoricalFrameSequence:
    kind, frame_rate_ms, rows, num_classes, payload = _read_container(path)
    if kind != _KIND_CATEGORICAL:
        raise ValueError(f"{path} holds a float matrix, not categorical labels")
    labels = np.frombuffer(payload, dtype="<i4")[:rows].astype(np.int64)
    return CategoricalFrameSequence(feature_name, num_classes, labels, frame_rate_ms)


def _read_container(path: str | Path) -> tuple[int, int, int, int, bytes]:
    blob = Path(path).read_bytes()
    magic, kind, frame_rate_ms, rows, cols = _HEADER.unpack_from(blob)
    if magic != FEATURES_MAGIC:
        raise ValueError(f"{path} is not a DKF1 feature container")
    return kind, frame_rate_ms, rows, cols, blob[_HEADER.size :]


# --- DKC1 checkpoint --------------------------------------------------------

CHECKPOINT_MAGIC = b"DKC1"


def save_checkpoint(
    path: str | Path, params: Mapping[str, np.ndarray], config_digest: bytes
):
    """Write key-sorted float32 parameter blobs behind a config digest."""
    if len(config_digest) != 32:
        raise ValueError("config digest must be a 32-byte sha256 digest")
    chunks = [CHECKPOINT_MAGIC, config_digest, struct.pack("<I", len(params))]
    for key in sorted(params):
        value = np.ascontiguousarray(params[key], dtype="<f4")
        encoded = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], bytes]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a DKC1 checkpoint")
    digest = blob[4:36]
    (count,) = struct.unpack_from("<I", blob, 36)
    offset = 40
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (key_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        key = blob[offset : offset + key_len].decode("utf-8")
        offset += key_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        params[key] = values.reshape(shape).copy()
    return params, digest


# --- RTTM -------------------------------------------------------------------


def write_rttm(path: str | Path, segments_by_recording: Mapping[str, Sequence[Segment]]):
    lines = []
    for recording_id in segments_by_recording:
        for seg in segments_by_recording[recording_id]:
            duration = seg.offset - seg.onset
            lines.append(
                f"SPEAKER {recording_id} 1 {seg.onset:.3f} {duration:.3f} "
                f"<NA> <NA> {seg.speaker} <NA> <NA>"
            )
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_rttm(path: str | Path) -> dict[str, list[Segment]]:
    """Parse SPEAKER records; tolerates extra whitespace and skips other types."""
    segments: dict[str, list[Segment]] = {}
    for line in Path(path).read_text().splitlines():
        fields = line.split()
        if not fields or fields[0] != "SPEAKER":
            continue
        recording_id, onset, duration, speaker = (
            fields[1],
            float(fields[3]),
            float(fields[4]),
            fields[7],
        )
        segments.setdefault(recording_id, []).append(
            Segment(speaker, onset, onset + duration)
        )
    return segments


# --- token transcripts ------------------------------------------------------


def write_transcript(path: str | Path, rows: Sequence[tuple[str, int, int, str]]):
    """One token per line: <token> <word-index> <subword-index> <speaker-id>."""
    lines = [f"{token} {word} {sub} {speaker}" for token, word, sub, speaker in rows]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_transcript(path: str | Path) -> list[tuple[str, int, int, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        token, word, sub, speaker = fields
        rows.append((token, int(word), int(sub), speaker))
    return rows
