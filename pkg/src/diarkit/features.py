"""Frame-level features derived from time-aligned ASR output.

All features start on the 10 ms frame grid of the acoustic input and can be
reduced to the encoder's 40 ms grid with :func:`simple_downsample`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

SILENCE = "silence"
SINGLETON = "singleton"
BEGIN = "begin"
INTERNAL = "internal"
END = "end"

#: position-in-word tags in class-index order
POSITION_TAGS = (SILENCE, SINGLETON, BEGIN, INTERNAL, END)
POSITION_INDEX = {tag: index for index, tag in enumerate(POSITION_TAGS)}

# word-boundary classes
WB_SILENCE = 0  # silence frame away from any boundary
WB_SPEECH = 1  # speech frame away from any boundary
WB_SILENCE_TO_SPEECH = 2
WB_SPEECH_TO_SILENCE = 3
WB_WORD_TO_WORD = 4
WB_NUM_CLASSES = 5

#: a boundary between frames b-1 and b marks frames {b-2, b-1, b, b+1}
BOUNDARY_HALO = 2

NATIVE_FRAME_MS = 10


class AlignmentError(ValueError):
    """A time alignment violates its invariants."""


class WordSpan(NamedTuple):
    start: int
    end: int  # exclusive
    word: str
    speaker: str


class PhoneSpan(NamedTuple):
    start: int
    end: int  # exclusive
    phone: str  # position-dependent id, e.g. "ih_B"; "sil" for silence
    tag: str  # one of POSITION_TAGS


@dataclass
class TimeAlignment:
    """Time-aligned 1-best ASR output on the 10 ms frame grid.

    Phone spans tile ``[0, frames_total)`` exactly, with silence phones
    filling the gaps between words; every non-silence phone lies inside
    exactly one word span.
    """

    frames_total: int
    words: list[WordSpan]
    phones: list[PhoneSpan]

    def validate(self) -> "TimeAlignment":
        if self.frames_total < 1:
            raise AlignmentError("alignment must cover at least one frame")
        prev_end = 0
        for w in self.words:
            if not 0 <= w.start < w.end <= self.frames_total:
                raise AlignmentError(f"word span {w} outside [0, {self.frames_total})")
            if w.start < prev_end:
                raise AlignmentError(f"word span {w} overlaps its predecessor")
            prev_end = w.end
        cursor = 0
        for p in self.phones:
            if p.start != cursor or p.end <= p.start:
                raise AlignmentError(
                    f"phone spans must tile the utterance; got {p} at frame {cursor}"
                )
            if p.tag not in POSITION_INDEX:
                raise AlignmentError(f"unknown position tag {p.tag!r}")
            cursor = p.end
        if cursor != self.frames_total:
            raise AlignmentError(
                f"phone spans end at frame {cursor}, expected {self.frames_total}"
            )
        starts = [w.start for w in self.words]
        for p in self.phones:
            if p.tag == SILENCE:
                continue
            i = np.searchsorted(starts, p.start, side="right") - 1
            if i < 0 or not (
                self.words[i].start <= p.start and p.end <= self.words[i].end
            ):
                raise AlignmentError(f"non-silence phone {p} lies outside every word")
        return self


@dataclass
class CategoricalFrameSequence:
    """One class label per frame for a named ASR feature."""

    feature_name: str
    num_classes: int
    labels: np.ndarray
    frame_rate_ms: int = NATIVE_FRAME_MS
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ValueError("labels must be a 1-D sequence")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def num_frames(self) -> int:
        return len(self.labels)


@dataclass
class ScpFrameSequence:
    """Per-frame (speaker-change posterior, non-speech flag) pairs."""

    posterior: np.ndarray
    non_speech: np.ndarray
    frame_rate_ms: int = NATIVE_FRAME_MS

    def __post_init__(self):
        self.posterior = np.asarray(self.posterior, dtype=np.float64)
        self.non_speech = np.asarray(self.non_speech, dtype=np.int8)
        if self.posterior.shape != self.non_speech.shape or self.posterior.ndim != 1:
            raise ValueError("posterior and non_speech must be equal-length vectors")
        if self.posterior.size:
            if self.posterior.min() < 0.0 or self.posterior.max() > 1.0:
                raise ValueError("posteriors must lie in [0, 1]")
            if np.any(self.posterior[self.non_speech == 1] != 0.0):
                raise ValueError("non-speech frames must carry posterior 0")

    @property
    def num_frames(self) -> int:
        return len(self.posterior)

    def matrix(self) -> np.ndarray:
        return np.stack(
            [self.posterior, self.non_speech.astype(np.float64)], axis=1
        )


@dataclass
class SceFrameSequence:
    """Per-frame speaker-change embeddings; zero rows where no token applies."""

    vectors: np.ndarray
    frame_rate_ms: int = NATIVE_FRAME_MS

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a T x D matrix")

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


FrameSequence = CategoricalFrameSequence | ScpFrameSequence | SceFrameSequence


def collapse_phones(
    alignment: TimeAlignment, phone_table: dict[str, str]
) -> CategoricalFrameSequence:
    """Collapse position-dependent phones to per-frame base-phone classes.

    ``phone_table`` maps every position-dependent phone id to its base
    phone; class indices follow the sorted order of the base phones.
    """
    base_names = tuple(sorted(set(phone_table.values())))
    index = {name: i for i, name in enumerate(base_names)}
    labels = np.zeros(alignment.frames_total, dtype=np.int64)
    for span in alignment.phones:
        base = phone_table.get(span.phone)
        if base is None:
            raise ValueError(f"phone {span.phone!r} missing from the phone table")
        labels[span.start : span.end] = index[base]
    return CategoricalFrameSequence(
        "phones", len(base_names), labels, class_names=base_names
    )


def extract_position_in_word(alignment: TimeAlignment) -> CategoricalFrameSequence:
    """Per-frame position-in-word labels (silence/singleton/begin/internal/end)."""
    labels = np.zeros(alignment.frames_total, dtype=np.int64)
    for span in alignment.phones:
        labels[span.start : span.end] = POSITION_INDEX[span.tag]
    return CategoricalFrameSequence(
        "position_in_word", len(POSITION_TAGS), labels, class_names=POSITION_TAGS
    )


def encode_word_boundaries(alignment: TimeAlignment) -> CategoricalFrameSequence:
    """5-class word-boundary encoding with a four-frame halo per boundary.

    A boundary between frames ``b-1`` and ``b`` marks frames
    ``{b-2, b-1, b, b+1}`` (clipped to the utterance). Utterance edges are
    not boundaries; when halos overlap the later boundary wins.
    """
    total = alignment.frames_total
    labels = np.full(total, WB_SILENCE, dtype=np.int64)
    for w in alignment.words:
        labels[w.start : w.end] = WB_SPEECH
    words = alignment.words
    boundaries: list[tuple[int, int]] = []
    for i, w in enumerate(words):
        if w.start > 0:
            joined = i > 0 and words[i - 1].end == w.start
            boundaries.append(
                (w.start, WB_WORD_TO_WORD if joined else WB_SILENCE_TO_SPEECH)
            )
        next_joined = i + 1 < len(words) and words[i + 1].start == w.end
        if w.end < total and not next_joined:
            boundaries.append((w.end, WB_SPEECH_TO_SILENCE))
    for b, cls in boundaries:  # ascending, so later boundaries overwrite
        labels[max(0, b - BOUNDARY_HALO) : min(total, b + BOUNDARY_HALO)] = cls
    return CategoricalFrameSequence("word_boundaries", WB_NUM_CLASSES, labels)


def derive_speech_activity(alignment: TimeAlignment) -> CategoricalFrameSequence:
    """Binary speech activity from the phone alignment (0 = silence phone)."""
    labels = np.zeros(alignment.frames_total, dtype=np.int64)
    for span in alignment.phones:
        if span.tag != SILENCE:
            labels[span.start : span.end] = 1
    return CategoricalFrameSequence("sad", 2, labels)


def subword_time_split(
    word_span: tuple[int, int], n_subwords: int
) -> list[tuple[int, int]]:
    """Split a word's frame span into n contiguous near-equal sub-word spans.

    Lengths differ by at most one frame, longer spans first; concatenation
    reproduces the input span.
    """
    start, end = word_span
    length = end - start
    if length <= 0:
        raise ValueError(f"empty word span {word_span}")
    if n_subwords < 1:
        raise ValueError("n_subwords must be at least 1")
    if n_subwords > length:
        raise ValueError(
            f"cannot split {length} frames into {n_subwords} non-empty sub-words"
        )
    base, remainder = divmod(length, n_subwords)
    spans = []
    cursor = start
    for i in range(n_subwords):
        step = base + (1 if i < remainder else 0)
        spans.append((cursor, cursor + step))
        cursor += step
    return spans


def subword_spans_for_words(
    alignment: TimeAlignment, tokens_per_word: Sequence[int]
) -> list[tuple[int, int]]:
    """Sub-word spans for every word, flattened in word-then-token order."""
    if len(tokens_per_word) != len(alignment.words):
        raise ValueError("need one token count per aligned word")
    spans: list[tuple[int, int]] = []
    for w, n in zip(alignment.words, tokens_per_word):
        spans.extend(subword_time_split((w.start, w.end), n))
    return spans


def build_scp_frames(
    alignment: TimeAlignment,
    token_posteriors: Sequence[tuple[int, int, float]],
) -> ScpFrameSequence:
    """Speaker-change-posterior frames from per-token posteriors.

    Every frame of a word carries the posterior of the word's first
    sub-word token; frames without a recognized word carry (0, non-speech).
    ``token_posteriors`` holds (start_frame, end_frame, posterior) triples.
    """
    posterior = np.zeros(alignment.frames_total, dtype=np.float64)
    non_speech = np.ones(alignment.frames_total, dtype=np.int8)
    first_token = {}
    for start, _end, p in token_posteriors:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"posterior {p} outside [0, 1]")
        first_token.setdefault(start, p)
    for w in alignment.words:
        if w.start not in first_token:
            raise ValueError(
                f"no sub-word token starts at frame {w.start} for word {w.word!r}"
            )
        posterior[w.start : w.end] = first_token[w.start]
        non_speech[w.start : w.end] = 0
    return ScpFrameSequence(posterior, non_speech)


def build_sce_frames(
    alignment: TimeAlignment,
    token_embeddings: Sequence[tuple[int, int, np.ndarray]],
    dim: int | None = None,
) -> SceFrameSequence:
    """Broadcast per-token embeddings over their sub-word spans.

    Frames with no associated token carry the all-zero vector.
    """
    if token_embeddings:
        dims = {len(v) for _s, _e, v in token_embeddings}
        if len(dims) != 1:
            raise ValueError("token embeddings must share one dimension")
        dim = dims.pop()
    if dim is None:
        raise ValueError("dim is required when there are no tokens")
    vectors = np.zeros((alignment.frames_total, dim), dtype=np.float64)
    for start, end, vec in token_embeddings:
        if not 0 <= start < end <= alignment.frames_total:
            raise ValueError(f"token span ({start}, {end}) outside the utterance")
        vectors[start:end] = vec
    return SceFrameSequence(vectors)


def simple_downsample(seq: FrameSequence, factor: int) -> FrameSequence:
    """Keep frames with index 0 mod factor; output length ceil(T / factor)."""
    if factor < 1:
        raise ValueError("downsampling factor must be at least 1")
    rate = seq.frame_rate_ms * factor
    if isinstance(seq, CategoricalFrameSequence):
        return dataclasses.replace(
            seq, labels=seq.labels[::factor], frame_rate_ms=rate
        )
    if isinstance(seq, ScpFrameSequence):
        return dataclasses.replace(
            seq,
            posterior=seq.posterior[::factor],
            non_speech=seq.non_speech[::factor],
            frame_rate_ms=rate,
        )
    if isinstance(seq, SceFrameSequence):
        return dataclasses.replace(
            seq, vectors=seq.vectors[::factor], frame_rate_ms=rate
        )
    raise TypeError(f"cannot downsample {type(seq).__name__}")
