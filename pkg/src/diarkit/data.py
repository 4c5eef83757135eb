"""Synthetic two-speaker conversation generator and corpus persistence.

Each recording carries mutually consistent acoustic features, a 1-best
word/phone alignment, a sub-word transcript, and frame-level reference
speaker activity. Overlapped speech is kept in the reference but resolved
in the single-stream alignment by dropping the earlier turn's overlapped
words, the way a 1-best recognizer misses the quieter talker.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import io as dkio
from .features import (
    BEGIN,
    END,
    INTERNAL,
    SILENCE,
    SINGLETON,
    POSITION_INDEX,
    PhoneSpan,
    TimeAlignment,
    WordSpan,
)
from .scd import Token, TokenSequence
from .scoring import activity_to_segments, segments_to_activity

NOISE_WORD = "[noise]"
LAUGH_WORD = "[laugh]"
SPLITS = ("train", "dev", "test")

_TAG_SUFFIX = {BEGIN: "_B", INTERNAL: "_I", END: "_E", SINGLETON: "_S"}


@dataclass
class SynthConfig:
    num_recordings: int = 10
    split_counts: dict[str, int] | None = None  # overrides split_fractions
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    speakers_per_split: int = 4
    duration_frames: tuple[int, int] = (2800, 3200)
    prototype_scale: float = 1.0
    jitter: float = 0.4
    turn_mean_frames: int = 250
    pause_mean_frames: int = 40
    overlap_prob: float = 0.15
    max_overlap_frames: int = 40
    vocab_size: int = 60
    mean_word_phones: float = 3.0
    phones_per_subword: int = 2
    num_phones: int = 16
    phone_frames: tuple[int, int] = (4, 10)
    opener_fraction: float = 0.15
    opener_prob: float = 0.8
    special_word_prob: float = 0.02
    acoustic_dim: int = 80
    rng_seed: int = 0

    def validate(self) -> "SynthConfig":
        for name in ("overlap_prob", "opener_prob", "special_word_prob", "opener_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.duration_frames
        if not 0 < lo <= hi:
            raise ValueError("duration_frames must be a positive range")
        if self.num_recordings < 1 or self.speakers_per_split < 2:
            raise ValueError("need at least one recording and two speakers per split")
        if self.turn_mean_frames < 1 or self.pause_mean_frames < 0:
            raise ValueError("turn and pause lengths must be sensible")
        if self.max_overlap_frames >= self.turn_mean_frames:
            raise ValueError(
                "infeasible config: max_overlap_frames must be smaller than "
                "the mean turn length"
            )
        plo, phi = self.phone_frames
        if not 1 <= plo <= phi:
            raise ValueError("phone_frames must be a range of positive lengths")
        if self.vocab_size < 2 or self.num_phones < 1:
            raise ValueError("vocabulary and phone inventory must be non-trivial")
        if self.mean_word_phones < 1 or self.phones_per_subword < 1:
            raise ValueError("word and sub-word sizes must be at least 1")
        if self.split_counts is not None:
            if set(self.split_counts) - set(SPLITS):
                raise ValueError(f"split names must be among {SPLITS}")
            if sum(self.split_counts.values()) != self.num_recordings:
                raise ValueError("split_counts must sum to num_recordings")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        for key in ("duration_frames", "phone_frames", "split_fractions"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def counts_by_split(self) -> dict[str, int]:
        if self.split_counts is not None:
            return {s: self.split_counts.get(s, 0) for s in SPLITS}
        counts = {
            s: int(round(f * self.num_recordings))
            for s, f in zip(SPLITS, self.split_fractions)
        }
        counts["train"] += self.num_recordings - sum(counts.values())
        return counts


@dataclass
class Vocabulary:
    """Corpus-level word list with phone compositions and sub-word tokens."""

    word_phones: dict[str, tuple[str, ...]]
    token_list: list[str]
    phones: tuple[str, ...]  # base inventory including "sil"
    phones_per_subword: int
    openers: tuple[str, ...] = ()

    def __post_init__(self):
        self.token_index = {t: i for i, t in enumerate(self.token_list)}

    @property
    def vocab_size(self) -> int:
        return len(self.token_list)

    def n_subwords(self, word: str) -> int:
        return math.ceil(len(self.word_phones[word]) / self.phones_per_subword)

    def word_tokens(self, word: str) -> list[str]:
        n = self.n_subwords(word)
        return [word] if n == 1 else [f"{word}@{k}" for k in range(n)]

    def phone_table(self) -> dict[str, str]:
        """Position-dependent phone id to base phone, for phone collapsing."""
        table = {"sil": "sil"}
        for phone in self.phones:
            if phone == "sil":
                continue
            for suffix in _TAG_SUFFIX.values():
                table[phone + suffix] = phone
        return table


def build_vocabulary(cfg: SynthConfig, rng: np.random.Generator) -> Vocabulary:
    phones = tuple(f"p{i:02d}" for i in range(cfg.num_phones))
    word_phones: dict[str, tuple[str, ...]] = {}
    for i in range(cfg.vocab_size):
        length = 1 + int(rng.poisson(cfg.mean_word_phones - 1.0))
        word_phones[f"w{i:03d}"] = tuple(
            phones[int(j)] for j in rng.integers(0, len(phones), size=length)
        )
    word_phones[NOISE_WORD] = ("nsn",)
    word_phones[LAUGH_WORD] = ("lau",)
    vocab = Vocabulary(
        word_phones=word_phones,
        token_list=[],
        phones=phones + ("nsn", "lau", "sil"),
        phones_per_subword=cfg.phones_per_subword,
        openers=tuple(
            f"w{i:03d}" for i in range(max(1, int(cfg.opener_fraction * cfg.vocab_size)))
        ),
    )
    tokens: list[str] = []
    for word in word_phones:
        tokens.extend(vocab.word_tokens(word))
    vocab.token_list = tokens
    vocab.token_index = {t: i for i, t in enumerate(tokens)}
    return vocab


class _PlacedWord(NamedTuple):
    start: int
    end: int
    word: str
    phone_frames: tuple[int, ...]


@dataclass
class Recording:
    recording_id: str
    split: str
    speakers: list[str]  # column order of the reference matrix
    features: np.ndarray  # T x F float32 at 10 ms
    alignment: TimeAlignment
    tokens: TokenSequence
    reference: np.ndarray  # T x S binary at 10 ms
    # generation-time ground truth, absent after a round trip through disk:
    speaker_word_spans: dict[str, list[tuple[int, int]]] | None = None
    position_tags: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    vocab: Vocabulary
    recordings: list[Recording]
    config: SynthConfig | None = None
    seed: int | None = None

    def split(self, name: str) -> list[Recording]:
        return [r for r in self.recordings if r.split == name]


def _sample_turn_words(
    cfg: SynthConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    start: int,
    horizon: int,
) -> list[_PlacedWord]:
    target = max(1, int(rng.geometric(1.0 / cfg.turn_mean_frames)))
    regular = [w for w in vocab.word_phones if w not in (NOISE_WORD, LAUGH_WORD)]
    words: list[_PlacedWord] = []
    cursor = start
    while cursor - start < target:
        if not words and rng.random() < cfg.opener_prob:
            word = vocab.openers[int(rng.integers(0, len(vocab.openers)))]
        elif rng.random() < cfg.special_word_prob:
            word = NOISE_WORD if rng.random() < 0.5 else LAUGH_WORD
        else:
            word = regular[int(rng.integers(0, len(regular)))]
        durations = tuple(
            int(d)
            for d in rng.integers(
                cfg.phone_frames[0],
                cfg.phone_frames[1] + 1,
                size=len(vocab.word_phones[word]),
            )
        )
        length = sum(durations)
        if cursor + length > horizon:
            break
        words.append(_PlacedWord(cursor, cursor + length, word, durations))
        cursor += length
    return words


def synth_conversation(
    cfg: SynthConfig,
    vocab: Vocabulary,
    speakers: list[str],
    prototypes: dict[str, np.ndarray],
    rng: np.random.Generator,
    recording_id: str = "rec0000",
    split: str = "train",
) -> Recording:
    """One synthetic conversation with frame-consistent outputs."""
    cfg.validate()
    total = int(rng.integers(cfg.duration_frames[0], cfg.duration_frames[1] + 1))
    current = int(rng.integers(0, 2))
    cursor = int(rng.integers(0, cfg.pause_mean_frames + 1))
    turns: list[tuple[str, list[_PlacedWord]]] = []
    while cursor < total - cfg.phone_frames[0]:
        words = _sample_turn_words(cfg, vocab, rng, cursor, total)
        if not words:
            break
        turns.append((speakers[current], words))
        turn_end = words[-1].end
        turn_span = turn_end - words[0].start
        if turns and rng.random() < cfg.overlap_prob and turn_span > 1:
            overlap = int(rng.integers(1, cfg.max_overlap_frames + 1))
            cursor = max(words[0].start + 1, turn_end - overlap)
        else:
            pause = int(rng.geometric(1.0 / cfg.pause_mean_frames)) if cfg.pause_mean_frames else 0
            cursor = turn_end + pause
        current = 1 - current

    reference = np.zeros((total, len(speakers)), dtype=np.int8)
    speaker_word_spans: dict[str, list[tuple[int, int]]] = {s: [] for s in speakers}
    for speaker, words in turns:
        column = speakers.index(speaker)
        for w in words:
            reference[w.start : w.end, column] = 1
            speaker_word_spans[speaker].append((w.start, w.end))

    # single-stream 1-best alignment: a new turn swallows overlapped words
    aligned: list[tuple[_PlacedWord, str]] = []
    for speaker, words in turns:
        turn_start = words[0].start
        while aligned and aligned[-1][0].end > turn_start:
            aligned.pop()
        aligned.extend((w, speaker) for w in words)

    word_spans: list[WordSpan] = []
    phone_spans: list[PhoneSpan] = []
    cursor = 0
    for placed, speaker in aligned:
        if placed.start > cursor:
            phone_spans.append(PhoneSpan(cursor, placed.start, "sil", SILENCE))
        word_spans.append(WordSpan(placed.start, placed.end, placed.word, speaker))
        phones = vocab.word_phones[placed.word]
        t = placed.start
        for k, (phone, duration) in enumerate(zip(phones, placed.phone_frames)):
            if len(phones) == 1:
                tag = SINGLETON
            elif k == 0:
                tag = BEGIN
            elif k == len(phones) - 1:
                tag = END
            else:
                tag = INTERNAL
            phone_spans.append(
                PhoneSpan(t, t + duration, phone + _TAG_SUFFIX[tag], tag)
            )
            t += duration
        cursor = placed.end
    if cursor < total:
        phone_spans.append(PhoneSpan(cursor, total, "sil", SILENCE))
    alignment = TimeAlignment(total, word_spans, phone_spans).validate()

    token_rows: list[Token] = []
    for word_index, span in enumerate(word_spans):
        for sub_index, token in enumerate(vocab.word_tokens(span.word)):
            token_rows.append(
                Token(vocab.token_index[token], word_index, sub_index, span.speaker)
            )
    tokens = TokenSequence(token_rows, vocab.vocab_size).validate()

    features = rng.standard_normal((total, cfg.acoustic_dim)) * cfg.jitter
    for column, speaker in enumerate(speakers):
        features[reference[:, column] == 1] += prototypes[speaker]
    position_tags = np.zeros(total, dtype=np.int64)
    for span in phone_spans:
        position_tags[span.start : span.end] = POSITION_INDEX[span.tag]

    return Recording(
        recording_id=recording_id,
        split=split,
        speakers=list(speakers),
        features=features.astype(np.float32),
        alignment=alignment,
        tokens=tokens,
        reference=reference,
        speaker_word_spans=speaker_word_spans,
        position_tags=position_tags,
    )


def generate_corpus(cfg: SynthConfig) -> Corpus:
    """Seeded corpus with speaker-disjoint train/dev/test splits."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.rng_seed)
    children = root.spawn(cfg.num_recordings + 1)
    corpus_rng = np.random.default_rng(children[0])
    vocab = build_vocabulary(cfg, corpus_rng)
    pools: dict[str, list[str]] = {}
    prototypes: dict[str, np.ndarray] = {}
    for split in SPLITS:
        pools[split] = [f"{split}-spk{i}" for i in range(cfg.speakers_per_split)]
        for name in pools[split]:
            prototypes[name] = corpus_rng.normal(
                0.0, cfg.prototype_scale, cfg.acoustic_dim
            )
    counts = cfg.counts_by_split()
    recordings = []
    index = 0
    for split in SPLITS:
        for _ in range(counts[split]):
            rng = np.random.default_rng(children[index + 1])
            pool = pools[split]
            picks = rng.choice(len(pool), size=2, replace=False)
            pair = [pool[int(p)] for p in picks]
            recordings.append(
                synth_conversation(
                    cfg,
                    vocab,
                    pair,
                    prototypes,
                    rng,
                    recording_id=f"rec{index:04d}",
                    split=split,
                )
            )
            index += 1
    return Corpus(vocab, recordings, cfg, cfg.rng_seed)


# --- persistence -----------------------------------------------------------


def recording_paths(directory: Path, recording_id: str) -> dict[str, Path]:
    return {
        "features": directory / f"{recording_id}.feats.dkf",
        "words": directory / f"{recording_id}.words.ctm",
        "phones": directory / f"{recording_id}.phones.ctm",
        "tokens": directory / f"{recording_id}.tokens.txt",
        "rttm": directory / f"{recording_id}.ref.rttm",
    }


def write_corpus(corpus: Corpus, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = corpus.vocab
    (directory / "vocab.json").write_text(
        json.dumps(
            {
                "phones": list(vocab.phones),
                "phones_per_subword": vocab.phones_per_subword,
                "words": {w: list(p) for w, p in vocab.word_phones.items()},
                "tokens": vocab.token_list,
                "openers": list(vocab.openers),
            },
            indent=2,
        )
        + "\n"
    )
    manifest = {
        "seed": corpus.seed,
        "config": corpus.config.to_dict() if corpus.config else None,
        "recordings": [
            {
                "id": r.recording_id,
                "split": r.split,
                "frames": r.num_frames,
                "speakers": r.speakers,
            }
            for r in corpus.recordings
        ],
    }
    for recording in corpus.recordings:
        paths = recording_paths(directory, recording.recording_id)
        dkio.write_frame_features(paths["features"], recording.features, frame_rate_ms=10)
        dkio.write_word_ctm(paths["words"], recording.recording_id, recording.alignment)
        dkio.write_phone_ctm(paths["phones"], recording.recording_id, recording.alignment)
        dkio.write_transcript(
            paths["tokens"],
            [
                (vocab.token_list[t.token_id], t.word_index, t.subword_index, t.speaker)
                for t in recording.tokens.tokens
            ],
        )
        segments = activity_to_segments(
            recording.reference, frame_seconds=0.01, speakers=recording.speakers
        )
        dkio.write_rttm(paths["rttm"], {recording.recording_id: segments})
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def read_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    vocab_data = json.loads((directory / "vocab.json").read_text())
    vocab = Vocabulary(
        word_phones={w: tuple(p) for w, p in vocab_data["words"].items()},
        token_list=list(vocab_data["tokens"]),
        phones=tuple(vocab_data["phones"]),
        phones_per_subword=vocab_data["phones_per_subword"],
        openers=tuple(vocab_data.get("openers", ())),
    )
    recordings = []
    for entry in manifest["recordings"]:
        paths = recording_paths(directory, entry["id"])
        features, _rate = dkio.read_frame_features(paths["features"])
        _rec, alignment = dkio.read_alignment(paths["words"], paths["phones"])
        rows = dkio.read_transcript(paths["tokens"])
        tokens = TokenSequence(
            [
                Token(vocab.token_index[token], word, sub, speaker)
                for token, word, sub, speaker in rows
            ],
            vocab.vocab_size,
        )
        segments = dkio.read_rttm(paths["rttm"]).get(entry["id"], [])
        reference = segments_to_activity(
            segments, entry["frames"], 0.01, entry["speakers"]
        )
        recordings.append(
            Recording(
                recording_id=entry["id"],
                split=entry["split"],
                speakers=list(entry["speakers"]),
                features=features,
                alignment=alignment,
                tokens=tokens,
                reference=reference,
            )
        )
    config = manifest.get("config")
    return Corpus(
        vocab,
        recordings,
        SynthConfig.from_dict(config) if config else None,
        manifest.get("seed"),
    )
