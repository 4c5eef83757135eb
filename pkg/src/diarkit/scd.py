"""Lexical speaker-change detection as token sequence labeling.

A small trainable token encoder stands in for the fine-tuned pretrained
transformer: same inputs (sub-word token windows), same outputs (per-token
change posteriors and pre-classification embeddings).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import io as dkio
from .model import ContextualAttention, _mask_frames, parameter_set, load_parameter_set

logger = logging.getLogger(__name__)

#: paper-default class weights, indexed by label: 0 = no change, 1 = change
DEFAULT_CLASS_WEIGHTS = (0.935, 0.065)

DEFAULT_WINDOW = 20
DEFAULT_OVERLAP = 10


class Token(NamedTuple):
    token_id: int
    word_index: int
    subword_index: int
    speaker: str


@dataclass
class TokenSequence:
    """Sub-word tokens of one transcript with speaker attribution."""

    tokens: list[Token]
    vocab_size: int

    def validate(self) -> "TokenSequence":
        previous_word = -1
        expected_sub = 0
        for token in self.tokens:
            if not 0 <= token.token_id < self.vocab_size:
                raise ValueError(f"token id {token.token_id} outside the vocabulary")
            if token.word_index < previous_word:
                raise ValueError("word indices must be non-decreasing")
            if token.word_index != previous_word:
                expected_sub = 0
            if token.subword_index != expected_sub:
                raise ValueError(
                    f"sub-word indices of word {token.word_index} must count from 0"
                )
            previous_word = token.word_index
            expected_sub += 1
        return self

    def __len__(self) -> int:
        return len(self.tokens)

    def token_ids(self) -> np.ndarray:
        return np.array([t.token_id for t in self.tokens], dtype=np.int64)

    def tokens_per_word(self) -> list[int]:
        counts: list[int] = []
        for token in self.tokens:
            if token.word_index == len(counts):
                counts.append(0)
            counts[token.word_index] += 1
        return counts


def pad_token_id(vocab_size: int) -> int:
    """Reserved padding id; the embedding table carries one extra row for it."""
    return vocab_size


def build_scd_targets(sequence: TokenSequence) -> np.ndarray:
    """Label 1 on the first token of every speaker turn, including the first
    turn of the sequence; 0 elsewhere."""
    labels = np.zeros(len(sequence.tokens), dtype=np.int64)
    previous = None
    for i, token in enumerate(sequence.tokens):
        if token.speaker != previous:
            labels[i] = 1
        previous = token.speaker
    return labels


def weighted_ce_loss(
    logits: torch.Tensor,
    targets: torch.Tensor | np.ndarray,
    weights: Sequence[float] = DEFAULT_CLASS_WEIGHTS,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over tokens of weight[y] * (-log softmax(logits)[y]).

    ``weights`` is indexed by class: (no-change, change). The defaults are
    the literal published values, which put the small weight on the rare
    change class; pass (1.0, 1.0) for plain cross entropy.
    """
    if any(w <= 0 for w in weights):
        raise ValueError("class weights must be positive")
    target = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    log_probs = F.log_softmax(logits, dim=-1)
    picked = -log_probs.gather(-1, target[..., None]).squeeze(-1)
    weight = torch.as_tensor(weights, dtype=logits.dtype)[target]
    weighted = weight * picked
    if mask is None:
        return weighted.mean()
    valid = mask.to(logits.dtype)
    return (weighted * valid).sum() / valid.sum()


@dataclass
class ScdWindow:
    token_ids: np.ndarray  # (window,) including padding ids
    targets: np.ndarray  # (window,) zeros on padding
    mask: np.ndarray  # (window,) bool, False on padding
    start: int


def _padded_window(
    ids: np.ndarray, targets: np.ndarray, start: int, window: int, pad_id: int
) -> ScdWindow:
    chunk_ids = ids[start : start + window]
    chunk_targets = targets[start : start + window]
    valid = len(chunk_ids)
    out_ids = np.full(window, pad_id, dtype=np.int64)
    out_targets = np.zeros(window, dtype=np.int64)
    mask = np.zeros(window, dtype=bool)
    out_ids[:valid] = chunk_ids
    out_targets[:valid] = chunk_targets
    mask[:valid] = True
    return ScdWindow(out_ids, out_targets, mask, start)


def sample_training_windows(
    sequence: TokenSequence,
    window: int = DEFAULT_WINDOW,
    num_windows: int = 1,
    rng: np.random.Generator | None = None,
) -> list[ScdWindow]:
    """Windows of consecutive tokens with uniformly random starts; shorter
    sequences yield one padded window whose padding is masked."""
    rng = rng or np.random.default_rng()
    ids = sequence.token_ids()
    targets = build_scd_targets(sequence)
    total = len(ids)
    pad = pad_token_id(sequence.vocab_size)
    windows = []
    for _ in range(num_windows):
        start = 0 if total <= window else int(rng.integers(0, total - window + 1))
        windows.append(_padded_window(ids, targets, start, window, pad))
    return windows


@dataclass
class ScdModelConfig:
    vocab_size: int
    width: int = 64  # configurable up to the published 768
    encoder_layers: int = 2
    attention_heads: int = 2
    ff_hidden_dim: int | None = None  # defaults to 2 * width

    def __post_init__(self):
        if self.ff_hidden_dim is None:
            self.ff_hidden_dim = 2 * self.width
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.width % self.attention_heads:
            raise ValueError("attention_heads must divide width")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_hidden_dim: int):
        super().__init__()
        self.attention = ContextualAttention(dim, heads)
        self.norm_attention = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, ff_hidden_dim)
        self.ff_out = nn.Linear(ff_hidden_dim, dim)
        self.norm_ff = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        attended, _ = self.attention(x, None, mask)
        x = _mask_frames(self.norm_attention(x + attended), mask)
        x = _mask_frames(self.norm_ff(x + self.ff_out(torch.relu(self.ff_in(x)))), mask)
        return x


class SpeakerChangeModel(nn.Module):
    """Token embedding, a small self-attention encoder, and a 2-class
    classifier; the embeddings surfaced are the pre-classification
    activations."""

    def __init__(self, config: ScdModelConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size + 1, config.width)
        self.blocks = nn.ModuleList(
            _EncoderBlock(config.width, config.attention_heads, config.ff_hidden_dim)
            for _ in range(config.encoder_layers)
        )
        self.classifier = nn.Linear(config.width, 2)

    def forward(
        self, token_ids: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        x = _mask_frames(self.embedding(token_ids), mask)
        for block in self.blocks:
            x = block(x, mask)
        return self.classifier(x), x


def scd_forward(
    model: SpeakerChangeModel, window: ScdWindow
) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-window forward: (per-token 2-class logits, embeddings)."""
    ids = torch.as_tensor(window.token_ids)[None, :]
    mask = torch.as_tensor(window.mask)[None, :]
    logits, embeddings = model(ids, mask)
    return logits[0], embeddings[0]


def window_assignments(
    total: int, window: int = DEFAULT_WINDOW, overlap: int = DEFAULT_OVERLAP
) -> list[tuple[int, int, int]]:
    """The inference coverage plan: (window_start, from_token, to_token) rows.

    Windows start every ``window - overlap`` tokens and the final window is
    shifted left to end at the last token. Each window contributes its
    middle ``window - overlap`` tokens, except that the first window also
    covers its leading edge and the last window its trailing edge, so every
    token is assigned exactly once.
    """
    if window < 1 or overlap < 0 or overlap >= window:
        raise ValueError("need window >= 1 and overlap in [0, window)")
    if total < 1:
        return []
    stride = window - overlap
    if total <= window:
        starts = [0]
    else:
        starts = list(range(0, total - window, stride)) + [total - window]
    margin = overlap // 2
    plan = []
    next_start = 0
    for j, s in enumerate(starts):
        lo = 0 if j == 0 else max(next_start, s + margin)
        hi = total if j == len(starts) - 1 else s + window - margin
        plan.append((s, lo, hi))
        next_start = hi
    return plan


def sliding_window_infer(
    sequence: TokenSequence,
    model: SpeakerChangeModel,
    window: int = DEFAULT_WINDOW,
    overlap: int = DEFAULT_OVERLAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token change posteriors and embeddings from overlapped windows,
    assigned per :func:`window_assignments` so interior tokens keep at
    least ``overlap / 2`` tokens of past and future context."""
    total = len(sequence.tokens)
    width = model.config.width
    plan = window_assignments(total, window, overlap)
    if not plan:
        return np.zeros(0), np.zeros((0, width))
    ids = sequence.token_ids()
    targets = np.zeros(total, dtype=np.int64)  # placeholder, unused at inference
    pad = pad_token_id(sequence.vocab_size)
    windows = [_padded_window(ids, targets, s, window, pad) for s, _, _ in plan]
    batch_ids = torch.as_tensor(np.stack([w.token_ids for w in windows]))
    batch_mask = torch.as_tensor(np.stack([w.mask for w in windows]))
    model.eval()
    with torch.no_grad():
        logits, embeddings = model(batch_ids, batch_mask)
        posteriors = torch.softmax(logits, dim=-1)[..., 1].cpu().numpy()
        embeddings = embeddings.cpu().numpy()
    out_posteriors = np.zeros(total)
    out_embeddings = np.zeros((total, width))
    for j, (s, lo, hi) in enumerate(plan):
        out_posteriors[lo:hi] = posteriors[j, lo - s : hi - s]
        out_embeddings[lo:hi] = embeddings[j, lo - s : hi - s]
    return out_posteriors, out_embeddings


@dataclass
class ScdTrainConfig:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    window: int = DEFAULT_WINDOW
    class_weights: tuple[float, float] = DEFAULT_CLASS_WEIGHTS
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def train_scd(
    sequences: Sequence[TokenSequence],
    model_config: ScdModelConfig,
    train_config: ScdTrainConfig,
) -> tuple[SpeakerChangeModel, list[dict]]:
    """Train the stand-in encoder on windows sampled from the transcripts."""
    usable = [s for s in sequences if len(s.tokens) > 0]
    if not usable:
        raise ValueError("no non-empty transcripts to train on")
    cfg = train_config
    torch.manual_seed(cfg.rng_seed)
    model = SpeakerChangeModel(model_config)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.rng_seed)
    metrics = []
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(usable), size=cfg.batch_size)
        windows = [
            sample_training_windows(usable[i], cfg.window, 1, rng)[0] for i in picks
        ]
        ids = torch.as_tensor(np.stack([w.token_ids for w in windows]))
        targets = torch.as_tensor(np.stack([w.targets for w in windows]))
        mask = torch.as_tensor(np.stack([w.mask for w in windows]))
        optimizer.zero_grad()
        logits, _ = model(ids, mask)
        loss = weighted_ce_loss(logits, targets, cfg.class_weights, mask)
        if not torch.isfinite(loss):
            raise RuntimeError(f"SCD training diverged at step {step}")
        loss.backward()
        optimizer.step()
        metrics.append({"step": step, "loss": float(loss.detach())})
    return model, metrics


def save_model(model: SpeakerChangeModel, path: str | Path):
    """Checkpoint plus a JSON sidecar carrying the architecture config."""
    path = Path(path)
    dkio.save_checkpoint(path, parameter_set(model), model.config.digest())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(model.config.to_dict(), indent=2) + "\n")


def load_model(path: str | Path) -> SpeakerChangeModel:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    config = ScdModelConfig(**json.loads(sidecar.read_text()))
    params, digest = dkio.load_checkpoint(path)
    if digest != config.digest():
        raise ValueError(f"checkpoint {path} does not match its config sidecar")
    model = SpeakerChangeModel(config)
    load_parameter_set(model, params)
    return model
