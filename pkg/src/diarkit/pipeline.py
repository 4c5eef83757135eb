"""Corpus-level glue: feature dispatch, example preparation, and inference."""

from __future__ import annotations

import torch

from .data import Recording, Vocabulary
from .features import (
    FrameSequence,
    build_scp_frames,
    build_sce_frames,
    collapse_phones,
    derive_speech_activity,
    encode_word_boundaries,
    extract_position_in_word,
    subword_spans_for_words,
)
from .model import AsrFeatureSpec, DiarizationModel, ModelConfig
from .scd import SpeakerChangeModel, sliding_window_infer
from .scoring import Segment, activity_to_segments, binarize
from .training import TrainingExample

FEATURE_NAMES = ("phones", "position_in_word", "word_boundaries", "sad", "scp", "sce")


def feature_spec(
    name: str,
    vocab: Vocabulary | None = None,
    scd_width: int | None = None,
) -> AsrFeatureSpec:
    """The model-facing spec for a named ASR feature."""
    if name == "phones":
        if vocab is None:
            raise ValueError("the phone feature needs the corpus vocabulary")
        num_classes = len(set(vocab.phone_table().values()))
        return AsrFeatureSpec(name, "categorical", num_classes=num_classes)
    if name == "position_in_word":
        return AsrFeatureSpec(name, "categorical", num_classes=5)
    if name == "word_boundaries":
        return AsrFeatureSpec(name, "categorical", num_classes=5)
    if name == "sad":
        return AsrFeatureSpec(name, "categorical", num_classes=2)
    if name == "scp":
        return AsrFeatureSpec(name, "scp")
    if name == "sce":
        if scd_width is None:
            raise ValueError("the sce feature needs the speaker-change model width")
        return AsrFeatureSpec(name, "sce", dim=scd_width)
    raise ValueError(f"unknown ASR feature {name!r}; expected one of {FEATURE_NAMES}")


def compute_asr_feature(
    recording: Recording,
    name: str,
    vocab: Vocabulary | None = None,
    scd_model: SpeakerChangeModel | None = None,
) -> FrameSequence:
    """The named feature sequence for one recording, at the 10 ms rate."""
    alignment = recording.alignment
    if name == "phones":
        if vocab is None:
            raise ValueError("the phone feature needs the corpus vocabulary")
        return collapse_phones(alignment, vocab.phone_table())
    if name == "position_in_word":
        return extract_position_in_word(alignment)
    if name == "word_boundaries":
        return encode_word_boundaries(alignment)
    if name == "sad":
        return derive_speech_activity(alignment)
    if name in ("scp", "sce"):
        if scd_model is None:
            raise ValueError(f"the {name} feature needs a trained speaker-change model")
        posteriors, embeddings = sliding_window_infer(recording.tokens, scd_model)
        spans = subword_spans_for_words(alignment, recording.tokens.tokens_per_word())
        if name == "scp":
            triples = [(s, e, float(p)) for (s, e), p in zip(spans, posteriors)]
            return build_scp_frames(alignment, triples)
        rows = [(s, e, embeddings[i]) for i, (s, e) in enumerate(spans)]
        return build_sce_frames(alignment, rows, dim=scd_model.config.width)
    raise ValueError(f"unknown ASR feature {name!r}; expected one of {FEATURE_NAMES}")


def prepare_example(
    recording: Recording,
    config: ModelConfig,
    vocab: Vocabulary | None = None,
    scd_model: SpeakerChangeModel | None = None,
) -> TrainingExample:
    """Bundle one recording into the optimizer's input structure."""
    asr_feature = None
    aux_labels = None
    if config.asr_feature is not None:
        feature = compute_asr_feature(
            recording, config.asr_feature.name, vocab, scd_model
        )
        if config.mode == "multitask":
            aux_labels = feature.labels
        elif config.mode != "baseline":
            asr_feature = feature
    return TrainingExample(
        recording_id=recording.recording_id,
        features=recording.features,
        activity=recording.reference,
        asr_feature=asr_feature,
        aux_labels=aux_labels,
    )


def prepare_examples(
    recordings: list[Recording],
    config: ModelConfig,
    vocab: Vocabulary | None = None,
    scd_model: SpeakerChangeModel | None = None,
) -> list[TrainingExample]:
    return [prepare_example(r, config, vocab, scd_model) for r in recordings]


def infer_segments(
    model: DiarizationModel,
    example: TrainingExample,
    threshold: float = 0.5,
    median_window: int = 1,
) -> list[Segment]:
    """Hypothesis segments for one recording at the 40 ms output rate."""
    model.eval()
    with torch.no_grad():
        output = model.run_sequence(example.features, example.asr_feature)
        posteriors = output.posteriors.cpu().numpy()
    activity = binarize(posteriors, threshold, median_window)
    return activity_to_segments(activity, frame_seconds=0.04)


def reference_segments(example: TrainingExample) -> list[Segment]:
    return activity_to_segments(example.activity, frame_seconds=0.01)
