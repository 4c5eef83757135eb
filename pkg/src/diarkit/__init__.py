"""Conformer-based end-to-end neural diarization with ASR-derived features."""

from .estimators import ConformerDiarizer, SpeakerChangeDetector
from .features import (
    CategoricalFrameSequence,
    ScpFrameSequence,
    SceFrameSequence,
    TimeAlignment,
)
from .model import AsrFeatureSpec, DiarizationModel, ModelConfig
from .scd import ScdModelConfig, SpeakerChangeModel, TokenSequence
from .scoring import DerReport, Segment, compute_der
from .training import TrainConfig, TrainingExample, train

__version__ = "0.1.0"

__all__ = [
    "AsrFeatureSpec",
    "CategoricalFrameSequence",
    "ConformerDiarizer",
    "DerReport",
    "DiarizationModel",
    "ModelConfig",
    "ScdModelConfig",
    "ScpFrameSequence",
    "SceFrameSequence",
    "Segment",
    "SpeakerChangeDetector",
    "SpeakerChangeModel",
    "TimeAlignment",
    "TokenSequence",
    "TrainConfig",
    "TrainingExample",
    "compute_der",
    "train",
]
