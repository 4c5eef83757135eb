"""Scikit-learn-style estimators wrapping the functional core, so the
models compose with the wider ecosystem (get_params/set_params, clone,
fit/predict/transform)."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .model import AsrFeatureSpec, ModelConfig
from .scd import (
    ScdModelConfig,
    ScdTrainConfig,
    TokenSequence,
    sliding_window_infer,
    train_scd,
)
from .scoring import activity_to_segments, aggregate_reports, binarize, compute_der
from .training import (
    SpecAugmentConfig,
    TrainConfig,
    TrainingExample,
    build_model,
    train,
)
from .validation import check_activity, check_frame_matrix, check_paired_lengths


class ConformerDiarizer(BaseEstimator):
    """Trainable Conformer diarizer with per-frame speaker posteriors.

    ``fit`` takes a list of T x F acoustic feature matrices and a list of
    T x S binary activity matrices (both at 10 ms). Modes other than
    ``baseline`` additionally take per-recording ASR feature sequences:
    model inputs for the fusion/CSA modes, auxiliary label sequences for
    ``multitask``.
    """

    def __init__(
        self,
        mode="baseline",
        feature: AsrFeatureSpec | None = None,
        num_speakers=2,
        encoder_layers=2,
        model_dim=64,
        attention_heads=2,
        ff_hidden_dim=None,
        acoustic_dim=80,
        embedding_dim=16,
        sce_projection_dim=64,
        downsampling="simple",
        aux_layer_index=None,
        aux_hidden_dim=256,
        alpha=0.2,
        epochs=5,
        batch_size=8,
        warmup_steps=500,
        average_last_k=1,
        freq_masks=2,
        freq_mask_max=2,
        time_masks=2,
        time_mask_max=40,
        threshold=0.5,
        random_state=0,
    ):
        self.mode = mode
        self.feature = feature
        self.num_speakers = num_speakers
        self.encoder_layers = encoder_layers
        self.model_dim = model_dim
        self.attention_heads = attention_heads
        self.ff_hidden_dim = ff_hidden_dim
        self.acoustic_dim = acoustic_dim
        self.embedding_dim = embedding_dim
        self.sce_projection_dim = sce_projection_dim
        self.downsampling = downsampling
        self.aux_layer_index = aux_layer_index
        self.aux_hidden_dim = aux_hidden_dim
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.average_last_k = average_last_k
        self.freq_masks = freq_masks
        self.freq_mask_max = freq_mask_max
        self.time_masks = time_masks
        self.time_mask_max = time_mask_max
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            num_speakers=self.num_speakers,
            encoder_layers=self.encoder_layers,
            model_dim=self.model_dim,
            attention_heads=self.attention_heads,
            acoustic_dim=self.acoustic_dim,
            ff_hidden_dim=self.ff_hidden_dim,
            asr_feature=self.feature,
            embedding_dim=self.embedding_dim,
            sce_projection_dim=self.sce_projection_dim,
            mode=self.mode,
            downsampling=self.downsampling,
            aux_layer_index=self.aux_layer_index,
            aux_hidden_dim=self.aux_hidden_dim,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_steps=self.warmup_steps,
            average_last_k=self.average_last_k,
            specaugment=SpecAugmentConfig(
                freq_masks=self.freq_masks,
                freq_mask_max=self.freq_mask_max,
                time_masks=self.time_masks,
                time_mask_max=self.time_mask_max,
            ),
            rng_seed=self.random_state,
        )

    def _examples(self, X, y=None, asr_features=None) -> list[TrainingExample]:
        config = self._model_config()
        xs = [check_frame_matrix(x, self.acoustic_dim) for x in X]
        if y is None:
            ys = [np.zeros((x.shape[0], self.num_speakers), np.int8) for x in xs]
        else:
            ys = [check_activity(a, self.num_speakers) for a in y]
            check_paired_lengths(xs, ys)
        needs_asr = config.asr_feature is not None
        if needs_asr and asr_features is None:
            raise ValueError(f"mode {self.mode!r} requires asr_features")
        examples = []
        for i, (x, a) in enumerate(zip(xs, ys)):
            feature = asr_features[i] if needs_asr else None
            aux = None
            if config.mode == "multitask":
                aux = np.asarray(feature.labels)
                feature = None
            examples.append(
                TrainingExample(
                    recording_id=f"x{i:04d}",
                    features=x,
                    activity=a,
                    asr_feature=feature,
                    aux_labels=aux,
                )
            )
        return examples

    def fit(self, X, y, asr_features=None):
        examples = self._examples(X, y, asr_features)
        config = self._model_config()
        result = train(config, examples, [], self._train_config())
        self.config_ = config
        self.parameters_ = result.parameters
        self.metrics_ = result.metrics
        self.model_ = build_model(config, result.parameters)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ConformerDiarizer has not been fitted")

    def predict_proba(self, X, asr_features=None) -> list[np.ndarray]:
        """Per-recording T' x S posterior matrices at the 40 ms rate."""
        self._check_fitted()
        examples = self._examples(X, None, asr_features)
        outputs = []
        self.model_.eval()
        with torch.no_grad():
            for ex in examples:
                out = self.model_.run_sequence(ex.features, ex.asr_feature)
                outputs.append(out.posteriors.cpu().numpy())
        return outputs

    def predict(self, X, asr_features=None) -> list[np.ndarray]:
        """Binary T' x S activity matrices via the configured threshold."""
        return [
            binarize(z, self.threshold) for z in self.predict_proba(X, asr_features)
        ]

    def score(self, X, y, asr_features=None) -> float:
        """Negated aggregate DER, so larger is better."""
        self._check_fitted()
        ys = [check_activity(a, self.num_speakers) for a in y]
        reports = []
        for z, a in zip(self.predict_proba(X, asr_features), ys):
            hyp = activity_to_segments(binarize(z, self.threshold), frame_seconds=0.04)
            ref = activity_to_segments(a, frame_seconds=0.01)
            reports.append(compute_der(hyp, ref))
        return -aggregate_reports(reports).der


class SpeakerChangeDetector(BaseEstimator, TransformerMixin):
    """Token-level speaker-change tagger.

    ``fit`` takes a list of TokenSequence transcripts (targets derive from
    the speaker attribution); ``predict_proba`` returns per-token change
    posteriors and ``transform`` the pre-classification embeddings.
    """

    def __init__(
        self,
        width=64,
        encoder_layers=2,
        attention_heads=2,
        window=20,
        overlap=10,
        steps=300,
        batch_size=16,
        learning_rate=1e-3,
        change_weight=0.065,
        no_change_weight=0.935,
        random_state=0,
    ):
        self.width = width
        self.encoder_layers = encoder_layers
        self.attention_heads = attention_heads
        self.window = window
        self.overlap = overlap
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.change_weight = change_weight
        self.no_change_weight = no_change_weight
        self.random_state = random_state

    def fit(self, X, y=None):
        sequences = list(X)
        if not sequences:
            raise ValueError("need at least one transcript")
        vocab_sizes = {s.vocab_size for s in sequences}
        if len(vocab_sizes) != 1:
            raise ValueError("all transcripts must share one vocabulary")
        config = ScdModelConfig(
            vocab_size=vocab_sizes.pop(),
            width=self.width,
            encoder_layers=self.encoder_layers,
            attention_heads=self.attention_heads,
        )
        train_config = ScdTrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            window=self.window,
            class_weights=(self.no_change_weight, self.change_weight),
            rng_seed=self.random_state,
        )
        self.model_, self.metrics_ = train_scd(sequences, config, train_config)
        self.config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this SpeakerChangeDetector has not been fitted")

    def _infer(self, sequences: list[TokenSequence]):
        self._check_fitted()
        return [
            sliding_window_infer(s, self.model_, self.window, self.overlap)
            for s in sequences
        ]

    def predict_proba(self, X) -> list[np.ndarray]:
        return [posteriors for posteriors, _ in self._infer(list(X))]

    def predict(self, X) -> list[np.ndarray]:
        return [(p >= 0.5).astype(np.int8) for p in self.predict_proba(X)]

    def transform(self, X) -> list[np.ndarray]:
        return [embeddings for _, embeddings in self._infer(list(X))]
