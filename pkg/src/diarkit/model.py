"""Conformer diarization encoder with four ASR-feature integration modes:
baseline, early fusion, late fusion, and contextualized self-attention, plus
the auxiliary classification head used for multi-task training."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .features import (
    CategoricalFrameSequence,
    FrameSequence,
    ScpFrameSequence,
    SceFrameSequence,
)

MODES = ("baseline", "early_fusion", "late_fusion", "csa", "multitask")
FEATURE_KINDS = ("categorical", "scp", "sce")
DOWNSAMPLING = ("simple", "conv")

SUBSAMPLING_FACTOR = 4
ACOUSTIC_KERNELS = ((3, 3), (7, 7))
ASR_KERNELS = ((3, 3), (7, 3))


class ConfigError(ValueError):
    """A model configuration violates its invariants."""


@dataclass
class AsrFeatureSpec:
    """Which ASR-derived feature the model consumes (or predicts)."""

    name: str
    kind: str  # categorical | scp | sce
    num_classes: int | None = None  # categorical only
    dim: int | None = None  # sce only; scp is fixed 2-dimensional

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.kind!r}")
        if self.kind == "categorical" and (self.num_classes or 0) < 1:
            raise ConfigError("categorical features need num_classes >= 1")
        if self.kind == "sce" and (self.dim or 0) < 1:
            raise ConfigError("sce features need dim >= 1")
        if self.kind == "scp":
            self.dim = 2


@dataclass
class ModelConfig:
    num_speakers: int = 2
    encoder_layers: int = 4
    model_dim: int = 256
    attention_heads: int = 4
    acoustic_dim: int = 80
    ff_hidden_dim: int | None = None  # defaults to 4 * model_dim
    conv_kernel_size: int = 7
    asr_feature: AsrFeatureSpec | None = None
    embedding_dim: int = 16
    sce_projection_dim: int = 64
    mode: str = "baseline"
    downsampling: str = "simple"
    aux_layer_index: int | None = None  # defaults to the final layer
    aux_hidden_dim: int = 256

    def __post_init__(self):
        if self.ff_hidden_dim is None:
            self.ff_hidden_dim = 4 * self.model_dim
        if self.aux_layer_index is None:
            self.aux_layer_index = self.encoder_layers
        self.validate()

    def validate(self) -> "ModelConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.downsampling not in DOWNSAMPLING:
            raise ConfigError(f"unknown downsampling {self.downsampling!r}")
        if min(self.num_speakers, self.encoder_layers, self.model_dim) < 1:
            raise ConfigError("speakers, layers, and model_dim must be positive")
        if self.model_dim % self.attention_heads:
            raise ConfigError("attention_heads must divide model_dim")
        if not 1 <= self.aux_layer_index <= self.encoder_layers:
            raise ConfigError(
                f"aux_layer_index {self.aux_layer_index} outside "
                f"[1, {self.encoder_layers}]"
            )
        if self.mode != "baseline" and self.asr_feature is None:
            raise ConfigError(f"mode {self.mode!r} requires an ASR feature spec")
        if self.mode == "multitask" and self.asr_feature.kind != "categorical":
            raise ConfigError(
                "multi-task training requires a categorical ASR feature; "
                "speaker-change features are already subsumed by the "
                "diarization loss"
            )
        if (
            self.downsampling == "conv"
            and self.asr_feature is not None
            and self.asr_feature.kind == "scp"
        ):
            raise ConfigError(
                "convolutional subsampling is not supported for the "
                "2-dimensional speaker-change posteriors"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        feature = data.pop("asr_feature", None)
        if feature is not None and not isinstance(feature, AsrFeatureSpec):
            feature = AsrFeatureSpec(**feature)
        return cls(asr_feature=feature, **data)

    def digest(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    @property
    def asr_input_dim(self) -> int:
        """Width of the transformed ASR feature fed to the encoder."""
        if self.asr_feature is None or self.mode in ("baseline", "multitask"):
            return 0
        return {
            "categorical": self.embedding_dim,
            "scp": 2,
            "sce": self.sce_projection_dim,
        }[self.asr_feature.kind]


def subsampled_length(num_frames: int) -> int:
    """Output length of both convolutional subsampling paths: ceil(T / 4)."""
    return -(-num_frames // SUBSAMPLING_FACTOR)


def _mask_frames(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    # zero padded rows so the depthwise conv cannot leak them into real frames
    if mask is None:
        return x
    return x * mask.to(x.dtype)[..., None]


class ConvSubsampler(nn.Module):
    """Two depthwise-separable 2-D convolution stages, stride 2 in time and
    feature; symmetric zero padding forces an output length of ceil(T / 4)."""

    MIN_FRAMES = 8

    def __init__(self, in_dim: int, out_dim: int, kernels, channels: int | None = None):
        super().__init__()
        if any(k % 2 == 0 for kernel in kernels for k in kernel):
            raise ConfigError("subsampling kernels must be odd")
        channels = channels or out_dim
        (k1t, k1f), (k2t, k2f) = kernels
        self.depthwise1 = nn.Conv2d(
            1, 1, (k1t, k1f), stride=2, padding=((k1t - 1) // 2, (k1f - 1) // 2)
        )
        self.pointwise1 = nn.Conv2d(1, channels, 1)
        self.depthwise2 = nn.Conv2d(
            channels,
            channels,
            (k2t, k2f),
            stride=2,
            padding=((k2t - 1) // 2, (k2f - 1) // 2),
            groups=channels,
        )
        self.pointwise2 = nn.Conv2d(channels, channels, 1)
        freq_after = (((in_dim + 1) // 2) + 1) // 2
        self.projection = nn.Linear(channels * freq_after, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3:
            raise ValueError("expected a batch of T x F feature matrices")
        if x.shape[1] < self.MIN_FRAMES:
            raise ValueError(
                f"sequence of {x.shape[1]} frames is too short to subsample "
                f"(minimum {self.MIN_FRAMES})"
            )
        h = x.unsqueeze(1)  # B, 1, T, F
        h = torch.relu(self.pointwise1(self.depthwise1(h)))
        h = torch.relu(self.pointwise2(self.depthwise2(h)))
        h = h.permute(0, 2, 1, 3).flatten(2)  # B, T', C * F'
        return self.projection(h)


class FeatureTransform(nn.Module):
    """Raw ASR features to encoder inputs: a learned embedding for
    categorical labels, a ReLU projection for speaker-change embeddings,
    and the identity for speaker-change posteriors."""

    def __init__(self, spec: AsrFeatureSpec, embedding_dim: int, sce_projection_dim: int):
        super().__init__()
        self.kind = spec.kind
        if spec.kind == "categorical":
            self.embedding = nn.Embedding(spec.num_classes, embedding_dim)
            self.out_dim = embedding_dim
        elif spec.kind == "sce":
            self.projection = nn.Linear(spec.dim, sce_projection_dim)
            self.out_dim = sce_projection_dim
        else:
            self.out_dim = 2

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        if self.kind == "categorical":
            if raw.dtype != torch.long:
                raise ValueError("categorical features must be integer labels")
            return self.embedding(raw)
        if self.kind == "sce":
            return torch.relu(self.projection(raw))
        if raw.shape[-1] != 2:
            raise ValueError("speaker-change posterior features must be T x 2")
        return raw


class ContextualAttention(nn.Module):
    """Multi-head self-attention whose queries and keys may see extra context.

    With context, Q and K are projected from Concat(context, x) before the
    head split; V always comes from x alone, so the attended output stays a
    mixture of value vectors.
    """

    def __init__(self, dim: int, heads: int, context_dim: int = 0):
        super().__init__()
        if dim % heads:
            raise ConfigError("heads must divide the attention width")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.context_dim = context_dim
        self.query = nn.Linear(dim + context_dim, dim)
        self.key = nn.Linear(dim + context_dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        if self.context_dim:
            if context is None:
                raise ValueError("this attention layer requires context")
            if context.shape[1] != t:
                raise ValueError(
                    f"context length {context.shape[1]} != sequence length {t}"
                )
            qk_input = torch.cat([context, x], dim=-1)
        else:
            if context is not None:
                raise ValueError("this attention layer takes no context")
            qk_input = x

        def split(v: torch.Tensor) -> torch.Tensor:
            return v.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.query(qk_input))
        k = split(self.key(qk_input))
        v = split(self.value(x))
        logits = (q @ k.transpose(-1, -2)) * self.scale
        if mask is not None:
            logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(attended), weights


class ConformerLayer(nn.Module):
    """Self-attention, depthwise convolution, and feed-forward sub-layers,
    each wrapped as LayerNorm(x + Sublayer(x)). No positional encodings."""

    def __init__(
        self,
        dim: int,
        heads: int,
        conv_kernel_size: int = 7,
        ff_hidden_dim: int | None = None,
        context_dim: int = 0,
    ):
        super().__init__()
        if conv_kernel_size % 2 == 0:
            raise ConfigError("depthwise conv kernel must be odd")
        self.attention = ContextualAttention(dim, heads, context_dim)
        self.norm_attention = nn.LayerNorm(dim)
        self.conv = nn.Conv1d(
            dim, dim, conv_kernel_size, padding=conv_kernel_size // 2, groups=dim
        )
        self.norm_conv = nn.LayerNorm(dim)
        self.ff_in = nn.Linear(dim, ff_hidden_dim or 4 * dim)
        self.ff_out = nn.Linear(ff_hidden_dim or 4 * dim, dim)
        self.norm_ff = nn.LayerNorm(dim)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attended, weights = self.attention(x, context, mask)
        x = _mask_frames(self.norm_attention(x + attended), mask)
        convolved = self.conv(x.transpose(1, 2)).transpose(1, 2)
        x = _mask_frames(self.norm_conv(x + convolved), mask)
        x = _mask_frames(self.norm_ff(x + self.ff_out(torch.relu(self.ff_in(x)))), mask)
        return x, weights


class AuxHead(nn.Module):
    """Two-layer linear network with ReLU producing ASR-feature class logits."""

    def __init__(self, dim: int, hidden_dim: int, num_classes: int):
        super().__init__()
        self.hidden = nn.Linear(dim, hidden_dim)
        self.output = nn.Linear(hidden_dim, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(torch.relu(self.hidden(x)))


@dataclass
class EncoderOutput:
    """Outputs of one encoder pass (leading batch axis when batched)."""

    embeddings: torch.Tensor  # T' x D
    layer_outputs: list[torch.Tensor]  # E^1 .. E^n
    posteriors: torch.Tensor  # T' x S, strictly inside (0, 1)
    aux_logits: torch.Tensor | None = None  # T' x C in multitask mode


class DiarizationModel(nn.Module):
    """The full encoder: subsampling, feature transform, Conformer stack,
    diarization head, and (in multitask mode) the auxiliary head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        dim = config.model_dim
        self.acoustic_subsampler = ConvSubsampler(
            config.acoustic_dim, dim, ACOUSTIC_KERNELS
        )
        self.asr_transform = None
        self.asr_subsampler = None
        self.fusion = None
        self.aux_head = None
        asr_dim = config.asr_input_dim
        if asr_dim:
            self.asr_transform = FeatureTransform(
                config.asr_feature, config.embedding_dim, config.sce_projection_dim
            )
            if config.downsampling == "conv":
                self.asr_subsampler = ConvSubsampler(asr_dim, asr_dim, ASR_KERNELS)
        if config.mode == "early_fusion":
            self.fusion = nn.Linear(dim + asr_dim, dim)
        context_dim = asr_dim if config.mode == "csa" else 0
        self.layers = nn.ModuleList(
            ConformerLayer(
                dim,
                config.attention_heads,
                config.conv_kernel_size,
                config.ff_hidden_dim,
                context_dim,
            )
            for _ in range(config.encoder_layers)
        )
        head_dim = dim + asr_dim if config.mode == "late_fusion" else dim
        self.head = nn.Linear(head_dim, config.num_speakers)
        if config.mode == "multitask":
            self.aux_head = AuxHead(
                dim, config.aux_hidden_dim, config.asr_feature.num_classes
            )

    def encode(
        self,
        acoustic: torch.Tensor,
        asr: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        """Run the Conformer stack on already-subsampled inputs.

        ``acoustic`` is B x T' x D; ``asr`` is the transformed, subsampled
        feature sequence (absent for baseline and multitask modes).
        """
        mode = self.config.mode
        if mode in ("baseline", "multitask"):
            if asr is not None:
                raise ValueError(f"{mode} encoder takes acoustic input only")
        elif asr is None:
            raise ValueError(f"{mode} encoder requires ASR features")
        if asr is not None and asr.shape[1] != acoustic.shape[1]:
            raise ValueError(
                f"ASR length {asr.shape[1]} != acoustic length {acoustic.shape[1]}"
            )
        x = acoustic
        if mode == "early_fusion":
            x = self.fusion(torch.cat([acoustic, asr], dim=-1))
        context = asr if mode == "csa" else None
        x = _mask_frames(x, mask)
        layer_outputs = []
        attention_maps = []
        for layer in self.layers:
            x, weights = layer(x, context, mask)
            layer_outputs.append(x)
            attention_maps.append(weights)
        embeddings = x
        head_in = (
            torch.cat([embeddings, asr], dim=-1) if mode == "late_fusion" else embeddings
        )
        posteriors = torch.sigmoid(self.head(head_in))
        aux_logits = None
        if self.aux_head is not None:
            aux_logits = self.aux_head(
                layer_outputs[self.config.aux_layer_index - 1]
            )
        output = EncoderOutput(embeddings, layer_outputs, posteriors, aux_logits)
        if return_attention:
            return output, attention_maps
        return output

    def forward(
        self,
        acoustic: torch.Tensor,
        asr: torch.Tensor | None = None,
        lengths: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        """Full pipeline from 10 ms inputs: subsample, transform, encode.

        ``asr`` holds the raw feature sequence at 10 ms (integer labels for
        categorical features, float rows otherwise).
        """
        subsampled = self.acoustic_subsampler(acoustic)
        mask = None
        if lengths is not None:
            out_lengths = torch.div(
                lengths + SUBSAMPLING_FACTOR - 1,
                SUBSAMPLING_FACTOR,
                rounding_mode="floor",
            )
            positions = torch.arange(subsampled.shape[1], device=subsampled.device)
            mask = positions[None, :] < out_lengths[:, None]
        asr_sub = None
        if self.asr_transform is not None:
            if asr is None:
                raise ValueError(f"mode {self.config.mode!r} requires ASR features")
            transformed = self.asr_transform(asr)
            if self.asr_subsampler is not None:
                asr_sub = self.asr_subsampler(transformed)
            else:
                asr_sub = transformed[:, ::SUBSAMPLING_FACTOR]
        elif asr is not None:
            raise ValueError(f"mode {self.config.mode!r} takes acoustic input only")
        return self.encode(subsampled, asr_sub, mask, return_attention)

    def run_sequence(
        self, acoustic: np.ndarray, asr_feature: FrameSequence | None = None
    ) -> EncoderOutput:
        """Convenience single-sequence forward from numpy inputs."""
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(np.asarray(acoustic), dtype=dtype).unsqueeze(0)
        asr = None
        if asr_feature is not None:
            asr = feature_to_tensor(asr_feature, dtype).unsqueeze(0)
        out = self.forward(x, asr)
        return EncoderOutput(
            out.embeddings[0],
            [e[0] for e in out.layer_outputs],
            out.posteriors[0],
            None if out.aux_logits is None else out.aux_logits[0],
        )


def feature_to_tensor(feature: FrameSequence, dtype=torch.float32) -> torch.Tensor:
    """Raw feature sequence to the tensor the model consumes at 10 ms."""
    if isinstance(feature, CategoricalFrameSequence):
        return torch.as_tensor(feature.labels, dtype=torch.long)
    if isinstance(feature, ScpFrameSequence):
        return torch.as_tensor(feature.matrix(), dtype=dtype)
    if isinstance(feature, SceFrameSequence):
        return torch.as_tensor(feature.vectors, dtype=dtype)
    raise TypeError(f"cannot convert {type(feature).__name__} to a tensor")


def parameter_set(model: nn.Module) -> dict[str, np.ndarray]:
    """All learnable weights as float32 arrays keyed by stable path strings."""
    return {
        key: value.detach().cpu().numpy().astype(np.float32)
        for key, value in model.state_dict().items()
    }


def load_parameter_set(model: nn.Module, params: dict[str, np.ndarray]):
    """Load a parameter set back into a model; keys must match exactly."""
    expected = set(model.state_dict())
    got = set(params)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(f"parameter keys differ: missing={missing} extra={extra}")
    state = {key: torch.as_tensor(np.asarray(value)) for key, value in params.items()}
    model.load_state_dict(state)
    return model
