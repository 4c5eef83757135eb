"""Training machinery: permutation-invariant diarization loss, auxiliary
cross-entropy, SpecAugment, the transformer learning-rate schedule, the
optimizer loop, and checkpoint averaging."""

from __future__ import annotations

import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .features import CategoricalFrameSequence, FrameSequence
from .model import (
    DiarizationModel,
    ModelConfig,
    SUBSAMPLING_FACTOR,
    feature_to_tensor,
    parameter_set,
    load_parameter_set,
    subsampled_length,
)
from .scoring import (
    DerReport,
    activity_to_segments,
    aggregate_reports,
    binarize,
    compute_der,
)

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


@dataclass
class SpecAugmentConfig:
    freq_masks: int = 2
    freq_mask_max: int = 2
    time_masks: int = 2
    time_mask_max: int = 40  # desk-scale default; full-scale setups use 1200

    def __post_init__(self):
        if min(self.freq_masks, self.freq_mask_max, self.time_masks, self.time_mask_max) < 0:
            raise ValueError("SpecAugment counts and mask sizes must be >= 0")


@dataclass
class TrainConfig:
    alpha: float = 0.2  # 0.2 for position-in-word; 0.6 for phones and boundaries
    epochs: int = 10
    batch_size: int = 8
    warmup_steps: int = 500
    average_last_k: int = 10
    specaugment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    rng_seed: int = 0
    dev_threshold: float = 0.5
    dev_collar: float = 0.25

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("epochs, batch_size, and warmup_steps must be positive")
        if not 1 <= self.average_last_k <= self.epochs:
            raise ValueError("average_last_k must lie in [1, epochs]")

    def to_dict(self) -> dict:
        data = dict(self.__dict__)
        data["specaugment"] = dict(self.specaugment.__dict__)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        spec = data.pop("specaugment", None)
        if spec is not None and not isinstance(spec, SpecAugmentConfig):
            spec = SpecAugmentConfig(**spec)
        return cls(specaugment=spec or SpecAugmentConfig(), **data)


@dataclass
class TrainingExample:
    """One recording prepared for the optimizer, all at the 10 ms rate."""

    recording_id: str
    features: np.ndarray  # T x F float32
    activity: np.ndarray  # T x S binary reference
    asr_feature: FrameSequence | None = None  # fusion/CSA model input
    aux_labels: np.ndarray | None = None  # multitask targets, (T,) int


# --- losses -------------------------------------------------------------


def _clamp_posteriors(z: torch.Tensor) -> torch.Tensor:
    exact = (z <= 0.0) | (z >= 1.0)
    if bool(exact.any()):
        logger.debug(
            "clamping %d posteriors that reached 0 or 1 exactly", int(exact.sum())
        )
    return z.clamp(BCE_EPS, 1.0 - BCE_EPS)


def pit_bce_loss(
    posteriors: torch.Tensor | np.ndarray, reference: torch.Tensor | np.ndarray
) -> tuple[torch.Tensor, tuple[int, ...]]:
    """Permutation-invariant BCE: the minimum over speaker permutations of
    the mean binary cross entropy; ties go to the lexicographically
    smallest permutation."""
    z = torch.as_tensor(posteriors)
    if not z.dtype.is_floating_point:
        z = z.double()
    y = torch.as_tensor(reference).to(z.dtype)
    if z.ndim != 2 or z.shape != y.shape:
        raise ValueError("posteriors and reference must both be T x S")
    zc = _clamp_posteriors(z)
    log_z, log_1mz = torch.log(zc), torch.log1p(-zc)
    best_loss, best_perm, best_value = None, None, None
    for perm in itertools.permutations(range(z.shape[1])):
        yp = y[:, list(perm)]
        loss = -(yp * log_z + (1.0 - yp) * log_1mz).mean()
        value = float(loss.detach())
        if best_value is None or value < best_value:
            best_loss, best_perm, best_value = loss, perm, value
    return best_loss, best_perm


def pit_bce_loss_batch(
    posteriors: torch.Tensor, reference: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, list[tuple[int, ...]]]:
    """Batched PIT BCE; each sequence picks its own permutation and the
    batch loss is the mean of per-sequence masked means."""
    z = _clamp_posteriors(posteriors)
    y = reference.to(z.dtype)
    valid = mask.to(z.dtype)[..., None]
    log_z, log_1mz = torch.log(z), torch.log1p(-z)
    num_speakers = z.shape[-1]
    denom = valid.sum(dim=(1, 2)) * num_speakers
    perms = list(itertools.permutations(range(num_speakers)))
    per_perm = []
    for perm in perms:
        yp = y[:, :, list(perm)]
        bce = -(yp * log_z + (1.0 - yp) * log_1mz) * valid
        per_perm.append(bce.sum(dim=(1, 2)) / denom)
    stacked = torch.stack(per_perm)  # P x B
    choice = np.argmin(stacked.detach().cpu().numpy(), axis=0)  # first minimum
    idx = torch.as_tensor(choice, dtype=torch.long)
    chosen = stacked.gather(0, idx[None, :]).squeeze(0)
    return chosen.mean(), [perms[i] for i in choice]


def aux_ce_loss(
    logits: torch.Tensor, labels: CategoricalFrameSequence | np.ndarray | torch.Tensor
) -> torch.Tensor:
    """Mean cross entropy of per-frame feature-class logits against labels
    already downsampled to the encoder frame rate."""
    if isinstance(labels, CategoricalFrameSequence):
        labels = labels.labels
    target = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if logits.ndim != 2 or target.ndim != 1 or logits.shape[0] != target.shape[0]:
        raise ValueError("expected T x C logits and length-T labels")
    if target.numel() and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise ValueError(
            f"labels must lie in [0, {logits.shape[1]}); got max {int(target.max())}"
        )
    return F.cross_entropy(logits, target)


def aux_ce_loss_batch(
    logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    flat_mask = mask.reshape(-1)
    flat_logits = logits.reshape(-1, logits.shape[-1])[flat_mask]
    flat_labels = labels.reshape(-1)[flat_mask]
    return F.cross_entropy(flat_logits, flat_labels)


def combined_loss(loss_der, loss_aux, alpha: float):
    """Total training objective: diarization loss plus alpha times the
    auxiliary loss."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return loss_der + alpha * loss_aux


# --- SpecAugment and schedule --------------------------------------------


def spec_augment(
    features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    """Zero random frequency and time bands of an acoustic feature matrix.

    Mask widths are drawn uniformly from {0..max} (clamped to the axis
    size); frequency masks are drawn before time masks.
    """
    out = np.array(features, copy=True)
    if out.ndim != 2:
        raise ValueError("acoustic features must be T x F")
    num_frames, num_bins = out.shape
    for _ in range(cfg.freq_masks):
        width = int(rng.integers(0, min(cfg.freq_mask_max, num_bins) + 1))
        start = int(rng.integers(0, num_bins - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(cfg.time_masks):
        width = int(rng.integers(0, min(cfg.time_mask_max, num_frames) + 1))
        start = int(rng.integers(0, num_frames - width + 1))
        out[start : start + width, :] = 0.0
    return out


def lr_schedule(step: int, model_dim: int, warmup_steps: int) -> float:
    """Transformer schedule: D^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError("step counts start at 1")
    return model_dim**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


def average_checkpoints(sets: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Element-wise arithmetic mean of parameter sets with identical keys."""
    if not sets:
        raise ValueError("nothing to average")
    reference_keys = set(sets[0])
    for other in sets[1:]:
        if set(other) != reference_keys:
            differing = sorted(reference_keys.symmetric_difference(other))
            raise ValueError(f"parameter sets disagree on key {differing[0]!r}")
    averaged = {}
    for key in sorted(reference_keys):
        stack = [s[key] for s in sets]
        if any(v.shape != stack[0].shape for v in stack[1:]):
            raise ValueError(f"parameter {key!r} has mismatched shapes")
        averaged[key] = np.mean(stack, axis=0, dtype=np.float64).astype(np.float32)
    return averaged


# --- the loop -------------------------------------------------------------


@dataclass
class _Batch:
    acoustic: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor  # B x T' validity mask at the subsampled rate
    activity: torch.Tensor  # B x T' x S
    asr: torch.Tensor | None
    aux_labels: torch.Tensor | None


def _collate(
    examples: list[TrainingExample],
    config: ModelConfig,
    dtype: torch.dtype,
    augment: SpecAugmentConfig | None = None,
    rng: np.random.Generator | None = None,
) -> _Batch:
    lengths = [ex.features.shape[0] for ex in examples]
    max_len = max(lengths)
    max_out = subsampled_length(max_len)
    batch = len(examples)
    acoustic = torch.zeros(batch, max_len, config.acoustic_dim, dtype=dtype)
    activity = torch.zeros(batch, max_out, config.num_speakers, dtype=dtype)
    mask = torch.zeros(batch, max_out, dtype=torch.bool)
    asr = None
    if config.asr_input_dim:
        kind = config.asr_feature.kind
        if kind == "categorical":
            asr = torch.zeros(batch, max_len, dtype=torch.long)
        else:
            raw_dim = 2 if kind == "scp" else config.asr_feature.dim
            asr = torch.zeros(batch, max_len, raw_dim, dtype=dtype)
    aux = None
    if config.mode == "multitask":
        aux = torch.zeros(batch, max_out, dtype=torch.long)
    for i, ex in enumerate(examples):
        feats = ex.features
        if augment is not None:
            feats = spec_augment(feats, augment, rng)
        t = feats.shape[0]
        t_out = subsampled_length(t)
        acoustic[i, :t] = torch.as_tensor(feats, dtype=dtype)
        activity[i, :t_out] = torch.as_tensor(
            ex.activity[::SUBSAMPLING_FACTOR], dtype=dtype
        )
        mask[i, :t_out] = True
        if asr is not None:
            if ex.asr_feature is None:
                raise ValueError(f"{ex.recording_id}: missing ASR feature input")
            asr[i, :t] = feature_to_tensor(ex.asr_feature, dtype)
        if aux is not None:
            if ex.aux_labels is None:
                raise ValueError(f"{ex.recording_id}: missing auxiliary labels")
            aux[i, :t_out] = torch.as_tensor(
                np.asarray(ex.aux_labels)[::SUBSAMPLING_FACTOR], dtype=torch.long
            )
    return _Batch(
        acoustic=acoustic,
        lengths=torch.as_tensor(lengths, dtype=torch.long),
        mask=mask,
        activity=activity,
        asr=asr,
        aux_labels=aux,
    )


def evaluate(
    model: DiarizationModel,
    examples: list[TrainingExample],
    batch_size: int = 8,
    threshold: float = 0.5,
    collar: float = 0.25,
) -> tuple[float, DerReport]:
    """Dev-style evaluation: mean PIT loss and time-weighted DER."""
    config = model.config
    dtype = next(model.parameters()).dtype
    losses = []
    reports = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            batch = _collate(chunk, config, dtype)
            out = model(batch.acoustic, batch.asr, batch.lengths)
            loss, _ = pit_bce_loss_batch(out.posteriors, batch.activity, batch.mask)
            losses.append(float(loss))
            for i, ex in enumerate(chunk):
                t_out = subsampled_length(ex.features.shape[0])
                posteriors = out.posteriors[i, :t_out].cpu().numpy()
                hyp = activity_to_segments(
                    binarize(posteriors, threshold), frame_seconds=0.04
                )
                ref = activity_to_segments(ex.activity, frame_seconds=0.01)
                reports.append(compute_der(hyp, ref, collar=collar))
    return float(np.mean(losses)), aggregate_reports(reports)


@dataclass
class TrainResult:
    parameters: dict[str, np.ndarray]  # average of the last k epoch checkpoints
    metrics: list[dict]


def train(
    model_config: ModelConfig,
    train_examples: list[TrainingExample],
    dev_examples: list[TrainingExample],
    train_config: TrainConfig,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Adam optimization of the combined loss under the transformer schedule.

    Logs one metrics record per epoch and returns the element-wise average
    of the last ``average_last_k`` epoch checkpoints.
    """
    if not train_examples:
        raise ValueError("no training examples")
    cfg = train_config
    torch.manual_seed(cfg.rng_seed)
    model = DiarizationModel(model_config)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=lr_schedule(1, model_config.model_dim, cfg.warmup_steps),
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )
    rng = np.random.default_rng(cfg.rng_seed)
    snapshots: deque[dict[str, np.ndarray]] = deque(maxlen=cfg.average_last_k)
    metrics: list[dict] = []
    multitask = model_config.mode == "multitask"
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        step = 0
        lr = lr_schedule(1, model_config.model_dim, cfg.warmup_steps)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train_examples))
            der_losses, aux_losses = [], []
            for lo in range(0, len(order), cfg.batch_size):
                step += 1
                lr = lr_schedule(step, model_config.model_dim, cfg.warmup_steps)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                chunk = [train_examples[i] for i in order[lo : lo + cfg.batch_size]]
                batch = _collate(chunk, model_config, dtype, cfg.specaugment, rng)
                optimizer.zero_grad()
                out = model(batch.acoustic, batch.asr, batch.lengths)
                loss_der, _ = pit_bce_loss_batch(
                    out.posteriors, batch.activity, batch.mask
                )
                if multitask:
                    loss_aux = aux_ce_loss_batch(
                        out.aux_logits, batch.aux_labels, batch.mask
                    )
                    loss = combined_loss(loss_der, loss_aux, cfg.alpha)
                    aux_losses.append(float(loss_aux.detach()))
                else:
                    loss = loss_der
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"training diverged: non-finite loss at step {step}"
                    )
                der_losses.append(float(loss_der.detach()))
                loss.backward()
                optimizer.step()
            dev_loss, dev_der = None, None
            if dev_examples:
                dev_loss, dev_report = evaluate(
                    model,
                    dev_examples,
                    batch_size=cfg.batch_size,
                    threshold=cfg.dev_threshold,
                    collar=cfg.dev_collar,
                )
                dev_der = dev_report.der
            entry = {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "loss_der": float(np.mean(der_losses)),
                "loss_aux": float(np.mean(aux_losses)) if aux_losses else None,
                "dev_loss": dev_loss,
                "dev_der": dev_der,
            }
            metrics.append(entry)
            logger.info(
                "epoch %d: loss_der=%.4f dev_der=%s", epoch, entry["loss_der"], entry["dev_der"]
            )
            if sink:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            snapshots.append(parameter_set(model))
    finally:
        if sink:
            sink.close()
    return TrainResult(average_checkpoints(list(snapshots)), metrics)


def build_model(
    config: ModelConfig, parameters: dict[str, np.ndarray] | None = None
) -> DiarizationModel:
    """Instantiate a model and optionally load a parameter set into it."""
    torch.manual_seed(0)  # deterministic init even when parameters are given
    model = DiarizationModel(config)
    if parameters is not None:
        load_parameter_set(model, parameters)
    return model
