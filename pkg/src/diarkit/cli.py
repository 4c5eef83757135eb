"""Command-line entry points tying the pipeline together.

Subcommands: synth, train, infer, score, scd-train, scd-infer. All
hyperparameters come from a JSON config file with sections "model",
"training", "synth", and "scd"; command-line flags win over the file.
Set DIARKIT_LOG to control the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as dkdata
from . import io as dkio
from . import pipeline, scd
from .model import ConfigError, ModelConfig
from .scoring import aggregate_reports, compute_der
from .training import TrainConfig, build_model, train

logger = logging.getLogger(__name__)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    config = json.loads(Path(path).read_text())
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    return config


def _override(section: dict, **flags) -> dict:
    merged = dict(section)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def _cmd_synth(args) -> int:
    section = _load_config(args.config).get("synth", {})
    section = _override(section, rng_seed=args.seed)
    cfg = dkdata.SynthConfig.from_dict(section).validate()
    corpus = dkdata.generate_corpus(cfg)
    manifest = dkdata.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.recordings)} recordings to {manifest.parent}")
    return 0


def _resolve_model_config(config_file: dict, args, corpus, scd_width: int | None) -> ModelConfig:
    section = dict(config_file.get("model", {}))
    if args.mode is not None:
        section["mode"] = args.mode
    if args.downsampling is not None:
        section["downsampling"] = args.downsampling
    feature_name = args.feature
    if feature_name is None and isinstance(section.get("asr_feature"), dict):
        feature_name = section["asr_feature"].get("name")
    if section.get("mode", "baseline") == "baseline":
        section["asr_feature"] = None
    elif feature_name is not None:
        section["asr_feature"] = pipeline.feature_spec(
            feature_name, corpus.vocab, scd_width=scd_width
        )
    return ModelConfig.from_dict(section)


def _cmd_train(args) -> int:
    config_file = _load_config(args.config)
    corpus = dkdata.read_corpus(args.corpus)
    # validate the configuration cell before demanding an SCD checkpoint;
    # the placeholder width only matters for configs that pass validation
    model_config = _resolve_model_config(config_file, args, corpus, scd_width=1)
    scd_model = None
    if model_config.asr_feature is not None and model_config.asr_feature.kind in (
        "scp",
        "sce",
    ):
        if args.scd_checkpoint is None:
            raise ValueError(
                "speaker-change features need --scd-checkpoint (run scd-train first)"
            )
        scd_model = scd.load_model(args.scd_checkpoint)
        model_config = _resolve_model_config(
            config_file, args, corpus, scd_width=scd_model.config.width
        )
    train_section = _override(
        config_file.get("training", {}),
        alpha=args.alpha,
        epochs=args.epochs,
        rng_seed=args.seed,
    )
    train_config = TrainConfig.from_dict(train_section)
    train_examples = pipeline.prepare_examples(
        corpus.split("train"), model_config, corpus.vocab, scd_model
    )
    dev_examples = pipeline.prepare_examples(
        corpus.split("dev"), model_config, corpus.vocab, scd_model
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(
        model_config,
        train_examples,
        dev_examples,
        train_config,
        metrics_path=out / "metrics.jsonl",
    )
    dkio.save_checkpoint(out / "checkpoint.dkc", result.parameters, model_config.digest())
    resolved = {"model": model_config.to_dict(), "training": train_config.to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    final = result.metrics[-1] if result.metrics else {}
    print(
        f"trained {model_config.mode} model for {train_config.epochs} epochs; "
        f"dev DER {final.get('dev_der')}"
    )
    return 0


def _cmd_infer(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {checkpoint} does not exist")
    config_path = Path(args.config) if args.config else checkpoint.parent / "config.json"
    resolved = json.loads(config_path.read_text())
    model_config = ModelConfig.from_dict(resolved["model"])
    params, digest = dkio.load_checkpoint(checkpoint)
    if digest != model_config.digest():
        raise ValueError("checkpoint digest does not match the model config")
    model = build_model(model_config, params)
    corpus = dkdata.read_corpus(args.corpus)
    scd_model = scd.load_model(args.scd_checkpoint) if args.scd_checkpoint else None
    recordings = corpus.split(args.split) if args.split else corpus.recordings
    hypotheses = {}
    for recording in recordings:
        example = pipeline.prepare_example(
            recording, model_config, corpus.vocab, scd_model
        )
        hypotheses[recording.recording_id] = pipeline.infer_segments(
            model, example, threshold=args.threshold, median_window=args.median_window
        )
    dkio.write_rttm(args.out, hypotheses)
    print(f"wrote hypotheses for {len(hypotheses)} recordings to {args.out}")
    return 0


def _cmd_score(args) -> int:
    hyp = dkio.read_rttm(args.hyp)
    ref = dkio.read_rttm(args.ref)
    missing = sorted(set(ref) ^ set(hyp))
    if missing:
        raise ValueError(f"recording ids differ between hyp and ref: {missing}")
    header = f"{'RECORDING':<24}{'DER%':>8}{'MISS%':>8}{'FA%':>8}{'CONF%':>8}"
    print(header)
    reports = []
    for recording_id in sorted(ref):
        report = compute_der(
            hyp[recording_id],
            ref[recording_id],
            collar=args.collar,
            score_overlap=not args.no_overlap,
        )
        reports.append(report)
        print(
            f"{recording_id:<24}{report.der * 100:>8.3f}{report.missed * 100:>8.3f}"
            f"{report.false_alarm * 100:>8.3f}{report.confusion * 100:>8.3f}"
        )
    total = aggregate_reports(reports)
    print(
        f"{'ALL':<24}{total.der * 100:>8.3f}{total.missed * 100:>8.3f}"
        f"{total.false_alarm * 100:>8.3f}{total.confusion * 100:>8.3f}"
    )
    return 0


def _cmd_scd_train(args) -> int:
    config_file = _load_config(args.config)
    section = _override(
        config_file.get("scd", {}), steps=args.steps, rng_seed=args.seed
    )
    corpus = dkdata.read_corpus(args.corpus)
    model_keys = {"width", "encoder_layers", "attention_heads", "ff_hidden_dim"}
    model_section = {k: v for k, v in section.items() if k in model_keys}
    if args.width is not None:
        model_section["width"] = args.width
    train_section = {k: v for k, v in section.items() if k not in model_keys}
    if "class_weights" in train_section:
        train_section["class_weights"] = tuple(train_section["class_weights"])
    model_config = scd.ScdModelConfig(
        vocab_size=corpus.vocab.vocab_size, **model_section
    )
    train_config = scd.ScdTrainConfig(**train_section)
    sequences = [r.tokens for r in corpus.split("train")]
    model, metrics = scd.train_scd(sequences, model_config, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scd.save_model(model, out / "scd.ckpt")
    with open(out / "scd_metrics.jsonl", "w") as sink:
        for entry in metrics:
            sink.write(json.dumps(entry) + "\n")
    print(f"trained speaker-change model for {train_config.steps} steps -> {out}")
    return 0


def _cmd_scd_infer(args) -> int:
    model = scd.load_model(args.checkpoint)
    corpus = dkdata.read_corpus(args.corpus)
    recordings = corpus.split(args.split) if args.split else corpus.recordings
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for recording in recordings:
        posteriors, embeddings = scd.sliding_window_infer(
            recording.tokens, model, window=args.window, overlap=args.overlap
        )
        lines = []
        for token, posterior in zip(recording.tokens.tokens, posteriors):
            name = corpus.vocab.token_list[token.token_id]
            lines.append(f"{name} {posterior:.6f}")
        (out / f"{recording.recording_id}.scp.txt").write_text(
            "".join(line + "\n" for line in lines)
        )
        if args.embeddings:
            dkio.write_frame_features(
                out / f"{recording.recording_id}.sce.dkf",
                embeddings.astype("float32"),
                frame_rate_ms=0,  # token rate, not a frame grid
            )
    print(f"wrote speaker-change posteriors for {len(recordings)} recordings")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diarkit",
        description="Conformer EEND diarization with ASR-derived features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic corpus")
    synth.add_argument("--config", help="JSON config with a 'synth' section")
    synth.add_argument("--out", required=True, help="corpus output directory")
    synth.add_argument("--seed", type=int, help="override the corpus seed")
    synth.set_defaults(handler=_cmd_synth)

    tr = sub.add_parser("train", help="train a diarization model")
    tr.add_argument("--config", help="JSON config with 'model'/'training' sections")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--mode", choices=["baseline", "early_fusion", "late_fusion", "csa", "multitask"])
    tr.add_argument("--feature", choices=list(pipeline.FEATURE_NAMES))
    tr.add_argument("--downsampling", choices=["simple", "conv"])
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--scd-checkpoint", help="needed for scp/sce features")
    tr.set_defaults(handler=_cmd_train)

    infer = sub.add_parser("infer", help="write hypothesis RTTM for a corpus")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--config", help="defaults to config.json next to the checkpoint")
    infer.add_argument("--corpus", required=True)
    infer.add_argument("--out", required=True, help="output RTTM path")
    infer.add_argument("--split", default="test")
    infer.add_argument("--threshold", type=float, default=0.5)
    infer.add_argument("--median-window", type=int, default=1)
    infer.add_argument("--scd-checkpoint")
    infer.set_defaults(handler=_cmd_infer)

    score = sub.add_parser("score", help="score hypothesis RTTM against reference")
    score.add_argument("--hyp", required=True)
    score.add_argument("--ref", required=True)
    score.add_argument("--collar", type=float, default=0.25)
    score.add_argument("--no-overlap", action="store_true", help="exclude overlap regions")
    score.set_defaults(handler=_cmd_score)

    scd_train = sub.add_parser("scd-train", help="train the speaker-change model")
    scd_train.add_argument("--config", help="JSON config with an 'scd' section")
    scd_train.add_argument("--corpus", required=True)
    scd_train.add_argument("--out", required=True)
    scd_train.add_argument("--steps", type=int)
    scd_train.add_argument("--width", type=int)
    scd_train.add_argument("--seed", type=int)
    scd_train.set_defaults(handler=_cmd_scd_train)

    scd_infer = sub.add_parser("scd-infer", help="write per-token change posteriors")
    scd_infer.add_argument("--checkpoint", required=True)
    scd_infer.add_argument("--corpus", required=True)
    scd_infer.add_argument("--out", required=True, help="output directory")
    scd_infer.add_argument("--split", default=None)
    scd_infer.add_argument("--window", type=int, default=20)
    scd_infer.add_argument("--overlap", type=int, default=10)
    scd_infer.add_argument("--embeddings", action="store_true", help="also dump embeddings")
    scd_infer.set_defaults(handler=_cmd_scd_infer)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DIARKIT_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, ConfigError, OSError, RuntimeError, KeyError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
