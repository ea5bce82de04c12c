"""Command-line front end: synth, train, predict, merge, evaluate.

Every command is a pure function of its flags, config file, and input
files; reruns with the same seed produce byte-identical outputs.  Exit
codes: 0 success, 2 usage error, 3 data or configuration error, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .codes import CodeKind, CodeVocabulary, FormatError, build_vocabulary
from .corpus import (
    CodedDocument,
    ConfigError,
    CorpusSplits,
    DuplicateCodeError,
    OrderError,
    SchemaError,
    SyntheticConfig,
    TokenVocabulary,
    corpus_statistics,
    generate_synthetic_corpus,
    load_corpus_jsonl,
    prepare_text,
    save_corpus_jsonl,
)
from .metrics import (
    EmptyCorpusError,
    report_at_k_table,
    write_cg_curve_csv,
    write_report_csv,
    write_report_json,
)
from .model import DecoderConfig, EncoderConfig, HeadConfig, LtrIcdModel
from .ordering import OrderingStrategy
from .pipeline import evaluation_pairs, predict_documents
from .ranking import (
    JoinError,
    merge_by_id,
    read_predictions_jsonl,
    write_predictions_jsonl,
)
from .training import (
    Checkpoint,
    DivergenceError,
    EpochLog,
    LengthError,
    TrainConfig,
    train_phase1,
    train_phase2,
    write_training_log,
)

MAX_BEAM_WIDTH = 5
DEFAULT_K_LIST = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 39)


@dataclass(frozen=True)
class ModelSettings:
    d_e: int = 64
    d_c: int = 64
    d_ff: int = 128
    dec_d_ff: int = 128
    dec_d_attn: int | None = None
    kernel_size: int = 3
    segment_len: int = 512
    max_input_len: int = 5120
    max_output_len: int = 256

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            d_e=self.d_e,
            d_ff=self.d_ff,
            segment_len=self.segment_len,
            max_input_len=self.max_input_len,
        )

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            max_output_len=self.max_output_len, d_ff=self.dec_d_ff, d_attn=self.dec_d_attn
        )

    def head(self) -> HeadConfig:
        return HeadConfig(d_c=self.d_c, kernel_size=self.kernel_size)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    beam_width: int = 5
    k_list: tuple[int, ...] = DEFAULT_K_LIST
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    if "ordering" in data:
        data = dict(data)
        data["ordering"] = OrderingStrategy(data["ordering"])
    return cls(**data)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    allowed = {"seed", "threads", "beam_width", "k_list", "model", "train", "synth"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        threads=int(data.get("threads", 1)),
        beam_width=int(data.get("beam_width", 5)),
        k_list=tuple(int(k) for k in data.get("k_list", DEFAULT_K_LIST)),
        model=_build_section(ModelSettings, data.get("model", {}), "model"),
        train=_build_section(TrainConfig, data.get("train", {}), "train"),
        synth=_build_section(SyntheticConfig, data.get("synth", {}), "synth"),
    )
    if cfg.beam_width < 1 or cfg.beam_width > MAX_BEAM_WIDTH:
        raise ConfigError(f"beam_width must be in 1..{MAX_BEAM_WIDTH}")
    return cfg


# ---------------------------------------------------------------------------
# Shared helpers


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    return cfg


def _split_docs(splits: CorpusSplits, name: str) -> list[CodedDocument]:
    return getattr(splits, name)


def _build_model(settings: ModelSettings, token_vocab_size: int, n_labels: int, seed: int) -> LtrIcdModel:
    return LtrIcdModel(
        token_vocab_size=token_vocab_size,
        n_labels=n_labels,
        encoder=settings.encoder(),
        decoder=settings.decoder(),
        head=settings.head(),
        seed=seed,
    )


def _checkpoint_meta(settings: ModelSettings, cfg: RunConfig, token_vocab, code_vocab) -> dict:
    return {
        "model": dataclasses.asdict(settings),
        "ordering": cfg.train.ordering.value,
        "threshold": cfg.train.threshold,
        "seed": cfg.seed,
        "token_vocab": token_vocab.to_json(),
        "code_vocab": code_vocab.to_json(),
    }


def _model_from_checkpoint(ckpt: Checkpoint) -> tuple[LtrIcdModel, TokenVocabulary, CodeVocabulary, dict]:
    meta = ckpt.meta
    settings = _build_section(ModelSettings, meta["model"], "model")
    token_vocab = TokenVocabulary.from_json(meta["token_vocab"])
    code_vocab = CodeVocabulary.from_json(meta["code_vocab"])
    model = _build_model(settings, len(token_vocab), len(code_vocab), seed=int(meta.get("seed", 0)))
    model.load_values(ckpt.params)
    return model, token_vocab, code_vocab, meta


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    synth = cfg.synth
    overrides = {
        "n_train": args.train_docs,
        "n_validation": args.validation_docs,
        "n_test": args.test_docs,
        "n_diagnosis_codes": args.diagnosis_codes,
        "n_procedure_codes": args.procedure_codes,
    }
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        synth = dataclasses.replace(synth, **updates)
    splits = generate_synthetic_corpus(synth, cfg.seed)
    out = Path(args.out)
    save_corpus_jsonl(splits, out)
    stats = {
        "seed": cfg.seed,
        "documents": {
            "train": len(splits.train),
            "validation": len(splits.validation),
            "test": len(splits.test),
        },
        "codes_per_document": corpus_statistics(splits.all_documents()),
    }
    with open(out / "stats.json", "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote corpus to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    splits = load_corpus_jsonl(args.corpus)
    token_vocab = TokenVocabulary.build(prepare_text(doc.text) for doc in splits.train)
    code_vocab = build_vocabulary(splits.all_documents())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_rows: list[EpochLog] = []
    meta = _checkpoint_meta(cfg.model, cfg, token_vocab, code_vocab)

    if args.phase in ("1", "both"):
        model = _build_model(cfg.model, len(token_vocab), len(code_vocab), cfg.seed)
        ckpt1 = train_phase1(
            model, splits.train, splits.validation, token_vocab, code_vocab, cfg.train, log_rows.append
        )
        ckpt1.meta = meta
        ckpt1.save(out / "phase1.ckpt")
        print(f"phase 1 best validation micro-F1: {ckpt1.best_val_f1:.4f}")
    else:
        if args.from_checkpoint is None:
            raise ConfigError("--phase 2 requires --from-checkpoint")
        ckpt1 = Checkpoint.load(args.from_checkpoint)

    if args.phase in ("2", "both"):
        model, token_vocab, code_vocab, _ = _model_from_checkpoint(ckpt1)
        ckpt2 = train_phase2(
            ckpt1, model, splits.train, splits.validation, token_vocab, code_vocab, cfg.train, log_rows.append
        )
        ckpt2.meta = ckpt1.meta
        ckpt2.save(out / "phase2.ckpt")
        print(f"phase 2 best validation micro-F1: {ckpt2.best_val_f1:.4f}")

    write_training_log(out / "training_log.jsonl", log_rows)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if args.beam is not None:
        beam_width = args.beam
    else:
        beam_width = cfg.beam_width
    splits = load_corpus_jsonl(args.corpus)
    docs = _split_docs(splits, args.split)
    ckpt = Checkpoint.load(args.checkpoint)
    model, token_vocab, code_vocab, meta = _model_from_checkpoint(ckpt)
    threshold = args.threshold if args.threshold is not None else float(meta.get("threshold", 0.5))
    generative, classifier = predict_documents(
        model, docs, token_vocab, code_vocab, beam_width, threshold
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_jsonl(out / "generative.jsonl", generative)
    write_predictions_jsonl(out / "classifier.jsonl", classifier)
    print(f"wrote predictions for {len(docs)} documents to {out}")
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    generative = read_predictions_jsonl(args.generative)
    classifier = read_predictions_jsonl(args.classifier)
    merged = merge_by_id(generative, classifier)
    write_predictions_jsonl(args.out, merged)
    print(f"wrote {len(merged)} merged predictions to {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    k_list = cfg.k_list
    if args.k_list:
        try:
            k_list = tuple(int(part) for part in args.k_list.split(","))
        except ValueError as exc:
            raise ConfigError(f"--k-list must be comma-separated integers: {exc}") from exc
    splits = load_corpus_jsonl(args.corpus)
    docs = _split_docs(splits, args.split)
    preds = {p.doc_id: p for p in read_predictions_jsonl(args.pred)}
    missing = [doc.id for doc in docs if doc.id not in preds]
    if missing:
        print(f"warning: no predictions for {len(missing)} documents (treated as empty)", file=sys.stderr)

    selected = {"diag": [CodeKind.DIAGNOSIS], "proc": [CodeKind.PROCEDURE]}.get(
        args.kinds, [CodeKind.DIAGNOSIS, CodeKind.PROCEDURE, None]
    )
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for kind in selected:
        tag = "combined" if kind is None else kind.value
        pairs = evaluation_pairs(docs, preds, kind)
        if not any(pair.predicted for pair in pairs):
            print(f"warning: no predicted {tag} codes; metrics will be zero", file=sys.stderr)
        rows = report_at_k_table(pairs, k_list)
        write_report_csv(rows, f"{prefix}_{tag}.csv")
        write_report_json(rows, f"{prefix}_{tag}.json")
        write_cg_curve_csv(pairs, max(k_list), f"{prefix}_{tag}_cg.csv")
        print(f"wrote {tag} report for {len(pairs)} documents to {prefix}_{tag}.csv")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltricd", description="Train, run, and evaluate the joint ICD classify-and-rank model."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--threads",
            type=int,
            default=_default_threads(),
            help="worker budget (LTRICD_THREADS fallback; execution is deterministic)",
        )

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output corpus directory")
    p.add_argument("--train-docs", type=int, default=None)
    p.add_argument("--validation-docs", type=int, default=None)
    p.add_argument("--test-docs", type=int, default=None)
    p.add_argument("--diagnosis-codes", type=int, default=None)
    p.add_argument("--procedure-codes", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-phase training procedure")
    add_common(p)
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints")
    p.add_argument("--phase", choices=("1", "2", "both"), default="both")
    p.add_argument("--from-checkpoint", type=Path, default=None, help="phase-1 checkpoint for --phase 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write generative and classifier predictions")
    add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--beam", type=int, default=None, help=f"beam width, at most {MAX_BEAM_WIDTH}")
    p.add_argument("--threshold", type=float, default=None, help="classifier decision threshold")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("merge", help="fuse generative and classifier predictions")
    add_common(p)
    p.add_argument("generative", type=Path)
    p.add_argument("classifier", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evaluate", help="score a predictions file against gold codes")
    add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--kinds", choices=("diag", "proc", "both"), default="both")
    p.add_argument("--k-list", type=str, default=None, help="comma-separated cutoffs")
    p.add_argument("--out-prefix", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    return parser


def _default_threads() -> int | None:
    raw = os.environ.get("LTRICD_THREADS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        return None


_DATA_ERRORS = (
    FormatError,
    SchemaError,
    OrderError,
    DuplicateCodeError,
    ConfigError,
    JoinError,
    EmptyCorpusError,
    LengthError,
    FileNotFoundError,
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "predict" and args.beam is not None and not (1 <= args.beam <= MAX_BEAM_WIDTH):
        parser.error(f"--beam must be between 1 and {MAX_BEAM_WIDTH}")
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
