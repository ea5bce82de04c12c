"""End-to-end flows wiring the model, ranking, and metrics together.

These helpers back both the command-line interface and the ordering-strategy
comparison harness: batch prediction over documents, gold/predicted pair
construction per code kind, and the three-way label-ordering experiment.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codes import CodeKind, CodeVocabulary
from .corpus import (
    CodedDocument,
    CorpusSplits,
    TokenVocabulary,
    pad_or_truncate,
    prepare_text,
    tokenize,
)
from .metrics import EvalPair, ndcg_at_k
from .model import LtrIcdModel
from .ordering import OrderingStrategy
from .ranking import RankedPrediction, classifier_ranked, merge, postprocess_generated, split_by_kind
from .training import TrainConfig, train_phase1


def predict_documents(
    model: LtrIcdModel,
    docs: Sequence[CodedDocument],
    token_vocab: TokenVocabulary,
    code_vocab: CodeVocabulary,
    beam_width: int,
    threshold: float,
) -> tuple[list[RankedPrediction], list[RankedPrediction]]:
    """Generative (beam search + dedup) and classifier predictions per document."""
    generative, classifier = [], []
    n = model.encoder_cfg.max_input_len
    for doc in docs:
        ids, _ = pad_or_truncate(
            tokenize(prepare_text(doc.text), token_vocab), n, token_vocab.pad_id
        )
        ids = np.asarray(ids, dtype=np.int64)[None, :]
        h = model.encode(ids)
        hypotheses = model.beam_search(h, beam_width=beam_width)
        best_ids = hypotheses[0][0] if hypotheses else ()
        codes = postprocess_generated([code_vocab.code_of(i) for i in best_ids])
        generative.append(RankedPrediction(doc_id=doc.id, codes=codes))
        probs = model.classify(ids)[0]
        classifier.append(classifier_ranked(doc.id, probs, code_vocab, threshold))
    return generative, classifier


def merge_predictions(
    generative: Sequence[RankedPrediction], classifier: Sequence[RankedPrediction]
) -> list[RankedPrediction]:
    return [
        RankedPrediction(doc_id=c.doc_id, codes=merge(g.codes, c.codes))
        for g, c in zip(generative, classifier)
    ]


def gold_sequence(doc: CodedDocument, kind: CodeKind | None) -> list:
    """Gold ranking for one kind, or the priority-interleaved combined list."""
    if kind is not None:
        return doc.codes_of_kind(kind)
    diag = doc.codes_of_kind(CodeKind.DIAGNOSIS)
    proc = doc.codes_of_kind(CodeKind.PROCEDURE)
    out = []
    for i in range(max(len(diag), len(proc))):
        if i < len(diag):
            out.append(diag[i])
        if i < len(proc):
            out.append(proc[i])
    return out


def evaluation_pairs(
    docs: Sequence[CodedDocument],
    preds_by_id: dict[str, RankedPrediction],
    kind: CodeKind | None,
) -> list[EvalPair]:
    """EvalPairs for one kind; documents without predictions count as empty."""
    pairs = []
    for doc in docs:
        pred = preds_by_id.get(doc.id)
        if pred is None:
            predicted = []
        elif kind is None:
            predicted = pred.codes
        else:
            diag_pred, proc_pred = split_by_kind(pred)
            predicted = (diag_pred if kind is CodeKind.DIAGNOSIS else proc_pred).codes
        pairs.append(EvalPair(predicted=predicted, gold=gold_sequence(doc, kind)))
    return pairs


# ---------------------------------------------------------------------------
# Ordering-strategy comparison


@dataclass
class OrderingCgRow:
    strategy: OrderingStrategy
    kind: CodeKind
    k: int
    cg: float


def compare_orderings(
    splits: CorpusSplits,
    token_vocab: TokenVocabulary,
    code_vocab: CodeVocabulary,
    model_factory: Callable[[], LtrIcdModel],
    base_cfg: TrainConfig,
    k_max: int,
    beam_width: int = 5,
    strategies: Sequence[OrderingStrategy] = tuple(OrderingStrategy),
) -> list[OrderingCgRow]:
    """Train one model per label-ordering strategy and score merged output.

    Returns per-kind CG_k rows for k = 1..k_max on the test split, the data
    behind the CG-versus-K comparison plots.
    """
    rows: list[OrderingCgRow] = []
    for strategy in strategies:
        model = model_factory()
        cfg = replace(base_cfg, ordering=strategy)
        ckpt = train_phase1(
            model, splits.train, splits.validation, token_vocab, code_vocab, cfg
        )
        model.load_values(ckpt.params)
        generative, classifier = predict_documents(
            model, splits.test, token_vocab, code_vocab, beam_width, cfg.threshold
        )
        merged = merge_predictions(generative, classifier)
        preds_by_id = {p.doc_id: p for p in merged}
        for kind in CodeKind:
            pairs = evaluation_pairs(splits.test, preds_by_id, kind)
            ndcg_cache = [ndcg_at_k(pairs, j) for j in range(1, k_max + 1)]
            running = 0.0
            for k, val in enumerate(ndcg_cache, start=1):
                running += val
                rows.append(OrderingCgRow(strategy=strategy, kind=kind, k=k, cg=running / k))
    return rows


def write_ordering_csv(rows: Sequence[OrderingCgRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["strategy", "kind", "K", "CG"])
        for row in rows:
            writer.writerow([row.strategy.value, row.kind.value, row.k, f"{row.cg:.6f}"])
