"""Order-aware retrieval metrics and standard classification metrics.

Top-K relevance: a predicted item at cutoff K counts as relevant iff it
appears among the first min(K, |gold|) gold codes.  F1/P/R@K pool counts
over the corpus (micro); MAP/NDCG/CG average per-document scores over the
documents that have at least one gold code (macro).  The cumulative gain
CG_K is the mean of NDCG@k for k = 1..K, which separates rankings that
plain NDCG cannot under binary relevance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codes import IcdCode


class EmptyCorpusError(ValueError):
    """Metric requested over zero evaluation pairs."""


@dataclass
class EvalPair:
    predicted: list[IcdCode]
    gold: list[IcdCode]

    def __post_init__(self) -> None:
        if len(set(self.predicted)) != len(self.predicted):
            raise ValueError("predicted list contains duplicates")
        if len(set(self.gold)) != len(self.gold):
            raise ValueError("gold list contains duplicates")


@dataclass
class KMetricsRow:
    k: int
    f1: float
    precision: float
    recall: float
    map: float
    ndcg: float
    cg: float


def topk_relevance(pair: EvalPair, k: int) -> list[bool]:
    """Relevance flags for the first min(k, |predicted|) positions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top_gold = set(pair.gold[: min(k, len(pair.gold))])
    return [code in top_gold for code in pair.predicted[: min(k, len(pair.predicted))]]


def micro_prf_at_k(
    pairs: Sequence[EvalPair], k: int, average: str = "micro"
) -> tuple[float, float, float]:
    """Precision/recall/F1 at cutoff K.

    ``average="micro"`` pools hits and slot counts across the corpus;
    ``average="per_document"`` instead averages per-document ratios (a
    sensitivity-analysis mode, with empty denominators skipped per side).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not pairs:
        raise EmptyCorpusError("no evaluation pairs")
    if average == "micro":
        hits = pred_slots = gold_slots = 0
        for pair in pairs:
            hits += sum(topk_relevance(pair, k))
            pred_slots += min(k, len(pair.predicted))
            gold_slots += min(k, len(pair.gold))
        precision = hits / pred_slots if pred_slots else 0.0
        recall = hits / gold_slots if gold_slots else 0.0
        # count-domain harmonic mean, equal to 2PR/(P+R) but exact when the
        # slot counts coincide (the K=1 identity)
        f1 = 2 * hits / (pred_slots + gold_slots) if hits else 0.0
        return precision, recall, f1
    if average == "per_document":
        p_vals, r_vals = [], []
        for pair in pairs:
            h = sum(topk_relevance(pair, k))
            if pair.predicted:
                p_vals.append(h / min(k, len(pair.predicted)))
            if pair.gold:
                r_vals.append(h / min(k, len(pair.gold)))
        precision = sum(p_vals) / len(p_vals) if p_vals else 0.0
        recall = sum(r_vals) / len(r_vals) if r_vals else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1
    raise ValueError(f"unknown average mode {average!r}")


def map_at_k(pairs: Sequence[EvalPair], k: int) -> float:
    """Mean average precision at K over documents with gold codes.

    AP@K sums rel_i * precision@i over the first min(K, |pred|) positions
    and normalizes by min(K, |gold|).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = []
    for pair in pairs:
        if not pair.gold:
            continue
        rel = topk_relevance(pair, k)
        hits = 0
        ap = 0.0
        for i, flag in enumerate(rel, start=1):
            if flag:
                hits += 1
                ap += hits / i
        scores.append(ap / min(k, len(pair.gold)))
    return sum(scores) / len(scores) if scores else 0.0


def ndcg_at_k(pairs: Sequence[EvalPair], k: int) -> float:
    """Mean NDCG at K (binary relevance, log2 discount) over gold-bearing docs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = []
    for pair in pairs:
        if not pair.gold:
            continue
        rel = topk_relevance(pair, k)
        dcg = sum(flag / math.log2(i + 1) for i, flag in enumerate(rel, start=1))
        idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(pair.gold)) + 1))
        scores.append(dcg / idcg)
    return sum(scores) / len(scores) if scores else 0.0


def cg_at_k(pairs: Sequence[EvalPair], k: int) -> float:
    """Cumulative gain: the arithmetic mean of NDCG@j for j = 1..K."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(ndcg_at_k(pairs, j) for j in range(1, k + 1)) / k


def report_at_k_table(pairs: Sequence[EvalPair], k_list: Sequence[int]) -> list[KMetricsRow]:
    if not k_list:
        raise ValueError("k_list must be non-empty")
    if not pairs:
        raise EmptyCorpusError("no evaluation pairs")
    ndcg_cache = {j: ndcg_at_k(pairs, j) for j in range(1, max(k_list) + 1)}
    rows = []
    for k in k_list:
        precision, recall, f1 = micro_prf_at_k(pairs, k)
        cg = sum(ndcg_cache[j] for j in range(1, k + 1)) / k
        rows.append(
            KMetricsRow(
                k=k,
                f1=f1,
                precision=precision,
                recall=recall,
                map=map_at_k(pairs, k),
                ndcg=ndcg_cache[k],
                cg=cg,
            )
        )
    return rows


def write_report_csv(rows: Sequence[KMetricsRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "F1", "Prec", "Rec", "MAP", "NDCG", "CG"])
        for r in rows:
            writer.writerow(
                [r.k] + [f"{v:.6f}" for v in (r.f1, r.precision, r.recall, r.map, r.ndcg, r.cg)]
            )


def write_report_json(rows: Sequence[KMetricsRow], path: str | Path) -> None:
    payload = [
        {
            "k": r.k,
            "f1": r.f1,
            "precision": r.precision,
            "recall": r.recall,
            "map": r.map,
            "ndcg": r.ndcg,
            "cg": r.cg,
        }
        for r in rows
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_cg_curve_csv(pairs: Sequence[EvalPair], k_max: int, path: str | Path) -> None:
    """(k, CG_k) rows for k = 1..k_max, for plotting ranking quality curves."""
    ndcg_cache = [ndcg_at_k(pairs, j) for j in range(1, k_max + 1)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "CG"])
        running = 0.0
        for j, val in enumerate(ndcg_cache, start=1):
            running += val
            writer.writerow([j, f"{running / j:.6f}"])


# ---------------------------------------------------------------------------
# Classification metrics (threshold decisions plus ranking AUCs)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank of their group."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _auc_roc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUC (equals trapezoidal ROC area with tie averaging)."""
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = _average_ranks(scores)
    return (ranks[labels > 0.5].sum() - pos * (pos + 1) / 2) / (pos * neg)


def _auc_pr(labels: np.ndarray, scores: np.ndarray) -> float:
    """Average precision by step integration of the precision-recall curve."""
    pos = int(labels.sum())
    if pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i : j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i : j + 1].sum())
        recall = tp / pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def classification_report(gold: np.ndarray, probs: np.ndarray, threshold: float = 0.5) -> dict:
    """Micro and macro F1/precision/recall at a threshold, plus AUCs.

    Micro pools all (document, label) decisions; macro averages per-label
    scores over every label with 0/0 defined as 0.  AUCs average over the
    labels where they are defined (at least one positive, and for ROC at
    least one negative).
    """
    y = np.asarray(gold, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 2:
        raise ValueError(f"gold {y.shape} and probability {p.shape} matrices must both be (D, L)")
    pred = p >= threshold
    truth = y > 0.5

    def prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    micro_p, micro_r, micro_f1 = prf(tp, fp, fn)

    per_label = [
        prf(
            float(np.sum(pred[:, j] & truth[:, j])),
            float(np.sum(pred[:, j] & ~truth[:, j])),
            float(np.sum(~pred[:, j] & truth[:, j])),
        )
        for j in range(y.shape[1])
    ]
    macro_p = float(np.mean([t[0] for t in per_label]))
    macro_r = float(np.mean([t[1] for t in per_label]))
    macro_f1 = float(np.mean([t[2] for t in per_label]))

    roc_vals = [_auc_roc(truth[:, j].astype(float), p[:, j]) for j in range(y.shape[1])]
    pr_vals = [_auc_pr(truth[:, j].astype(float), p[:, j]) for j in range(y.shape[1])]
    roc_defined = [v for v in roc_vals if not math.isnan(v)]
    pr_defined = [v for v in pr_vals if not math.isnan(v)]

    return {
        "micro": {
            "f1": micro_f1,
            "precision": micro_p,
            "recall": micro_r,
            "auc_roc": _auc_roc(truth.reshape(-1).astype(float), p.reshape(-1)),
            "auc_pr": _auc_pr(truth.reshape(-1).astype(float), p.reshape(-1)),
        },
        "macro": {
            "f1": macro_f1,
            "precision": macro_p,
            "recall": macro_r,
            "auc_roc": float(np.mean(roc_defined)) if roc_defined else float("nan"),
            "auc_pr": float(np.mean(pr_defined)) if pr_defined else float("nan"),
        },
    }
