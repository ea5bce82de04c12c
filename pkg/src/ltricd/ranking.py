"""Post-processing and fusion of the two heads' predictions.

The merge walks the generative list first, keeping codes the classifier
also predicted, then appends remaining classifier codes in classifier
order.  Its output set therefore always equals the classifier set:
generated codes the classifier rejects are dropped, and the generative
head only contributes ordering.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codes import CodeKind, CodeVocabulary, IcdCode, try_parse_any_kind
from .corpus import SchemaError

logger = logging.getLogger(__name__)


class JoinError(ValueError):
    """Two prediction files do not cover the same document ids."""


@dataclass
class RankedPrediction:
    doc_id: str
    codes: list[IcdCode]
    scores: list[float] | None = None

    def __post_init__(self) -> None:
        if len(set(self.codes)) != len(self.codes):
            raise ValueError(f"prediction for {self.doc_id} contains duplicate codes")
        if self.scores is not None and len(self.scores) != len(self.codes):
            raise ValueError(f"prediction for {self.doc_id}: scores do not parallel codes")


def postprocess_generated(
    decoded: Sequence[IcdCode], rejected: Sequence[str] = ()
) -> list[IcdCode]:
    """Drop repeats, keeping each code's first occurrence.

    ``rejected`` carries the non-code strings the sequence parser filtered
    out; they are logged and never emitted.
    """
    if rejected:
        logger.debug("dropping %d non-code generations: %s", len(rejected), list(rejected))
    seen: set[IcdCode] = set()
    out = []
    for code in decoded:
        if code not in seen:
            seen.add(code)
            out.append(code)
    return out


def classifier_ranked(
    doc_id: str, probs: np.ndarray, vocab: CodeVocabulary, threshold: float
) -> RankedPrediction:
    """Codes with probability >= threshold, by descending probability.

    Ties break toward the lower vocabulary id.
    """
    if not (0 < threshold < 1):
        raise ValueError("threshold must lie in (0, 1)")
    p = np.asarray(probs, dtype=np.float64)
    picked = [(float(p[i]), i) for i in range(len(p)) if p[i] >= threshold]
    picked.sort(key=lambda t: (-t[0], t[1]))
    return RankedPrediction(
        doc_id=doc_id,
        codes=[vocab.code_of(i) for _, i in picked],
        scores=[s for s, _ in picked],
    )


def merge(generative: Sequence[IcdCode], classifier: Sequence[IcdCode]) -> list[IcdCode]:
    """Fuse the two ordered lists; the classifier decides membership."""
    classifier_set = set(classifier)
    out = [c for c in generative if c in classifier_set]
    emitted = set(out)
    out.extend(c for c in classifier if c not in emitted)
    return out


def split_by_kind(pred: RankedPrediction) -> tuple[RankedPrediction, RankedPrediction]:
    """Stable partition into (diagnosis, procedure) predictions."""
    parts: dict[CodeKind, tuple[list[IcdCode], list[float]]] = {
        CodeKind.DIAGNOSIS: ([], []),
        CodeKind.PROCEDURE: ([], []),
    }
    for i, code in enumerate(pred.codes):
        codes, scores = parts[code.kind]
        codes.append(code)
        if pred.scores is not None:
            scores.append(pred.scores[i])
    return tuple(
        RankedPrediction(
            doc_id=pred.doc_id,
            codes=parts[kind][0],
            scores=parts[kind][1] if pred.scores is not None else None,
        )
        for kind in (CodeKind.DIAGNOSIS, CodeKind.PROCEDURE)
    )


def merge_by_id(
    generative: Sequence[RankedPrediction], classifier: Sequence[RankedPrediction]
) -> list[RankedPrediction]:
    """Merge two prediction sets document by document.

    Raises JoinError when the id sets differ; output follows the classifier
    file's document order.
    """
    gen_by_id = {p.doc_id: p for p in generative}
    clf_by_id = {p.doc_id: p for p in classifier}
    missing = sorted(set(clf_by_id) ^ set(gen_by_id))
    if missing:
        raise JoinError(f"document ids not present in both prediction files: {missing[:10]}")
    return [
        RankedPrediction(doc_id=p.doc_id, codes=merge(gen_by_id[p.doc_id].codes, p.codes))
        for p in classifier
    ]


# ---------------------------------------------------------------------------
# Predictions JSONL: {"id": str, "codes": [display, ...], "scores": [float]?}
# The same schema carries generative, classifier, merged, and third-party
# baseline predictions.


def write_predictions_jsonl(path: str | Path, preds: Sequence[RankedPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pred in preds:
            obj: dict = {"id": pred.doc_id, "codes": [c.display for c in pred.codes]}
            if pred.scores is not None:
                obj["scores"] = pred.scores
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def read_predictions_jsonl(path: str | Path) -> list[RankedPrediction]:
    """Read predictions, parsing display codes and deduplicating in order.

    Undotted code strings that are valid under both grammars resolve to
    diagnosis; dotted display forms are unambiguous.
    """
    preds = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj or "codes" not in obj:
                raise SchemaError(f"{path}:{lineno}: prediction records need 'id' and 'codes'")
            codes = []
            for raw in obj["codes"]:
                code = try_parse_any_kind(str(raw))
                if code is None:
                    raise SchemaError(f"{path}:{lineno}: {raw!r} is not a valid ICD-9 code")
                codes.append(code)
            deduped = postprocess_generated(codes)
            scores = obj.get("scores")
            if scores is not None and len(deduped) == len(codes) and len(scores) == len(codes):
                scores = [float(s) for s in scores]
            else:
                scores = None
            preds.append(RankedPrediction(doc_id=str(obj["id"]), codes=deduped, scores=scores))
    return preds
