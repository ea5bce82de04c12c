"""Target-sequence construction for the generative head.

A document carries two priority-ordered code lists (diagnosis, procedure).
The generative head is trained on a single flattened sequence; three
arrangements are supported, and sequences are serialized as
semicolon-joined display codes.
"""

from __future__ import annotations

from enum import Enum
from typing import TYPE_CHECKING

from .codes import CodeKind, CodeVocabulary, IcdCode, parse_code, FormatError

if TYPE_CHECKING:
    from .corpus import CodedDocument


class OrderingStrategy(Enum):
    DIAG_THEN_PROC = "diag_then_proc"
    PROC_THEN_DIAG = "proc_then_diag"
    INTERLEAVED_BY_PRIORITY = "interleaved_by_priority"


DEFAULT_STRATEGY = OrderingStrategy.INTERLEAVED_BY_PRIORITY


def _interleave(first: list[IcdCode], second: list[IcdCode]) -> list[IcdCode]:
    out: list[IcdCode] = []
    for i in range(max(len(first), len(second))):
        if i < len(first):
            out.append(first[i])
        if i < len(second):
            out.append(second[i])
    return out


def build_target_sequence(doc: "CodedDocument", strategy: OrderingStrategy) -> list[IcdCode]:
    """Flatten a document's two ordered code lists into one target sequence.

    Interleaving alternates by per-kind positional rank starting with the
    top diagnosis code; whichever list is longer contributes its remainder
    in order.
    """
    diag = [code for code, _ in doc.diagnosis]
    proc = [code for code, _ in doc.procedure]
    if strategy is OrderingStrategy.DIAG_THEN_PROC:
        return diag + proc
    if strategy is OrderingStrategy.PROC_THEN_DIAG:
        return proc + diag
    return _interleave(diag, proc)


def serialize_sequence(codes: list[IcdCode]) -> str:
    """Join a code sequence into its on-disk text form."""
    return ";".join(code.display for code in codes)


def parse_sequence(text: str, vocab: CodeVocabulary) -> tuple[list[IcdCode], list[str]]:
    """Split generated text on ';' and resolve each item against the vocabulary.

    Items that parse under either grammar and exist in the vocabulary are
    accepted (diagnosis tried first); everything else lands in ``rejected``.
    Duplicates are kept here; deduplication happens downstream in ranking.
    """
    accepted: list[IcdCode] = []
    rejected: list[str] = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        code = None
        for kind in (CodeKind.DIAGNOSIS, CodeKind.PROCEDURE):
            try:
                candidate = parse_code(item, kind)
            except FormatError:
                continue
            if candidate in vocab:
                code = candidate
                break
        if code is None:
            rejected.append(item)
        else:
            accepted.append(code)
    return accepted, rejected
