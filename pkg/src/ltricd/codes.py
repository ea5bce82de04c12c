"""ICD-9 diagnosis and procedure codes: parsing, validation, and indexing.

Codes are stored undotted internally (the convention of the source coding
tables) and rendered dotted for display.  Validation is structural only:
a string is accepted when it matches the ICD-9-CM shape for its kind, not
when it exists in the official registry.  Membership filtering is done
against a :class:`CodeVocabulary` built from the corpus at hand.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .corpus import CodedDocument


class CodeKind(Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"


class FormatError(ValueError):
    """Raw string does not match the ICD-9 grammar for the requested kind."""


# Undotted grammars.  Diagnosis: 3 digits plus up to 2 more, V + 2 digits
# plus up to 2 more, or E + 3 digits plus at most 1 more.  Procedure:
# 2 digits plus up to 2 more.
_DIAGNOSIS_RE = re.compile(r"^(?:[0-9]{3}[0-9]{0,2}|V[0-9]{2}[0-9]{0,2}|E[0-9]{3}[0-9]{0,1})$")
_PROCEDURE_RE = re.compile(r"^[0-9]{2}[0-9]{0,2}$")


@dataclass(frozen=True)
class IcdCode:
    """A normalized ICD-9 code.

    ``canonical`` is the undotted form used for identity and indexing;
    ``display`` is the dotted rendering (e.g. ``4019`` vs ``401.9``).
    """

    kind: CodeKind
    canonical: str
    display: str

    def sort_key(self) -> tuple[str, str]:
        return (self.kind.value, self.canonical)

    def __str__(self) -> str:
        return self.display


def _dot_position(kind: CodeKind, body: str) -> int:
    if kind is CodeKind.PROCEDURE:
        return 2
    return 4 if body.startswith("E") else 3


def _render_display(kind: CodeKind, canonical: str) -> str:
    pos = _dot_position(kind, canonical)
    if len(canonical) > pos:
        return canonical[:pos] + "." + canonical[pos:]
    return canonical


def parse_code(raw: str, kind: CodeKind) -> IcdCode:
    """Parse a dotted or undotted ICD-9 code of the given kind.

    Raises FormatError when the string does not match the kind's grammar,
    including dotted inputs whose dot sits at the wrong position.
    """
    text = raw.strip().upper()
    if not text:
        raise FormatError("empty code string")
    if "." in text:
        head, _, tail = text.partition(".")
        if not tail or "." in tail:
            raise FormatError(f"malformed code {raw!r}")
        if len(head) != _dot_position(kind, head):
            raise FormatError(f"dot position invalid for {kind.value} code {raw!r}")
        canonical = head + tail
    else:
        canonical = text
    grammar = _PROCEDURE_RE if kind is CodeKind.PROCEDURE else _DIAGNOSIS_RE
    if not grammar.match(canonical):
        raise FormatError(f"{raw!r} is not a valid {kind.value} code")
    return IcdCode(kind=kind, canonical=canonical, display=_render_display(kind, canonical))


def try_parse_any_kind(raw: str) -> IcdCode | None:
    """Parse against both grammars, preferring diagnosis on ambiguity.

    Dotted inputs are effectively unambiguous because the dot position
    differs between kinds; undotted 3-4 digit strings can match both and
    resolve to diagnosis.
    """
    for kind in (CodeKind.DIAGNOSIS, CodeKind.PROCEDURE):
        try:
            return parse_code(raw, kind)
        except FormatError:
            continue
    return None


@dataclass
class CodeVocabulary:
    """Dense, stable indexing of the distinct codes seen in a corpus."""

    codes: list[IcdCode]
    index: dict[tuple[CodeKind, str], int]

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: IcdCode) -> bool:
        return (code.kind, code.canonical) in self.index

    def id_of(self, code: IcdCode) -> int:
        return self.index[(code.kind, code.canonical)]

    def code_of(self, label_id: int) -> IcdCode:
        return self.codes[label_id]

    def to_json(self) -> list[list[str]]:
        return [[c.kind.value, c.canonical] for c in self.codes]

    @classmethod
    def from_json(cls, entries: Iterable[Iterable[str]]) -> "CodeVocabulary":
        codes = [parse_code(canonical, CodeKind(kind)) for kind, canonical in entries]
        return cls(codes=codes, index={(c.kind, c.canonical): i for i, c in enumerate(codes)})


def build_vocabulary(corpus: Iterable["CodedDocument"]) -> CodeVocabulary:
    """Collect every distinct code in the documents into a dense id space.

    Iteration order is deterministic: sorted by kind, then canonical form.
    """
    seen: set[IcdCode] = set()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        for code, _ in doc.diagnosis:
            seen.add(code)
        for code, _ in doc.procedure:
            seen.add(code)
    if n_docs == 0:
        raise ValueError("cannot build a code vocabulary from an empty corpus")
    codes = sorted(seen, key=IcdCode.sort_key)
    return CodeVocabulary(codes=codes, index={(c.kind, c.canonical): i for i, c in enumerate(codes)})
