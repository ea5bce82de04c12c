"""Document model, JSONL ingestion, de-identification, tokenization, and
a deterministic synthetic-corpus generator.

The corpus format is one JSON object per line:

    {"id": "...", "text": "...",
     "diagnosis": [["4019", 1], ["25000", 2]],
     "procedure": [["0042", 1]]}

Code lists are ordered by their expert-assigned sequence numbers; within a
kind the sequence numbers must be strictly increasing and the codes unique.
"""

from __future__ import annotations

import json
import re
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codes import CodeKind, IcdCode, parse_code


class SchemaError(ValueError):
    """A document record is missing a field or violates the file schema."""


class OrderError(ValueError):
    """Sequence numbers within one kind are not strictly increasing."""


class DuplicateCodeError(ValueError):
    """The same code appears twice within one kind of one document."""


class ConfigError(ValueError):
    """Synthetic-generator configuration is inconsistent."""


# ---------------------------------------------------------------------------
# Document model


@dataclass
class CodedDocument:
    id: str
    text: str
    diagnosis: list[tuple[IcdCode, int]]
    procedure: list[tuple[IcdCode, int]]
    tokens: list[int] | None = None

    def __post_init__(self) -> None:
        _check_code_list(self.id, self.diagnosis)
        _check_code_list(self.id, self.procedure)

    def codes_of_kind(self, kind: CodeKind) -> list[IcdCode]:
        pairs = self.diagnosis if kind is CodeKind.DIAGNOSIS else self.procedure
        return [code for code, _ in pairs]

    def all_codes(self) -> list[IcdCode]:
        return [c for c, _ in self.diagnosis] + [c for c, _ in self.procedure]


def _check_code_list(doc_id: str, pairs: Sequence[tuple[IcdCode, int]]) -> None:
    prev = 0
    seen: set[IcdCode] = set()
    for code, seq in pairs:
        if seq <= prev:
            raise OrderError(f"document {doc_id}: seq_num {seq} after {prev} is not increasing")
        prev = seq
        if code in seen:
            raise DuplicateCodeError(f"document {doc_id}: duplicate code {code.display}")
        seen.add(code)


@dataclass
class CorpusSplits:
    train: list[CodedDocument]
    validation: list[CodedDocument]
    test: list[CodedDocument]

    def __post_init__(self) -> None:
        counts: dict[str, int] = {}
        for doc in self.train + self.validation + self.test:
            counts[doc.id] = counts.get(doc.id, 0) + 1
        dupes = sorted(i for i, n in counts.items() if n > 1)
        if dupes:
            raise SchemaError(f"document ids appear in more than one split: {dupes[:5]}")

    def all_documents(self) -> list[CodedDocument]:
        return self.train + self.validation + self.test


# ---------------------------------------------------------------------------
# De-identification surrogate replacement

_SURROGATE_RE = re.compile(r"\[\*\*(.*?)\*\*\]", re.DOTALL)

# Classification rules for surrogate contents, applied in order; the first
# matching pattern wins, anything unmatched becomes [UNK].
DEFAULT_TAG_RULES: list[tuple[str, str]] = [
    (r"\d{2,4}-\d{1,2}-\d{1,2}", "[DAY]"),
    (r"(?i)hospital|location|ward|clinic|university|state|country|address", "[LOC]"),
    (r"(?i)name|doctor|\b(?:dr|mr|mrs|ms)\b\.?", "[NAME]"),
    (r"^\s*\d+\s*$", "[ID]"),
]


def load_tag_rules(path: str | Path) -> list[tuple[str, str]]:
    """Read a rule table: a JSON list of [pattern, tag] pairs."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    rules = []
    for entry in raw:
        if not (isinstance(entry, list) and len(entry) == 2):
            raise SchemaError(f"tag rule entries must be [pattern, tag] pairs, got {entry!r}")
        rules.append((str(entry[0]), str(entry[1])))
    return rules


def classify_surrogate(content: str, rules: Sequence[tuple[str, str]] | None = None) -> str:
    for pattern, tag in rules if rules is not None else DEFAULT_TAG_RULES:
        if re.search(pattern, content):
            return tag
    return "[UNK]"


def replace_deid_surrogates(text: str, rules: Sequence[tuple[str, str]] | None = None) -> str:
    """Replace every ``[** ... **]`` span with a single entity tag.

    Text outside surrogates is untouched; unterminated opening brackets are
    left verbatim.  Applying the replacement twice equals applying it once.
    """
    return _SURROGATE_RE.sub(lambda m: classify_surrogate(m.group(1), rules), text)


# ---------------------------------------------------------------------------
# Tokenization

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
EOS_TOKEN = "[EOS]"
ENTITY_TAGS = ("[DAY]", "[LOC]", "[NAME]", "[ID]")
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, EOS_TOKEN) + ENTITY_TAGS

_TOKEN_RE = re.compile(r"\[(?:DAY|LOC|NAME|ID|UNK)\]|[A-Za-z0-9]+")


def _split_words(text: str) -> list[str]:
    """Lowercased word split; reserved entity tags stay atomic."""
    out = []
    for tok in _TOKEN_RE.findall(text):
        out.append(tok if tok.startswith("[") else tok.lower())
    return out


@dataclass
class TokenVocabulary:
    token_to_id: dict[str, int]
    tokens: list[str] = field(init=False)

    def __post_init__(self) -> None:
        self.tokens = [""] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.tokens[i] = tok

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS_TOKEN]

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def to_json(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "TokenVocabulary":
        return cls({tok: i for i, tok in enumerate(tokens)})

    @classmethod
    def build(cls, texts: Iterable[str]) -> "TokenVocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(_split_words(text))
        ordered = list(RESERVED_TOKENS) + sorted(seen - set(RESERVED_TOKENS))
        return cls({tok: i for i, tok in enumerate(ordered)})


def tokenize(text: str, vocab: TokenVocabulary) -> list[int]:
    """Map text to token ids; unknown words become [UNK]."""
    return [vocab.id_of(tok) for tok in _split_words(text)]


def prepare_text(text: str, rules: Sequence[tuple[str, str]] | None = None) -> str:
    """Model-facing text normalization: surrogate spans become entity tags."""
    return replace_deid_surrogates(text, rules)


def pad_or_truncate(tokens: Sequence[int], target_len: int, pad_id: int = 0) -> tuple[list[int], list[int]]:
    """Fix a token sequence to exactly ``target_len`` items.

    Returns (ids, mask) where the mask marks positions holding input tokens.
    """
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    kept = list(tokens[:target_len])
    mask = [1] * len(kept) + [0] * (target_len - len(kept))
    kept.extend([pad_id] * (target_len - len(kept)))
    return kept, mask


# ---------------------------------------------------------------------------
# JSONL ingestion

_SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}


def document_from_json(obj: dict) -> CodedDocument:
    for key in ("id", "text", "diagnosis", "procedure"):
        if key not in obj:
            raise SchemaError(f"document record missing field {key!r}")
    if not isinstance(obj["id"], str) or not isinstance(obj["text"], str):
        raise SchemaError(f"document {obj.get('id')!r}: id and text must be strings")

    def read_pairs(entries, kind: CodeKind) -> list[tuple[IcdCode, int]]:
        pairs = []
        for entry in entries:
            if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
                raise SchemaError(f"document {obj['id']}: code entries must be [code, seq_num] pairs")
            raw, seq = entry
            if not isinstance(seq, int) or seq < 1:
                raise SchemaError(f"document {obj['id']}: seq_num must be a positive integer, got {seq!r}")
            pairs.append((parse_code(str(raw), kind), seq))
        return pairs

    return CodedDocument(
        id=obj["id"],
        text=obj["text"],
        diagnosis=read_pairs(obj["diagnosis"], CodeKind.DIAGNOSIS),
        procedure=read_pairs(obj["procedure"], CodeKind.PROCEDURE),
    )


def document_to_json(doc: CodedDocument) -> dict:
    return {
        "id": doc.id,
        "text": doc.text,
        "diagnosis": [[code.canonical, seq] for code, seq in doc.diagnosis],
        "procedure": [[code.canonical, seq] for code, seq in doc.procedure],
    }


def load_split_jsonl(path: str | Path) -> list[CodedDocument]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            docs.append(document_from_json(obj))
    return docs


def load_corpus_jsonl(directory: str | Path) -> CorpusSplits:
    """Load train/validation/test JSONL files from a corpus directory."""
    directory = Path(directory)
    loaded = {}
    for split, fname in _SPLIT_FILES.items():
        path = directory / fname
        if not path.exists():
            raise SchemaError(f"corpus directory {directory} is missing {fname}")
        loaded[split] = load_split_jsonl(path)
    return CorpusSplits(**loaded)


def save_corpus_jsonl(splits: CorpusSplits, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, fname in _SPLIT_FILES.items():
        docs = getattr(splits, split)
        with open(directory / fname, "w", encoding="utf-8") as f:
            for doc in docs:
                f.write(json.dumps(document_to_json(doc), sort_keys=True) + "\n")


def corpus_statistics(docs: Sequence[CodedDocument]) -> dict:
    """Per-kind descriptive statistics of code counts per document."""
    stats = {}
    for kind in CodeKind:
        counts = [len(doc.codes_of_kind(kind)) for doc in docs]
        stats[kind.value] = {
            "minimum": min(counts),
            "maximum": max(counts),
            "mean": float(statistics.fmean(counts)),
            "stdev": float(statistics.pstdev(counts)),
            "median": float(statistics.median(counts)),
            "p85": float(np.percentile(counts, 85)),
            "p95": float(np.percentile(counts, 95)),
        }
    return stats


# ---------------------------------------------------------------------------
# Synthetic corpus generation
#
# Every code owns a small disjoint set of signature words.  A document's text
# is a schedule of signature mentions: the first round names each of the
# document's codes once in priority order (so first-mention position tracks
# priority), and later rounds repeat the higher-priority codes (so mention
# count tracks priority too, when mention_step > 0).  Filler words are
# sprinkled between mentions.  Gold order is therefore recoverable from the
# text alone by counting signatures and breaking ties on first position.

_FILLER_WORDS = (
    "patient", "history", "admitted", "course", "stable", "noted", "exam",
    "continued", "plan", "followup", "daily", "review", "status", "normal",
    "chronic", "acute", "without", "with", "denies", "reports", "started",
    "discharge", "home", "service", "tolerated", "improved", "unchanged",
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_diagnosis_codes: int = 60
    n_procedure_codes: int = 40
    n_train: int = 1000
    n_validation: int = 100
    n_test: int = 100
    diagnosis_mean: float = 11.0
    diagnosis_max: int = 39
    procedure_mean: float = 4.0
    procedure_max: int = 40
    signature_tokens_per_code: int = 2
    mentions_base: int = 6
    mention_step: int = 1
    max_filler_run: int = 2

    def validate(self) -> None:
        if min(self.n_train, self.n_validation, self.n_test) <= 0:
            raise ConfigError("every split must contain at least one document")
        if not (0 < self.n_diagnosis_codes <= 899):
            raise ConfigError("n_diagnosis_codes must be in 1..899")
        if not (0 < self.n_procedure_codes <= 89):
            raise ConfigError("n_procedure_codes must be in 1..89")
        if self.diagnosis_mean < 1 or self.procedure_mean < 0:
            raise ConfigError("code-count means out of range")
        if self.diagnosis_max < 1 or self.procedure_max < 0:
            raise ConfigError("code-count maxima out of range")
        if self.signature_tokens_per_code < 1:
            raise ConfigError("signature_tokens_per_code must be >= 1")
        if self.mentions_base < 1 or self.mention_step < 0:
            raise ConfigError("mention schedule out of range")


def synthetic_code_tables(cfg: SyntheticConfig) -> tuple[list[IcdCode], list[IcdCode]]:
    diag = [parse_code(f"{100 + i:03d}{i % 10}", CodeKind.DIAGNOSIS) for i in range(cfg.n_diagnosis_codes)]
    proc = [parse_code(f"{10 + i:02d}{i % 10}", CodeKind.PROCEDURE) for i in range(cfg.n_procedure_codes)]
    return diag, proc


def signature_tokens(code: IcdCode, per_code: int) -> list[str]:
    prefix = "d" if code.kind is CodeKind.DIAGNOSIS else "p"
    return [f"sig{prefix}{code.canonical.lower()}{chr(ord('a') + j)}" for j in range(per_code)]


def _draw_count(rng: np.random.Generator, mean: float, lo: int, hi: int) -> int:
    lam = max(mean - lo, 0.0)
    return int(min(hi, lo + rng.poisson(lam)))


def _mention_count(rank: int, cfg: SyntheticConfig) -> int:
    return max(1, cfg.mentions_base - cfg.mention_step * rank)


def _make_document(
    doc_id: str,
    rng: np.random.Generator,
    cfg: SyntheticConfig,
    diag_codes: list[IcdCode],
    proc_codes: list[IcdCode],
) -> CodedDocument:
    n_d = _draw_count(rng, cfg.diagnosis_mean, 1, min(cfg.diagnosis_max, len(diag_codes)))
    n_p = _draw_count(rng, cfg.procedure_mean, 0, min(cfg.procedure_max, len(proc_codes)))
    diag = [diag_codes[i] for i in rng.choice(len(diag_codes), size=n_d, replace=False)]
    proc = [proc_codes[i] for i in rng.choice(len(proc_codes), size=n_p, replace=False)]

    # Global priority order interleaves the kinds, diagnosis first.
    ranked: list[IcdCode] = []
    for i in range(max(n_d, n_p)):
        if i < n_d:
            ranked.append(diag[i])
        if i < n_p:
            ranked.append(proc[i])

    words: list[str] = []
    rounds = max((_mention_count(r, cfg) for r in range(len(ranked))), default=0)
    for rnd in range(rounds):
        for rank, code in enumerate(ranked):
            if _mention_count(rank, cfg) <= rnd:
                continue
            for _ in range(int(rng.integers(0, cfg.max_filler_run + 1))):
                words.append(_FILLER_WORDS[int(rng.integers(0, len(_FILLER_WORDS)))])
            sigs = signature_tokens(code, cfg.signature_tokens_per_code)
            words.append(sigs[rnd % len(sigs)])

    return CodedDocument(
        id=doc_id,
        text=" ".join(words),
        diagnosis=[(code, i + 1) for i, code in enumerate(diag)],
        procedure=[(code, i + 1) for i, code in enumerate(proc)],
    )


def recover_priority_order(doc: CodedDocument, cfg: SyntheticConfig, codes: Sequence[IcdCode]) -> list[IcdCode]:
    """Brute-force decode of a synthetic document's gold order from its text.

    Counts each code's signature tokens and ranks by (count desc, first
    occurrence asc).  Used as the learning-sanity oracle in tests.
    """
    words = doc.text.split()
    found = []
    for code in codes:
        sigs = set(signature_tokens(code, cfg.signature_tokens_per_code))
        positions = [i for i, w in enumerate(words) if w in sigs]
        if positions:
            found.append((-len(positions), positions[0], code))
    found.sort(key=lambda t: (t[0], t[1]))
    return [code for _, _, code in found]


def stratified_split(
    docs: Sequence[CodedDocument], n_train: int, n_validation: int, n_test: int
) -> CorpusSplits:
    """Greedy label-set stratification.

    Documents are assigned rarest-label-first to the split with the largest
    remaining per-label demand, subject to split capacity.  Deterministic in
    the input order.
    """
    if len(docs) != n_train + n_validation + n_test:
        raise ConfigError("split sizes must sum to the number of documents")
    label_total: dict[IcdCode, int] = {}
    for doc in docs:
        for code in doc.all_codes():
            label_total[code] = label_total.get(code, 0) + 1

    sizes = {"train": n_train, "validation": n_validation, "test": n_test}
    total = len(docs)
    desired = {
        s: {lab: cnt * sizes[s] / total for lab, cnt in label_total.items()} for s in sizes
    }
    current: dict[str, dict[IcdCode, int]] = {s: {} for s in sizes}
    assigned: dict[str, list[CodedDocument]] = {s: [] for s in sizes}

    def rarity(doc: CodedDocument) -> tuple[int, str]:
        labels = doc.all_codes()
        return (min((label_total[c] for c in labels), default=0), doc.id)

    for doc in sorted(docs, key=rarity):
        best_split, best_score = None, None
        for s in sizes:
            if len(assigned[s]) >= sizes[s]:
                continue
            score = sum(
                desired[s][c] - current[s].get(c, 0) for c in doc.all_codes()
            )
            capacity = sizes[s] - len(assigned[s])
            key = (score, capacity, s)
            if best_score is None or key > best_score:
                best_score, best_split = key, s
        assert best_split is not None
        assigned[best_split].append(doc)
        for c in doc.all_codes():
            current[best_split][c] = current[best_split].get(c, 0) + 1

    for s in assigned:
        assigned[s].sort(key=lambda d: d.id)
    return CorpusSplits(train=assigned["train"], validation=assigned["validation"], test=assigned["test"])


def generate_synthetic_corpus(cfg: SyntheticConfig, seed: int) -> CorpusSplits:
    """Deterministically generate a stratified synthetic corpus."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    diag_codes, proc_codes = synthetic_code_tables(cfg)
    total = cfg.n_train + cfg.n_validation + cfg.n_test
    docs = [
        _make_document(f"d{i:06d}", rng, cfg, diag_codes, proc_codes) for i in range(total)
    ]
    return stratified_split(docs, cfg.n_train, cfg.n_validation, cfg.n_test)
