"""Losses and the two-phase training procedure.

Phase 1 trains everything jointly: focal loss on the classifier head plus
a weighted generative cross-entropy (L = L_c + alpha * L_g).  Phase 2
freezes the encoder and decoder and continues the classifier head alone
under Dice loss at a lower learning rate.  Both phases keep the checkpoint
with the best validation micro-F1 of the classifier head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adafactor, Adam, Tape, Tensor
from .codes import CodeVocabulary
from .corpus import (
    CodedDocument,
    ConfigError,
    TokenVocabulary,
    pad_or_truncate,
    prepare_text,
    tokenize,
)
from .model import LtrIcdModel
from .ordering import OrderingStrategy, build_target_sequence


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class LengthError(ValueError):
    """A target sequence exceeds the decoder's maximum output length."""


@dataclass
class TrainConfig:
    alpha: float = 0.02
    gamma: float = 2.0
    lr_phase1: float = 0.001
    lr_phase2: float = 0.0001
    batch_size: int = 6
    epochs_phase1: int = 20
    epochs_phase2: int = 20
    seed: int = 0
    dice_epsilon: float = 1e-9
    threshold: float = 0.5
    optimizer: str = "adam"
    ordering: OrderingStrategy = OrderingStrategy.INTERLEAVED_BY_PRIORITY

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 < self.threshold < 1):
            raise ConfigError("threshold must lie in (0, 1)")
        if self.optimizer not in ("adam", "adafactor"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Losses

_CLAMP = 1e-12


def focal_loss(probs: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """Mean over labels (and batch) of -(1 - p_t)^gamma * log(p_t).

    ``p_t`` is the predicted probability of the true outcome per label;
    gamma = 0 reduces to binary cross-entropy.
    """
    y = np.asarray(targets, dtype=np.float64)
    p = ad.clip(probs, _CLAMP, 1.0 - _CLAMP)
    p_t = ad.add(ad.mul(p, y), ad.mul(ad.sub(1.0, p), 1.0 - y))
    losses = ad.mul(ad.pow_scalar(ad.sub(1.0, p_t), gamma), ad.mul(ad.log(p_t), -1.0))
    return ad.mean_(ad.reshape(losses, (losses.size,)))


def generative_nll(
    logprobs: Tensor,
    targets: np.ndarray,
    mask: np.ndarray,
    max_output_len: int | None = None,
) -> Tensor:
    """Mean negative log-probability of gold tokens over unmasked positions."""
    t = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    if t.ndim == 1:
        t, m = t[None, :], m[None, :]
    if max_output_len is not None and t.shape[1] > max_output_len:
        raise LengthError(f"target length {t.shape[1]} exceeds max_output_len {max_output_len}")
    vocab = logprobs.shape[-1]
    onehot = np.zeros(t.shape + (vocab,), dtype=np.float64)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    picked = ad.sum_(ad.mul(logprobs, onehot), axis=-1)
    total = ad.sum_(ad.mul(picked, m))
    denom = float(m.sum())
    if denom == 0:
        raise LengthError("no unmasked target positions")
    return ad.mul(total, -1.0 / denom)


def combined_loss(l_c: Tensor, l_g: Tensor, alpha: float) -> Tensor:
    return ad.add(l_c, ad.mul(l_g, alpha))


def dice_loss(l_b1: Tensor, l_b2: Tensor, targets: np.ndarray, epsilon: float = 1e-9) -> Tensor:
    """Dice overlap loss on the two attention blocks' sigmoid outputs.

    Per example: 1 - (2 * sum_i y_i (s1_i + s2_i) + eps) /
    (sum_i (y_i + s1_i + s2_i) + eps), averaged over the batch.
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    s1, s2 = ad.sigmoid(l_b1), ad.sigmoid(l_b2)
    if s1.shape != s2.shape:
        raise ad.ShapeError(f"dice_loss: {s1.shape} vs {s2.shape}")
    both = ad.add(s1, s2)
    num = ad.add(ad.mul(ad.sum_(ad.mul(both, y), axis=-1), 2.0), epsilon)
    den = ad.add(ad.sum_(ad.add(both, y), axis=-1), epsilon)
    per_example = ad.sub(1.0, ad.div(num, den))
    if per_example.ndim == 0:
        return per_example
    return ad.mean_(per_example)


# ---------------------------------------------------------------------------
# Batching

_PAD_TARGET = 0  # masked anyway


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, N) int64
    labels: np.ndarray  # (B, L) float64 multi-hot
    dec_inputs: np.ndarray  # (B, T) int64
    dec_targets: np.ndarray  # (B, T) int64
    dec_mask: np.ndarray  # (B, T) float64


@dataclass
class EncodedDocument:
    doc_id: str
    token_ids: np.ndarray
    labels: np.ndarray
    target_ids: list[int]  # code label ids + EOS


def encode_documents(
    docs: Sequence[CodedDocument],
    token_vocab: TokenVocabulary,
    code_vocab: CodeVocabulary,
    model: LtrIcdModel,
    strategy: OrderingStrategy,
) -> list[EncodedDocument]:
    n = model.encoder_cfg.max_input_len
    out = []
    for doc in docs:
        ids, _ = pad_or_truncate(
            tokenize(prepare_text(doc.text), token_vocab), n, token_vocab.pad_id
        )
        labels = np.zeros(len(code_vocab), dtype=np.float64)
        for code in doc.all_codes():
            labels[code_vocab.id_of(code)] = 1.0
        target = [code_vocab.id_of(c) for c in build_target_sequence(doc, strategy)]
        target.append(model.eos_id)
        if len(target) > model.decoder_cfg.max_output_len:
            raise LengthError(
                f"document {doc.id}: target length {len(target)} exceeds "
                f"max_output_len {model.decoder_cfg.max_output_len}"
            )
        out.append(EncodedDocument(doc.id, np.asarray(ids, dtype=np.int64), labels, target))
    return out


def make_batch(encoded: Sequence[EncodedDocument], bos_id: int) -> Batch:
    b = len(encoded)
    t = max(len(e.target_ids) for e in encoded)
    token_ids = np.stack([e.token_ids for e in encoded])
    labels = np.stack([e.labels for e in encoded])
    dec_inputs = np.full((b, t), _PAD_TARGET, dtype=np.int64)
    dec_targets = np.full((b, t), _PAD_TARGET, dtype=np.int64)
    dec_mask = np.zeros((b, t), dtype=np.float64)
    for i, e in enumerate(encoded):
        seq = e.target_ids
        dec_inputs[i, 0] = bos_id
        dec_inputs[i, 1 : len(seq)] = seq[:-1]
        dec_targets[i, : len(seq)] = seq
        dec_mask[i, : len(seq)] = 1.0
    return Batch(token_ids, labels, dec_inputs, dec_targets, dec_mask)


def _batches(encoded: list[EncodedDocument], batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(encoded))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        yield [encoded[i] for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Validation metric (classifier head, fixed threshold)


def classifier_micro_f1(
    model: LtrIcdModel,
    encoded: Sequence[EncodedDocument],
    threshold: float,
    batch_size: int = 32,
) -> float:
    tp = fp = fn = 0
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start : start + batch_size]
        probs = model.classify(np.stack([e.token_ids for e in chunk]))
        pred = probs >= threshold
        gold = np.stack([e.labels for e in chunk]) > 0.5
        tp += int(np.sum(pred & gold))
        fp += int(np.sum(pred & ~gold))
        fn += int(np.sum(~pred & gold))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    best_val_f1: float
    phase: str
    epoch: int
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {f"param.{n}": a for n, a in self.params.items()}
        arrays.update({f"opt.{n}": a for n, a in self.optimizer_state.items()})
        meta = dict(self.meta)
        meta.update({"best_val_f1": self.best_val_f1, "phase": self.phase, "epoch": self.epoch})
        ad.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = ad.load_arrays(path)
        params = {n[len("param.") :]: a for n, a in arrays.items() if n.startswith("param.")}
        opt = {n[len("opt.") :]: a for n, a in arrays.items() if n.startswith("opt.")}
        return cls(
            params=params,
            optimizer_state=opt,
            best_val_f1=float(meta.pop("best_val_f1")),
            phase=str(meta.pop("phase")),
            epoch=int(meta.pop("epoch")),
            meta=meta,
        )


def params_digest(params: dict[str, np.ndarray], prefixes: tuple[str, ...] = ("",)) -> str:
    """SHA-256 over the selected parameters' bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        if not name.startswith(prefixes):
            continue
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class EpochLog:
    phase: str
    epoch: int
    train_loss: float
    train_classifier_loss: float
    train_generative_loss: float
    train_micro_f1: float
    val_micro_f1: float

    def to_json_rows(self) -> list[dict]:
        """One JSON-lines row per split: loss terms live on the train row."""
        return [
            {
                "phase": self.phase,
                "epoch": self.epoch,
                "split": "train",
                "loss": self.train_loss,
                "classifier_loss": self.train_classifier_loss,
                "generative_loss": self.train_generative_loss,
                "micro_f1": self.train_micro_f1,
            },
            {
                "phase": self.phase,
                "epoch": self.epoch,
                "split": "validation",
                "micro_f1": self.val_micro_f1,
            },
        ]


def _make_optimizer(cfg: TrainConfig, params: dict[str, Tensor], lr: float):
    return Adam(params, lr=lr) if cfg.optimizer == "adam" else Adafactor(params, lr=lr)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value})")


def train_phase1(
    model: LtrIcdModel,
    train_docs: Sequence[CodedDocument],
    val_docs: Sequence[CodedDocument],
    token_vocab: TokenVocabulary,
    code_vocab: CodeVocabulary,
    cfg: TrainConfig,
    log_sink: Callable[[EpochLog], None] | None = None,
) -> Checkpoint:
    """Joint training on focal + alpha * generative loss; best-val selection."""
    train_enc = encode_documents(train_docs, token_vocab, code_vocab, model, cfg.ordering)
    val_enc = encode_documents(val_docs, token_vocab, code_vocab, model, cfg.ordering)
    opt = _make_optimizer(cfg, model.params, cfg.lr_phase1)
    rng = np.random.default_rng([cfg.seed, 1])

    best_f1 = classifier_micro_f1(model, val_enc, cfg.threshold)
    best = Checkpoint(model.export_values(), opt.state_arrays(), best_f1, "phase1", 0)

    for epoch in range(1, cfg.epochs_phase1 + 1):
        totals = np.zeros(3)
        n_batches = 0
        for group in _batches(train_enc, cfg.batch_size, rng):
            batch = make_batch(group, model.bos_id)
            with Tape() as tape:
                h = model.encode(batch.token_ids)
                l1, l2 = model.classifier_logits(h)
                probs = ad.sigmoid(ad.add(l1, l2))
                l_c = focal_loss(probs, batch.labels, cfg.gamma)
                logprobs = model.decoder_logprobs(h, batch.dec_inputs)
                l_g = generative_nll(
                    logprobs, batch.dec_targets, batch.dec_mask, model.decoder_cfg.max_output_len
                )
                loss = combined_loss(l_c, l_g, cfg.alpha)
                _check_finite(loss.item(), "phase-1 loss")
                tape.backward(loss)
            opt.step(zero_grad=True)
            totals += (loss.item(), l_c.item(), l_g.item())
            n_batches += 1
        train_f1 = classifier_micro_f1(model, train_enc, cfg.threshold)
        val_f1 = classifier_micro_f1(model, val_enc, cfg.threshold)
        if log_sink is not None:
            log_sink(
                EpochLog(
                    "phase1", epoch, *(totals / max(n_batches, 1)).tolist(), train_f1, val_f1
                )
            )
        if val_f1 > best.best_val_f1:
            best = Checkpoint(model.export_values(), opt.state_arrays(), val_f1, "phase1", epoch)
    return best


def train_phase2(
    checkpoint: Checkpoint,
    model: LtrIcdModel,
    train_docs: Sequence[CodedDocument],
    val_docs: Sequence[CodedDocument],
    token_vocab: TokenVocabulary,
    code_vocab: CodeVocabulary,
    cfg: TrainConfig,
    log_sink: Callable[[EpochLog], None] | None = None,
) -> Checkpoint:
    """Dice-loss fine-tuning of the classifier head with frozen encoder/decoder.

    The encoder runs outside the tape, so only head parameters can receive
    gradients; encoder and decoder values are bit-identical afterwards.
    """
    model.load_values(checkpoint.params)
    train_enc = encode_documents(train_docs, token_vocab, code_vocab, model, cfg.ordering)
    val_enc = encode_documents(val_docs, token_vocab, code_vocab, model, cfg.ordering)
    head_params = model.param_group("head")
    opt = _make_optimizer(cfg, head_params, cfg.lr_phase2)
    rng = np.random.default_rng([cfg.seed, 2])

    best_f1 = classifier_micro_f1(model, val_enc, cfg.threshold)
    best = Checkpoint(model.export_values(), opt.state_arrays(), best_f1, "phase2", 0)

    for epoch in range(1, cfg.epochs_phase2 + 1):
        total = 0.0
        n_batches = 0
        for group in _batches(train_enc, cfg.batch_size, rng):
            batch = make_batch(group, model.bos_id)
            h_frozen = Tensor(model.encode(batch.token_ids).values)
            with Tape() as tape:
                l1, l2 = model.classifier_logits(h_frozen)
                loss = dice_loss(l1, l2, batch.labels, cfg.dice_epsilon)
                _check_finite(loss.item(), "phase-2 loss")
                tape.backward(loss)
            opt.step(zero_grad=True)
            total += loss.item()
            n_batches += 1
        train_f1 = classifier_micro_f1(model, train_enc, cfg.threshold)
        val_f1 = classifier_micro_f1(model, val_enc, cfg.threshold)
        if log_sink is not None:
            avg = total / max(n_batches, 1)
            log_sink(EpochLog("phase2", epoch, avg, avg, 0.0, train_f1, val_f1))
        if val_f1 > best.best_val_f1:
            best = Checkpoint(model.export_values(), opt.state_arrays(), val_f1, "phase2", epoch)
    return best


def write_training_log(path, rows: Sequence[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            for record in row.to_json_rows():
                f.write(json.dumps(record, sort_keys=True) + "\n")
