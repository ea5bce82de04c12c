"""The joint classify-and-generate network.

One shared encoder feeds two heads: a classifier head made of two
convolutional label-attention blocks (logits summed), and an autoregressive
decoder over a code-atomic output vocabulary that conditions on the encoder
states through cross-attention.

The encoder processes the input in fixed-length segments with shared
weights and no cross-segment attention; the per-segment outputs are
concatenated along the token axis.  A learnable per-position bias restores
global positional signal inside the label-attention blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_e: int = 64
    d_ff: int = 128
    segment_len: int = 512
    max_input_len: int = 5120

    def __post_init__(self) -> None:
        if self.max_input_len % self.segment_len != 0:
            raise ValueError(
                f"max_input_len {self.max_input_len} not divisible by segment_len {self.segment_len}"
            )


@dataclass(frozen=True)
class DecoderConfig:
    max_output_len: int = 256
    d_ff: int = 128
    d_attn: int | None = None  # cross-attention width; encoder width when unset


@dataclass(frozen=True)
class HeadConfig:
    d_c: int = 64
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.kernel_size % 2 != 1:
            raise ValueError("label-attention kernel size must be odd")


class LtrIcdModel:
    """Shared-encoder classifier + generator over a fixed label space.

    Decoder token ids: 0..L-1 are codes, L is end-of-sequence, L+1 is the
    begin-of-sequence input token (never predicted).
    """

    def __init__(
        self,
        token_vocab_size: int,
        n_labels: int,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        head: HeadConfig,
        seed: int = 0,
    ):
        self.token_vocab_size = token_vocab_size
        self.n_labels = n_labels
        self.encoder_cfg = encoder
        self.decoder_cfg = decoder
        self.head_cfg = head
        self.eos_id = n_labels
        self.bos_id = n_labels + 1
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        d_e, d_ff = self.encoder_cfg.d_e, self.encoder_cfg.d_ff
        d_c, k = self.head_cfg.d_c, self.head_cfg.kernel_size
        n, seg = self.encoder_cfg.max_input_len, self.encoder_cfg.segment_len
        L = self.n_labels

        def uniform(name: str, shape: tuple[int, ...], fan_in: int) -> None:
            a = fan_in**-0.5
            self.params[name] = Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, name=name)

        def zeros(name: str, shape: tuple[int, ...]) -> None:
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

        uniform("emb.token", (self.token_vocab_size, d_e), d_e)
        uniform("emb.pos", (seg, d_e), d_e)
        for w in ("wq", "wk", "wv", "wo"):
            uniform(f"enc.{w}", (d_e, d_e), d_e)
        uniform("enc.ff1", (d_e, d_ff), d_e)
        zeros("enc.ff1_b", (d_ff,))
        uniform("enc.ff2", (d_ff, d_e), d_ff)
        zeros("enc.ff2_b", (d_e,))

        for blk in ("b1", "b2"):
            uniform(f"head.{blk}.w1c", (k, d_e, d_c), k * d_e)
            uniform(f"head.{blk}.w2c", (k, d_c, L), k * d_c)
            zeros(f"head.{blk}.pos_bias", (n, 1))
            uniform(f"head.{blk}.v", (L, d_e), d_e)
            zeros(f"head.{blk}.bias", (L,))

        dec_ff = self.decoder_cfg.d_ff
        d_attn = self.decoder_cfg.d_attn or d_e
        uniform("dec.emb", (L + 2, d_e), d_e)
        uniform("dec.pos", (self.decoder_cfg.max_output_len, d_e), d_e)
        for w in ("wq", "wk", "wv"):
            uniform(f"dec.{w}", (d_e, d_attn), d_e)
        uniform("dec.wo", (d_attn, d_e), d_attn)
        uniform("dec.ff1", (d_e, dec_ff), d_e)
        zeros("dec.ff1_b", (dec_ff,))
        uniform("dec.ff2", (dec_ff, d_e), dec_ff)
        zeros("dec.ff2_b", (d_e,))
        uniform("dec.out_w", (d_e, L + 1), d_e)
        zeros("dec.out_b", (L + 1,))

    def param_group(self, group: str) -> dict[str, Tensor]:
        prefixes = {
            "encoder": ("emb.", "enc."),
            "decoder": ("dec.",),
            "head": ("head.",),
        }[group]
        return {n: p for n, p in self.params.items() if n.startswith(prefixes)}

    def export_values(self) -> dict[str, np.ndarray]:
        return {n: p.values.copy() for n, p in self.params.items()}

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.values = arrays[n].astype(np.float64).reshape(p.shape).copy()
            p.zero_grad()

    # -- encoder -----------------------------------------------------------

    def encode(self, token_ids: np.ndarray) -> Tensor:
        """Encode padded token ids (B, N) into hidden states (B, N, d_e).

        Segments are encoded independently with shared weights and their
        outputs concatenated back along the token axis.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, n = ids.shape
        cfg = self.encoder_cfg
        if n != cfg.max_input_len:
            raise ad.ShapeError(f"input length {n} != configured max_input_len {cfg.max_input_len}")
        seg = cfg.segment_len
        d = cfg.d_e
        p = self.params

        seg_ids = ids.reshape(b * (n // seg), seg)
        x = ad.embedding_lookup(p["emb.token"], seg_ids)
        x = ad.add(x, ad.embedding_lookup(p["emb.pos"], np.arange(seg)))

        q = ad.matmul(x, p["enc.wq"])
        key = ad.matmul(x, p["enc.wk"])
        val = ad.matmul(x, p["enc.wv"])
        scores = ad.mul(ad.matmul(q, ad.swapaxes(key, -1, -2)), 1.0 / math.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        x = ad.add(x, ad.matmul(ad.matmul(attn, val), p["enc.wo"]))

        h = ad.tanh(ad.add(ad.matmul(x, p["enc.ff1"]), p["enc.ff1_b"]))
        x = ad.add(x, ad.add(ad.matmul(h, p["enc.ff2"]), p["enc.ff2_b"]))

        return ad.reshape(x, (b, n, d))

    # -- classifier head ----------------------------------------------------

    def label_attention(self, h: Tensor, block: str) -> tuple[Tensor, Tensor]:
        """One label-attention block: (B, N, d_e) -> attention (B, N, L), logits (B, L).

        The attention matrix is normalized over the token axis, so each
        label column is a distribution over token positions.
        """
        p = self.params
        z = ad.tanh(ad.conv1d_same(p[f"head.{block}.w1c"], h))
        scores = ad.add(ad.conv1d_same(p[f"head.{block}.w2c"], z), p[f"head.{block}.pos_bias"])
        attn = ad.softmax(scores, axis=-2)
        r = ad.matmul(ad.swapaxes(attn, -1, -2), h)
        logits = ad.add(ad.sum_(ad.mul(r, p[f"head.{block}.v"]), axis=-1), p[f"head.{block}.bias"])
        return attn, logits

    def classifier_logits(self, h: Tensor) -> tuple[Tensor, Tensor]:
        _, l1 = self.label_attention(h, "b1")
        _, l2 = self.label_attention(h, "b2")
        return l1, l2

    def classify(self, token_ids: np.ndarray) -> np.ndarray:
        """Per-label sigmoid probabilities (B, L) for padded token ids."""
        h = self.encode(token_ids)
        l1, l2 = self.classifier_logits(h)
        return ad.sigmoid(ad.add(l1, l2)).values

    # -- decoder -------------------------------------------------------------

    def decoder_logprobs(self, h: Tensor, input_ids: np.ndarray) -> Tensor:
        """Teacher-forced next-token log-probabilities (B, T, L+1).

        Position t conditions on the input token at t (the previous output
        token, BOS at t=0) and on the encoder states through cross-attention;
        positions do not attend to each other.
        """
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        t = ids.shape[1]
        if t > self.decoder_cfg.max_output_len:
            raise ad.ShapeError(f"decoder input length {t} exceeds max_output_len")
        p = self.params
        d_attn = self.decoder_cfg.d_attn or self.encoder_cfg.d_e

        y = ad.add(ad.embedding_lookup(p["dec.emb"], ids), ad.embedding_lookup(p["dec.pos"], np.arange(t)))
        q = ad.matmul(y, p["dec.wq"])
        key = ad.matmul(h, p["dec.wk"])
        val = ad.matmul(h, p["dec.wv"])
        scores = ad.mul(ad.matmul(q, ad.swapaxes(key, -1, -2)), 1.0 / math.sqrt(d_attn))
        attn = ad.softmax(scores, axis=-1)
        y = ad.add(y, ad.matmul(ad.matmul(attn, val), p["dec.wo"]))

        g = ad.tanh(ad.add(ad.matmul(y, p["dec.ff1"]), p["dec.ff1_b"]))
        y = ad.add(y, ad.add(ad.matmul(g, p["dec.ff2"]), p["dec.ff2_b"]))

        logits = ad.add(ad.matmul(y, p["dec.out_w"]), p["dec.out_b"])
        return ad.log_softmax(logits, axis=-1)

    def decoder_step(self, prefix: Sequence[int], h: Tensor) -> np.ndarray:
        """Next-token log-probabilities (L+1,) after a generated prefix."""
        position = len(prefix)
        if position >= self.decoder_cfg.max_output_len:
            raise ad.ShapeError("prefix already at max_output_len")
        last = self.bos_id if position == 0 else int(prefix[-1])
        return self._step_distribution(h, last, position)

    def _step_distribution(self, h: Tensor, last_id: int, position: int) -> np.ndarray:
        p = self.params
        d_attn = self.decoder_cfg.d_attn or self.encoder_cfg.d_e
        y = p["dec.emb"].values[last_id] + p["dec.pos"].values[position]
        q = y @ p["dec.wq"].values
        key = h.values[0] @ p["dec.wk"].values
        val = h.values[0] @ p["dec.wv"].values
        scores = (key @ q) / math.sqrt(d_attn)
        scores -= scores.max()
        w = np.exp(scores)
        w /= w.sum()
        y = y + (w @ val) @ p["dec.wo"].values
        y = y + np.tanh(y @ p["dec.ff1"].values + p["dec.ff1_b"].values) @ p["dec.ff2"].values + p["dec.ff2_b"].values
        logits = y @ p["dec.out_w"].values + p["dec.out_b"].values
        logits -= logits.max()
        return logits - np.log(np.exp(logits).sum())

    def beam_search(self, h: Tensor, beam_width: int, max_len: int | None = None) -> list[tuple[tuple[int, ...], float]]:
        """Ranked (code-id sequence, total log-probability) hypotheses."""
        limit = self.decoder_cfg.max_output_len if max_len is None else min(max_len, self.decoder_cfg.max_output_len)
        cache: dict[tuple[int, int], np.ndarray] = {}

        def step(prefix: tuple[int, ...]) -> np.ndarray:
            key = (len(prefix), prefix[-1] if prefix else -1)
            if key not in cache:
                cache[key] = self.decoder_step(prefix, h)
            return cache[key]

        return beam_search(step, eos_id=self.eos_id, beam_width=beam_width, max_len=limit)


def beam_search(
    step_fn: Callable[[tuple[int, ...]], np.ndarray],
    eos_id: int,
    beam_width: int,
    max_len: int,
) -> list[tuple[tuple[int, ...], float]]:
    """Breadth-limited best-first decoding.

    ``step_fn`` maps a prefix to next-token log-probabilities (the entry at
    ``eos_id`` terminates a hypothesis).  Each step ranks every one-token
    extension of the active hypotheses and keeps the top ``beam_width``;
    extensions ending at EOS occupy their slot but retire from the beam, so
    a width of one reproduces greedy decoding exactly.  Hypotheses that
    survive to ``max_len`` count as finished.  Retired hypotheses are never
    discarded; actives that can no longer beat the best finished hypothesis
    are.  Ranking and all tie-breaking use descending log-probability, then
    shorter length, then lexicographic id order.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    def rank_key(item: tuple[tuple[int, ...], float]):
        seq, lp = item
        return (-lp, len(seq), seq)

    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        if not active:
            break
        candidates: list[tuple[tuple[int, ...], float, bool]] = []
        for seq, lp in active:
            logps = step_fn(seq)
            for tok, tok_lp in enumerate(logps):
                total = lp + float(tok_lp)
                if tok == eos_id:
                    candidates.append((seq, total, True))
                else:
                    candidates.append((seq + (tok,), total, False))
        candidates.sort(key=lambda c: rank_key((c[0], c[1])))
        active = []
        for seq, lp, done in candidates[:beam_width]:
            if done:
                finished.append((seq, lp))
            else:
                active.append((seq, lp))
        if finished and active:
            best_done = max(f[1] for f in finished)
            if all(lp < best_done for _, lp in active):
                active = []
    finished.extend(active)
    finished.sort(key=rank_key)
    return finished
