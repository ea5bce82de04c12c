"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything is numpy under the hood; the tape records one node per
operation (inputs, output, and a vector-Jacobian rule) and backpropagation
walks the nodes in reverse recording order exactly once.  Operations run
fine with no active tape, which is the inference fast path.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested kernel."""


class GraphError(RuntimeError):
    """Backward was requested for a tensor the tape never produced."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records operations for one backward pass.

    Used as a context manager; any operation executed while the tape is
    active and involving a grad-requiring tensor gets recorded.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append(_Node(output, inputs, vjp))
        self._output_ids.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the path.

        Repeated calls without clearing gradients keep accumulating.
        """
        if loss.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._output_ids:
            raise GraphError("loss tensor was not produced on this tape")
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = flows.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in flows:
                    flows[key] = flows[key] + gi
                else:
                    flows[key] = gi
                    holders[key] = inp
        for key, g in flows.items():
            holders[key].accumulate_grad(g)


_TAPE_STACK: list[Tape] = []


def _maybe_record(output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
    if _TAPE_STACK and output.requires_grad:
        _TAPE_STACK[-1]._record(output, inputs, vjp)


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise kernels


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values + b.values, requires_grad=_needs(a, b))
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values - b.values, requires_grad=_needs(a, b))
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values * b.values, requires_grad=_needs(a, b))
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    _maybe_record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.values / b.values, requires_grad=_needs(a, b))
    except ValueError as exc:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from exc
    _maybe_record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        ),
    )
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.values), requires_grad=x.requires_grad)
    _maybe_record(out, (x,), lambda g: (g / x.values,))
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.values), requires_grad=x.requires_grad)
    y = out.values
    _maybe_record(out, (x,), lambda g: (g * y,))
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.tanh(x.values), requires_grad=x.requires_grad)
    y = out.values
    _maybe_record(out, (x,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out_vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(out_vals, requires_grad=x.requires_grad)
    y = out.values
    _maybe_record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def pow_scalar(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values**exponent, requires_grad=x.requires_grad)
    if exponent == 0.0:
        _maybe_record(out, (x,), lambda g: (np.zeros_like(x.values),))
    else:
        _maybe_record(out, (x,), lambda g: (g * exponent * x.values ** (exponent - 1.0),))
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through unclamped positions."""
    x = as_tensor(x)
    out = Tensor(np.clip(x.values, lo, hi), requires_grad=x.requires_grad)
    inside = (x.values >= lo) & (x.values <= hi)
    _maybe_record(out, (x,), lambda g: (g * inside,))
    return out


# ---------------------------------------------------------------------------
# Linear algebra and structural kernels


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.values, b.values), requires_grad=_needs(a, b))
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
        return ga, gb

    _maybe_record(out, (a, b), vjp)
    return out


def conv1d_same(w, x) -> Tensor:
    """Length-preserving 1-D convolution over the second-to-last axis.

    ``w`` has shape (k, c_in, c_out) and ``x`` (..., n, c_in); the input is
    zero padded with floor((k-1)/2) positions on the left and the rest on
    the right, so the output is (..., n, c_out).
    """
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 3:
        raise ShapeError(f"conv1d_same kernel must be (k, c_in, c_out), got {w.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d_same: input {x.shape} does not match kernel {w.shape}")
    k, c_in, c_out = w.shape
    n = x.shape[-2]
    left = (k - 1) // 2
    right = k - 1 - left
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.values, pad)
    y = np.zeros(x.shape[:-1] + (c_out,), dtype=np.float64)
    for j in range(k):
        y += np.matmul(xp[..., j : j + n, :], w.values[j])
    out = Tensor(y, requires_grad=_needs(w, x))

    def vjp(g):
        g2 = g.reshape(-1, n, c_out)
        xp2 = xp.reshape(-1, n + k - 1, c_in)
        gw = np.zeros_like(w.values)
        for j in range(k):
            gw[j] = np.einsum("bni,bno->io", xp2[:, j : j + n, :], g2)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j : j + n, :] += np.matmul(g, w.values[j].T)
        gx = gxp[..., left : left + n, :]
        return gw, gx

    _maybe_record(out, (w, x), vjp)
    return out


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, requires_grad=x.requires_grad)
    _maybe_record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))
    return out


def log_softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y, requires_grad=x.requires_grad)
    _maybe_record(out, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (vocab, width) table by an integer id array."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.values[idx], requires_grad=table.requires_grad)

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    _maybe_record(out, (table,), vjp)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        out = Tensor(np.concatenate([t.values for t in tensors], axis=axis), requires_grad=_needs(*tensors))
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    _maybe_record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = Tensor(x.values.reshape(shape), requires_grad=x.requires_grad)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.shape} -> {shape}") from exc
    _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.swapaxes(x.values, a, b), requires_grad=x.requires_grad)
    _maybe_record(out, (x,), lambda g: (np.swapaxes(g, a, b),))
    return out


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.values.sum(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    _maybe_record(out, (x,), vjp)
    return out


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Optimizers


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.values) for n, p in params.items()}

    def step(self, zero_grad: bool = False) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad_or_zeros()
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if zero_grad:
                p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a.copy() for n, a in self.m.items()}
        out.update({f"v.{n}": a.copy() for n, a in self.v.items()})
        out["t"] = np.asarray([float(self.t)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for n in self.m:
            self.m[n] = arrays[f"m.{n}"].copy()
            self.v[n] = arrays[f"v.{n}"].copy()


class Adafactor:
    """Factored-second-moment optimizer with RMS update clipping.

    Matrices keep per-row and per-column second-moment accumulators; vectors
    and scalars fall back to the full accumulator.  The step size is the
    given learning rate (no relative-step schedule).
    """

    _EPS1 = 1e-30
    _CLIP = 1.0

    def __init__(self, params: dict[str, Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.t = 0
        self.row: dict[str, np.ndarray] = {}
        self.col: dict[str, np.ndarray] = {}
        self.full: dict[str, np.ndarray] = {}
        for n, p in params.items():
            if p.ndim >= 2:
                rows = int(np.prod(p.shape[:-1]))
                self.row[n] = np.zeros(rows)
                self.col[n] = np.zeros(p.shape[-1])
            else:
                self.full[n] = np.zeros_like(p.values)

    def step(self, zero_grad: bool = False) -> None:
        self.t += 1
        beta = 1.0 - self.t**-0.8
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad_or_zeros()
            g2 = g * g + self._EPS1
            if name in self.row:
                g2m = g2.reshape(-1, p.shape[-1])
                self.row[name] = beta * self.row[name] + (1 - beta) * g2m.sum(axis=1)
                self.col[name] = beta * self.col[name] + (1 - beta) * g2m.sum(axis=0)
                denom = self.row[name].sum()
                v = np.outer(self.row[name], self.col[name]) / denom
                u = (g.reshape(-1, p.shape[-1]) / np.sqrt(v)).reshape(p.shape)
            else:
                self.full[name] = beta * self.full[name] + (1 - beta) * g2
                u = g / np.sqrt(self.full[name])
            rms = np.sqrt(np.mean(u * u)) if u.size else 0.0
            u = u / max(1.0, rms / self._CLIP)
            p.values -= self.lr * u
            if zero_grad:
                p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"row.{n}": a.copy() for n, a in self.row.items()}
        out.update({f"col.{n}": a.copy() for n, a in self.col.items()})
        out.update({f"full.{n}": a.copy() for n, a in self.full.items()})
        out["t"] = np.asarray([float(self.t)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for n in self.row:
            self.row[n] = arrays[f"row.{n}"].copy()
            self.col[n] = arrays[f"col.{n}"].copy()
        for n in self.full:
            self.full[n] = arrays[f"full.{n}"].copy()


# ---------------------------------------------------------------------------
# Array map serialization (checkpoint substrate)
#
# Layout: one JSON header line (version, entry names and shapes, metadata)
# followed by the raw little-endian float64 bytes of each entry in header
# order.  Writing the same arrays twice produces identical bytes.

FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(arrays)
    header = {
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]
