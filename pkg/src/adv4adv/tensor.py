"""Dense tensors with tape-based reverse-mode differentiation.

The engine records every primitive whose operands require gradients on the
active :class:`Tape`. :func:`backward` replays the tape in reverse recorded
order and accumulates gradients into leaf tensors; :func:`grad` does the same
but returns gradients for an explicit list of inputs and skips every branch
that cannot reach them (used by the attacks, which only need input gradients).

Only leading-dimension broadcasting is supported: for binary elementwise ops
one operand's shape must equal the other's trailing dims.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "zeros",
    "active_tape",
    "no_grad",
    "precision",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "relu",
    "max_pool2d",
    "reshape",
    "flatten",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sigmoid_bce",
    "clip",
    "sign",
    "tensor_sum",
    "take",
    "concat",
    "grl",
    "backward",
    "grad",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested on something the active tape cannot replay."""


_DTYPE = np.float32


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine dtype (float64 is meant for oracle tests)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    ``generation`` changes on every :meth:`clear`, which invalidates the
    ``tape_id`` handles held by tensors recorded before the clear.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.next_id = 0
        self.generation = 0
        self.enabled = True

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        out.tape_id = (self.generation, self.next_id)
        self.nodes.append(_Node(out, parents, backward_fn))
        self.next_id += 1

    def owns(self, t: "Tensor") -> bool:
        return t.tape_id is not None and t.tape_id[0] == self.generation

    def clear(self) -> None:
        self.nodes = []
        self.next_id = 0
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside produce constant tensors."""
    previous = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: tuple[int, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if data.dtype != _DTYPE:
        data = data.astype(_DTYPE)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in forward output")
    out = Tensor(data)
    if _TAPE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, parents, backward_fn)
    return out


def _check_leading_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("add", a, b)

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("subtract", a, b)

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            -_unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), back, "subtract")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast("multiply", a, b)
    ad, bd = a.data, b.data

    def back(g, needs):
        return (
            _unbroadcast(g * bd, a.shape) if needs[0] else None,
            _unbroadcast(g * ad, b.shape) if needs[1] else None,
        )

    return _make(ad * bd, (a, b), back, "multiply")


def scale(x: Tensor, c: float) -> Tensor:
    c = _DTYPE(c)
    return _make(x.data * c, (x,), lambda g, needs: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,), lambda g, needs: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g, needs: (g * s * (1 - s),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1 / (1 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1 + ez)
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g, needs: (g * inside,), "clip")


def sign(x: Tensor) -> Tensor:
    return _make(np.sign(x.data), (x,), lambda g, needs: (np.zeros_like(g),), "sign")


def grl(x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, ``-lam`` times the upstream gradient backward."""
    if lam < 0:
        raise ValueError(f"grl: lambda must be >= 0, got {lam}")
    neg = _DTYPE(-lam)
    return _make(x.data.copy(), (x,), lambda g, needs: (g * neg,), "grl")


# shape / indexing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g, needs: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, idx) -> Tensor:
    """Gather rows of ``x`` along axis 0."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take: index must be 1-D, got shape {idx.shape}")
    src = x.shape

    def back(g, needs):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no operands")
    rest = [t.shape[:axis] + t.shape[axis + 1:] for t in xs]
    if any(r != rest[0] for r in rest):
        raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def tensor_sum(x: Tensor) -> Tensor:
    src = x.shape
    total = _seq_sum(x.data.reshape(-1))
    return _make(total, (x,), lambda g, needs: (np.broadcast_to(g, src).copy(),), "sum")


def _seq_sum(flat: np.ndarray) -> np.ndarray:
    # np.add.accumulate is strictly sequential, unlike the pairwise np.sum
    if flat.size == 0:
        return np.zeros((), dtype=flat.dtype)
    return np.add.accumulate(flat)[-1].reshape(())


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def back(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _make(ad @ bd, (a, b), back, "matmul")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [B, C*kh*kw, oh*ow] with rows ordered (c, i, j)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` is [B, C, H, W] and ``w`` is [O, C, kh, kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(bsz, o, oh, ow)

    def back(g, needs):
        gm = g.reshape(bsz, o, oh * ow)
        gx = gw = gb = None
        if needs[0]:
            dcols = np.matmul(wm.T, gm).reshape(bsz, c, kh, kw, oh, ow)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if needs[1]:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gb = gm.sum(axis=2).sum(axis=0)
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximal element in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected rank-4 input, got {x.shape}")
    bsz, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: window {k} larger than input {h}x{w}")
    xc = x.data[:, :, : oh * k, : ow * k]
    win = xc.reshape(bsz, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g, needs):
        gwin = np.zeros((bsz, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : oh * k, : ow * k] = (
            gwin.reshape(bsz, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh * k, ow * k)
        )
        return (gx,)

    return _make(out, (x,), back, "max_pool2d")


# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax on a raw array (no tape)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    total = _seq_sum(per)
    denom = _DTYPE(n) if reduction == "mean" else _DTYPE(1)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g, needs):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g / denom),)

    return _make(total / denom, (logits,), back, "softmax_cross_entropy")


def sigmoid_bce(logit: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw logits, ``max(z,0) - z*t + log1p(exp(-|z|))``."""
    target = np.asarray(target, dtype=_DTYPE)
    if logit.shape != target.shape or logit.ndim != 1:
        raise ShapeError(f"sigmoid_bce: logit {logit.shape} vs target {target.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n = logit.shape[0]
    if n == 0:
        raise ShapeError("sigmoid_bce: empty batch")
    z = logit.data
    per = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    denom = _DTYPE(n) if reduction == "mean" else _DTYPE(1)

    def back(g, needs):
        return ((_sigmoid(z) - target) * (g / denom),)

    return _make(_seq_sum(per) / denom, (logit,), back, "sigmoid_bce")


# differentiation


def _check_loss(loss: Tensor) -> None:
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _TAPE.owns(loss):
        raise TapeError("loss was not produced on the active tape")


def _replay(loss: Tensor, wanted: set[int] | None) -> dict[int, np.ndarray]:
    nodes = _TAPE.nodes
    relevant = None
    if wanted is not None:
        # forward sweep: which recorded outputs depend on a wanted input
        relevant = set(wanted)
        for node in nodes:
            if any(id(p) in relevant for p in node.parents):
                relevant.add(id(node.out))
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(
            p.requires_grad and (relevant is None or id(p) in relevant) for p in node.parents
        )
        if not any(needs):
            continue
        for p, n, pg in zip(node.parents, needs, node.backward_fn(g, needs)):
            if not n or pg is None:
                continue
            store = leaves if p.tape_id is None or not _TAPE.owns(p) else grads
            key = id(p)
            store[key] = store[key] + pg if key in store else pg
    return leaves


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf, then clear the tape."""
    _check_loss(loss)
    try:
        leaves = _replay(loss, None)
        by_id = {}
        for node in _TAPE.nodes:
            for p in node.parents:
                by_id[id(p)] = p
        for key, g in leaves.items():
            t = by_id[key]
            g = g.astype(t.data.dtype, copy=False).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
    finally:
        _TAPE.clear()


def grad(loss: Tensor, inputs: Iterable[Tensor], clear: bool = True) -> list[np.ndarray]:
    """Return d(loss)/d(input) for each leaf in ``inputs`` without touching any ``.grad``."""
    _check_loss(loss)
    inputs = list(inputs)
    try:
        leaves = _replay(loss, {id(t) for t in inputs})
        return [
            leaves[id(t)].astype(t.data.dtype, copy=False).reshape(t.shape)
            if id(t) in leaves
            else np.zeros_like(t.data)
            for t in inputs
        ]
    finally:
        if clear:
            _TAPE.clear()
