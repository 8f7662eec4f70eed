"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends its output to the active tape when any input
requires a gradient. ``backward`` walks the tape once in reverse, accumulates
``.grad`` on leaf tensors and clears the tape.

Storage is float32 by default; reductions accumulate in float64. Gradient
checks switch the default to float64 with :func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_DTYPE = np.float32
CHECK_FINITE = os.environ.get("CTXRANK_CHECK_FINITE", "") not in ("", "0")
_GRAD_ENABLED = True


class TensorError(ValueError):
    """Shape, contract or numerical error raised by a tensor op."""


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def set_check_finite(flag: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tape:
    """Ordered record of op outputs; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


TAPE = Tape()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE and arr.dtype.kind in "fiub":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TensorError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        TAPE.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0, dtype=np.float64)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True, dtype=np.float64)
    return grad.astype(_DTYPE, copy=False)


def _scatter_rows(n_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` buckets; duplicates accumulate."""
    ids = ids.reshape(-1)
    flat = values.reshape(len(ids), -1)
    m = sp.csr_matrix(
        (np.ones(len(ids), dtype=flat.dtype), (ids, np.arange(len(ids)))), shape=(n_rows, len(ids))
    )
    return np.asarray(m @ flat).reshape((n_rows,) + values.shape[1:])


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in parts)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _make(y, (x,), back, "tanh")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.data.dtype)

    def back(g):
        return (g * pos,)

    return _make(y, (x,), back, "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU; smooth everywhere, unlike relu."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(y, (x,), back, "gelu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        return (g * y,)

    return _make(y, (x,), back, "exp")


def log(x: Tensor) -> Tensor:
    def back(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), back, "log")


def square(x: Tensor) -> Tensor:
    def back(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), back, "square")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes batch or broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise TensorError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise TensorError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, ka)
        out = (a2 @ b.data).reshape(lead + (b.shape[1],))

        def back_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), back_folded, "matmul")
    out = np.matmul(a.data, b.data)

    def back(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return ga, gb.astype(_DTYPE, copy=False)
        if ad.ndim == 1:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.multiply.outer(ad, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


def gram(x: Tensor) -> Tensor:
    """Batched ``x @ x^T`` over the last two axes."""
    out = np.einsum("...ik,...jk->...ij", x.data, x.data)

    def back(g):
        return (np.matmul(g + np.swapaxes(g, -1, -2), x.data),)

    return _make(out, (x,), back, "gram")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), back, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), back, "reshape")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(_DTYPE)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(_DTYPE),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(_DTYPE)

    def back(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64)
        return ((y * (g - dot)).astype(_DTYPE),)

    return _make(y, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64))
    y = (shifted - lse).astype(_DTYPE)

    def back(g):
        p = np.exp(y)
        return ((g - p * np.sum(g, axis=axis, keepdims=True, dtype=np.float64)).astype(_DTYPE),)

    return _make(y, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = x.data.var(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(_DTYPE)

    def back(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True, dtype=np.float64)
            - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True, dtype=np.float64)
        )
        return (
            gx.astype(_DTYPE),
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(xhat * gain.data + bias.data, (x, gain, bias), back, "layer_norm")


# ---------------------------------------------------------------- structure


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, back, "stack")


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on backward."""

    basic = _is_basic(key)

    def back(g):
        out = np.zeros(x.shape, dtype=_DTYPE)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), back, "index")


def take_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows ``x[ids]`` along axis 0 for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        flat = g.reshape((ids.size,) + x.shape[1:])
        return (_scatter_rows(x.shape[0], ids.reshape(-1), flat).astype(_DTYPE, copy=False),)

    return _make(x.data[ids], (x,), back, "take_rows")


def embedding_lookup(table: Tensor, ids, name: str | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        label = name or table.name or "embedding"
        bad = int(ids.max() if ids.max() >= n else ids.min())
        raise IndexError(f"id {bad} out of range for table {label!r} with {n} rows")
    return take_rows(table, ids)


def segment_mean(x: Tensor, segment_ids: np.ndarray, n_segments: int) -> Tensor:
    """Mean of rows of ``x`` sharing a segment id; empty segments give zeros."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    acc = _scatter_rows(n_segments, seg, x.data.astype(np.float64))
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = (acc * scale.reshape(shape)).astype(_DTYPE)

    def back(g):
        return ((g[seg] * scale[seg].reshape(shape)).astype(_DTYPE),)

    return _make(out, (x,), back, "segment_mean")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        TAPE.clear()
        return
    if loss._backward is None:
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + 1.0
        TAPE.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(TAPE.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            if parent._backward is None:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    TAPE.clear()


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.decay: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=_DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.decay[name] = decay
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def n_values(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2: float = 0.0,
    names: Iterable[str] | None = None,
) -> None:
    """One bias-corrected Adam update; ``l2 * p`` is added to decaying grads."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in names if names is not None else store.params:
        p = store.params[name]
        if p.grad is None:
            continue
        g = p.grad
        if l2 and store.decay[name]:
            g = g + l2 * p.data
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------- checkpoints

CKPT_HEADER = "CTXRANK-CKPT v1"


def save_checkpoint(store: ParameterStore, path, meta: dict[str, str] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write((CKPT_HEADER + "\n").encode())
        for key, val in (meta or {}).items():
            fh.write(f"#{key}\t{val}\n".encode())
        for name, p in store.params.items():
            shape = ",".join(str(d) for d in p.shape)
            fh.write(f"{name}\t{shape}\n".encode())
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Return ``(arrays, meta)``; rejects files with any other header."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    with open(path, "rb") as fh:
        header = fh.readline().decode().rstrip("\n")
        if header != CKPT_HEADER:
            raise ValueError(f"unsupported checkpoint header {header!r}")
        while True:
            line = fh.readline()
            if not line:
                break
            text = line.decode().rstrip("\n")
            if text.startswith("#"):
                key, _, val = text[1:].partition("\t")
                meta[key] = val
                continue
            name, _, shape_s = text.partition("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"truncated checkpoint at parameter {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return arrays, meta


def load_into(store: ParameterStore, arrays: dict[str, np.ndarray]) -> None:
    for name, p in store.params.items():
        if name not in arrays:
            raise KeyError(f"checkpoint lacks parameter {name!r}")
        arr = arrays[name]
        if arr.shape != p.shape:
            raise TensorError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)


# ---------------------------------------------------------------- gradient check


def gradient_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    n_checks: int = 20,
    h: float = 1e-3,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``n_checks`` scalar entries are drawn at random from the parameters in
    ``names`` (default: all). Run under ``default_dtype(np.float64)``.
    """
    rng = np.random.default_rng(seed)
    pool = list(names) if names is not None else list(store.params)
    store.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for _ in range(n_checks):
        name = pool[rng.integers(len(pool))]
        p = store.params[name]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + h
            up = float(loss_fn().data)
            p.data[idx] = orig - h
            down = float(loss_fn().data)
            p.data[idx] = orig
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / denom)
    TAPE.clear()
    return worst


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(_DTYPE)
