"""Dense float64 tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array and, when it was produced by a recorded
operation, remembers its parents and a closure that maps the output
gradient to parent gradients.  ``backward`` walks the trace once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


# ----------------------------------------------------------------------
# matmul multiply-accumulate counter (used by the benchmark cross-check)

_mac_counters: list[list[int]] = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every ``matmul`` inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def _record_macs(a_shape, b_shape, out_shape):
    if not _mac_counters:
        return
    k = a_shape[-1]
    n = int(np.prod(out_shape)) * k
    for box in _mac_counters:
        box[0] += n


# ----------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor that always accumulates a gradient."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    _record_macs(a.shape, b.shape, out.shape)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, bw)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics plus learned affine terms for one BN layer."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, name: str, momentum=0.1, eps=1e-5):
        return cls(
            gamma=Parameter(np.ones(width), f"{name}.gamma"),
            beta=Parameter(np.zeros(width), f"{name}.beta"),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(z, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize each feature of a ``(..., d)`` tensor over all leading axes.

    Train mode uses batch statistics (biased variance) and updates the
    running statistics; eval mode uses the running statistics only.
    """
    z = as_tensor(z)
    d = z.shape[-1]
    if d != state.gamma.shape[0]:
        raise ShapeError(f"batchnorm: feature width {d} does not match state width {state.gamma.shape[0]}")
    axes = tuple(range(z.ndim - 1))
    count = int(np.prod(z.shape[:-1]))
    if mode == "train":
        if count < 2:
            raise ValueError(f"batchnorm: train mode needs at least 2 values per feature, got {count}")
        mu = mean(z, axis=axes, keepdims=True)
        centered = sub(z, mu)
        var = mean(mul(centered, centered), axis=axes, keepdims=True)
        normed = mul(centered, power(add(var, state.eps), -0.5))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(d)
        # running variance uses the unbiased estimate, as in common frameworks
        unbiased = var.data.reshape(d) * count / (count - 1)
        state.running_var = (1 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        normed = mul(sub(z, state.running_mean), 1.0 / np.sqrt(state.running_var + state.eps))
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return add(mul(normed, state.gamma), state.beta)


# ----------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ----------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if not v < self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter],
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must recompute the scalar from the current parameter values.
    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    report = GradCheckReport(tol=tol)
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
        a = analytic.reshape(-1)
        err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
        report.max_rel_err[p.name or f"param{len(report.max_rel_err)}"] = float(err.max(initial=0.0))
    return report


# ----------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.step_count += 1
        adam_step(self.params, [p.grad for p in self.params], self.lr, self.beta1,
                  self.beta2, self.eps, self.m, self.v, self.step_count)


def adam_step(params, grads, lr, beta1, beta2, eps, m, v, step):
    """In-place Adam update of ``params`` with moment buffers ``m``/``v``."""
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1 - beta1) * g
        vi *= beta2
        vi += (1 - beta2) * g * g
        p.data -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


# ----------------------------------------------------------------------
# RNG and checkpoints


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """A Philox generator keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


_MAGIC = b"HDCKPT01"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``name -> float64 array`` plus a JSON metadata block.

    Layout: magic, u64 header length, UTF-8 JSON header, then the raw
    little-endian float64 payloads in header order.
    """
    entries = [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()]
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    offset = 16 + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        buf = raw[offset:offset + 8 * count]
        if len(buf) != 8 * count:
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(DTYPE)
        offset += 8 * count
    return arrays, header["meta"]
