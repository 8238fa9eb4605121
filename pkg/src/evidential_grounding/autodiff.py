"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float64 array. Every primitive records its parents
and a closure that pushes the upstream gradient back to them; calling
:meth:`Tensor.backward` on a scalar walks the tape in reverse topological
order. ``detach`` cuts the tape, which is how the error term is kept out of
the regularizer gradients during training.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .nig import NIGParams

SOFTPLUS_FLOOR = 1e-6
CHECKPOINT_FORMAT = "evidential-grounding-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are structurally incompatible."""


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    return Tensor(data, _parents=parents, _backward=backward)


# elementwise binary ops -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a, b, "where")
    try:
        np.broadcast_shapes(shape, cond.shape)
    except ValueError:
        raise ShapeError(f"where: condition {cond.shape} vs operands {shape}") from None
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# elementwise unary ops ------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    return _make(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * special.expit(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def detach(a) -> Tensor:
    """Copy of ``a`` with no tape history; gradients stop here."""
    return Tensor(as_tensor(a).data.copy())


# reductions -----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _make(out, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = special.logsumexp(a.data, axis=axis, keepdims=True)
    weights = np.exp(a.data - out)
    value = out if keepdims else np.squeeze(out, axis=axis)
    return _make(value, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims) * weights,))


def softmax(a, axis: int = -1) -> Tensor:
    """Row-wise softmax (along ``axis``)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


# structural ops -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=axis)))


# evidential head ------------------------------------------------------------

def evidential_activation(raw) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Map raw head outputs ``(..., 4)`` onto the NIG parameter domain.

    gamma is the identity; upsilon and beta go through softplus plus a floor,
    alpha additionally gets +1 so the moments stay defined.
    """
    raw = as_tensor(raw)
    if raw.shape[-1] != 4:
        raise ShapeError(f"evidential head needs a trailing dim of 4, got {raw.shape}")
    gamma = raw[..., 0]
    upsilon = softplus(raw[..., 1]) + SOFTPLUS_FLOOR
    alpha = softplus(raw[..., 2]) + (1.0 + SOFTPLUS_FLOOR)
    beta = softplus(raw[..., 3]) + SOFTPLUS_FLOOR
    return gamma, upsilon, alpha, beta


@dataclass
class EvidentialHeadOutput:
    raw: np.ndarray
    params: list[NIGParams]

    @classmethod
    def from_raw(cls, raw) -> "EvidentialHeadOutput":
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, 4)
        g, u, a, b = (t.data for t in evidential_activation(raw))
        params = [NIGParams(float(g[i]), float(u[i]), float(a[i]), float(b[i]))
                  for i in range(raw.shape[0])]
        return cls(raw=raw, params=params)


def nig_nll(b, gamma, upsilon, alpha, beta) -> Tensor:
    """Elementwise Student-t NLL as one fused tape node.

    Forward value and local partials come from the compiled kernel when it
    is available; the composed-primitive route lives in ``losses.nll_tensor``.
    """
    from . import kernels

    ts = [as_tensor(x) for x in (b, gamma, upsilon, alpha, beta)]
    shape = np.broadcast_shapes(*(t.shape for t in ts))
    arrays = [np.ascontiguousarray(np.broadcast_to(t.data, shape)).ravel() for t in ts]
    value, *partials = kernels.nig_nll_grad(*arrays)
    partials = [p.reshape(shape) for p in partials]

    def backward(g):
        return tuple(_unbroadcast(g * p, t.shape) for p, t in zip(partials, ts))

    return _make(value.reshape(shape), tuple(ts), backward)


# finite differences ---------------------------------------------------------

class NonFiniteEvaluation(ArithmeticError):
    def __init__(self, coordinate: int, direction: str):
        super().__init__(f"non-finite function value at coordinate {coordinate} ({direction} step)")
        self.coordinate = coordinate
        self.direction = direction


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step ``h * max(1, |x_i|)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(xp.reshape(x.shape)))
        if not math.isfinite(fp):
            raise NonFiniteEvaluation(i, "forward")
        fm = float(f(xm.reshape(x.shape)))
        if not math.isfinite(fm):
            raise NonFiniteEvaluation(i, "backward")
        out[i] = (fp - fm) / (xp[i] - xm[i])
    return out.reshape(x.shape)


def tape_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` through the tape."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(t).backward()
    return np.zeros_like(t.data) if t.grad is None else t.grad


# MLP --------------------------------------------------------------------------

ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class MLPConfig:
    layer_widths: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("layer_widths needs input, >= 1 hidden and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_widths", widths)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params: dict, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    params[f"{name}.weight"] = Tensor(glorot_uniform(rng, fan_in, fan_out),
                                      requires_grad=True, name=f"{name}.weight")
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True,
                                    name=f"{name}.bias")


def linear(params: dict, name: str, x) -> Tensor:
    return matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def mlp_init(config: MLPConfig, prefix: str = "mlp",
             rng: np.random.Generator | None = None) -> dict:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params: dict[str, Tensor] = {}
    widths = config.layer_widths
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        init_linear(params, f"{prefix}.{i}", fi, fo, rng)
    return params


def mlp_forward(config: MLPConfig, weights: dict, x, prefix: str = "mlp") -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != config.layer_widths[0]:
        raise ShapeError(f"MLP input width {x.shape[-1]} != {config.layer_widths[0]}")
    act = ACTIVATIONS[config.activation]
    n_layers = len(config.layer_widths) - 1
    for i in range(n_layers):
        w = weights[f"{prefix}.{i}.weight"]
        if w.shape != (config.layer_widths[i], config.layer_widths[i + 1]):
            raise ShapeError(f"{prefix}.{i}.weight has shape {w.shape}")
        x = linear(weights, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = act(x)
    return x


# optimizer --------------------------------------------------------------------

@dataclass
class Adam:
    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, names: Iterable[str] | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in (self.params if names is None else names):
            p = self.params[name]
            if p.grad is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params: dict, metadata: dict | None = None) -> None:
    """Write ``name -> {shape, values}`` as JSON (see README for the layout)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "tensors": {
            name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
            for name, t in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for name, entry in doc["tensors"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        params[name] = Tensor(values.reshape(entry["shape"]), requires_grad=True, name=name)
    return params, doc.get("metadata", {})
