"""Minimal reverse-mode differentiation on numpy arrays.

Every value that takes part in training is a :class:`Tensor`.  Operations
build a graph by recording their parents and a closure that maps the
upstream gradient onto the parents; :meth:`Tensor.backward` walks the
graph in reverse topological order.

Images use NHWC layout throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name="", _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, name) -> Tensor:
    """Wrap an op result; every op funnels through here so NaN/Inf is caught at the source."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{name}'")
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, name=name,
                  _parents=parents if needs else (), _backward=backward if needs else None)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):  # make_node reports it
        out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), backward, "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,), "square")


def identity(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.copy(), (a,), lambda g: (g,), "identity")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * sig,), "softplus")


def total(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return make_node(np.mean(a.data), (a,),
                     lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_node(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------------------
# image ops (NHWC)


def _im2col(xp, k, stride):
    """Patches of an (N, H, W, C) array as rows ordered (ki, kj, c)."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, -1)
    return cols, ho, wo


def conv2d(x, weight, bias, stride=1, padding=1) -> Tensor:
    """2-D cross-correlation.  x: (N, H, W, C), weight: (O, C, k, k), bias: (O,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n, h, w, c = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ValueError(f"conv2d: weight {weight.shape} does not match input channels {c}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    if hp < k or wp < k:
        raise ValueError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o)

    def backward(g):
        g2 = g.reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if stride == 1:
                # full correlation of the upstream gradient with the flipped kernel
                gd = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
                gcols, gh, gw_ = _im2col(gd, k, 1)
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
                gxp[:, :gh, :gw_, :] = (gcols @ flipped.T).reshape(n, gh, gw_, c)
            else:
                gcols = (g2 @ weight.data.reshape(o, c * k * k)).reshape(n, ho, wo, c, k, k)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return gx, gw, gb

    return make_node(out, (x, weight, bias), backward, "conv2d")


def avg_pool(x, factor) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    ho, wo = h // factor, w // factor
    if ho < 1 or wo < 1:
        raise ValueError(f"avg_pool: {h}x{w} input too small for factor {factor}")
    crop = x.data[:, :ho * factor, :wo * factor, :]
    out = crop.reshape(n, ho, factor, wo, factor, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2) / (factor * factor)
        gx[:, :ho * factor, :wo * factor, :] = up
        return (gx,)

    return make_node(out, (x,), backward, "avg_pool")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return make_node(x.data.mean(axis=(1, 2)), (x,), backward, "global_avg_pool")


def instance_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes, then a per-channel affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    m = x.shape[1] * x.shape[2]
    if m < 2:
        raise ValueError("instance_norm needs at least 2 spatial elements per channel")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 1, 2))
        gb = g.sum(axis=(0, 1, 2))
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=(1, 2), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(1, 2), keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gain, bias), backward, "instance_norm")


# ---------------------------------------------------------------------------
# loss


def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target):
    """Cross entropy of soft or one-hot ``target`` against ``softmax(logits)``.

    Works on a single vector or a batch along the last axis.  Returns
    ``(loss, grad)`` where ``grad = softmax(logits) - target``.
    """
    target = np.asarray(target, dtype=DTYPE)
    if not np.allclose(target.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9):
        raise ValueError("target must sum to 1 within 1e-9")
    loss = -(target * log_softmax(logits)).sum(axis=-1)
    grad = softmax(logits) - target
    if not (np.all(np.isfinite(loss)) and np.all(np.isfinite(grad))):
        raise NonFiniteError("non-finite output from op 'softmax_cross_entropy'")
    return loss, grad


def cross_entropy_loss(logits, targets) -> Tensor:
    """Batch-mean cross entropy as a graph node."""
    logits = as_tensor(logits)
    loss, grad = softmax_cross_entropy(logits.data, targets)
    n = logits.shape[0]
    return make_node(loss.mean(), (logits,), lambda g: (g * grad / n,), "cross_entropy")


# ---------------------------------------------------------------------------
# parameters and optimization


@dataclass
class Parameter:
    value: Tensor
    frozen: bool = False

    @property
    def grad(self):
        if self.value.grad is None:
            self.value.zero_grad()
        return self.value.grad


@dataclass
class ParameterStore:
    """Named parameter tensors.  Insertion order is network depth order."""

    entries: dict = field(default_factory=dict)

    def add(self, name, value, frozen=False):
        if name in self.entries:
            raise KeyError(f"duplicate parameter '{name}'")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        t.zero_grad()
        self.entries[name] = Parameter(t, frozen)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.entries[name].value

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, prefix=""):
        return [n for n in self.entries if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.entries.values():
            p.value.zero_grad()

    def freeze(self, names: Iterable[str], frozen=True):
        for n in names:
            self.entries[n].frozen = frozen

    def frozen_names(self):
        return [n for n, p in self.entries.items() if p.frozen]

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, p in self.entries.items():
            out.add(n, p.value.data.copy(), p.frozen)
        return out

    def state(self):
        return {n: p.value.data.copy() for n, p in self.entries.items()}

    def equals(self, other: "ParameterStore") -> bool:
        return list(self.entries) == list(other.entries) and all(
            np.array_equal(self[n].data, other[n].data) for n in self.entries)


def sgd_step(params: ParameterStore, learning_rate: float) -> ParameterStore:
    """Plain SGD: ``value -= lr * grad`` on unfrozen entries, then clear all gradients."""
    for name, p in params.entries.items():
        if p.frozen:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter '{name}'")
    for p in params.entries.values():
        if not p.frozen and learning_rate != 0:
            p.value.data -= learning_rate * p.grad
    params.zero_grad()
    return params


def save_checkpoint(params: ParameterStore, path, extra=None):
    """JSON header line, then each entry as little-endian float64 in header order."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "entries": [{"name": n, "shape": list(p.value.shape), "frozen": p.frozen}
                    for n, p in params.entries.items()],
    }
    if extra:
        header["meta"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for p in params.entries.values():
            fh.write(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        params = ParameterStore()
        for e in header["entries"]:
            count = math.prod(e["shape"])
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"checkpoint truncated at entry '{e['name']}'")
            arr = np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(e["shape"])
            params.add(e["name"], arr, e["frozen"])
        if fh.read(1):
            raise ValueError("trailing bytes after last checkpoint entry")
    return params, header.get("meta", {})


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], probe: dict, step=1e-5, seed=0, floor=1e-3):
    """Compare analytic gradients of ``fn`` with central finite differences.

    ``fn`` takes keyword Tensors named as in ``probe`` and returns a Tensor of
    any shape; it is contracted with a fixed random vector to get a scalar.
    Returns ``{name: max relative error}`` where the error of one element is
    ``|a - n| / max(|a|, |n|, floor * M)`` and ``M`` is the largest numeric
    gradient over the whole probe.  The floor keeps elements whose true
    gradient is zero (a bias feeding a normalization, say) from turning
    rounding noise into a large relative error.
    """
    leaves = {k: Tensor(np.array(v, dtype=DTYPE), requires_grad=True, name=k) for k, v in probe.items()}
    out = fn(**leaves)
    proj = np.random.default_rng([seed, 0x9C]).standard_normal(out.shape)
    out.backward(proj)

    def scalar(values):
        res = fn(**{k: Tensor(v) for k, v in values.items()})
        return float(np.sum(res.data * proj))

    base = {k: t.data.copy() for k, t in leaves.items()}
    numerics = {}
    for name in leaves:
        numeric = np.zeros_like(base[name])
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar(base)
            flat[i] = orig - step
            fm = scalar(base)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        numerics[name] = numeric
    biggest = max((float(np.max(np.abs(n), initial=0.0)) for n in numerics.values()), default=0.0)
    scale = max(floor * biggest, 1e-12)
    report = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerics[name]
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
        report[name] = float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0
    return report
