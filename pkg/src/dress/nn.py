"""Minimal reverse-mode differentiable core on numpy float64 arrays.

Every forward op records a closure that maps the output gradient to the
gradients of its inputs. ``backward`` walks the recorded graph once, in
reverse topological order, and frees it; a second call on the same loss is a
contract error.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericalError

PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "dress-checkpoint"
CHECKPOINT_VERSION = 1

_CONSUMED = "<consumed>"
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, store: "ParamStore | None" = None):
        backward(self, store)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological(root: Tensor) -> list:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    When ``store`` is given its gradients are reset first, so parameters the
    loss does not reach end up with an explicit zero gradient.
    """
    if loss._op is None:
        raise ContractError("backward() needs a loss produced by a forward pass")
    if loss._op == _CONSUMED:
        raise ContractError("graph already consumed by an earlier backward(); run the forward pass again")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {loss.data.reshape(-1)[0]!r}")
    if store is not None:
        store.zero_grad()
    if not loss.requires_grad:
        loss._op = _CONSUMED
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._op = _CONSUMED
    if store is not None:
        for name, p in store.items():
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient for parameter {name}")


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-d ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    k, n = b.shape

    def grad_fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def identity(x) -> Tensor:
    return as_tensor(x)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


def total(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return total(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), grad_fn, "getitem")


def take_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), grad_fn, "take_rows")


def weighted_rows(table, idx, weights) -> Tensor:
    """``out[b] = sum_k weights[b, k] * table[idx[b, k]]``; differentiable in ``table``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if idx.shape != w.shape:
        raise ContractError(f"index/weight shape mismatch: {idx.shape} vs {w.shape}")
    rows = table.data[idx]
    out = np.einsum("...k,...kd->...d", w, rows)

    def grad_fn(g):
        contrib = w[..., None] * g[..., None, :]
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), contrib.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), grad_fn, "weighted_rows")


def take_along_last(x, idx) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis (one entry per row)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _make(picked, (x,), grad_fn, "take_along_last")


# ---------------------------------------------------------------------------
# probability ops and losses


def softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ContractError("softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ContractError("log_softmax of an empty vector")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(p_hat, y, eps: float = PROB_EPS) -> Tensor:
    """Elementwise binary cross entropy on a clamped probability."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("cross_entropy labels must be 0 or 1")
    p = clip(p_hat, eps, 1.0 - eps)
    return -(y * log(p)) - (1.0 - y) * log(1.0 - p)


def mse(y_hat, y) -> Tensor:
    """Squared L2 norm of the difference over the last axis (no averaging)."""
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    if y_hat.shape != y.shape:
        raise ContractError(f"mse shape mismatch: {y_hat.shape} vs {y.shape}")
    return total(square(y_hat - y), axis=-1)


def entropy_of(probs, log_probs) -> Tensor:
    """-sum p log p over the last axis, from matching probs/log-probs tensors."""
    return -total(probs * log_probs, axis=-1)


# ---------------------------------------------------------------------------
# layers

ACTIVATIONS = {"identity": identity, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def dense_forward(x, W, b, activation: str = "identity") -> Tensor:
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ContractError(f"dense shape mismatch: x{x.shape} vs W{W.shape}")
    if b.shape != (W.shape[1],):
        raise ContractError(f"dense bias shape {b.shape} does not match W{W.shape}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ContractError(f"unknown activation {activation!r}") from None
    return act(matmul(x, W) + b)


@dataclass
class GruParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.U_z.shape[0]

    @classmethod
    def from_store(cls, store: "ParamStore", prefix: str) -> "GruParams":
        return cls(**{f: store[f"{prefix}.{f}"] for f in cls.__dataclass_fields__})


def gru_step(x, h, p: GruParams) -> Tensor:
    """One GRU update: h' = (1 - z) * h + z * tanh(x W_h + (r * h) U_h + b_h)."""
    x, h = as_tensor(x), as_tensor(h)
    H = p.hidden_dim
    if x.shape[-1] != p.input_dim or h.shape[-1] != H:
        raise ContractError(
            f"gru_step shape mismatch: x{x.shape}, h{h.shape} for input_dim={p.input_dim}, hidden_dim={H}")
    for name in ("U_r", "U_h"):
        if getattr(p, name).shape != (H, H):
            raise ContractError(f"gru {name} must be {H}x{H}")
    z = sigmoid(matmul(x, p.W_z) + matmul(h, p.U_z) + p.b_z)
    r = sigmoid(matmul(x, p.W_r) + matmul(h, p.U_r) + p.b_r)
    cand = tanh(matmul(x, p.W_h) + matmul(r * h, p.U_h) + p.b_h)
    return (1.0 - z) * h + z * cand


# ---------------------------------------------------------------------------
# parameters, initialization, optimizer


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameters plus per-parameter Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self.state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def add_dense(self, prefix: str, n_in: int, n_out: int, rng: np.random.Generator,
                  zero: bool = False) -> tuple[Tensor, Tensor]:
        W = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        return self.add(f"{prefix}.W", W), self.add(f"{prefix}.b", np.zeros(n_out))

    def add_gru(self, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> GruParams:
        for gate in ("z", "r", "h"):
            self.add(f"{prefix}.W_{gate}", glorot(rng, n_in, hidden))
            self.add(f"{prefix}.U_{gate}", glorot(rng, hidden, hidden))
            self.add(f"{prefix}.b_{gate}", np.zeros(hidden))
        return GruParams.from_store(self, prefix)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def clear_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def copy(self) -> "ParamStore":
        """Deep copy of values; optimizer moments start fresh."""
        new = ParamStore()
        for name, p in self._params.items():
            new.add(name, p.data.copy())
        return new

    def values(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[name].shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {self._params[name].shape}")
            self._params[name].data = arr.copy()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self._params.values()
                             if p.grad is not None))


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = None,
              names: Iterable[str] | None = None) -> ParamStore:
    """Bias-corrected Adam update in place; optional global gradient-norm clipping."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    selected = list(store.names() if names is None else names)
    missing = [n for n in selected if store[n].grad is None]
    if missing:
        raise ContractError(f"adam_step: missing gradients for {missing[:3]}")
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float((store[n].grad ** 2).sum()) for n in selected))
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient norm")
        if norm > clip_norm:
            scale = clip_norm / norm
    for name in selected:
        p, st = store[name], store.state[name]
        g = p.grad * scale
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, stores: dict[str, ParamStore], seed: int, cfg_hash: str,
                    meta: dict | None = None) -> None:
    """Write a JSON container: header + name -> {shape, values} per store."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "config_hash": cfg_hash,
        "meta": meta or {},
        "stores": {
            key: {name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
                  for name, p in store.items()}
            for key, store in stores.items()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict, dict[str, ParamStore]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    stores = {}
    for key, entries in doc["stores"].items():
        store = ParamStore()
        for name, entry in entries.items():
            store.add(name, np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"]))
        stores[key] = store
    header = {k: doc[k] for k in ("format", "version", "seed", "config_hash", "meta")}
    return header, stores


# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
