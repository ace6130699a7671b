"""Reverse-mode automatic differentiation on float64 numpy arrays.

A dynamic tape: every op returns a Tensor holding its inputs and a vjp
closure; backward() walks the recorded graph in reverse topological order.
Everything is 64-bit so gradients can be verified against central finite
differences. Broadcasting follows numpy; gradients are summed back down to
the input shapes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingGrad, NotScalar, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    # Interior nodes carry the tape (parents + vjp) but do not themselves
    # request gradients; backward stores .grad only on requires_grad leaves.
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        return Tensor(data, requires_grad=False, parents=parents, vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def matmul_vjp(a_data, b_data, g):
    # Module-level so fault-injection tests can corrupt it.
    return g @ b_data.T, a_data.T @ g


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: matmul_vjp(a.data, b.data, g))


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def bmm(a, b):
    """Batched matmul: (B, n, m) @ (B, m, p) -> (B, n, p)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs 3-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.data.shape} @ {b.data.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.swapaxes(1, 2), a.data.swapaxes(1, 2) @ g),
    )


def transpose_axes(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes).copy(), (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a, lo, hi):
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def softmax(a, axis=-1):
    """Row-stable softmax (max subtraction)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = np.log(se) + m
    soft = e / se
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gk = np.expand_dims(g, axis) if not keepdims else g
        return (gk * soft,)

    return _make(out, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def gather(a, rows):
    """Select rows along axis 0; backward scatter-adds into the source."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = a.data[rows]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)

    return _make(out, (a,), vjp)


def scatter_add(a, rows, n_rows):
    """out[r] = sum of a[i] over i with rows[i] == r; shape (n_rows, ...)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) != a.data.shape[0]:
        raise ShapeError(f"{len(rows)} row indices for {a.data.shape[0]} rows")
    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(out, rows, a.data)
    return _make(out, (a,), lambda g: (g[rows],))


def cols(a, start, end):
    """Column slice [start:end) of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"cols needs a 2-D tensor, got {a.data.shape}")
    out = a.data[:, start:end].copy()

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, start:end] = g
        return (ga,)

    return _make(out, (a,), vjp)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    Repeated calls without zeroing accumulate.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")

    # Iterative post-order topological sort (graphs get deep).
    order, seen, stack = [], set(), [(loss, False)]
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

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


def grad_check(f, inputs, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences.

    Error metric per entry: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    inputs = list(inputs)
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise NotScalar("grad_check requires a scalar-valued function")
    backward(out)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t, s in zip(inputs, saved):
        t.grad = s

    worst = 0.0
    for t, g_ad in zip(inputs, grads):
        flat = t.data.ravel()
        ga = g_ad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga[i] - g_fd) / max(1e-8, abs(ga[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst


class ParamStore:
    """Named trainable parameters plus Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._step[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())


def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard Adam with bias correction. Gradients are left untouched."""
    for name in store.names():
        if store[name].grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
    for name in store.names():
        p = store[name]
        g = p.grad
        store._step[name] += 1
        t = store._step[name]
        store._m[name] = beta1 * store._m[name] + (1.0 - beta1) * g
        store._v[name] = beta2 * store._v[name] + (1.0 - beta2) * g * g
        m_hat = store._m[name] / (1.0 - beta1**t)
        v_hat = store._v[name] / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def save_checkpoint(store: ParamStore, base_path, extra: dict | None = None) -> None:
    """Write {base}.bin (row-major f64 payloads) and {base}.json (manifest)."""
    base = Path(base_path)
    records, blobs, offset = [], [], 0
    entries = [(n, store[n].data) for n in store.names()]
    entries += [("adam.m." + n, store._m[n]) for n in store.names()]
    entries += [("adam.v." + n, store._v[n]) for n in store.names()]
    for name, arr in entries:
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append(
            {"name": name, "dtype": "f64", "shape": list(arr.shape), "offset": offset,
             "nbytes": len(payload)}
        )
        blobs.append(payload)
        offset += len(payload)
    manifest = {
        "tensors": records,
        "steps": {n: store._step[n] for n in store.names()},
        "extra": extra or {},
    }
    base.with_suffix(".bin").write_bytes(b"".join(blobs))
    base.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_checkpoint(base_path) -> tuple[ParamStore, dict]:
    """Inverse of save_checkpoint; returns (store, manifest extra dict)."""
    base = Path(base_path)
    manifest = json.loads(base.with_suffix(".json").read_text())
    blob = base.with_suffix(".bin").read_bytes()
    arrays = {}
    for rec in manifest["tensors"]:
        raw = blob[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arrays[rec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(rec["shape"]).copy()
    store = ParamStore()
    for name, arr in arrays.items():
        if name.startswith("adam."):
            continue
        store.add(name, arr)
        store._m[name] = arrays["adam.m." + name]
        store._v[name] = arrays["adam.v." + name]
        store._step[name] = manifest["steps"][name]
    return store, manifest.get("extra", {})


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Glorot-style uniform init in ±sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
