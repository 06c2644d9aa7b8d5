"""Minimal dense-tensor kernel with reverse-mode automatic differentiation.

Define-by-run tape over numpy arrays: every op records its parents and a
closure that accumulates gradients.  Only the primitives needed by the toy
networks are provided (dense, conv1d, leaky_relu, softmax, concat,
elementwise arithmetic, attention) plus a decoupled-weight-decay AdamW step
and a flat binary + JSON-manifest weights format.

Storage defaults to float32 with float64 accumulation in reductions;
gradient-check tests run the whole tape in float64.
"""

from __future__ import annotations

import json
import math
from typing import Iterable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "square", "sqrt",
    "leaky_relu", "softmax", "concat", "reshape", "transpose", "narrow",
    "sum_", "mean", "mse", "stop_gradient", "conv1d", "upsample2",
    "dense", "attention",
    "adamw_step", "save_params", "load_params",
]

DEFAULT_DTYPE = np.float32


class Tensor:
    """A node on the tape: value, gradient slot, and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=""):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()

        def visit(node: Tensor):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    topo.append(n)
                    continue
                if id(n) in seen or not n.requires_grad:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other): return add(self, _wrap(other, self))
    def __radd__(self, other): return add(_wrap(other, self), self)
    def __sub__(self, other): return sub(self, _wrap(other, self))
    def __rsub__(self, other): return sub(_wrap(other, self), self)
    def __mul__(self, other): return mul(self, _wrap(other, self))
    def __rmul__(self, other): return mul(_wrap(other, self), self)
    def __truediv__(self, other): return div(self, _wrap(other, self))
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def reshape(self, *shape): return reshape(self, shape)
    def sum(self): return sum_(self)
    def mean(self): return mean(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}, name={self.name!r})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: Tensor, b: Tensor, out, da, db) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(g), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(g), b.shape))
    return Tensor(out, parents=(a, b), backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(
        a, b, a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)
    return Tensor(-a.data, parents=(a,), backward=backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(2.0 * g * a.data)
    return Tensor(a.data * a.data, parents=(a,), backward=backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)
    return Tensor(out, parents=(a,), backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return Tensor(a.data @ b.data, parents=(a, b), backward=backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)

    def backward(g):
        a._accumulate(np.where(mask, g, slope * g))
    return Tensor(out, parents=(a,), backward=backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))
    return Tensor(out, parents=(a,), backward=backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of empty list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    return Tensor(out, parents=tuple(ts), backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.data.shape))
    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)
    return Tensor(a.data.T, parents=(a,), backward=backward)


def narrow(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)
    return Tensor(a.data[idx], parents=(a,), backward=backward)


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64)).astype(a.data.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())
    return Tensor(out, parents=(a,), backward=backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n).astype(a.data.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())
    return Tensor(out, parents=(a,), backward=backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return mean(square(sub(a, b)))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity on values, exact zero-blocker for gradients."""
    return Tensor(a.data.copy())


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution.

    x: (C_in, L), w: (C_out, C_in, K) with K odd, b: (C_out,).
    Output length is ceil(L / stride).
    """
    c_in, L = x.data.shape
    c_out, c_in_w, K = w.data.shape
    if c_in_w != c_in:
        raise ValueError(f"conv1d channel mismatch: x has {c_in}, w expects {c_in_w}")
    if K % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {K}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    pad = K // 2
    L_out = -(-L // stride)
    xp = np.zeros((c_in, L + 2 * pad), dtype=x.data.dtype)
    xp[:, pad:pad + L] = x.data
    out = np.zeros((c_out, L_out), dtype=x.data.dtype)
    for k in range(K):
        sl = xp[:, k:k + (L_out - 1) * stride + 1:stride]
        out += w.data[:, :, k] @ sl
    if b is not None:
        out = out + b.data[:, None]

    def backward(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=1))
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k in range(K):
                sl = xp[:, k:k + (L_out - 1) * stride + 1:stride]
                gw[:, :, k] = g @ sl.T
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + (L_out - 1) * stride + 1:stride] += w.data[:, :, k].T @ g
            x._accumulate(gxp[:, pad:pad + L])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling along the length axis of (C, L)."""
    out = np.repeat(x.data, 2, axis=1)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape[0], -1, 2).sum(axis=2))
    return Tensor(out, parents=(x,), backward=backward)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v."""
    d = q.data.shape[-1]
    scores = mul(matmul(q, transpose(k)), Tensor(np.asarray(1.0 / math.sqrt(d), dtype=q.data.dtype)))
    return matmul(softmax(scores, axis=-1), v)


class ParamStore:
    """Named trainable tensors plus AdamW moment state."""

    def __init__(self, dtype=None):
        self.dtype = dtype if dtype is not None else DEFAULT_DTYPE
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def names(self):
        return list(self.params.keys())


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
):
    """One decoupled-weight-decay Adam update over every parameter in the store.

    Parameters whose gradient slot is None are treated as zero-gradient but
    still receive weight decay; keep frozen modules in a separate store (or
    mask them) to leave them bit-identical.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        store.m[name] = b1 * store.m[name] + (1 - b1) * g
        store.v[name] = b2 * store.v[name] + (1 - b2) * g * g
        m_hat = store.m[name] / (1 - b1**t)
        v_hat = store.v[name] / (1 - b2**t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)


def save_params(stores: dict[str, ParamStore], path: str):
    """Write flat little-endian float32 blob + JSON manifest at path.json.

    stores maps a module name to its ParamStore; entries are saved as
    "<module>/<param>".  Round-trip is bit-exact for float32 stores.
    """
    manifest = []
    offset = 0
    with open(path, "wb") as fh:
        for mod_name, store in stores.items():
            for name, p in store.params.items():
                # note: tobytes() always emits C order; asarray keeps 0-d shapes
                arr = np.asarray(p.data, dtype="<f4")
                fh.write(arr.tobytes())
                manifest.append(
                    {
                        "name": f"{mod_name}/{name}",
                        "shape": list(arr.shape),
                        "offset": offset,
                    }
                )
                offset += arr.nbytes
    with open(path + ".json", "w") as fh:
        json.dump({"entries": manifest, "total_bytes": offset}, fh, indent=1)


def load_params(stores: dict[str, ParamStore], path: str):
    """Load weights saved by save_params into matching-shape parameters."""
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"weights blob is {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    by_name = {}
    for mod_name, store in stores.items():
        for name, p in store.params.items():
            by_name[f"{mod_name}/{name}"] = p
    for entry in manifest["entries"]:
        p = by_name.get(entry["name"])
        if p is None:
            raise ValueError(f"unknown parameter {entry['name']!r} in weights file")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        if tuple(p.data.shape) != shape:
            raise ValueError(
                f"shape mismatch for {entry['name']!r}: store has {p.data.shape}, file has {shape}"
            )
        p.data = arr.astype(p.data.dtype)
