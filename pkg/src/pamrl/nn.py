"""Small reverse-mode autodiff engine on float64 numpy arrays.

Every trainable piece of the package (actors, critic, adapters, context
tokens) is built from :class:`Tensor`, :class:`Mlp` and :class:`Adam`.

A forward pass records, on each produced tensor, its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks that
record once in reverse topological order and then releases it, so calling
it twice on the same output raises.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class GraphError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` are parameters: they own
    a ``grad`` buffer of identical shape that ``backward`` accumulates into.
    Tensors with ``requires_grad=False`` never get a buffer.
    """

    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if grad_enabled():
            tracked = tuple(p for p in parents if p.requires_grad)
            if tracked:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
        return out

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {self.shape}")
        if self._released:
            raise GraphError("graph already released; run the forward pass again")
        if not self.requires_grad:
            raise GraphError("output does not depend on any tracked tensor")
        if self._backward is None:
            # leaf scalar parameter
            self.grad = (self.grad if self.grad is not None else 0.0) + np.ones_like(self.data)
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(pg, p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        out = a**exponent
        return Tensor._make(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b)
                gb = np.tensordot(a, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim))))
                return ga, gb
            if a.ndim == 1:
                return g @ b.T, np.outer(a, g)
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            if gb.ndim > b.ndim:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
            return ga, gb

        return Tensor._make(a @ b, (self, other), back)

    # -- reductions / shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self) -> "Tensor":
        return Tensor._make(
            np.swapaxes(self.data, -1, -2), (self,), lambda g: (np.swapaxes(g, -1, -2),)
        )

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), back)

    # -- elementwise nonlinearities -------------------------------------------
    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0.0, a)
        sig = 0.5 * (1.0 + np.tanh(0.5 * a))
        return Tensor._make(out, (self,), lambda g: (g * sig,))

    def clip(self, lo: float, hi: float) -> "Tensor":
        a = self.data
        mask = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * mask,))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def back(g):
        full = np.zeros((rows,) + g.shape[ids.ndim:], dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Dense networks


ACTIVATIONS = ("tanh", "identity")


class Mlp:
    """Stack of dense layers; ``activation`` is applied between layers only.

    The last layer is always linear. With ``trainable=False`` the weights are
    plain tensors: gradients still flow *through* the network to its input,
    but never accumulate on the weights.
    """

    def __init__(self, sizes, rng: np.random.Generator, activation: str = "tanh",
                 trainable: bool = True, name: str = "mlp"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.trainable = trainable
        self.name = name
        self.layers: list[tuple[Tensor, Tensor]] = []
        for k, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = Tensor(xavier_uniform(rng, n_in, n_out), requires_grad=trainable, name=f"{name}.w{k}")
            b = Tensor(np.zeros(n_out), requires_grad=trainable, name=f"{name}.b{k}")
            self.layers.append((w, b))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input width {self.in_dim}, got {x.shape[-1]}")
        last = len(self.layers) - 1
        for k, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if k < last and self.activation == "tanh":
                x = x.tanh()
        return x

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    def freeze(self) -> None:
        self.trainable = False
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None

    def state_dict(self, prefix: str | None = None) -> dict[str, np.ndarray]:
        prefix = self.name if prefix is None else prefix
        out = {}
        for k, (w, b) in enumerate(self.layers):
            out[f"{prefix}.w{k}"] = w.data
            out[f"{prefix}.b{k}"] = b.data
        return out

    def load_state_dict(self, state: dict, prefix: str | None = None) -> None:
        prefix = self.name if prefix is None else prefix
        for k, (w, b) in enumerate(self.layers):
            for t, key in ((w, f"{prefix}.w{k}"), (b, f"{prefix}.b{k}")):
                arr = np.asarray(state[key], dtype=DTYPE)
                if arr.shape != t.shape:
                    raise ValueError(f"{key}: shape {arr.shape} != {t.shape}")
                t.data = arr.copy()

    def copy_from(self, other: "Mlp") -> None:
        for (w, b), (ow, ob) in zip(self.layers, other.layers):
            w.data = ow.data.copy()
            b.data = ob.data.copy()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` entries may be ``None`` (treated as zero). Parameters whose
    ``requires_grad`` is False are left untouched.
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {p.name}: {g.shape} vs {p.shape}")
        if not p.requires_grad:
            continue
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class Adam:
    """Optimizer bound to a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(f, x: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor that depends
    on ``x``. The error per coordinate is ``|a - n| / max(1, |n|)``. ``coords``
    optionally restricts the check to a subset of flat indices. A frozen
    ``x`` has no analytic gradient; it is reported as zero.
    """
    x.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("objective is not finite")
    if out.requires_grad:
        out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"objective not finite around coordinate {i}")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    x.grad = None
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: 8-byte magic "PAMRLCK1", little-endian uint64 header length, UTF-8
# JSON header {"version": 1, "tensors": {key: {"shape": [...], "offset": n}}},
# then the concatenated float64 little-endian payloads in header order.

MAGIC = b"PAMRLCK1"


def save_checkpoint(path, tensors: dict) -> None:
    entries = {}
    blobs = []
    offset = 0
    for key in sorted(tensors):
        arr = np.asarray(tensors[key], dtype="<f8")
        entries[key] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"version": 1, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    out = {}
    for key, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = base + meta["offset"]
        out[key] = np.frombuffer(raw[start : start + 8 * n], dtype="<f8").reshape(shape).astype(DTYPE)
    return out


def tensor_hash(arrays) -> str:
    """Stable digest of a sequence of arrays (used to verify immutability)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a.data if isinstance(a, Tensor) else a, dtype=DTYPE))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
