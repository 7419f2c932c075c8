"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray. Operations executed while a
:class:`Tape` is active append their output node to the tape; calling
``tape.backward(root)`` sweeps the tape in exact reverse execution order
and accumulates adjoints into every reachable tensor with
``requires_grad=True``. Custom fused adjoints (used by the splat
renderer) plug in through :class:`Function`.

Everything runs in double precision.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class InvalidArgumentError(ValueError):
    """Raised when operands are malformed (shape mismatch, non-scalar root, ...)."""


class StateError(RuntimeError):
    """Raised when backward is invoked without a matching forward."""


_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: bool = True


class Tape:
    """Ordered record of executed primitive ops for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)/d(root)=1 and sweep recorded nodes in reverse order.

        Adjoints are accumulated (summed) into ``.grad``; leaves keep their
        gradient after the sweep, interior node grads are released.
        """
        if root.data.size != 1:
            raise InvalidArgumentError(
                f"backward root must be scalar, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            grads = node._vjp(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            if node._parents:          # interior node: free its adjoint
                node.grad = None


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result; record on the active tape when gradients flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _active_tape()
    needs = (_GRAD_ENABLED and tape is not None
             and any(p.requires_grad for p in parents))
    if needs:
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        tape._nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    """Elementwise a**p with constant exponent."""
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    """Elementwise |a|; subgradient 0 at a=0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidArgumentError("matmul requires operands with ndim >= 2")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy() / count,)

    return _make(np.asarray(out), (a,), vjp)


def _extreme_reduce(a, axis, fn, argfn) -> Tensor:
    a = as_tensor(a)
    out = fn(a.data, axis=axis)

    if axis is None:
        idx = np.unravel_index(argfn(a.data), a.data.shape)

        def vjp(g):
            z = np.zeros_like(a.data)
            z[idx] = g
            return (z,)
    else:
        idx = argfn(a.data, axis=axis)

        def vjp(g):
            z = np.zeros_like(a.data)
            np.put_along_axis(z, np.expand_dims(idx, axis),
                              np.expand_dims(np.asarray(g), axis), axis)
            return (z,)

    return _make(np.asarray(out), (a,), vjp)


def min_reduce(a, axis=None) -> Tensor:
    """Min over axis; ties route the full subgradient to the lowest index."""
    return _extreme_reduce(a, axis, np.min, np.argmin)


def max_reduce(a, axis=None) -> Tensor:
    """Max over axis; ties route the full subgradient to the lowest index."""
    return _extreme_reduce(a, axis, np.max, np.argmax)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(ts), vjp)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    fancy = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key))

    def vjp(g):
        z = np.zeros_like(a.data)
        if fancy:
            np.add.at(z, key, g)
        else:
            z[key] += g
        return (z,)

    return _make(np.asarray(out), (a,), vjp)


def gather(a, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Select rows/slices by integer index array along axis."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(z, idx, g)
        else:
            zm = np.moveaxis(z, axis, 0)
            np.add.at(zm, idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def swap_last2(a) -> Tensor:
    """Transpose the trailing two axes (batched matrix transpose)."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """L2 norm; subgradient 0 at the origin kink."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        g = np.asarray(g)
        o = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            o = np.expand_dims(o, axis)
        safe = np.where(o > 0.0, o, 1.0)
        return (np.where(o > 0.0, g / safe, 0.0) * a.data,)

    return _make(np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# quaternion ops (x, y, z, w convention)
# ---------------------------------------------------------------------------

def quat_normalize(q) -> Tensor:
    """Normalize quaternions along the last axis."""
    return div(as_tensor(q), norm(q, axis=-1, keepdims=True))


def quat_to_matrix(q) -> Tensor:
    """Unit quaternions (..., 4) -> rotation matrices (..., 3, 3)."""
    q = as_tensor(q)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    two = 2.0
    r00 = 1.0 - two * (mul(y, y) + mul(z, z))
    r01 = two * (mul(x, y) - mul(z, w))
    r02 = two * (mul(x, z) + mul(y, w))
    r10 = two * (mul(x, y) + mul(z, w))
    r11 = 1.0 - two * (mul(x, x) + mul(z, z))
    r12 = two * (mul(y, z) - mul(x, w))
    r20 = two * (mul(x, z) - mul(y, w))
    r21 = two * (mul(y, z) + mul(x, w))
    r22 = 1.0 - two * (mul(x, x) + mul(y, y))
    rows = [stack([r00, r01, r02], axis=-1),
            stack([r10, r11, r12], axis=-1),
            stack([r20, r21, r22], axis=-1)]
    return stack(rows, axis=-2)


def quat_mul(a, b) -> Tensor:
    """Hamilton product; R(a*b) = R(a) @ R(b)."""
    a, b = as_tensor(a), as_tensor(b)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    x = mul(aw, bx) + mul(ax, bw) + mul(ay, bz) - mul(az, by)
    y = mul(aw, by) - mul(ax, bz) + mul(ay, bw) + mul(az, bx)
    z = mul(aw, bz) + mul(ax, by) - mul(ay, bx) + mul(az, bw)
    w = mul(aw, bw) - mul(ax, bx) - mul(ay, by) - mul(az, bz)
    return stack([x, y, z, w], axis=-1)


def quat_conjugate(q) -> Tensor:
    q = as_tensor(q)
    flip = np.array([-1.0, -1.0, -1.0, 1.0])
    return mul(q, constant(flip))


# ---------------------------------------------------------------------------
# custom-adjoint extension point
# ---------------------------------------------------------------------------

class Function:
    """Base for ops with a hand-written (fused) backward.

    Subclasses implement ``forward(ctx, *arrays) -> ndarray`` and
    ``backward(ctx, grad_out) -> tuple`` operating on raw numpy arrays;
    ``apply`` wires them into the tape. ``ctx`` is a plain dict for
    stashing whatever backward needs.
    """

    def forward(self, ctx: dict, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, ctx: dict, grad_out: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors, **kwargs) -> Tensor:
        ts = tuple(as_tensor(t) for t in tensors)
        op = cls(**kwargs) if kwargs else cls()
        ctx: dict = {}
        out = op.forward(ctx, *(t.data for t in ts))
        op._ctx = ctx
        return _make(out, ts, lambda g: op.backward(ctx, g))


# ---------------------------------------------------------------------------
# fixed-kernel valid-mode 2D correlation (used by the differentiable SSIM)
# ---------------------------------------------------------------------------

class _Conv2dValid(Function):
    """Valid-mode correlation of (..., H, W) with a constant 2D kernel."""

    def __init__(self, kernel: np.ndarray):
        self.kernel = np.asarray(kernel, dtype=np.float64)

    def forward(self, ctx, x):
        kh, kw = self.kernel.shape
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(-2, -1))
        ctx["in_shape"] = x.shape
        return np.einsum("...ijkl,kl->...ij", win, self.kernel, optimize=True)

    def backward(self, ctx, g):
        kh, kw = self.kernel.shape
        pad = [(0, 0)] * (len(ctx["in_shape"]) - 2) + [(kh - 1, kh - 1), (kw - 1, kw - 1)]
        gp = np.pad(g, pad)
        win = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(-2, -1))
        gx = np.einsum("...ijkl,kl->...ij", win, self.kernel[::-1, ::-1], optimize=True)
        return (gx,)


def conv2d_valid(x, kernel: np.ndarray) -> Tensor:
    return _Conv2dValid.apply(x, kernel=kernel)


# ---------------------------------------------------------------------------
# optimizer: AdamW with cosine-annealed learning rate
# ---------------------------------------------------------------------------

def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2."""
    if total <= 0:
        return lr_max
    frac = min(max(t / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adaptive moment estimation with decoupled weight decay.

    ``groups`` maps a group name to a dict with keys ``params`` (list of
    (name, Tensor)), ``lr`` (peak rate), and optionally ``lr_min``,
    ``weight_decay``, ``total_steps``, ``schedule`` ("cosine"/"constant").
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, groups: dict):
        self.groups = {}
        self.state: dict[str, dict] = {}
        self.t = 0
        for gname, cfg in groups.items():
            entry = {
                "params": list(cfg["params"]),
                "lr": float(cfg["lr"]),
                "lr_min": float(cfg.get("lr_min", 0.0)),
                "weight_decay": float(cfg.get("weight_decay", 1e-2)),
                "total_steps": int(cfg.get("total_steps", 0)),
                "schedule": cfg.get("schedule", "cosine"),
            }
            self.groups[gname] = entry
            for pname, p in entry["params"]:
                self.state[pname] = {"m": np.zeros_like(p.data),
                                     "v": np.zeros_like(p.data)}

    def current_lr(self, gname: str) -> float:
        g = self.groups[gname]
        if g["schedule"] == "constant" or g["total_steps"] <= 0:
            return g["lr"]
        return cosine_lr(self.t, g["total_steps"], g["lr"], g["lr_min"])

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for _, p in g["params"]:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2, eps = self.BETA1, self.BETA2, self.EPS
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for gname, g in self.groups.items():
            lr = self.current_lr(gname)
            wd = g["weight_decay"]
            for pname, p in g["params"]:
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                st = self.state[pname]
                st["m"] = b1 * st["m"] + (1.0 - b1) * grad
                st["v"] = b2 * st["v"] + (1.0 - b2) * grad * grad
                mhat = st["m"] / bc1
                vhat = st["v"] / bc2
                p.data = p.data - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        for pname, st in self.state.items():
            out[f"{pname}.m"] = st["m"].copy()
            out[f"{pname}.v"] = st["v"].copy()
        return out

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        for pname, st in self.state.items():
            st["m"] = np.array(d[f"{pname}.m"], dtype=np.float64)
            st["v"] = np.array(d[f"{pname}.v"], dtype=np.float64)
