"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the codec networks and the likelihood losses are
provided. Elementwise binary operations accept a Python scalar or a tensor of
identical shape; anything else must go through :func:`broadcast_to` so shape
errors surface early instead of silently broadcasting.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

__all__ = [
    "ContractError",
    "Tensor",
    "tensor",
    "as_tensor",
    "zeros",
    "conv2d",
    "conv_transpose2d",
    "masked_conv2d",
    "causal_mask",
    "leaky_relu",
    "softplus",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "exp",
    "log",
    "expm1",
    "log_ndtr",
    "softmax",
    "log_softmax",
    "logsumexp",
    "maximum",
    "where",
    "concat",
    "stack",
    "broadcast_to",
    "take",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CHECKPOINT_MAGIC",
]

LEAKY_SLOPE = 0.01
CHECKPOINT_MAGIC = b"SEECW001"


class ContractError(ValueError):
    """Raised when an operation receives arguments violating its shape contract."""


class Tensor:
    """A float64 array that records the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = op

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        parents = tuple(parents)
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every leaf tensor with ``requires_grad``.

        Leaf gradients accumulate across calls; intermediate gradients live only
        for the duration of one call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------
    def _coerce(self, other) -> "Tensor | float":
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                if other.size == 1 and other.ndim == 0:
                    return other
                raise ContractError(f"shape mismatch {self.shape} vs {other.shape}")
            return other
        if np.ndim(other) != 0:
            raise ContractError("only scalars or same-shape tensors may be combined")
        return float(other)

    def __add__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            scalar = other.ndim == 0 and self.ndim != 0

            def bw(g):
                return g, (g.sum() if scalar else g)

            return Tensor._make(self.data + other.data, (self, other), bw, "add")
        return Tensor._make(self.data + other, (self,), lambda g: (g,), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            scalar = other.ndim == 0 and self.ndim != 0

            def bw(g):
                gb = g * a
                return g * b, (gb.sum() if scalar else gb)

            return Tensor._make(a * b, (self, other), bw, "mul")
        c = other
        return Tensor._make(self.data * c, (self,), lambda g: (g * c,), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if isinstance(other, Tensor):
            a, b = self.data, other.data
            scalar = other.ndim == 0 and self.ndim != 0

            def bw(g):
                gb = -g * a / (b * b)
                return g / b, (gb.sum() if scalar else gb)

            return Tensor._make(a / b, (self, other), bw, "div")
        return self * (1.0 / other)

    def __pow__(self, p: float):
        p = float(p)
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),), "pow")

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def bw(g):
            full = np.zeros(shape)
            if _has_advanced(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(self.data[idx], (self,), bw, "slice")

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    """Wrap an array as a constant tensor; tensors pass through unchanged."""
    return x if isinstance(x, Tensor) else Tensor(x)


_as_tensor = as_tensor


# -- unary elementwise -----------------------------------------------------


def _unary(x: Tensor, value: np.ndarray, deriv: np.ndarray, op: str) -> Tensor:
    return Tensor._make(value, (x,), lambda g: (g * deriv,), op)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    a = x.data
    d = np.where(a > 0, 1.0, slope)
    return _unary(x, a * d, d, "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    return _unary(x, np.logaddexp(0.0, a), special.expit(a), "softplus")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return _unary(x, s, s * (1.0 - s), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    a = x.data
    return _unary(x, -np.logaddexp(0.0, -a), special.expit(-a), "log_sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary(x, t, 1.0 - t * t, "tanh")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _unary(x, e, e, "exp")


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), 1.0 / x.data, "log")


def expm1(x: Tensor) -> Tensor:
    return _unary(x, np.expm1(x.data), np.exp(x.data), "expm1")


def log_ndtr(x: Tensor) -> Tensor:
    """log of the standard normal CDF, stable in both tails."""
    a = x.data
    v = special.log_ndtr(a)
    logpdf = -0.5 * a * a - 0.5 * np.log(2.0 * np.pi)
    return _unary(x, v, np.exp(logpdf - v), "log_ndtr")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; the gradient flows where x wins."""
    a = x.data
    return _unary(x, np.maximum(a, floor), (a >= floor).astype(np.float64), "maximum")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or cond.shape != a.shape:
        raise ContractError(f"where() needs equal shapes, got {cond.shape}, {a.shape}, {b.shape}")
    return Tensor._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        "where",
    )


# -- axis ops ---------------------------------------------------------------


def logsumexp(x: Tensor, axis: int) -> Tensor:
    a = x.data
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s
    return Tensor._make(out, (x,), lambda g: (np.expand_dims(g, axis) * w,), "logsumexp")


def log_softmax(x: Tensor, axis: int) -> Tensor:
    a = x.data
    m = a.max(axis=axis, keepdims=True)
    z = a - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._make(
        out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def softmax(x: Tensor, axis: int) -> Tensor:
    a = x.data
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(
        p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax"
    )


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    n = len(xs)
    return Tensor._make(
        np.stack([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape
    unique = np.unique(idx).size == idx.size

    def bw(g):
        full = np.zeros(shape)
        sl = (slice(None),) * (axis % len(shape))
        if unique:
            full[sl + (idx,)] = g
        else:
            np.add.at(full, sl + (idx,), g)
        return (full,)

    return Tensor._make(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the only place tensors of different shape meet."""
    shape = tuple(shape)
    src = x.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ContractError(f"cannot broadcast {src} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(src) if d == 1 and shape[lead + i] != 1
    )

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,), bw, "broadcast")


# -- convolutions -------------------------------------------------------------


def _check_conv(x: Tensor, w: Tensor, in_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv expects 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ContractError(f"channel mismatch: input {x.shape} kernel {w.shape}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel sizes must be odd, got {kh}x{kw}")


def _im2col(xp_cl: np.ndarray, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    """(B, Hp, Wp, C) -> (B*Ho*Wo, kh*kw*C) columns, tap-major."""
    v = sliding_window_view(xp_cl, (kh, kw), axis=(1, 2))[:, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
    # v: (B, Ho, Wo, C, kh, kw)
    B, C = xp_cl.shape[0], xp_cl.shape[3]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)


def _col2im(cols: np.ndarray, shape_cl: tuple, kh: int, kw: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    B, Hp, Wp, C = shape_cl
    c6 = cols.reshape(B, Ho, Wo, kh, kw, C)
    out = np.zeros(shape_cl)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s, :] += c6[:, :, :, i, j, :]
    return out


def _tap_conv(x: Tensor, w: Tensor, b: Tensor | None, taps, pad: int) -> Tensor:
    """Stride-1 convolution that only visits the kernel positions in ``taps``.

    Kernel entries outside ``taps`` are treated as zero and receive zero gradient.
    """
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ContractError(f"input {x.shape} too small for kernel {w.shape} with pad {pad}")
    xcl = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xcl, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xcl
    T = len(taps)
    if T == 1 and Ho == H and Wo == W and taps[0] == (pad, pad):
        cols = np.ascontiguousarray(xcl).reshape(-1, C)
    else:
        cols = np.empty((B, Ho, Wo, T, C))
        for t, (i, j) in enumerate(taps):
            cols[:, :, :, t, :] = xp[:, i : i + Ho, j : j + Wo, :]
        cols = cols.reshape(-1, T * C)
    ti = np.array([i for i, _ in taps])
    tj = np.array([j for _, j in taps])
    wm = w.data[:, :, ti, tj].transpose(0, 2, 1).reshape(O, T * C)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = None
        if x.requires_grad:
            gc = (g2 @ wm).reshape(B, Ho, Wo, T, C)
            gxp = np.zeros(xp.shape)
            for t, (i, j) in enumerate(taps):
                gxp[:, i : i + Ho, j : j + Wo, :] += gc[:, :, :, t, :]
            gx = gxp[:, pad : pad + H, pad : pad + W, :].transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = np.zeros(w.shape)
            gw[:, :, ti, tj] = (g2.T @ cols).reshape(O, T, C).transpose(0, 2, 1)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw, "conv2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation. x: (B,C,H,W), w: (O,C,kh,kw), b: (O,)."""
    _check_conv(x, w, 1)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s = int(stride)
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ContractError(f"input {x.shape} too small for kernel {w.shape} with pad {pad}")
    if s == 1:
        return _tap_conv(x, w, b, [(i, j) for i in range(kh) for j in range(kw)], pad)
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, kh, kw, s, Ho, Wo)
    wm = w.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = None
        if x.requires_grad:
            gxp = _col2im(g2 @ wm, xp.shape, kh, kw, s, Ho, Wo)
            gx = gxp[:, pad : pad + H, pad : pad + W, :].transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw, "conv2d")


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 2,
    pad: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). w: (C_in, O, kh, kw)."""
    _check_conv(x, w, 0)
    B, C, H, W = x.shape
    _, O, kh, kw = w.shape
    s = int(stride)
    Hf = (H - 1) * s + kh + output_padding
    Wf = (W - 1) * s + kw + output_padding
    Ho, Wo = Hf - 2 * pad, Wf - 2 * pad
    if Ho <= 0 or Wo <= 0:
        raise ContractError("transposed conv output would be empty")
    xc = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wm = w.data.transpose(0, 2, 3, 1).reshape(C, -1)
    full = _col2im(xc @ wm, (B, Hf, Wf, O), kh, kw, s, H, W)
    out = full[:, pad : pad + Ho, pad : pad + Wo, :]
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gf = np.zeros((B, Hf, Wf, O))
        gf[:, pad : pad + Ho, pad : pad + Wo, :] = g.transpose(0, 2, 3, 1)
        cols = _im2col(gf, kh, kw, s, H, W)
        gx = gw = None
        if x.requires_grad:
            gx = (cols @ wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xc.T @ cols).reshape(C, kh, kw, O).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, bw, "conv_transpose2d")


def causal_mask(kh: int, kw: int, mask_type: str) -> np.ndarray:
    """Spatial raster-order mask. Type A drops the centre tap, type B keeps it."""
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"masked kernels must have odd sizes, got {kh}x{kw}")
    if mask_type not in ("A", "B"):
        raise ContractError(f"mask_type must be 'A' or 'B', got {mask_type!r}")
    m = np.ones((kh, kw))
    ch, cw = kh // 2, kw // 2
    start = cw if mask_type == "A" else cw + 1
    m[ch, start:] = 0.0
    m[ch + 1 :, :] = 0.0
    return m


def masked_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, mask_type: str = "A") -> Tensor:
    """Same-size stride-1 convolution restricted to raster-earlier taps."""
    _check_conv(x, w, 1)
    kh, kw = w.shape[2:]
    m = causal_mask(kh, kw, mask_type)
    return _tap_conv(x, w, b, [tuple(t) for t in np.argwhere(m > 0)], kh // 2)


# -- checkpoints ----------------------------------------------------------------


def checkpoint_bytes(params: dict[str, np.ndarray]) -> bytes:
    """Canonical serialization: magic, then per tensor (sorted by name)
    u32 name length, name, u32 ndim, u32 dims, float64 LE values."""
    parts = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f8"))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            end = pos + 8 * count
            if end > len(blob):
                raise ValueError("truncated checkpoint")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
            pos = end
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return out


def save_checkpoint(path, params: dict[str, np.ndarray]) -> bytes:
    blob = checkpoint_bytes(params)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
