"""Dense tensors with a minimal reverse-mode differentiation kernel.

The op set is closed: conv2d, batchnorm2d, linear, the activations, a few
elementwise/shape ops, and full reductions. Every differentiable op records
a backward closure on the output tensor; ``backward`` walks the tape in
reverse topological order. ``grad_check`` provides the independent
finite-difference oracle used throughout the test suite.

Storage is float32 by default; gradient checks run in float64 because batch
normalization makes single-precision central differences unreliable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "log",
    "clip",
    "sigmoid",
    "gelu",
    "relu",
    "linear",
    "conv2d",
    "batchnorm2d",
    "upsample2x_nearest",
    "avgpool2x2",
    "concat",
    "reshape",
    "permute",
    "tsum",
    "tmean",
    "backward",
    "grad_check",
    "GradCheckReport",
]

# tanh-form GeLU; the constant is fixed so independent implementations agree
GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    Tensors produced by ops are treated as immutable; leaves created with
    ``requires_grad=True`` accumulate into ``grad`` when ``backward`` runs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data, _op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ValueError(f"mixed dtypes {dt} vs {t.dtype}")


# -- elementwise ops -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make(out, (a,), bw, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through unclamped entries."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * inside,)

    return _make(out, (a,), bw, "clip")


# -- activations ----------------------------------------------------------------


def _sigmoid_nd(x: np.ndarray) -> np.ndarray:
    # evaluated piecewise so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_nd(a.data)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), bw, "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GeLU: 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + GELU_C * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), bw, "relu")


# -- linear / conv / norm ---------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., o] = sum_i x[..., i] * w[o, i] + b[o], over any leading dims."""
    _same_dtype(x, w)
    cin = x.shape[-1]
    if w.data.ndim != 2 or w.shape[1] != cin:
        raise ValueError(f"weight shape {w.shape} incompatible with input {x.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} incompatible with weight {w.shape}")
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, cin)
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


def _im2col(xp: np.ndarray, kh: int, kw: int, dilation: int) -> np.ndarray:
    """View of sliding windows: [N, C, H', W', kh, kw] over a padded input."""
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    return win[..., ::dilation, ::dilation]


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of NCHW input with [K, C, kh, kw] kernels.

    Odd kernels only; padding (k-1)/2 * dilation preserves the spatial shape.
    """
    _same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and KCkk kernel")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sides must be odd, got {kh}x{kw}")
    if cw != c:
        raise ValueError(f"kernel expects {cw} channels, input has {c}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape}, expected ({k},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = _im2col(xp, kh, kw, dilation)  # [N, C, H', W', kh, kw]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', K]
    out = np.moveaxis(out, 3, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    oh, ow = out.shape[2], out.shape[3]

    def bw(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # [K, C, kh, kw]
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # [N, H', W', C, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * dilation : i * dilation + oh, j * dilation : j * dilation + ow] += np.moveaxis(
                    gcols[..., i, j], 3, 1
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bw, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Train mode normalizes by batch statistics and updates the running
    buffers in place (the one sanctioned leaf mutation); eval mode is a pure
    function of the running statistics.
    """
    _same_dtype(x, gamma, beta)
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ValueError(f"{name} shape {t.shape}, expected ({c},)")
    if np.any(running_var.data < 0):
        raise ValueError("negative running variance")

    if training:
        if n == 0:
            raise ValueError("batchnorm2d train mode on an empty batch")
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = xc * ivar[None, :, None, None]
        # running stats use the unbiased variance, as is conventional
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * unbiased
    else:
        ivar = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None, None]) * ivar[None, :, None, None]
        m = None

    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (ivar[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * ivar[None, :, None, None]
        return gx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm2d")


# -- shape / sampling ops ----------------------------------------------------------


def upsample2x_nearest(a: Tensor) -> Tensor:
    if a.data.ndim != 4:
        raise ValueError("upsample2x_nearest expects NCHW")
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), bw, "upsample2x_nearest")


def avgpool2x2(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x2 needs even spatial dims, got {h}x{w}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return ((g.repeat(2, axis=2).repeat(2, axis=3)) * 0.25,)

    return _make(out, (a,), bw, "avgpool2x2")


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    _same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), bw, "permute")


def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    out = a.data.mean()
    n = a.data.size

    def bw(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _make(np.asarray(out), (a,), bw, "mean")


# -- reverse pass --------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The recorded graph is walked once in reverse topological order;
    intermediate gradients are discarded. A graph can be consumed only once.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(np.broadcast_to(g, node.shape))
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._consumed = True
    loss._consumed = True


# -- finite-difference oracle -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int

    def __bool__(self) -> bool:
        return self.passed


def grad_check(
    f,
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f(x)`` to central differences.

    Requires float64 input. The relative error of entry i is
    |g_i - fd_i| / max(|g_i|, |fd_i|, floor); the check passes when the
    maximum over checked entries is below ``tol``. ``sample`` limits the
    check to a seeded random subset of coordinates for large tensors.
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 input tensor")

    base = x.data.copy()

    def eval_scalar(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr))
        return float(np.asarray(out.data).reshape(()))

    v1 = eval_scalar(base)
    v2 = eval_scalar(base)
    if v1 != v2:
        raise RuntimeError("non-deterministic function detected: repeated evaluation mismatch")

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    if leaf.grad is None:
        raise RuntimeError("function produced no gradient for the checked tensor")
    analytic = leaf.grad.reshape(-1)

    n = base.size
    if sample is not None and sample < n:
        idx = np.random.default_rng(seed).choice(n, size=sample, replace=False)
        idx.sort()
    else:
        idx = np.arange(n)

    flat = base.reshape(-1)
    max_rel = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = eval_scalar(base)
        flat[i] = orig - h
        fm = eval_scalar(base)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        a = analytic[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), floor)
        if rel > max_rel:
            max_rel = rel
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, n_checked=len(idx))
