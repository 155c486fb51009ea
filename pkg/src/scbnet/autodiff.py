"""Minimal reverse-mode automatic differentiation over NCHW arrays.

Only the operations the network needs are provided. Every op takes and
returns :class:`Tensor` objects; when gradient recording is enabled and any
input requires a gradient, the output keeps a reference to its parents and a
closure mapping the upstream gradient to gradients for each parent.

Dtype follows the inputs: float32 arrays train, float64 arrays are used by
:func:`grad_check`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Array plus the bookkeeping needed for backpropagation.

    Leaf tensors (created by the user) receive ``.grad`` after
    :meth:`backward`; intermediate gradients are discarded once consumed.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this tensor; scalar outputs default to grad 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = graph_nodes(self)
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def graph_nodes(root: Tensor) -> List[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
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


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, attaching ``backward`` only when a graph is needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected 4-D (batch, channels, height, width), got shape {x.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (broadcastable to ``a``; gradient flows to ``a`` only)."""
    arr = np.asarray(arr, dtype=a.dtype)
    return make_node(a.data * arr, (a,), lambda g: (g * arr,), "mul_const")


def expand_channels(x: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map across ``channels``."""
    _check_4d(x, "expand_channels")
    if x.shape[1] != 1:
        raise ShapeError(f"expand_channels: input must have 1 channel, got {x.shape[1]}")
    out = np.repeat(x.data, channels, axis=1)
    return make_node(out, (x,), lambda g: (g.sum(axis=1, keepdims=True),), "expand_channels")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(x.dtype)
    return make_node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softmax_channels(x: Tensor) -> Tensor:
    _check_4d(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (x,), backward, "softmax_channels")


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for x in xs:
        _check_4d(x, "concat_channels")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: batch/spatial mismatch {ref} vs {x.shape}")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return make_node(out, xs, lambda g: tuple(np.split(g, splits, axis=1)), "concat_channels")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).astype(x.dtype),), "sum")


def weighted_sum(xs: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Linear combination of same-shape tensors with constant weights."""
    if len(xs) != len(weights) or not xs:
        raise ShapeError("weighted_sum: need one weight per tensor")
    out = sum(w * x.data for w, x in zip(weights, xs))
    out = np.asarray(out, dtype=xs[0].dtype)
    return make_node(out, tuple(xs), lambda g: tuple(w * g for w in weights), "weighted_sum")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d weight")
    B, C, H, W = x.shape
    kout, kin, kh, kw = w.shape
    if C != kin:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects kin={kin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got kh={kh}, kw={kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if b is not None and b.shape != (kout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kout={kout}")
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")

    wmat = w.data.reshape(kout, -1)
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, oh, ow, kout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, kout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = gmat @ wmat
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                gx = np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(B, oh, ow, C, kh, kw)
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- pooling / resampling

def _window_argmax(xp: np.ndarray, k: int, stride: int, oh: int, ow: int):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _route_to_argmax(g: np.ndarray, idx: np.ndarray, k: int, stride: int, padded_shape) -> np.ndarray:
    oh, ow = idx.shape[2:]
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            hit = idx == (i * k + j)
            if hit.any():
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.where(hit, g, 0)
    return gxp


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    _check_4d(x, "maxpool2d")
    B, C, H, W = x.shape
    if H % stride or W % stride:
        raise ShapeError(f"maxpool2d: spatial dims {H}x{W} not divisible by stride {stride}")
    oh, ow = (H - k) // stride + 1, (W - k) // stride + 1
    out, idx = _window_argmax(x.data, k, stride, oh, ow)

    def backward(g):
        return (_route_to_argmax(g, idx, k, stride, x.shape),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def max_filter2d(x: Tensor, k: int) -> Tensor:
    """Same-size k x k sliding maximum; border windows are clipped to the image."""
    _check_4d(x, "max_filter2d")
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"max_filter2d: window size must be odd and >= 1, got {k}")
    if k == 1:
        return make_node(x.data.copy(), (x,), lambda g: (g,), "max_filter2d")
    r = k // 2
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)), constant_values=-np.inf)
    out, idx = _window_argmax(xp, k, 1, H, W)

    def backward(g):
        gxp = _route_to_argmax(g, idx, k, 1, xp.shape)
        return (gxp[:, :, r:r + H, r:r + W],)

    return make_node(np.ascontiguousarray(out), (x,), backward, "max_filter2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_4d(x, "upsample_nearest2x")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward, "upsample_nearest2x")


# ---------------------------------------------------------------- normalization

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (``running = momentum * running +
    (1 - momentum) * batch``). Otherwise the running statistics are used.
    """
    _check_4d(x, "batchnorm2d")
    B, C, H, W = x.shape
    if B * H * W == 0:
        raise ShapeError("batchnorm2d: zero-size batch")
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if np.shape(arr) != (C,):
            raise ShapeError(f"batchnorm2d: {name} has shape {np.shape(arr)}, expected ({C},)")
    gd = gamma.data.reshape(1, C, 1, 1)
    if training:
        n = B * H * W
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, C, 1, 1)
    xhat = (x.data - mu.astype(x.dtype).reshape(1, C, 1, 1)) * inv
    out = gd * xhat + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gd
            if training:
                n = B * H * W
                gx = inv / n * (n * gxh - gxh.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = gxh * inv
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> Dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters without an entry in ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: List[float]
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm error scaled by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def grad_check(fn: Callable[..., Tensor], inputs: Union[Tensor, Sequence[Tensor]], eps: float = 1e-4,
               seed: int = 0, max_coords: Optional[int] = None) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` with central finite differences.

    The output of ``fn(*inputs)`` is reduced to a scalar by a fixed random
    projection (seeded), which keeps the check meaningful for outputs whose
    plain sum is constant, such as softmax. Inputs are cast to float64.
    ``max_coords`` limits the number of randomly chosen coordinates checked
    per input.

    ``max_rel_error`` scales the largest absolute discrepancy by the largest
    gradient magnitude over all inputs together; per-input figures are kept
    for diagnosis but are meaningless for inputs whose true gradient is zero
    (a conv bias feeding a training-mode batch norm, for example).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    # salted so the projection never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x9E3779B9])
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape) if out.data.ndim else np.ones(())

    def scalar() -> float:
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    out.backward(proj.astype(out.dtype))
    errors = []
    pairs = []
    n_checked = 0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.zeros(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * eps)
        errors.append(rel_error(analytic.reshape(-1)[coords], numeric))
        pairs.append((analytic.reshape(-1)[coords], numeric))
        n_checked += len(coords)
    if not pairs:
        return GradCheckReport(0.0, errors, 0)
    overall = rel_error(np.concatenate([a for a, _ in pairs]), np.concatenate([n for _, n in pairs]))
    return GradCheckReport(overall, errors, n_checked)
