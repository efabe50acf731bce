"""Reverse-mode differentiation over the ops the models use.

A ``Tape`` records each op as it runs (define-by-run). Every recorded ``Var``
keeps its parents and a closure mapping the output gradient to parent
gradients; ``Tape.backward`` walks the record in reverse creation order, which
is a valid topological order because inputs always exist before outputs.

A tape built with ``record=False`` runs the same forward code without keeping
any history, for inference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gconv, tensor
from .gconv import BNState, GConvLayer


class Parameter:
    """A trainable array; ``mask`` zeroes entries the optimizer must not touch."""

    def __init__(self, name: str, data: np.ndarray, mask: np.ndarray | None = None):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=float)
        self.mask = None if mask is None else np.ascontiguousarray(np.broadcast_to(mask, self.data.shape), dtype=float)
        self.grad = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        """Number of free real parameters."""
        return int(self.mask.sum()) if self.mask is not None else self.data.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "param", "tape")

    def __init__(self, data, tape: "Tape | None" = None, parents=(), backward_fn=None, param=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Var] = []
        self.params: dict[str, Parameter] = {}

    def param(self, p: Parameter) -> Var:
        v = Var(p.data, self, param=p)
        if self.record:
            self.params[p.name] = p
            self.nodes.append(v)
        return v

    def constant(self, data) -> Var:
        return Var(np.asarray(data, dtype=float), self)

    def op(self, data, parents: Sequence[Var], backward_fn: Callable) -> Var:
        if not self.record:
            return Var(data, self)
        v = Var(data, self, tuple(parents), backward_fn)
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) into every registered parameter's ``grad``."""
        if not self.record or not self.nodes or loss.tape is not self or loss.backward_fn is None:
            raise RuntimeError("backward called without a recorded forward pass")
        if np.size(loss.data) != 1:
            raise ValueError("loss must be a scalar")
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            if node.param is not None:
                node.param.grad += g if node.param.mask is None else g * node.param.mask
                continue
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not _tracked(parent):
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            node.grad = None
            node.backward_fn = None
        self.nodes = []
        return {name: p.grad for name, p in self.params.items()}


def _tracked(v: Var) -> bool:
    return v.backward_fn is not None or v.param is not None


def _tape(*vs: Var) -> Tape:
    for v in vs:
        if v.tape is not None:
            return v.tape
    return Tape(record=False)


# ---- ops -----------------------------------------------------------------

def conv2d(x: Var, w: Var, padding: str = "same") -> Var:
    out = tensor.conv2d(x.data, w.data, padding)

    def back(g):
        dx, dw = tensor.conv2d_backward(g, x.data, w.data, padding, need_input=_tracked(x))
        return dx, dw

    return _tape(x, w).op(out, (x, w), back)


def add_bias(x: Var, b: Var) -> Var:
    """Add a per-channel bias to (B, C, ...) data."""
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    out = x.data + b.data.reshape(shape)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _tape(x, b).op(out, (x, b), lambda g: (g, g.sum(axis=axes)))


def input_g_conv(x: Var, w: Var, layer: GConvLayer) -> Var:
    k = gconv.input_kernel(w.data, layer.basis, layer.n)
    out = tensor.conv2d(x.data, k)
    B, _, H, W = out.shape
    out = out.reshape(B, layer.out_channels, layer.n, H, W)

    def back(g):
        dx, dk = tensor.conv2d_backward(g.reshape(B, -1, H, W), x.data, k, need_input=_tracked(x))
        return dx, gconv.input_kernel_vjp(dk, layer.basis, layer.n) * layer.mask

    return _tape(x, w).op(out, (x, w), back)


def hidden_g_conv(f: Var, w: Var, layer: GConvLayer) -> Var:
    B, C, n, H, W = f.data.shape
    if n != layer.n or C != layer.in_channels:
        raise gconv.ShapeError(f"feature map {f.data.shape} does not fit layer "
                               f"(C={layer.in_channels}, n={layer.n})")
    k = gconv.hidden_kernel(w.data, layer.basis, n)
    xin = f.data.reshape(B, C * n, H, W)
    out = tensor.conv2d(xin, k).reshape(B, layer.out_channels, n, H, W)

    def back(g):
        dx, dk = tensor.conv2d_backward(g.reshape(B, -1, H, W), xin, k, need_input=_tracked(f))
        if dx is not None:
            dx = dx.reshape(f.data.shape)
        return dx, gconv.hidden_kernel_vjp(dk, layer.basis, n) * layer.mask

    return _tape(f, w).op(out, (f, w), back)


def plain_g_conv(f: Var, w: Var) -> Var:
    """Unconstrained K x K convolution of an n = 1 G-feature map (baseline CNN)."""
    B, C, n, H, W = f.data.shape
    if n != 1:
        raise gconv.ShapeError("plain convolution only applies to n = 1 feature maps")
    xin = f.data.reshape(B, C, H, W)
    out = tensor.conv2d(xin, w.data)

    def back(g):
        dx, dw = tensor.conv2d_backward(g.reshape(out.shape), xin, w.data, need_input=_tracked(f))
        return (None if dx is None else dx.reshape(f.data.shape)), dw

    return _tape(f, w).op(out.reshape(B, -1, 1, H, W), (f, w), back)


def relu(x: Var) -> Var:
    out = np.maximum(x.data, 0.0)
    return _tape(x).op(out, (x,), lambda g: (g * (x.data > 0),))


def max_pool2(x: Var) -> Var:
    """2x2 spatial max-pool of a (B, C, H, W) or (B, C, n, H, W) array."""
    shape = x.data.shape
    planar = x.data.reshape(-1, 1, shape[-2], shape[-1]) if x.data.ndim != 4 else x.data
    out, arg = tensor.max_pool2(planar, return_arg=True)
    out_shape = shape[:-2] + (shape[-2] // 2, shape[-1] // 2)

    def back(g):
        return (tensor.max_pool2_backward(g.reshape(arg.shape), arg).reshape(shape),)

    return _tape(x).op(out.reshape(out_shape), (x,), back)


def bilinear_up2(x: Var) -> Var:
    out = tensor.bilinear_up2(x.data)
    return _tape(x).op(out, (x,), lambda g: (tensor.bilinear_up2_backward(g),))


def g_pool(f: Var) -> Var:
    out, arg = gconv.g_pool(f.data, return_arg=True)
    n = f.data.shape[2]
    return _tape(f).op(out, (f,), lambda g: (gconv.g_pool_backward(g, arg, n),))


def g_concat(fs: Sequence[Var]) -> Var:
    out = gconv.g_concat([f.data for f in fs])
    bounds = np.cumsum([0] + [f.data.shape[1] for f in fs])

    def back(g):
        return tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return _tape(*fs).op(out, tuple(fs), back)


def g_batch_norm(f: Var, gamma: Var, beta: Var, state: BNState, train: bool) -> Var:
    out, cache = gconv.g_batch_norm(f.data, state, gamma.data, beta.data,
                                    mode="train" if train else "eval", return_cache=True)

    def back(g):
        return gconv.g_batch_norm_backward(g, cache)

    return _tape(f, gamma, beta).op(out, (f, gamma, beta), back)


def global_avg(x: Var) -> Var:
    """Mean over the two trailing spatial axes, keeping them as size 1."""
    shape = x.data.shape
    hw = shape[-2] * shape[-1]
    out = x.data.mean(axis=(-2, -1), keepdims=True)
    return _tape(x).op(out, (x,), lambda g: (np.broadcast_to(g / hw, shape).copy(),))


def reshape(x: Var, shape) -> Var:
    old = x.data.shape
    return _tape(x).op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def softmax_cross_entropy(logits: Var, labels) -> tuple[Var, np.ndarray]:
    loss, probs = tensor.softmax_cross_entropy(logits.data, labels)
    shape = logits.data.shape

    def back(g):
        return (float(g) * tensor.softmax_cross_entropy_grad(probs, labels).reshape(shape),)

    return _tape(logits).op(np.array(loss), (logits,), back), probs


def sum_all(x: Var) -> Var:
    shape = x.data.shape
    return _tape(x).op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def weighted_sum(x: Var, weights: np.ndarray) -> Var:
    """``sum(x * weights)`` for a fixed weight array; handy for gradient checks."""
    return _tape(x).op(np.array((x.data * weights).sum()), (x,), lambda g: (float(g) * weights,))


# ---- oracle ----------------------------------------------------------------

def finite_diff(f: Callable[[np.ndarray], float], p: np.ndarray, eps: float = 1e-6,
                mask: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``; ``p`` is restored afterwards."""
    p = np.asarray(p)
    grad = np.zeros(p.shape)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    mflat = None if mask is None else np.broadcast_to(mask, p.shape).reshape(-1)
    for i in range(flat.size):
        if mflat is not None and mflat[i] == 0:
            continue
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(p)
        flat[i] = orig - eps
        fm = f(p)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


# ---- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray] | None,
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[*].data``.

    ``grads`` defaults to each parameter's ``grad``. Masked entries never move.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if p.mask is not None:
            g = g * p.mask
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.mask is not None:
            update *= p.mask
        p.data -= update
    return state


def step_decay(base_lr: float, epoch: int, epochs: int, factor: float = 0.1, at: float = 0.75) -> float:
    """Learning rate for ``epoch`` (0-based): ``base_lr`` until ``at * epochs``, then scaled."""
    return base_lr * factor if epochs > 0 and epoch >= math.ceil(at * epochs) else base_lr
