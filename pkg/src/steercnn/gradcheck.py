"""Finite-difference checks for every differentiable op and a small composed model.

Each check builds a tiny random problem, reduces the op output to a scalar with
a fixed random weighting, and compares tape gradients against central
differences. The reported figure is ``relative_error`` over all checked entries
of all inputs together.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .basis import build_basis
from .gconv import BNState, GConvLayer
from .model import ModelConfig, build_classifier

EPS = 1e-6
TOLERANCE = 1e-5


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + gap, x - gap)


def _distinct(rng, shape, gap=1e-3):
    # a random permutation of well-separated values, so max-style ops have no near-ties
    vals = np.arange(int(np.prod(shape))) * gap * 10
    return rng.permutation(vals).reshape(shape) - vals.mean()


def check(build: Callable[[dict[str, ad.Var]], ad.Var], inputs: dict[str, np.ndarray],
          rng: np.random.Generator, masks: dict[str, np.ndarray] | None = None,
          eps: float = EPS, max_entries: int | None = None) -> float:
    """Relative error between tape and finite-difference gradients of ``build``."""
    masks = masks or {}
    params = {k: ad.Parameter(k, v, masks.get(k)) for k, v in inputs.items()}
    probe = build({k: ad.Tape(record=False).param(p) for k, p in params.items()})
    weights = rng.normal(size=np.shape(probe.data))

    def scalar() -> float:
        tape = ad.Tape(record=False)
        return float(ad.weighted_sum(build({k: tape.param(p) for k, p in params.items()}), weights).data)

    tape = ad.Tape()
    loss = ad.weighted_sum(build({k: tape.param(p) for k, p in params.items()}), weights)
    grads = tape.backward(loss)
    analytic, numeric = [], []
    for name, p in params.items():
        sel = np.ones(p.data.shape, bool) if p.mask is None else p.mask > 0
        if max_entries is not None and sel.sum() > max_entries:
            flat = np.flatnonzero(sel)
            keep = rng.choice(flat, max_entries, replace=False)
            sel = np.zeros(p.data.size, bool)
            sel[keep] = True
            sel = sel.reshape(p.data.shape)
        num = ad.finite_diff(lambda _: scalar(), p.data, eps, sel.astype(float))
        analytic.append(grads.get(name, np.zeros(p.data.shape))[sel])
        numeric.append(num[sel])
    return ad.relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _conv2d(rng):
    return check(lambda v: ad.conv2d(v["x"], v["w"]),
                 {"x": rng.normal(size=(2, 3, 6, 5)), "w": rng.normal(size=(4, 3, 3, 3))}, rng)


def _conv2d_valid(rng):
    return check(lambda v: ad.conv2d(v["x"], v["w"], padding="valid"),
                 {"x": rng.normal(size=(2, 2, 6, 7)), "w": rng.normal(size=(3, 2, 3, 5))}, rng)


def _add_bias(rng):
    return check(lambda v: ad.add_bias(v["x"], v["b"]),
                 {"x": rng.normal(size=(2, 3, 2, 4, 4)), "b": rng.normal(size=3)}, rng)


def _input_g_conv(rng):
    layer = GConvLayer.random(build_basis(size=5), 2, 3, 4, True, rng)
    return check(lambda v: ad.input_g_conv(v["x"], v["w"], layer),
                 {"x": rng.normal(size=(2, 2, 6, 6)), "w": layer.weights.copy()}, rng,
                 masks={"w": layer.mask})


def _hidden_g_conv(rng):
    layer = GConvLayer.random(build_basis(size=5), 2, 2, 4, False, rng)
    return check(lambda v: ad.hidden_g_conv(v["f"], v["w"], layer),
                 {"f": rng.normal(size=(2, 2, 4, 5, 5)), "w": layer.weights.copy()}, rng,
                 masks={"w": layer.mask})


def _plain_g_conv(rng):
    return check(lambda v: ad.plain_g_conv(v["f"], v["w"]),
                 {"f": rng.normal(size=(2, 3, 1, 5, 5)), "w": rng.normal(size=(2, 3, 3, 3))}, rng)


def _relu(rng):
    return check(lambda v: ad.relu(v["x"]), {"x": _away_from_zero(rng, (2, 3, 4, 4))}, rng)


def _max_pool2(rng):
    return check(lambda v: ad.max_pool2(v["x"]), {"x": _distinct(rng, (2, 2, 3, 4, 6))}, rng)


def _bilinear_up2(rng):
    return check(lambda v: ad.bilinear_up2(v["x"]), {"x": rng.normal(size=(2, 2, 3, 3, 4))}, rng)


def _g_pool(rng):
    return check(lambda v: ad.g_pool(v["f"]), {"f": _distinct(rng, (2, 3, 4, 3, 3))}, rng)


def _g_concat(rng):
    return check(lambda v: ad.g_concat([v["a"], v["b"]]),
                 {"a": rng.normal(size=(2, 1, 4, 3, 3)), "b": rng.normal(size=(2, 2, 4, 3, 3))}, rng)


def _g_batch_norm_train(rng):
    def build(v):
        return ad.g_batch_norm(v["f"], v["gamma"], v["beta"], BNState.create(3), train=True)
    return check(build, {"f": rng.normal(size=(3, 3, 4, 3, 3)), "gamma": rng.normal(size=3),
                         "beta": rng.normal(size=3)}, rng)


def _g_batch_norm_eval(rng):
    state = BNState(rng.normal(size=3), rng.uniform(0.5, 2.0, 3), steps=1)

    def build(v):
        return ad.g_batch_norm(v["f"], v["gamma"], v["beta"], state, train=False)
    return check(build, {"f": rng.normal(size=(2, 3, 4, 3, 3)), "gamma": rng.normal(size=3),
                         "beta": rng.normal(size=3)}, rng)


def _global_avg(rng):
    return check(lambda v: ad.global_avg(v["x"]), {"x": rng.normal(size=(2, 3, 4, 5))}, rng)


def _reshape(rng):
    return check(lambda v: ad.reshape(v["x"], (2, 12)), {"x": rng.normal(size=(2, 3, 4))}, rng)


def _softmax_cross_entropy(rng):
    labels = rng.integers(0, 5, size=4)
    return check(lambda v: ad.softmax_cross_entropy(v["z"], labels)[0],
                 {"z": rng.normal(size=(4, 5))}, rng)


def _sum_all(rng):
    return check(lambda v: ad.sum_all(v["x"]), {"x": rng.normal(size=(3, 4))}, rng)


TOY_MODEL = ModelConfig(n=4, block_units=(1, 1), width=0.125, head_hidden=(32, 32))


def _model(rng, max_entries: int | None = 4):
    """Two dense blocks, n = 4, batch-norm in training mode, loss = cross-entropy."""
    model = build_classifier(TOY_MODEL, seed=int(rng.integers(1 << 30)))
    x = rng.uniform(0.0, 1.0, size=(3, 1, 8, 8))
    labels = np.array([0, 3, 7])
    params = model.params

    def scalar() -> float:
        for st in model.bn.values():
            st.steps = 0
        out = model.forward(x, ad.Tape(record=False), train=True)
        return float(ad.softmax_cross_entropy(out, labels)[0].data)

    tape = ad.Tape()
    loss, _ = ad.softmax_cross_entropy(model.forward(x, tape, train=True), labels)
    grads = tape.backward(loss)
    analytic, numeric = [], []
    for name, p in params.items():
        sel = np.ones(p.data.shape, bool) if p.mask is None else p.mask > 0
        if max_entries is not None and sel.sum() > max_entries:
            keep = rng.choice(np.flatnonzero(sel), max_entries, replace=False)
            sel = np.zeros(p.data.size, bool)
            sel[keep] = True
            sel = sel.reshape(p.data.shape)
        num = ad.finite_diff(lambda _: scalar(), p.data, EPS, sel.astype(float))
        analytic.append(grads[name][sel])
        numeric.append(num[sel])
    return ad.relative_error(np.concatenate(analytic), np.concatenate(numeric))


OPS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": _conv2d,
    "conv2d_valid": _conv2d_valid,
    "add_bias": _add_bias,
    "input_g_conv": _input_g_conv,
    "hidden_g_conv": _hidden_g_conv,
    "plain_g_conv": _plain_g_conv,
    "relu": _relu,
    "max_pool2": _max_pool2,
    "bilinear_up2": _bilinear_up2,
    "g_pool": _g_pool,
    "g_concat": _g_concat,
    "g_batch_norm_train": _g_batch_norm_train,
    "g_batch_norm_eval": _g_batch_norm_eval,
    "global_avg": _global_avg,
    "reshape": _reshape,
    "softmax_cross_entropy": _softmax_cross_entropy,
    "sum_all": _sum_all,
    "model": _model,
}


def run(names=None, seed: int = 0) -> dict[str, float]:
    names = list(OPS) if names is None else list(names)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}")
    return {name: OPS[name](np.random.default_rng([seed, i])) for i, name in enumerate(names)}
