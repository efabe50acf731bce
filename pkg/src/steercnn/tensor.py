"""Dense float64 planar ops on (B, C, H, W) arrays.

Convolution is cross-correlation (no kernel flip) with stride 1, computed as
im2col into a (C*kh*kw, B*Ho*Wo) buffer followed by a single GEMM. The batch
is processed in chunks so the unfolded buffer stays bounded.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels

# upper bound on the im2col buffer, in float64 elements (about 32 MB)
_COLS_BUDGET = 4_000_000


class ShapeError(ValueError):
    pass


def _pad_amount(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _padded(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph:ph + H, pw:pw + W] = x
    return xp


def _chunks(batch: int, per_sample: int):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    for start in range(0, batch, step):
        yield slice(start, min(batch, start + step))


def _check_conv(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernels expect {w.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {w.shape[2:]}")


def conv2d(x: np.ndarray, w: np.ndarray, padding: str = "same") -> np.ndarray:
    """``out[b, o, y, x] = sum_{c,a,d} in[b, c, y + a - ph, x + d - pw] * w[o, c, a, d]``."""
    _check_conv(x, w)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, kw, padding)
    xp = _padded(x, ph, pw)
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    wm = w.reshape(O, C * kh * kw)
    out = np.empty((B, O, Ho * Wo))
    if kh == 1 and kw == 1:
        np.matmul(wm, xp.reshape(B, C, H * W), out=out)
        return out.reshape(B, O, Ho, Wo)
    rows = C * kh * kw
    for sl in _chunks(B, rows * Ho * Wo):
        nb = sl.stop - sl.start
        cols = np.empty((rows, nb * Ho * Wo))
        kernels.im2col(xp[sl], kh, kw, cols)
        out[sl] = (wm @ cols).reshape(O, nb, Ho * Wo).transpose(1, 0, 2)
    return out.reshape(B, O, Ho, Wo)


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, padding: str = "same",
                    need_input: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of ``conv2d`` with respect to input and kernels."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, kw, padding)
    Ho, Wo = dout.shape[2], dout.shape[3]
    wm = w.reshape(O, C * kh * kw)
    dom = np.ascontiguousarray(dout).reshape(B, O, Ho * Wo)
    if kh == 1 and kw == 1:
        xm = x.reshape(B, C, H * W)
        dw = np.einsum("bop,bcp->oc", dom, xm).reshape(w.shape)
        dx = np.matmul(wm.T, dom).reshape(x.shape) if need_input else None
        return dx, dw
    xp = _padded(x, ph, pw)
    rows = C * kh * kw
    dw = np.zeros((O, rows))
    for sl in _chunks(B, rows * Ho * Wo):
        nb = sl.stop - sl.start
        cols = np.empty((rows, nb * Ho * Wo))
        kernels.im2col(xp[sl], kh, kw, cols)
        dw += dom[sl].transpose(1, 0, 2).reshape(O, nb * Ho * Wo) @ cols.T
    dx = None
    if need_input:
        # the input gradient is a correlation of dout with the flipped,
        # channel-transposed kernel; this unfolds O*kh*kw rows instead of C*kh*kw
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dp = _padded(dout, kh - 1 - ph, kw - 1 - pw)
        dx = conv2d(dp, wf, padding="valid")
    return dx, dw.reshape(w.shape)


def conv2d_reference(x: np.ndarray, w: np.ndarray, padding: str = "same") -> np.ndarray:
    """Direct-sum cross-correlation; slow, used as a test oracle."""
    _check_conv(x, w)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = _pad_amount(kh, kw, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for d in range(kw):
                                acc += xp[b, c, y + a, xx + d] * w[o, c, a, d]
                    out[b, o, y, xx] = acc
    return out


def rot90(t: np.ndarray, quarter_turns: int = 1) -> np.ndarray:
    """Counter-clockwise rotation of the last two axes by ``quarter_turns * 90`` degrees."""
    return np.ascontiguousarray(np.rot90(t, quarter_turns % 4, axes=(-2, -1)))


def rotate_interp(t: np.ndarray, theta: float, mode: str = "zero") -> np.ndarray:
    """Bilinear rotation of the last two axes about the grid centre.

    Positive ``theta`` is counter-clockwise on screen, matching ``rot90``.
    Samples falling outside the grid read 0 (``mode="zero"``) or the nearest
    edge pixel (``mode="edge"``).
    """
    if mode not in ("zero", "edge"):
        raise ValueError(f"mode must be 'zero' or 'edge', got {mode!r}")
    t = np.asarray(t, dtype=float)
    H, W = t.shape[-2:]
    if theta == 0:
        return t.copy()
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    y, x = np.mgrid[0:H, 0:W].astype(float)
    # math coordinates (x right, y up) of each output pixel, rotated back by -theta
    u, v = x - cx, cy - y
    cos, sin = math.cos(theta), math.sin(theta)
    su = cos * u + sin * v
    sv = -sin * u + cos * v
    sx, sy = su + cx, cy - sv
    # snap round-off so lattice-exact rotations sample lattice points exactly
    rx, ry = np.round(sx), np.round(sy)
    sx = np.where(np.abs(sx - rx) < 1e-9, rx, sx)
    sy = np.where(np.abs(sy - ry) < 1e-9, ry, sy)
    if mode == "edge":
        sx, sy = np.clip(sx, 0, W - 1), np.clip(sy, 0, H - 1)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    flat = t.reshape(-1, H, W)
    out = np.zeros_like(flat)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (wgt != 0)
        out[:, ok] += wgt[ok] * flat[:, yy[ok], xx[ok]]
    return out.reshape(t.shape)


def max_pool2(t: np.ndarray, return_arg: bool = False):
    """2x2 stride-2 max pooling; ties go to the first slot in row-major order."""
    B, C, H, W = t.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    x = np.ascontiguousarray(t)
    out = np.empty((B, C, H // 2, W // 2))
    arg = np.empty((B, C, H // 2, W // 2), dtype=np.int8)
    kernels.max_pool2_forward(x, out, arg)
    return (out, arg) if return_arg else out


def max_pool2_backward(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    B, C, Ho, Wo = dout.shape
    dx = np.zeros((B, C, 2 * Ho, 2 * Wo))
    kernels.max_pool2_backward(np.ascontiguousarray(dout), arg, dx)
    return dx


def _up2_axis(x: np.ndarray, axis: int) -> np.ndarray:
    # align_corners=False: output 2i -> 0.75 x[i] + 0.25 x[i-1], 2i+1 -> 0.75 x[i] + 0.25 x[i+1],
    # neighbours clamped at the edges
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up2_axis_backward(d: np.ndarray, axis: int) -> np.ndarray:
    d = np.moveaxis(d, axis, -1)
    even, odd = d[..., 0::2], d[..., 1::2]
    g = 0.75 * (even + odd)
    g[..., :-1] += 0.25 * even[..., 1:]
    g[..., 0] += 0.25 * even[..., 0]
    g[..., 1:] += 0.25 * odd[..., :-1]
    g[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(g, -1, axis)


def bilinear_up2(t: np.ndarray) -> np.ndarray:
    """Factor-2 bilinear upsampling of the last two axes (half-pixel centres)."""
    return np.ascontiguousarray(_up2_axis(_up2_axis(t, -2), -1))


def bilinear_up2_backward(dout: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(_up2_axis_backward(_up2_axis_backward(dout, -1), -2))


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and class probabilities.

    ``logits`` is (B, C) or (B, C, 1, 1).
    """
    z = logits.reshape(logits.shape[0], logits.shape[1])
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    logp = log_softmax(z)
    loss = -float(logp[np.arange(len(labels)), labels].mean())
    return loss, np.exp(logp)


def softmax_cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    """``(softmax - onehot) / B`` with the shape of ``probs``."""
    g = probs.copy()
    g[np.arange(len(labels)), np.asarray(labels, dtype=np.intp)] -= 1.0
    return g / probs.shape[0]
