"""Group convolutions over translations and the cyclic rotation group C_n.

A G-feature map is a float64 array of shape (B, C, n, H, W): for every channel
one H x W plane per rotation ``theta_s = 2 pi s / n``.

Input layer, for orientation s::

    h_s = image * Re(sum_p w_p exp(-i k_p theta_s) psi_p)

Hidden layer, for output orientation t::

    h_t = sum_f f_f * Re(sum_p w_{p, (t - f) mod n} exp(-i k_p theta_f) psi_p)

where ``*`` is planar cross-correlation summed over input channels. Both
layers materialize all rotated filters into one kernel stack and run a single
planar convolution; ``hidden_g_conv_reference`` evaluates the double sum
plane by plane and serves as the cross-check.

Rotating the input counter-clockwise by ``2 pi s / n`` rotates every output
plane by the same angle and rolls the orientation axis forward by s
(``ORIENTATION_SHIFT_SIGN``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .basis import SteerableBasis, coefficient_mask
from .tensor import ShapeError

#: input rotated by +2 pi s / n  ->  orientation axis rolled by ORIENTATION_SHIFT_SIGN * s
ORIENTATION_SHIFT_SIGN = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class GroupConfig:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"group order must be positive, got {self.n}")

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n) / self.n

    def is_grid_exact(self, s: int) -> bool:
        """True when rotating by ``2 pi s / n`` maps the square lattice onto itself."""
        return (4 * s) % self.n == 0


def _as_complex(w: np.ndarray) -> np.ndarray:
    return w[..., 0] + 1j * w[..., 1]


def _as_pairs(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


@dataclass(eq=False)
class GConvLayer:
    """Steerable G-convolution weights.

    ``weights`` holds interleaved (re, im) coefficients, shape (O, C, P, 2) for
    the input layer and (O, C, P, n, 2) for hidden layers, P = number of atomic
    filters. Imaginary parts of k = 0 coefficients stay zero.
    """

    basis: SteerableBasis
    in_channels: int
    out_channels: int
    n: int
    is_input_layer: bool
    weights: np.ndarray
    mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = len(self.basis)
        if self.is_input_layer:
            expected = (self.out_channels, self.in_channels, P, 2)
            mask = coefficient_mask(self.basis)
        else:
            expected = (self.out_channels, self.in_channels, P, self.n, 2)
            mask = np.repeat(coefficient_mask(self.basis)[:, None, :], self.n, axis=1)
        if self.weights.shape != expected:
            raise ShapeError(f"weights have shape {self.weights.shape}, expected {expected}")
        self.mask = np.broadcast_to(mask, expected)
        self.weights = self.weights * self.mask

    @classmethod
    def random(cls, basis: SteerableBasis, in_channels: int, out_channels: int, n: int,
               is_input_layer: bool, rng: np.random.Generator, gain: float = 2.0) -> "GConvLayer":
        P = len(basis)
        fan_in = in_channels * P * (1 if is_input_layer else n)
        std = math.sqrt(gain / fan_in)
        shape = (out_channels, in_channels, P, 2) if is_input_layer else \
            (out_channels, in_channels, P, n, 2)
        return cls(basis, in_channels, out_channels, n, is_input_layer, rng.normal(0.0, std, shape))

    @property
    def complex_weights(self) -> np.ndarray:
        return _as_complex(self.weights)

    def kernel(self) -> np.ndarray:
        if self.is_input_layer:
            return input_kernel(self.weights, self.basis, self.n)
        return hidden_kernel(self.weights, self.basis, self.n)

    def num_params(self) -> int:
        return int(self.mask.sum())


def input_kernel(weights: np.ndarray, basis: SteerableBasis, n: int) -> np.ndarray:
    """Planar kernel stack (O*n, C, K, K); output channel o*n + s holds rotation s."""
    w = _as_complex(weights)  # (O, C, P)
    O, C, P = w.shape
    K = basis.size
    rot = basis.rotation_stack(n).reshape(n, P, K * K)
    k = np.einsum("ocp,spq->oscq", w, rot, optimize=True).real
    return np.ascontiguousarray(k.reshape(O * n, C, K, K))


def input_kernel_vjp(dk: np.ndarray, basis: SteerableBasis, n: int) -> np.ndarray:
    """Gradient of ``input_kernel`` with respect to the interleaved coefficients."""
    P, K = len(basis), basis.size
    O = dk.shape[0] // n
    C = dk.shape[1]
    rot = basis.rotation_stack(n).reshape(n, P, K * K)
    d = dk.reshape(O, n, C, K * K)
    dw = np.einsum("oscq,spq->ocp", d, rot.conj(), optimize=True)
    return _as_pairs(dw)


def _lag_index(n: int) -> np.ndarray:
    t = np.arange(n)
    return (t[:, None] - t[None, :]) % n  # [t, f] -> lambda


def hidden_kernel(weights: np.ndarray, basis: SteerableBasis, n: int) -> np.ndarray:
    """Planar kernel stack (O*n, C*n, K, K) for the hidden-layer G-convolution.

    Entry [o*n + t, c*n + f] is ``Re(sum_p w[o, c, p, (t - f) mod n] R[f, p])``
    with R the atomic filters rotated by ``theta_f``.
    """
    w = _as_complex(weights)  # (O, C, P, n)
    O, C, P, _ = w.shape
    K = basis.size
    rot = basis.rotation_stack(n).reshape(n, P, K * K)
    wg = w[..., _lag_index(n)]  # (O, C, P, t, f)
    out = np.empty((O, n, C, n, K * K))
    for f in range(n):
        part = np.tensordot(wg[..., f], rot[f], axes=([2], [0]))  # (O, C, t, q)
        out[:, :, :, f, :] = part.real.transpose(0, 2, 1, 3)
    return out.reshape(O * n, C * n, K, K)


def hidden_kernel_vjp(dk: np.ndarray, basis: SteerableBasis, n: int) -> np.ndarray:
    P, K = len(basis), basis.size
    O, C = dk.shape[0] // n, dk.shape[1] // n
    rot = basis.rotation_stack(n).reshape(n, P, K * K)
    d = dk.reshape(O, n, C, n, K * K)
    dw = np.zeros((O, C, P, n), dtype=complex)
    lag = _lag_index(n)
    for f in range(n):
        g = np.tensordot(d[:, :, :, f, :], rot[f].conj(), axes=([3], [1]))  # (O, t, C, P)
        g = g.transpose(0, 2, 3, 1)  # (O, C, P, t)
        # lambda = (t - f) mod n is a permutation of t for fixed f
        dw[..., lag[:, f]] += g
    return _as_pairs(dw)


def input_g_conv(image: np.ndarray, layer: GConvLayer) -> np.ndarray:
    """(B, C, H, W) image -> (B, O, n, H, W) G-feature map."""
    if not layer.is_input_layer:
        raise ValueError("input_g_conv needs an input layer")
    if image.ndim != 4 or image.shape[1] != layer.in_channels:
        raise ShapeError(f"expected (B, {layer.in_channels}, H, W) input, got {image.shape}")
    out = tensor.conv2d(image, layer.kernel())
    B, _, H, W = out.shape
    return out.reshape(B, layer.out_channels, layer.n, H, W)


def hidden_g_conv(f: np.ndarray, layer: GConvLayer) -> np.ndarray:
    """(B, C, n, H, W) -> (B, O, n, H, W)."""
    if layer.is_input_layer:
        raise ValueError("hidden_g_conv needs a hidden layer")
    _check_gmap(f)
    B, C, n, H, W = f.shape
    if n != layer.n:
        raise ShapeError(f"feature map has {n} orientations, layer expects {layer.n}")
    if C != layer.in_channels:
        raise ShapeError(f"feature map has {C} channels, layer expects {layer.in_channels}")
    out = tensor.conv2d(f.reshape(B, C * n, H, W), layer.kernel())
    return out.reshape(B, layer.out_channels, n, H, W)


def hidden_g_conv_reference(f: np.ndarray, layer: GConvLayer) -> np.ndarray:
    """Plane-by-plane evaluation of the hidden G-convolution sum."""
    from .basis import synthesize_filter

    B, C, n, H, W = f.shape
    O = layer.out_channels
    w = layer.complex_weights
    theta = GroupConfig(n).angles
    out = np.zeros((B, O, n, H, W))
    for t in range(n):
        for phi in range(n):
            lam = (t - phi) % n
            filt = np.empty((O, C, layer.basis.size, layer.basis.size))
            for o in range(O):
                for c in range(C):
                    filt[o, c] = synthesize_filter(w[o, c, :, lam], layer.basis, theta[phi])
            out[:, :, t] += tensor.conv2d(np.ascontiguousarray(f[:, :, phi]), filt)
    return out


def _check_gmap(f: np.ndarray) -> None:
    if f.ndim != 5:
        raise ShapeError(f"G-feature maps are (B, C, n, H, W), got shape {f.shape}")


def gshift_rot(f: np.ndarray, s: int) -> np.ndarray:
    """Act on a G-feature map with the rotation ``2 pi s / n``.

    Planes are rotated counter-clockwise (exactly when the angle is a multiple
    of 90 degrees, bilinearly otherwise) and the orientation axis is rolled by s.
    """
    _check_gmap(f)
    n = f.shape[2]
    s %= n
    if s == 0:
        return f.copy()
    if (4 * s) % n == 0:
        planes = tensor.rot90(f, 4 * s // n)
    else:
        planes = tensor.rotate_interp(f, 2 * np.pi * s / n)
    return np.ascontiguousarray(np.roll(planes, ORIENTATION_SHIFT_SIGN * s, axis=2))


def g_pool(f: np.ndarray, return_arg: bool = False):
    """Pointwise max over orientations: (B, C, n, H, W) -> (B, C, H, W)."""
    _check_gmap(f)
    arg = np.argmax(f, axis=2)
    out = np.take_along_axis(f, arg[:, :, None], axis=2)[:, :, 0]
    return (out, arg) if return_arg else out


def g_pool_backward(dout: np.ndarray, arg: np.ndarray, n: int) -> np.ndarray:
    B, C, H, W = dout.shape
    df = np.zeros((B, C, n, H, W))
    np.put_along_axis(df, arg[:, :, None], dout[:, :, None], axis=2)
    return df


def _planar(f: np.ndarray) -> np.ndarray:
    B, C, n, H, W = f.shape
    return f.reshape(B, C * n, H, W)


def g_spatial_pool(f: np.ndarray) -> np.ndarray:
    _check_gmap(f)
    B, C, n, H, W = f.shape
    return tensor.max_pool2(_planar(f)).reshape(B, C, n, H // 2, W // 2)


def g_relu(f: np.ndarray) -> np.ndarray:
    return tensor.relu(f)


def g_bilinear_up2(f: np.ndarray) -> np.ndarray:
    _check_gmap(f)
    B, C, n, H, W = f.shape
    return tensor.bilinear_up2(_planar(f)).reshape(B, C, n, 2 * H, 2 * W)


def g_concat(fs) -> np.ndarray:
    fs = list(fs)
    if not fs:
        raise ValueError("g_concat needs at least one feature map")
    for f in fs:
        _check_gmap(f)
    if len({f.shape[2:] for f in fs}) != 1 or len({f.shape[0] for f in fs}) != 1:
        raise ShapeError(f"cannot concatenate shapes {[f.shape for f in fs]}")
    return np.concatenate(fs, axis=1)


@dataclass
class BNState:
    """Running moments of a G-batch-norm layer, one entry per channel."""

    mean: np.ndarray
    var: np.ndarray
    steps: int = 0
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels))


class UninitializedStateError(RuntimeError):
    pass


def g_batch_norm(f: np.ndarray, state: BNState, gamma, beta, mode: str = "train",
                 return_cache: bool = False):
    """Batch norm with moments shared across the orientation axis.

    Statistics are taken per channel over (batch, orientation, H, W), so one
    gamma/beta pair serves all n planes of a channel.
    """
    _check_gmap(f)
    C = f.shape[1]
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    axes = (0, 2, 3, 4)
    if mode == "train":
        mean = f.mean(axis=axes)
        var = f.var(axis=axes)
        m = state.momentum
        state.mean = m * state.mean + (1 - m) * mean
        state.var = m * state.var + (1 - m) * var
        state.steps += 1
    elif mode == "eval":
        if state.steps == 0:
            raise UninitializedStateError("batch norm evaluated before any training step")
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    bc = (slice(None), None, None, None)
    xhat = (f - mean[bc]) * inv[bc]
    out = gamma[bc] * xhat + beta[bc]
    if return_cache:
        return out, (xhat, inv, gamma, mode)
    return out


def g_batch_norm_backward(dout: np.ndarray, cache):
    """Gradients (df, dgamma, dbeta) of ``g_batch_norm``."""
    xhat, inv, gamma, mode = cache
    axes = (0, 2, 3, 4)
    bc = (slice(None), None, None, None)
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma[bc]
    if mode == "eval":
        return dxhat * inv[bc], dgamma, dbeta
    N = dout.size // dout.shape[1]
    df = (inv[bc] / N) * (N * dxhat - dxhat.sum(axis=axes)[bc]
                          - xhat * (dxhat * xhat).sum(axis=axes)[bc])
    return df, dgamma, dbeta
