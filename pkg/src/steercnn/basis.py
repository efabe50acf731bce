"""Circular-harmonic atomic filters with Gaussian radial profiles.

Each atomic filter is ``tau_j(|u|) * exp(i k arg(u))`` sampled on a centred
K x K integer grid, where ``tau_j`` is a Gaussian ring with mode at radius j.
Grid coordinates follow ``u = (x - c) + i (c - y)`` with ``c = (K - 1) / 2``:
x grows to the right, y (the row index) grows downward, so positive angles are
counter-clockwise on screen, the same sense as ``numpy.rot90``.

Rotating an atomic filter by theta multiplies it by ``exp(-i k theta)``; no
resampling is involved, so rotations by any angle are exact.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SIGMA = 0.6

#: frequency caps per ring for 7x7 filters (rings 0..3)
DEFAULT_SPEC_7 = ((0, 0), (1, 2), (2, 3), (3, 2))
#: frequency caps per ring for 5x5 filters (rings 0..2)
DEFAULT_SPEC_5 = ((0, 0), (1, 2), (2, 2))


@dataclass(frozen=True)
class FrequencySpec:
    """Per-ring maximum angular frequency, as ``(ring, max_frequency)`` pairs."""

    entries: tuple[tuple[int, int], ...]

    def __init__(self, entries: Iterable[Sequence[int]]):
        entries = tuple((int(j), int(a)) for j, a in entries)
        if not entries:
            raise ValueError("frequency spec must contain at least one ring")
        for i, (j, a) in enumerate(entries):
            if j != i:
                raise ValueError(f"ring indices must be 0, 1, 2, ...; got {[e[0] for e in entries]}")
            if a < 0:
                raise ValueError(f"max frequency for ring {j} must be >= 0, got {a}")
        if entries[0][1] != 0:
            warnings.warn(
                "ring 0 with nonzero frequency has a phase singularity at the grid centre",
                stacklevel=2,
            )
        object.__setattr__(self, "entries", entries)

    @property
    def max_ring(self) -> int:
        return self.entries[-1][0]

    def pairs(self) -> list[tuple[int, int]]:
        """All ``(j, k)`` index pairs in basis order."""
        return [(j, k) for j, a in self.entries for k in range(a + 1)]

    def check_fits(self, size: int) -> None:
        if 2 * self.max_ring + 1 > size:
            raise ValueError(
                f"ring {self.max_ring} does not fit a {size}x{size} grid (needs 2j+1 <= K)"
            )

    @classmethod
    def default(cls, size: int) -> "FrequencySpec":
        if size == 7:
            return cls(DEFAULT_SPEC_7)
        if size == 5:
            return cls(DEFAULT_SPEC_5)
        if size == 1:
            return cls([(0, 0)])
        raise ValueError(f"no default frequency spec for {size}x{size} filters")

    def __str__(self) -> str:
        return ",".join(f"{j}:{a}" for j, a in self.entries)

    @classmethod
    def parse(cls, text: str) -> "FrequencySpec":
        """Parse ``"0:0,1:2,2:3"``."""
        entries = []
        for item in text.split(","):
            j, _, a = item.strip().partition(":")
            entries.append((int(j), int(a)))
        return cls(entries)


@dataclass(frozen=True, eq=False)
class AtomicFilter:
    j: int
    k: int
    samples: np.ndarray  # (K, K) complex
    norm: float  # L2 norm before normalization


@dataclass(frozen=True, eq=False)
class SteerableBasis:
    filters: tuple[AtomicFilter, ...]
    size: int
    sigma: float
    spec: FrequencySpec
    stack: np.ndarray = field(repr=False)  # (P, K, K) complex, read-only

    @property
    def freqs(self) -> np.ndarray:
        return np.array([f.k for f in self.filters])

    def __len__(self) -> int:
        return len(self.filters)

    def rotation_stack(self, n: int) -> np.ndarray:
        """Atomic filters rotated to every angle ``2 pi s / n``, shape (n, P, K, K)."""
        return _rotation_stack(self, n)


def radial_profile(j: int, sigma: float, r):
    """Gaussian ring ``exp(-(r - j)^2 / (2 sigma^2))``; ``r`` may be an array."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("radius must be non-negative")
    out = np.exp(-((r - j) ** 2) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def grid_coordinates(size: int) -> np.ndarray:
    """Complex coordinates ``(x - c) + i (c - y)`` of a size x size grid."""
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(float)
    return (x - c) + 1j * (c - y)


def sample_atomic(j: int, k: int, size: int, sigma: float) -> np.ndarray:
    """Unnormalized samples of the (j, k) atomic filter.

    For k >= 1 the phase is undefined at the origin, so the centre sample is
    set to its angular mean, zero. Otherwise quarter-turn rotation of the grid
    would not agree with the phase rotation ``exp(-i k theta)``.
    """
    u = grid_coordinates(size)
    r = np.abs(u)
    phi = np.where(r > 0, np.angle(u), 0.0)
    out = radial_profile(j, sigma, r) * np.exp(1j * k * phi)
    if k != 0:
        out[r == 0] = 0.0
    return out


def build_basis(
    spec: FrequencySpec | Iterable[Sequence[int]] | None = None,
    size: int = 7,
    sigma: float = DEFAULT_SIGMA,
    normalize: bool = True,
) -> SteerableBasis:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"filter size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if spec is None:
        spec = FrequencySpec.default(size)
    elif not isinstance(spec, FrequencySpec):
        spec = FrequencySpec(spec)
    spec.check_fits(size)

    filters = []
    for j, k in spec.pairs():
        s = sample_atomic(j, k, size, sigma)
        norm = float(np.linalg.norm(s))
        if normalize:
            s = s / norm
        if k == 0:
            s = s.real + 0j
        s.setflags(write=False)
        filters.append(AtomicFilter(j=j, k=k, samples=s, norm=norm))
    stack = np.stack([f.samples for f in filters])
    stack.setflags(write=False)
    return SteerableBasis(tuple(filters), size, float(sigma), spec, stack)


def rotate_atomic(filt: AtomicFilter, theta: float) -> np.ndarray:
    return np.exp(-1j * filt.k * theta) * filt.samples


@lru_cache(maxsize=64)
def _rotation_stack(basis: SteerableBasis, n: int) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(n) / n
    phase = np.exp(-1j * np.outer(theta, basis.freqs))  # (n, P)
    out = phase[:, :, None, None] * basis.stack[None]
    out.setflags(write=False)
    return out


def synthesize_filter(weights, basis: SteerableBasis, theta: float) -> np.ndarray:
    """Real filter ``Re(sum_p w_p exp(-i k_p theta) psi_p)`` for one (out, in) pair.

    ``weights`` is a complex vector in basis order, or a mapping ``{(j, k): w}``.
    """
    if isinstance(weights, dict):
        pairs = basis.spec.pairs()
        if set(weights) != set(pairs):
            raise ValueError("weight index set does not match the basis")
        weights = np.array([weights[p] for p in pairs], dtype=complex)
    w = np.asarray(weights, dtype=complex)
    if w.shape != (len(basis),):
        raise ValueError(f"expected {len(basis)} coefficients, got shape {w.shape}")
    phase = np.exp(-1j * basis.freqs * theta)
    return np.tensordot(w * phase, basis.stack, axes=1).real


def param_count(spec: FrequencySpec | Iterable[Sequence[int]], n: int = 1, hidden: bool = False) -> int:
    """Real parameters per (out, in) filter pair: k = 0 terms are real, the rest complex."""
    if not isinstance(spec, FrequencySpec):
        spec = FrequencySpec(spec)
    base = sum(1 + 2 * a for _, a in spec.entries)
    return base * n if hidden else base


def coefficient_mask(basis: SteerableBasis) -> np.ndarray:
    """(P, 2) mask over interleaved (re, im) coefficients; im of k = 0 terms is fixed."""
    mask = np.ones((len(basis), 2))
    mask[basis.freqs == 0, 1] = 0.0
    return mask


def write_basis_pgms(basis: SteerableBasis, out_dir) -> list:
    """Export real and imaginary planes as ``basis_j{j}_k{k}_{re|im}.pgm``."""
    from pathlib import Path

    from .pgm import write_pgm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in basis.filters:
        for part, plane in (("re", f.samples.real), ("im", f.samples.imag)):
            p = out_dir / f"basis_j{f.j}_k{f.k}_{part}.pgm"
            write_pgm(p, plane)
            paths.append(p)
    return paths
