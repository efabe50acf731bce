import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steercnn.basis import (FrequencySpec, build_basis, coefficient_mask, grid_coordinates,
                            param_count, radial_profile, rotate_atomic, sample_atomic,
                            synthesize_filter, write_basis_pgms)

SPEC7 = [(0, 0), (1, 2), (2, 3), (3, 2)]


def hand_sample(j, k, size, sigma, y, x):
    # direct evaluation of one grid point, independent of the vectorized code
    c = (size - 1) / 2
    re, im = x - c, c - y
    r = math.hypot(re, im)
    if r == 0:
        return complex(1.0 if j == 0 else math.exp(-j * j / (2 * sigma * sigma))) if k == 0 else 0j
    phi = math.atan2(im, re)
    return math.exp(-(r - j) ** 2 / (2 * sigma * sigma)) * complex(math.cos(k * phi), math.sin(k * phi))


class TestRadialProfile:
    def test_mode_values(self):
        assert radial_profile(0, 0.6, 0.0) == 1.0
        assert radial_profile(1, 0.6, 1.0) == 1.0

    def test_closed_form(self):
        assert radial_profile(2, 0.6, 0.0) == pytest.approx(math.exp(-4 / 0.72), rel=1e-15)
        assert radial_profile(2, 0.6, 0.0) == pytest.approx(3.86e-3, rel=1e-2)

    def test_array_input(self):
        r = np.array([0.0, 1.0, 2.5])
        np.testing.assert_allclose(radial_profile(1, 0.5, r), np.exp(-((r - 1) ** 2) / 0.5))

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_rejects_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            radial_profile(0, sigma, 1.0)

    def test_rejects_negative_radius(self):
        with pytest.raises(ValueError):
            radial_profile(0, 0.6, -0.1)


class TestFrequencySpec:
    def test_pairs_and_str(self):
        spec = FrequencySpec(SPEC7)
        assert len(spec.pairs()) == 11
        assert str(spec) == "0:0,1:2,2:3,3:2"
        assert FrequencySpec.parse(str(spec)).entries == spec.entries

    def test_ring_order_enforced(self):
        with pytest.raises(ValueError):
            FrequencySpec([(0, 0), (2, 1)])
        with pytest.raises(ValueError):
            FrequencySpec([(0, 0), (1, -1)])
        with pytest.raises(ValueError):
            FrequencySpec([])

    def test_centre_singularity_warns(self):
        with pytest.warns(UserWarning):
            FrequencySpec([(0, 1)])

    def test_fit(self):
        FrequencySpec(SPEC7).check_fits(7)
        with pytest.raises(ValueError):
            FrequencySpec(SPEC7).check_fits(5)


class TestBuildBasis:
    def test_default_7x7_count(self):
        # 1 + 3 + 4 + 3 (j, k) pairs for caps 0, 2, 3, 2
        b = build_basis(SPEC7, 7, 0.6)
        assert len(b) == 11
        assert [(f.j, f.k) for f in b.filters] == FrequencySpec(SPEC7).pairs()
        assert b.stack.shape == (11, 7, 7)

    def test_default_5x5(self):
        b = build_basis(size=5)
        assert len(b) == 1 + 3 + 3

    def test_single_bump_is_real(self):
        b = build_basis([(0, 0)], 3)
        assert len(b) == 1
        s = b.filters[0].samples
        assert np.all(s.imag == 0)
        assert np.argmax(s.real) == 4  # centre of 3x3

    def test_normalized(self):
        for f in build_basis(SPEC7, 7).filters:
            assert np.linalg.norm(f.samples) == pytest.approx(1.0, abs=1e-14)
            assert f.norm > 0

    def test_matches_hand_evaluation(self):
        b = build_basis(SPEC7, 7, 0.6, normalize=False)
        for f in b.filters:
            for y, x in [(0, 0), (1, 5), (3, 3), (2, 4), (6, 1)]:
                assert f.samples[y, x] == pytest.approx(hand_sample(f.j, f.k, 7, 0.6, y, x), abs=1e-15)

    def test_k0_filters_real(self):
        for f in build_basis(SPEC7, 7).filters:
            if f.k == 0:
                assert np.all(f.samples.imag == 0)

    def test_nonzero_frequency_sums_vanish(self):
        for f in build_basis(SPEC7, 7, 0.6, normalize=False).filters:
            if f.k >= 1:
                assert abs(f.samples.sum()) < 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            build_basis(SPEC7, 5)
        with pytest.raises(ValueError):
            build_basis(SPEC7, 8)
        with pytest.raises(ValueError):
            build_basis(SPEC7, 7, sigma=0)

    def test_read_only(self):
        b = build_basis()
        with pytest.raises(ValueError):
            b.stack[0, 0, 0] = 1

    def test_grid_convention(self):
        u = grid_coordinates(3)
        assert u[1, 2] == 1 + 0j  # right of centre
        assert u[0, 1] == 0 + 1j  # above centre


class TestRotateAtomic:
    basis = build_basis(SPEC7, 7, 0.6)

    def test_k0_unchanged(self):
        f = self.basis.filters[0]
        np.testing.assert_array_equal(rotate_atomic(f, math.pi / 3), f.samples)

    def test_full_turn(self):
        for f in self.basis.filters:
            np.testing.assert_allclose(rotate_atomic(f, 2 * math.pi), f.samples, atol=1e-14)

    def test_k2_half_turn_is_negation(self):
        f = next(f for f in self.basis.filters if f.k == 2)
        np.testing.assert_allclose(rotate_atomic(f, math.pi / 2), -f.samples, atol=1e-15)

    @pytest.mark.parametrize("q", [1, 2, 3])
    def test_phase_matches_grid_rotation(self, q):
        # on the lattice a quarter-turn of the sampled grid equals the phase rotation
        for f in self.basis.filters:
            np.testing.assert_allclose(rotate_atomic(f, q * math.pi / 2), np.rot90(f.samples, q), atol=1e-15)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_composition(self, a, b):
        for f in self.basis.filters:
            once = rotate_atomic(f, a + b)
            twice = np.exp(-1j * f.k * b) * rotate_atomic(f, a)
            np.testing.assert_allclose(twice, once, atol=1e-13)


class TestSynthesize:
    basis = build_basis(SPEC7, 7, 0.6)

    def test_isotropic(self):
        w = {p: 0j for p in self.basis.spec.pairs()}
        w[(0, 0)] = 1 + 0j
        ref = synthesize_filter(w, self.basis, 0.0)
        for th in (0.3, 1.0, 4.0):
            np.testing.assert_allclose(synthesize_filter(w, self.basis, th), ref, atol=1e-15)
        np.testing.assert_allclose(ref, self.basis.filters[0].samples.real)

    def test_odd_frequency_half_turn(self):
        w = {p: 0j for p in self.basis.spec.pairs()}
        w[(1, 1)] = 1 + 0j
        a = synthesize_filter(w, self.basis, 0.0)
        b = synthesize_filter(w, self.basis, math.pi)
        np.testing.assert_allclose(b, -a, atol=1e-15)

    def test_zero(self):
        assert not synthesize_filter(np.zeros(len(self.basis)), self.basis, 1.0).any()

    def test_mismatch(self):
        with pytest.raises(ValueError):
            synthesize_filter({(0, 0): 1.0}, self.basis, 0.0)
        with pytest.raises(ValueError):
            synthesize_filter(np.zeros(3), self.basis, 0.0)

    @given(st.integers(0, 2**31 - 1), st.floats(0, 2 * math.pi))
    def test_steerability_closure(self, seed, theta):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=len(self.basis)) + 1j * rng.normal(size=len(self.basis))
        filt = synthesize_filter(w, self.basis, theta)
        span = np.concatenate([self.basis.stack.real, self.basis.stack.imag]).reshape(2 * len(self.basis), -1).T
        coef, *_ = np.linalg.lstsq(span, filt.ravel(), rcond=None)
        assert np.abs(span @ coef - filt.ravel()).max() < 1e-10


class TestParamCount:
    def test_counts(self):
        assert param_count(SPEC7) == 18
        assert param_count([(0, 0)], n=8, hidden=True) == 8
        assert param_count(SPEC7, n=8, hidden=True) == 144
        assert param_count(SPEC7) < 49

    def test_mask_agrees(self):
        b = build_basis(SPEC7, 7)
        assert coefficient_mask(b).sum() == param_count(SPEC7)


def test_basis_pgms(tmp_path):
    paths = write_basis_pgms(build_basis(SPEC7, 7), tmp_path / "b")
    assert len(paths) == 22
    names = {p.name for p in paths}
    assert "basis_j2_k3_im.pgm" in names
    from steercnn.pgm import read_pgm
    # the imaginary part of a k = 0 filter is identically zero: uniform mid-grey
    im = read_pgm(tmp_path / "b" / "basis_j0_k0_im.pgm")
    assert np.all(im == 128)
    re = read_pgm(tmp_path / "b" / "basis_j1_k1_re.pgm")
    assert re.min() == 0 and re.max() == 255


def test_sample_atomic_centre():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        s = sample_atomic(1, 1, 7, 0.6)
    assert s[3, 3] == 0
