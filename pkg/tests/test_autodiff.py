import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steercnn import autodiff as ad
from steercnn import gradcheck
from steercnn.basis import build_basis
from steercnn.gconv import GConvLayer


class TestBackward:
    def test_relu_sum(self, rng):
        x = ad.Parameter("x", rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)))
        tape = ad.Tape()
        grads = tape.backward(ad.sum_all(ad.relu(tape.param(x))))
        np.testing.assert_array_equal(grads["x"], 1.0)

    def test_conv_sum_interior(self, rng):
        k = np.full((1, 1, 3, 3), 0.5)
        x = ad.Parameter("x", rng.normal(size=(1, 1, 7, 7)))
        tape = ad.Tape()
        grads = tape.backward(ad.sum_all(ad.conv2d(tape.param(x), tape.constant(k))))
        # every interior pixel feeds all nine output positions around it
        np.testing.assert_allclose(grads["x"][0, 0, 1:-1, 1:-1], k.sum(), atol=1e-14)
        assert grads["x"][0, 0, 0, 0] == pytest.approx(4 * 0.5)

    def test_backward_before_forward(self):
        tape = ad.Tape()
        with pytest.raises(RuntimeError):
            tape.backward(tape.constant(1.0))

    def test_non_scalar_loss(self, rng):
        tape = ad.Tape()
        x = tape.param(ad.Parameter("x", rng.normal(size=3)))
        with pytest.raises(ValueError):
            tape.backward(ad.relu(x))

    def test_shared_parameter_accumulates(self, rng):
        p = ad.Parameter("p", rng.normal(size=(1, 2, 3, 3)))
        tape = ad.Tape()
        v = tape.param(p)
        grads = tape.backward(ad.sum_all(ad.g_concat([ad.reshape(v, (1, 2, 1, 3, 3))] * 2)))
        np.testing.assert_array_equal(grads["p"], 2.0)

    def test_inference_tape_records_nothing(self, rng):
        tape = ad.Tape(record=False)
        out = ad.relu(tape.param(ad.Parameter("x", rng.normal(size=4))))
        assert tape.nodes == [] and out.parents == ()

    def test_mask_blocks_gradient(self, rng):
        mask = np.array([1.0, 0.0, 1.0])
        p = ad.Parameter("p", np.ones(3), mask)
        tape = ad.Tape()
        grads = tape.backward(ad.sum_all(tape.param(p)))
        np.testing.assert_array_equal(grads["p"], mask)
        assert p.size == 2


@pytest.mark.parametrize("name", list(gradcheck.OPS))
def test_gradcheck_suite(name):
    err = gradcheck.OPS[name](np.random.default_rng(7))
    assert err <= gradcheck.TOLERANCE, f"{name}: {err:.3e}"


class TestFiniteDiff:
    def test_square_norm(self, rng):
        p = rng.normal(size=(3, 4))
        np.testing.assert_allclose(ad.finite_diff(lambda a: float((a ** 2).sum()), p.copy()), 2 * p, atol=1e-7)

    def test_sum(self, rng):
        p = rng.integers(-5, 5, size=7).astype(float)
        np.testing.assert_array_equal(ad.finite_diff(lambda a: float(a.sum()), p.copy(), eps=0.5), 1.0)

    def test_restores_input(self, rng):
        p = rng.normal(size=5)
        before = p.copy()
        ad.finite_diff(lambda a: float(np.sin(a).sum()), p)
        np.testing.assert_array_equal(p, before)

    def test_two_layer_g_model(self, rng):
        basis = build_basis(size=5)
        l1 = GConvLayer.random(basis, 1, 2, 4, True, rng)
        l2 = GConvLayer.random(basis, 2, 10, 4, False, rng)
        x = rng.normal(size=(1, 1, 9, 9))
        params = {"w1": ad.Parameter("w1", l1.weights, l1.mask),
                  "w2": ad.Parameter("w2", l2.weights, l2.mask)}

        def loss(tape):
            h = ad.relu(ad.input_g_conv(tape.constant(x), tape.param(params["w1"]), l1))
            h = ad.hidden_g_conv(h, tape.param(params["w2"]), l2)
            logits = ad.global_avg(ad.g_pool(h))
            return ad.softmax_cross_entropy(logits, [3])[0]

        tape = ad.Tape()
        grads = tape.backward(loss(tape))
        for name, p in params.items():
            num = ad.finite_diff(lambda _: float(loss(ad.Tape(record=False)).data), p.data, mask=p.mask)
            assert ad.relative_error(grads[name], num) <= 1e-5

    def test_relative_error(self):
        assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert ad.relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == 0.5


class TestAdam:
    def params(self, rng):
        return {"a": ad.Parameter("a", rng.normal(size=(3, 2))), "b": ad.Parameter("b", rng.normal(size=4))}

    def test_zero_gradient(self, rng):
        ps = self.params(rng)
        before = {k: p.data.copy() for k, p in ps.items()}
        state = ad.adam_step(ps, {k: np.zeros_like(p.data) for k, p in ps.items()}, ad.AdamState())
        assert state.step == 1
        for k, p in ps.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_first_step_magnitude(self, rng):
        ps = self.params(rng)
        before = {k: p.data.copy() for k, p in ps.items()}
        grads = {k: rng.normal(size=p.data.shape) for k, p in ps.items()}
        ad.adam_step(ps, grads, ad.AdamState(lr=0.01))
        for k, p in ps.items():
            g = grads[k]
            # bias correction makes the first update lr * g / (|g| + eps)
            np.testing.assert_allclose(p.data - before[k], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    @given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), st.integers(2, 30))
    def test_constant_gradient_monotone(self, g, steps):
        p = ad.Parameter("p", np.zeros(1))
        state = ad.AdamState(lr=0.1)
        trace = [0.0]
        for _ in range(steps):
            ad.adam_step({"p": p}, {"p": np.array([g])}, state)
            trace.append(float(p.data[0]))
        moves = np.diff(trace)
        assert np.all(np.sign(moves) == -math.copysign(1.0, g))

    def test_shape_mismatch(self, rng):
        ps = self.params(rng)
        with pytest.raises(ValueError):
            ad.adam_step(ps, {"a": np.zeros(2), "b": np.zeros(4)}, ad.AdamState())

    def test_mask_freezes_entries(self):
        p = ad.Parameter("p", np.zeros(3), np.array([1.0, 0.0, 1.0]))
        ad.adam_step({"p": p}, {"p": np.ones(3)}, ad.AdamState())
        assert p.data[1] == 0.0 and p.data[0] < 0

    def test_step_decay(self):
        assert ad.step_decay(1e-3, 14, 20) == 1e-3
        assert ad.step_decay(1e-3, 15, 20) == pytest.approx(1e-4)
        assert ad.step_decay(1e-3, 0, 1) == 1e-3
        assert ad.step_decay(1e-3, 0, 0) == 1e-3
