"""Layer primitives: value oracles and finite-difference gradient checks."""
from __future__ import annotations

import numpy as np
import pytest

from canopyreg.tensor import (
    AdamState,
    adam_step,
    bilinear_upsample2x,
    bilinear_upsample2x_backward,
    conv2d,
    conv2d_backward,
    glorot_uniform,
    relu,
    relu_backward,
    softplus,
    softplus_backward,
)

from conftest import numeric_grad, rel_err


def loop_conv(x, kernel, bias, stride, pads):
    """Brute-force cross-correlation written without im2col, loops only."""
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    o, c, kh, kw = kernel.shape
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((o, ho, wo), dtype=np.float64)
    for oo in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for cc in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[cc, i * stride + di, j * stride + dj] * kernel[oo, cc, di, dj]
                out[oo, i, j] = acc + (bias[oo] if bias is not None else 0.0)
    return out


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((3, 5, 5))
        kernel = np.eye(3)[:, :, None, None]
        bias = np.zeros(3)
        assert np.array_equal(conv2d(x, kernel, bias), x)

    def test_matches_loop_oracle(self, rng):
        for _ in range(8):
            x = rng.standard_normal((1, 4, 4))
            kernel = rng.standard_normal((2, 1, 3, 3))
            bias = rng.standard_normal(2)
            got = conv2d(x, kernel, bias, stride=1, padding=1)
            want = loop_conv(x, kernel, bias, 1, (1, 1, 1, 1))
            assert rel_err(got, want) < 1e-12

    @pytest.mark.parametrize("k,stride,padding", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 1, (0, 1, 0, 1))])
    def test_matches_loop_oracle_configs(self, rng, k, stride, padding):
        x = rng.standard_normal((3, 8, 6))
        kernel = rng.standard_normal((4, 3, k, k))
        bias = rng.standard_normal(4)
        pads = (padding,) * 4 if isinstance(padding, int) else padding
        got = conv2d(x, kernel, bias, stride=stride, padding=padding)
        want = loop_conv(x, kernel, bias, stride, pads)
        assert rel_err(got, want) < 1e-12

    def test_even_kernel_same_padding_preserves_size(self, rng):
        x = rng.standard_normal((2, 6, 6))
        kernel = rng.standard_normal((2, 2, 2, 2))
        out = conv2d(x, kernel, stride=1, padding=(0, 1, 0, 1))
        assert out.shape == (2, 6, 6)

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((2, 6, 5))
        kernel = rng.standard_normal((3, 2, 3, 3))
        bias = rng.standard_normal(3)
        seedmap = rng.standard_normal((3, 3, 3))

        def loss_of(xv, kv, bv):
            return float((conv2d(xv, kv, bv, stride=2, padding=1) * seedmap).sum())

        grad_out = seedmap
        lg = conv2d_backward(grad_out, x, kernel, stride=2, padding=1)
        assert rel_err(lg.grad_input, numeric_grad(lambda v: loss_of(v, kernel, bias), x)) < 1e-4
        assert rel_err(lg.grad_params[0], numeric_grad(lambda v: loss_of(x, v, bias), kernel)) < 1e-4
        assert rel_err(lg.grad_params[1], numeric_grad(lambda v: loss_of(x, kernel, v), bias)) < 1e-4

    def test_channel_mismatch_rejected(self, rng):
        x = rng.standard_normal((3, 4, 4))
        kernel = rng.standard_normal((2, 4, 3, 3))
        with pytest.raises(ValueError, match=r"\(3, 4, 4\)"):
            conv2d(x, kernel)

    def test_bad_kernel_size_rejected(self, rng):
        with pytest.raises(ValueError, match="square"):
            conv2d(rng.standard_normal((1, 8, 8)), rng.standard_normal((1, 1, 5, 5)))


class TestBilinearUpsample:
    def test_constant_stays_constant(self):
        x = np.full((3, 4, 6), 2.5)
        out = bilinear_upsample2x(x)
        assert out.shape == (3, 8, 12)
        assert np.allclose(out, 2.5, atol=0, rtol=0)

    def test_row_example_matches_scalar_oracle(self):
        # scalar half-pixel re-implementation: src = (dst + 0.5)/2 - 0.5, clamped
        x = np.array([[[0.0, 1.0]]])
        out = bilinear_upsample2x(x)
        want = []
        for dst in range(4):
            src = (dst + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            f = src - i0
            lo = min(max(i0, 0), 1)
            hi = min(max(i0 + 1, 0), 1)
            want.append((1 - f) * x[0, 0, lo] + f * x[0, 0, hi])
        assert np.allclose(out[0, 0], want)
        assert np.allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0])

    def test_matches_scalar_oracle_2d(self, rng):
        x = rng.standard_normal((2, 3, 5))
        out = bilinear_upsample2x(x)

        def sample(vec, dst):
            src = (dst + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            f = src - i0
            lo = min(max(i0, 0), len(vec) - 1)
            hi = min(max(i0 + 1, 0), len(vec) - 1)
            return (1 - f) * vec[lo] + f * vec[hi]

        for c in range(2):
            rows = np.array([[sample(x[c, :, w], i) for w in range(5)] for i in range(6)])
            want = np.array([[sample(rows[i, :], j) for j in range(10)] for i in range(6)])
            assert rel_err(out[c], want) < 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.standard_normal((2, 3, 4))
        seedmap = rng.standard_normal((2, 6, 8))

        def loss_of(v):
            return float((bilinear_upsample2x(v) * seedmap).sum())

        lg = bilinear_upsample2x_backward(seedmap, x.shape)
        assert rel_err(lg.grad_input, numeric_grad(loss_of, x)) < 1e-4


class TestActivations:
    def test_relu_values(self):
        x = np.array([-2.0, 0.0, 3.0])
        assert np.array_equal(relu(x), [0.0, 0.0, 3.0])

    def test_softplus_positive_and_asymptotic(self, rng):
        x = rng.standard_normal(100) * 10
        assert np.all(softplus(x) > 0)
        assert softplus(np.array([40.0]))[0] - 40.0 < 1e-6
        assert abs(softplus(np.array([0.0]))[0] - np.log(2.0)) < 1e-12

    def test_softplus_matches_naive_in_safe_range(self, rng):
        x = rng.uniform(-20, 20, size=50)
        assert rel_err(softplus(x), np.log(1.0 + np.exp(x))) < 1e-12

    def test_gradients_match_finite_differences(self, rng):
        # keep relu inputs away from the kink at 0
        x = rng.standard_normal((3, 4, 4))
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        seedmap = rng.standard_normal((3, 4, 4))
        lg = relu_backward(seedmap, x)
        assert rel_err(lg.grad_input, numeric_grad(lambda v: float((relu(v) * seedmap).sum()), x)) < 1e-4
        lg = softplus_backward(seedmap, x)
        assert rel_err(lg.grad_input, numeric_grad(lambda v: float((softplus(v) * seedmap).sum()), x)) < 1e-4


class TestGlorot:
    def test_support_bound_and_center(self):
        rng = np.random.default_rng(7)
        fan_in, fan_out = 9 * 13, 9 * 16
        w = glorot_uniform(rng, (16, 13, 3, 3), fan_in, fan_out, dtype=np.float64)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w) <= limit)
        assert abs(w.mean()) < limit / 10
        # near-full use of the support
        assert np.abs(w).max() > 0.9 * limit

    def test_deterministic_given_seed(self):
        a = glorot_uniform(np.random.default_rng(3), (4, 4), 4, 4)
        b = glorot_uniform(np.random.default_rng(3), (4, 4), 4, 4)
        assert np.array_equal(a, b)

    def test_zero_fan_rejected(self):
        with pytest.raises(ValueError, match="fan"):
            glorot_uniform(np.random.default_rng(0), (1,), 0, 4)


def scalar_adam(ps, gs_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook per-scalar Adam, the trajectory oracle."""
    p = float(ps)
    m = v = 0.0
    out = []
    for t, g in enumerate(gs_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
        out.append(p)
    return out


class TestAdam:
    def test_zero_gradient_fresh_state_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        g = np.array([0.3, -4.0, 1e-3])
        params = {"w": np.zeros(3)}
        adam_step(params, {"w": g.copy()}, AdamState(), lr=0.01)
        want = -0.01 * g / (np.abs(g) + 1e-8)
        assert rel_err(params["w"], want) < 1e-10

    def test_trajectory_matches_scalar_oracle(self, rng):
        gs = rng.standard_normal(12)
        params = {"w": np.array([0.5])}
        state = AdamState()
        got = []
        for g in gs:
            adam_step(params, {"w": np.array([g])}, state, lr=0.05)
            got.append(float(params["w"][0]))
        want = scalar_adam(0.5, gs, lr=0.05)
        assert rel_err(np.array(got), np.array(want)) < 1e-12

    def test_two_optimizers_identical_trajectories(self, rng):
        gs = [rng.standard_normal((3, 2)) for _ in range(5)]
        pa = {"w": np.ones((3, 2))}
        pb = {"w": np.ones((3, 2))}
        sa, sb = AdamState(), AdamState()
        for g in gs:
            adam_step(pa, {"w": g}, sa, lr=0.02)
            adam_step(pb, {"w": g}, sb, lr=0.02)
        assert np.array_equal(pa["w"], pb["w"])

    def test_non_finite_gradient_aborts_with_name(self):
        params = {"w": np.zeros(2), "b": np.zeros(1)}
        state = AdamState()
        with pytest.raises(ValueError, match="'b'"):
            adam_step(params, {"w": np.ones(2), "b": np.array([np.nan])}, state, lr=0.1)
        # nothing was applied
        assert np.array_equal(params["w"], np.zeros(2))
        assert state.step == 0

    def test_frozen_subset_untouched(self):
        params = {"w": np.ones(2), "frozen": np.ones(2)}
        adam_step(params, {"w": np.full(2, 0.5)}, AdamState(), lr=0.1)
        assert np.array_equal(params["frozen"], np.ones(2))
        assert not np.array_equal(params["w"], np.ones(2))
