"""Network forward/gradient math, masks, initialization, checkpoints."""

import math

import numpy as np
import pytest

from lazydrop.model import (
    DropoutMask,
    NetworkParams,
    forward_full,
    forward_full_batch,
    forward_sub,
    forward_sub_batch,
    grad_sub,
    init_network,
    init_network_conditioned,
    init_row_norm_bound,
    load_checkpoint,
    sample_mask,
    save_checkpoint,
)
from lazydrop.numerics import RngStream, logistic_loss


def random_instance(rng, m, d, q=0.6):
    params = init_network(RngStream(int(rng.integers(2**31)), 0), m, d)
    mask = DropoutMask((rng.random(m) < q).astype(float), q)
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    return params, mask, x


class TestInit:
    def test_deterministic_per_stream(self):
        a = init_network(RngStream(42, 0), 16, 5)
        b = init_network(RngStream(42, 0), 16, 5)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.a, b.a)

    def test_sign_balance_at_width_1e4(self):
        params = init_network(RngStream(1, 0), 10**4, 10)
        frac = float(np.mean(params.a == 1.0))
        assert 0.47 <= frac <= 0.53  # binomial 3 sigma around 1/2

    def test_row_norms_concentrate_near_sqrt_d(self):
        d = 100
        params = init_network(RngStream(2, 0), 2000, d)
        norms = np.linalg.norm(params.W, axis=1)
        assert abs(float(np.mean(norms)) - math.sqrt(d)) < 0.3
        assert np.all(np.abs(norms - math.sqrt(d)) < 5.0)

    def test_zero_sizes_rejected(self):
        with pytest.raises(ValueError):
            init_network(RngStream(0, 0), 0, 3)
        with pytest.raises(ValueError):
            init_network(RngStream(0, 0), 3, 0)

    def test_conditioned_init_obeys_bound(self):
        m, d = 512, 20
        params = init_network_conditioned(RngStream(3, 0), m, d)
        assert params.max_row_norm() <= init_row_norm_bound(m, d)

    def test_signs_are_exactly_unit(self):
        params = init_network(RngStream(4, 0), 50, 3)
        assert set(np.unique(params.a)) <= {-1.0, 1.0}


class TestForward:
    def test_zero_weights_give_zero(self):
        p = NetworkParams(np.zeros((4, 3)), np.array([1.0, -1.0, 1.0, -1.0]))
        assert forward_full(p, np.array([1.0, 0.0, 0.0])) == 0.0

    def test_single_neuron_hand_value(self):
        p = NetworkParams(np.array([[3.0, 4.0]]), np.array([1.0]))
        x = np.array([0.6, 0.8])
        assert forward_full(p, x) == pytest.approx(5.0, abs=1e-12)

    def test_full_equals_all_ones_mask(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            params, _, x = random_instance(rng, 12, 6)
            ones = DropoutMask(np.ones(12), 1.0)
            assert forward_full(params, x) == forward_sub(params, ones, x)

    def test_two_neuron_mask_hand_value(self):
        p = NetworkParams(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, -1.0]))
        x = np.array([1.0, 1.0]) / math.sqrt(2.0)
        mask = DropoutMask(np.array([1.0, 0.0]), 0.5)
        assert forward_sub(p, mask, x) == pytest.approx(0.5, abs=1e-12)

    def test_all_zero_mask_gives_zero(self):
        rng = np.random.default_rng(1)
        params, _, x = random_instance(rng, 8, 4)
        zeros = DropoutMask(np.zeros(8), 0.0)
        assert forward_sub(params, zeros, x) == 0.0

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(2)
        for alpha in (0.25, 1.0, 7.5):
            params, mask, x = random_instance(rng, 10, 5)
            scaled = NetworkParams(alpha * params.W, params.a)
            assert forward_sub(scaled, mask, x) == pytest.approx(
                alpha * forward_sub(params, mask, x), rel=1e-12
            )

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        params, mask, _ = random_instance(rng, 6, 4)
        with pytest.raises(ValueError):
            forward_full(params, np.ones(5))
        with pytest.raises(ValueError):
            forward_sub(params, DropoutMask(np.ones(7), 1.0), np.ones(4))

    def test_batch_forward_matches_loop(self):
        rng = np.random.default_rng(4)
        params, mask, _ = random_instance(rng, 9, 5)
        X = rng.standard_normal((13, 5))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        full = [forward_full(params, X[i]) for i in range(13)]
        sub = [forward_sub(params, mask, X[i]) for i in range(13)]
        np.testing.assert_allclose(forward_full_batch(params, X), full, rtol=1e-12)
        np.testing.assert_allclose(forward_sub_batch(params, mask, X), sub, rtol=1e-12)


class TestGradient:
    def test_homogeneity_identity_exact(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(1000):
            m = int(rng.integers(2, 33))
            d = int(rng.integers(2, 9))
            params, mask, x = random_instance(rng, m, d)
            g = forward_sub(params, mask, x)
            inner = float(np.sum(grad_sub(params, mask, x) * params.W))
            worst = max(worst, abs(inner - g))
        assert worst <= 1e-12

    def test_masked_row_has_zero_gradient(self):
        rng = np.random.default_rng(6)
        params, mask, x = random_instance(rng, 10, 4)
        mask.b[3] = 0.0
        G = grad_sub(params, mask, x)
        assert np.all(G[3] == 0.0)

    def test_frobenius_norm_at_most_one(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            params, mask, x = random_instance(rng, 20, 6)
            G = grad_sub(params, mask, x)
            assert np.linalg.norm(G) <= math.sqrt(mask.active / params.m) + 1e-12
            assert np.linalg.norm(G) <= 1.0 + 1e-12

    def test_finite_differences_away_from_kinks(self):
        rng = np.random.default_rng(8)
        h = 1e-5
        for _ in range(25):
            params, mask, x = random_instance(rng, 12, 5)
            G = grad_sub(params, mask, x)
            safe = np.abs(params.W @ x) > 1e-3
            for r in np.nonzero(safe)[0]:
                for j in range(params.d):
                    Wp, Wm = params.W.copy(), params.W.copy()
                    Wp[r, j] += h
                    Wm[r, j] -= h
                    fd = (
                        forward_sub(NetworkParams(Wp, params.a), mask, x)
                        - forward_sub(NetworkParams(Wm, params.a), mask, x)
                    ) / (2 * h)
                    assert fd == pytest.approx(G[r, j], rel=1e-6, abs=1e-9)


class TestMask:
    def test_extremes(self):
        assert sample_mask(RngStream(0, 1), 100, 1.0).active == 100
        assert sample_mask(RngStream(0, 1), 100, 0.0).active == 0

    def test_binomial_count_three_sigma(self):
        mask = sample_mask(RngStream(9, 1), 10**5, 0.5)
        assert abs(mask.active - 50000) <= 3 * math.sqrt(25000)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            sample_mask(RngStream(0, 1), 10, 1.5)

    def test_mask_expectation_recovers_full_gradient(self):
        # (1/q) E_mask[grad_sub] equals the unmasked gradient; checked as a
        # scalar projection against a fixed probe within 3 standard errors
        rng = np.random.default_rng(10)
        params, _, x = random_instance(rng, 24, 6)
        q = 0.4
        full = grad_sub(params, DropoutMask(np.ones(24), 1.0), x)
        probe = rng.standard_normal(full.shape)
        target = float(np.sum(full * probe))
        mask_rng = RngStream(11, 1)
        n = 4000
        vals = np.empty(n)
        for i in range(n):
            mask = sample_mask(mask_rng, 24, q)
            vals[i] = np.sum(grad_sub(params, mask, x) * probe) / q
        se = float(np.std(vals, ddof=1) / math.sqrt(n))
        assert abs(float(np.mean(vals)) - target) <= 3 * se

    def test_mask_average_loss_dominates_scaled_full_loss(self):
        # Jensen: l(y f(x; qW)) <= E_mask[l(y g(W; x, B))]
        rng = np.random.default_rng(12)
        params, _, x = random_instance(rng, 64, 8)
        q = 0.5
        y = 1.0
        lhs = float(logistic_loss(y * forward_full(params.scaled(q), x)))
        relu = np.maximum(params.W @ x, 0.0)
        bits = (np.random.default_rng(13).random((10**4, 64)) < q).astype(float)
        outs = (bits * params.a) @ relu / math.sqrt(64)
        losses = np.asarray(logistic_loss(y * outs))
        se = float(np.std(losses, ddof=1) / 100.0)
        assert lhs <= float(np.mean(losses)) + 3 * se


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_network(RngStream(20, 0), 17, 9)
        path = tmp_path / "net.bin"
        save_checkpoint(path, params, q=0.3, iteration=41)
        loaded, q, it = load_checkpoint(path)
        assert (q, it) == (0.3, 41)
        np.testing.assert_array_equal(loaded.W, params.W)
        np.testing.assert_array_equal(loaded.a, params.a)

    def test_header_layout(self, tmp_path):
        params = init_network(RngStream(21, 0), 3, 2)
        path = tmp_path / "net.bin"
        save_checkpoint(path, params, q=1.0, iteration=7)
        raw = path.read_bytes()
        import struct

        m, d, q, it = struct.unpack("<IIdQ", raw[: struct.calcsize("<IIdQ")])
        assert (m, d, q, it) == (3, 2, 1.0, 7)
        assert len(raw) == struct.calcsize("<IIdQ") + 3 + 3 * 2 * 8

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x01\x02")
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)
