import math

import numpy as np
import pytest

from domcon.losses import (
    FeatureBatch,
    LossConfig,
    dc_loss,
    dc_loss_grad,
    mmd_rbf,
    mmd_rbf_grad,
    triplet_loss,
    triplet_loss_grad,
)


def brute_force_dc(a, b, tau):
    """Independent loop evaluation of the contrast loss (the test oracle)."""
    n = len(a)

    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    total = 0.0
    for i in range(n):
        num = math.exp(cos(a[i], b[i]) / tau)
        den = sum(math.exp(cos(a[i], b[j]) / tau) for j in range(n))
        total += -math.log(num / den) / n
    for i in range(n):
        num = math.exp(cos(b[i], a[i]) / tau)
        den = sum(math.exp(cos(b[i], a[j]) / tau) for j in range(n))
        total += -math.log(num / den) / n
    return total


def random_batch(rng, n, d, with_labels=False):
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d))
    labels = rng.integers(0, 3, size=n) if with_labels else None
    return FeatureBatch(a, b, labels)


class TestLossConfig:
    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValueError, match="tau"):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError, match="tau"):
            LossConfig(tau=-1.0)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            LossConfig(variant="pixel_level")


class TestFeatureBatch:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            FeatureBatch(np.ones((2, 3)), np.ones((3, 3)))

    def test_label_length(self):
        with pytest.raises(ValueError, match="labels"):
            FeatureBatch(np.ones((2, 3)), np.ones((2, 3)), labels=[0, 1, 2])

    def test_swapped(self):
        batch = FeatureBatch([[1.0, 0.0]], [[0.0, 2.0]], labels=[4])
        sw = batch.swapped()
        np.testing.assert_array_equal(sw.side_a, batch.side_b)
        np.testing.assert_array_equal(sw.side_b, batch.side_a)


class TestDcLoss:
    def test_single_pair_is_zero(self):
        for tau in (0.1, 0.7, 3.0):
            batch = FeatureBatch([[1.0, 2.0]], [[-3.0, 0.5]])
            assert dc_loss(batch, LossConfig(tau=tau)).value == pytest.approx(0.0, abs=1e-15)

    def test_orthonormal_two_pair_value(self):
        batch = FeatureBatch(np.eye(2), np.eye(2))
        val = dc_loss(batch, LossConfig(tau=1.0)).value
        # both directions: mean_i [ log(1 + e^-1) ] each
        assert val == pytest.approx(2.0 * math.log(1.0 + math.exp(-1.0)), abs=1e-12)
        assert val == pytest.approx(0.626524, abs=1e-6)

    def test_identical_features_uniform_softmax(self):
        v = np.array([0.3, -1.2, 0.7])
        batch = FeatureBatch(np.tile(v, (3, 1)), np.tile(v, (3, 1)))
        for tau in (0.05, 1.0, 10.0):
            val = dc_loss(batch, LossConfig(tau=tau)).value
            assert val == pytest.approx(2.0 * math.log(3.0), abs=1e-9)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            n = int(rng.integers(1, 7))
            d = int(rng.integers(2, 10))
            tau = float(rng.uniform(0.1, 2.0))
            batch = random_batch(rng, n, d)
            got = dc_loss(batch, LossConfig(tau=tau))
            assert got.value == pytest.approx(
                brute_force_dc(batch.side_a, batch.side_b, tau), rel=1e-10
            )

    def test_per_sample_terms_nonnegative(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            batch = random_batch(rng, n, int(rng.integers(2, 12)))
            lv = dc_loss(batch, LossConfig(tau=float(rng.uniform(0.05, 5.0))))
            assert lv.per_sample_terms.shape == (2 * n,)
            assert np.all(lv.per_sample_terms >= 0.0)
            assert lv.value >= 0.0
            # decomposition invariant
            assert lv.value == pytest.approx(
                lv.per_sample_terms[:n].mean() + lv.per_sample_terms[n:].mean(), rel=1e-12
            )

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(23)
        batch = random_batch(rng, 6, 5)
        perm = rng.permutation(6)
        permuted = FeatureBatch(batch.side_a[perm], batch.side_b[perm])
        cfg = LossConfig(tau=0.5)
        assert dc_loss(batch, cfg).value == pytest.approx(
            dc_loss(permuted, cfg).value, abs=1e-12
        )

    def test_high_temperature_limit(self):
        rng = np.random.default_rng(24)
        for n in (2, 5, 8):
            batch = random_batch(rng, n, 6)
            val = dc_loss(batch, LossConfig(tau=1e6)).value
            assert val == pytest.approx(2.0 * math.log(n), abs=1e-3)

    def test_low_temperature_limit(self):
        # positive pair strictly the row max in both directions
        rng = np.random.default_rng(25)
        base = rng.normal(size=(5, 8))
        batch = FeatureBatch(base + rng.normal(scale=1e-3, size=base.shape), base)
        val = dc_loss(batch, LossConfig(tau=1e-3)).value
        assert val < 1e-3

    def test_side_swap_invariance(self):
        rng = np.random.default_rng(26)
        batch = random_batch(rng, 5, 4)
        cfg = LossConfig(tau=0.3)
        assert dc_loss(batch, cfg).value == pytest.approx(
            dc_loss(batch.swapped(), cfg).value, abs=1e-12
        )

    def test_zero_norm_rejected(self):
        batch = FeatureBatch([[1.0, 0.0], [0.0, 0.0]], np.eye(2))
        with pytest.raises(ValueError, match="zero-norm"):
            dc_loss(batch, LossConfig())


def central_diff_grad(fn, x, eps=1e-4):
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = fn()
        x[idx] = orig - eps
        lo = fn()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def assert_grad_close(analytic, numeric, rel=1e-5):
    scale = max(np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / scale < rel


class TestDcLossGrad:
    def test_single_pair_zero_grad(self):
        batch = FeatureBatch([[1.0, 2.0, 3.0]], [[0.5, -1.0, 2.0]])
        ga, gb = dc_loss_grad(batch, LossConfig(tau=0.5))
        np.testing.assert_allclose(ga, 0.0, atol=1e-12)
        np.testing.assert_allclose(gb, 0.0, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        batch = random_batch(rng, 4, 8)
        cfg = LossConfig(tau=0.5)
        ga, gb = dc_loss_grad(batch, cfg)
        fa = central_diff_grad(lambda: dc_loss(batch, cfg).value, batch.side_a)
        fb = central_diff_grad(lambda: dc_loss(batch, cfg).value, batch.side_b)
        assert_grad_close(ga, fa)
        assert_grad_close(gb, fb)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_finite_difference_sweep(self, tau):
        rng = np.random.default_rng(int(tau * 1000))
        for _ in range(12):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(2, 17))
            batch = random_batch(rng, n, d)
            cfg = LossConfig(tau=tau)
            ga, gb = dc_loss_grad(batch, cfg)
            fa = central_diff_grad(lambda: dc_loss(batch, cfg).value, batch.side_a)
            fb = central_diff_grad(lambda: dc_loss(batch, cfg).value, batch.side_b)
            assert_grad_close(ga, fa)
            assert_grad_close(gb, fb)

    def test_aligned_orthogonal_pairs_saturate(self):
        # a_i = b_i mutually orthogonal: the positive similarity sits at the
        # cosine maximum, so its term contributes no gradient along the
        # vector's own direction (cosine Jacobian vanishes there).
        base = np.eye(4) * 2.0
        batch = FeatureBatch(base.copy(), base.copy())
        ga, gb = dc_loss_grad(batch, LossConfig(tau=1.0))
        for i in range(4):
            own = base[i] / np.linalg.norm(base[i])
            assert float(ga[i] @ own) == pytest.approx(0.0, abs=1e-12)
            assert float(gb[i] @ own) == pytest.approx(0.0, abs=1e-12)


class TestTripletLoss:
    def test_single_sample_no_negatives(self):
        batch = FeatureBatch([[1.0, 2.0]], [[0.0, 1.0]])
        assert triplet_loss(batch).value == pytest.approx(0.0)

    def test_hinge_inactive(self):
        # a = b orthonormal: positive distance 0, negative distance 2
        batch = FeatureBatch(np.eye(2), np.eye(2))
        assert triplet_loss(batch).value == pytest.approx(0.0)

    def test_identical_vectors_hinge_at_margin(self):
        v = np.array([1.0, -2.0])
        batch = FeatureBatch(np.tile(v, (2, 1)), np.tile(v, (2, 1)))
        lv = triplet_loss(batch)
        # each anchor has one active hinge of exactly the margin
        np.testing.assert_allclose(lv.per_sample_terms, [0.5, 0.5])
        assert lv.value == pytest.approx(0.5)

    def test_translation_invariance(self):
        rng = np.random.default_rng(41)
        batch = random_batch(rng, 5, 4)
        shift = rng.normal(size=4)
        moved = FeatureBatch(batch.side_a + shift, batch.side_b + shift)
        assert triplet_loss(moved).value == pytest.approx(triplet_loss(batch).value, abs=1e-9)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            batch = random_batch(rng, int(rng.integers(2, 7)), int(rng.integers(2, 6)))
            ga, gb = triplet_loss_grad(batch)
            fa = central_diff_grad(lambda: triplet_loss(batch).value, batch.side_a)
            fb = central_diff_grad(lambda: triplet_loss(batch).value, batch.side_b)
            assert_grad_close(ga, fa, rel=1e-4)
            assert_grad_close(gb, fb, rel=1e-4)


class TestMmdRbf:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(51)
        x = rng.normal(size=(10, 3))
        assert mmd_rbf(x, x, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_singleton_pair_formula(self):
        u = np.array([[0.0, 0.0]])
        v = np.array([[3.0, 4.0]])
        bw = 2.0
        expected = 2.0 - 2.0 * math.exp(-25.0 / (2 * bw**2))
        got = mmd_rbf(u, v, bw)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got >= 0.0

    def test_far_separated_approaches_two(self):
        # tight clusters (spread << bandwidth) far apart: self-kernels ~ 1,
        # cross-kernels vanish
        rng = np.random.default_rng(52)
        x = rng.normal(scale=0.01, size=(20, 4))
        y = rng.normal(scale=0.01, size=(20, 4)) + 1000.0
        val = mmd_rbf(x, y, 1.0)
        assert val == pytest.approx(2.0, abs=0.01)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(53)
        for _ in range(30):
            x = rng.normal(size=(int(rng.integers(1, 12)), 3))
            y = rng.normal(size=(int(rng.integers(1, 12)), 3))
            bw = float(rng.uniform(0.2, 4.0))
            ab = mmd_rbf(x, y, bw)
            ba = mmd_rbf(y, x, bw)
            assert ab == pytest.approx(ba, rel=1e-12)
            assert ab >= 0.0

    def test_errors(self):
        x = np.ones((2, 3))
        with pytest.raises(ValueError, match="nonempty"):
            mmd_rbf(np.empty((0, 3)), x, 1.0)
        with pytest.raises(ValueError, match="bandwidth"):
            mmd_rbf(x, x, 0.0)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(54)
        for _ in range(8):
            x = rng.normal(size=(5, 3))
            y = rng.normal(size=(4, 3))
            bw = float(rng.uniform(0.5, 2.0))
            gx, gy = mmd_rbf_grad(x, y, bw)
            fx = central_diff_grad(lambda: mmd_rbf(x, y, bw), x)
            fy = central_diff_grad(lambda: mmd_rbf(x, y, bw), y)
            assert_grad_close(gx, fx, rel=1e-4)
            assert_grad_close(gy, fy, rel=1e-4)
