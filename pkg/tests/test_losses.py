import numpy as np
import pytest

from aumeta.errors import ConfigError
from aumeta.losses import (
    MetricsReport,
    au_loss,
    au_loss_value_and_grad,
    compute_weights,
    f1_frame,
    weighted_bce,
    weighted_bce_value_and_grad,
    weighted_dice,
    weighted_dice_value_and_grad,
)

from conftest import fd_gradient, rel_err

W1 = compute_weights([1.0])


class TestWeights:
    def test_uniform_rates(self):
        w = compute_weights([0.5, 0.5])
        np.testing.assert_allclose(w.w, [0.5, 0.5])

    def test_inverse_rate_normalization(self):
        w = compute_weights([0.5, 0.25, 0.25])
        np.testing.assert_allclose(w.w, [0.2, 0.4, 0.4])

    @pytest.mark.parametrize("seed", range(5))
    def test_weights_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        rates = rng.uniform(0.05, 1.0, size=rng.integers(1, 12))
        assert abs(compute_weights(rates).w.sum() - 1.0) < 1e-9

    def test_zero_rate_rejected(self):
        with pytest.raises(ConfigError, match="AU index 1"):
            compute_weights([0.5, 0.0])

    def test_rate_above_one_rejected(self):
        with pytest.raises(ConfigError):
            compute_weights([0.5, 1.5])


class TestBce:
    def test_perfect_prediction_near_zero(self):
        w = compute_weights([0.5, 0.5])
        p = np.array([[1.0, 0.0]])
        assert weighted_bce(p, p, w) < 1e-5

    def test_half_prob_is_ln2(self):
        assert abs(weighted_bce([[0.5]], [[1.0]], W1) - np.log(2.0)) < 1e-12

    def test_label_flip_symmetry(self):
        w = compute_weights([0.3, 0.7])
        rng = np.random.default_rng(0)
        p_hat = rng.uniform(0.05, 0.95, (4, 2))
        p = (rng.random((4, 2)) < 0.5).astype(float)
        assert abs(weighted_bce(p_hat, p, w) - weighted_bce(1 - p_hat, 1 - p, w)) < 1e-12

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        w = compute_weights([0.4, 0.6])
        for _ in range(50):
            p_hat = rng.random((3, 2))
            p = (rng.random((3, 2)) < 0.5).astype(float)
            assert weighted_bce(p_hat, p, w) >= 0.0


class TestDice:
    def test_perfect_binary_prediction_zero(self):
        w = compute_weights([0.5, 0.5])
        p = np.array([[1.0, 0.0]])
        assert weighted_dice(p, p, w, eps=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_prediction(self):
        assert weighted_dice([[0.0]], [[1.0]], W1, eps=1.0) == pytest.approx(0.5)

    def test_half_prediction(self):
        assert weighted_dice([[0.5]], [[1.0]], W1, eps=1.0) == pytest.approx(1.0 - 2.0 / 2.25)

    def test_zero_iff_equal_on_binary_targets(self):
        rng = np.random.default_rng(2)
        w = compute_weights([0.5, 0.5, 0.5])
        for _ in range(50):
            p = (rng.random(3) < 0.5).astype(float)
            p_hat = rng.random(3)
            loss = weighted_dice(p_hat[None], p[None], w, eps=1.0)
            if np.allclose(p_hat, p):
                assert loss == pytest.approx(0.0, abs=1e-12)
            else:
                assert loss > 0.0


class TestAuLoss:
    def test_mu_zero_equals_bce(self):
        rng = np.random.default_rng(3)
        w = compute_weights([0.25, 0.75])
        p_hat = rng.uniform(0.05, 0.95, (5, 2))
        p = (rng.random((5, 2)) < 0.5).astype(float)
        assert au_loss(p_hat, p, w, mu=0.0) == pytest.approx(weighted_bce(p_hat, p, w))

    def test_composite_value(self):
        expected = np.log(2.0) + 1.5 * (1.0 - 2.0 / 2.25)
        assert au_loss([[0.5]], [[1.0]], W1, mu=1.5, eps=1.0) == pytest.approx(expected, abs=1e-6)

    def test_perfect_prediction_near_zero(self):
        w = compute_weights([0.5, 0.5])
        p = np.array([[0.0, 1.0]])
        assert au_loss(p, p, w) < 1e-5


class TestGradients:
    """Analytic grads vs central finite differences, rel err < 1e-6."""

    @pytest.mark.parametrize("fn", [
        weighted_bce_value_and_grad,
        weighted_dice_value_and_grad,
        au_loss_value_and_grad,
    ])
    def test_matches_finite_differences(self, fn):
        rng = np.random.default_rng(4)
        w = compute_weights([0.5, 0.2, 0.3])
        p_hat = rng.uniform(0.05, 0.95, (4, 3))
        p = (rng.random((4, 3)) < 0.5).astype(float)
        _, grad = fn(p_hat, p, w)
        fd = fd_gradient(lambda x: fn(x, p, w)[0], p_hat)
        assert rel_err(grad, fd) < 1e-6


class TestF1Frame:
    def test_perfect(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]], dtype=float)
        f1, avg, deg = f1_frame(labels, labels)
        np.testing.assert_allclose(f1, 1.0)
        assert avg == 1.0
        assert not deg.any()

    def test_hand_counted_confusion(self):
        preds = np.array([[1], [1], [0], [0]], dtype=float)
        labels = np.array([[1], [0], [1], [0]], dtype=float)
        f1, avg, _ = f1_frame(preds, labels)
        assert f1[0] == pytest.approx(0.5)

    def test_all_negative_zero_division_convention(self):
        preds = np.zeros((4, 1))
        labels = np.zeros((4, 1))
        f1, avg, deg = f1_frame(preds, labels)
        assert f1[0] == 0.0
        assert deg[0]

    def test_threshold_at_half(self):
        preds = np.array([[0.49, 0.51]])
        labels = np.array([[1.0, 1.0]])
        f1, _, _ = f1_frame(preds, labels)
        assert f1[0] == 0.0 and f1[1] == 1.0


class TestReport:
    def test_table_formatting(self):
        report = MetricsReport.from_predictions(
            np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 0.0]]),
            au_names=["au1", "au15"], fold_id=2, seed=7)
        text = report.format_table()
        assert "fold: 2" in text and "seed: 7" in text
        assert "au1" in text and "Avg" in text
        # one-decimal percentages
        assert "100.0" in text
        # degenerate AU flagged
        assert "*" in text
