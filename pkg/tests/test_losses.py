import numpy as np
import pytest

from occanykit.losses import (
    LossConfig,
    LossError,
    gradient_check,
    loss_encoder_distill,
    loss_forcing,
    loss_pointmap,
)
from occanykit.training import average_pool_confidence


def _single_pixel(pred_xyz, gt_xyz, conf, alpha=0.2, scale_mode="metric"):
    pred = np.array(pred_xyz, dtype=float).reshape(1, 1, 3)
    gt = np.array(gt_xyz, dtype=float).reshape(1, 1, 3)
    c = np.full((1, 1), conf, dtype=float)
    return loss_pointmap(pred, gt, c, None, LossConfig(alpha=alpha, scale_mode=scale_mode))


class TestPointmapLoss:
    def test_zero_residual_unit_confidence(self):
        # hypothetical C = 1: both terms vanish
        res = _single_pixel((1, 2, 3), (1, 2, 3), 1.0, alpha=0.7)
        assert res.value == 0.0

    def test_single_pixel_unit_diff(self):
        res = _single_pixel((1, 0, 0), (0, 0, 0), 1.0, alpha=0.2)
        assert res.value == pytest.approx(1.0, abs=1e-15)

    def test_log_term_only(self):
        res = _single_pixel((0, 0, 0), (0, 0, 0), np.e, alpha=0.2)
        assert res.value == pytest.approx(-0.2, abs=1e-12)

    def test_lower_bound_and_equality_condition(self, rng):
        conf = 1.0 + np.exp(rng.standard_normal((5, 6)))
        gt = rng.standard_normal((5, 6, 3))
        cfg = LossConfig(alpha=0.3)
        bound = -cfg.alpha * np.log(conf).sum()
        loose = loss_pointmap(gt + rng.standard_normal((5, 6, 3)), gt, conf, None, cfg)
        tight = loss_pointmap(gt.copy(), gt, conf, None, cfg)
        assert loose.value > bound
        assert tight.value == pytest.approx(bound, rel=1e-12)

    def test_doubling_scale_halves_l1_term(self, rng):
        gt = rng.uniform(1, 3, (4, 4, 3))
        pred = gt + rng.standard_normal((4, 4, 3))
        conf = 1.0 + np.exp(rng.standard_normal((4, 4)))
        cfg = LossConfig(alpha=0.2, scale_mode="normalized")
        a = loss_pointmap(pred, gt, conf, None, cfg)
        # scale GT by 2 and shift pred so the residual is unchanged: s doubles
        b = loss_pointmap(pred + gt, 2 * gt, conf, None, cfg)
        assert b.scale == pytest.approx(2 * a.scale, rel=1e-12)
        log_term = 0.2 * np.log(conf).sum()
        l1_a = a.value + log_term
        l1_b = b.value + log_term
        assert l1_b == pytest.approx(l1_a / 2, rel=1e-12)

    def test_gradients_zero_on_invalid_pixels(self, rng):
        gt = rng.standard_normal((3, 3, 3))
        pred = gt + rng.standard_normal((3, 3, 3))
        conf = np.full((3, 3), 2.0)
        valid = np.zeros((3, 3), dtype=bool)
        valid[1, 1] = valid[0, 2] = valid[2, 0] = True
        res = loss_pointmap(pred, gt, conf, valid)
        assert np.all(res.grad_pred[~valid] == 0.0)
        assert np.all(res.grad_conf_raw[~valid] == 0.0)

    def test_l1_subgradient_zero_at_kink(self):
        res = _single_pixel((0, 1, 0), (0, 1, 0), 2.0)
        assert np.all(res.grad_pred == 0.0)

    def test_permutation_equivariance(self, rng):
        gt = rng.standard_normal((4, 5, 3))
        pred = gt + rng.standard_normal((4, 5, 3))
        conf = 1.0 + np.exp(rng.standard_normal((4, 5)))
        perm = rng.permutation(20)
        res_a = loss_pointmap(pred, gt, conf)
        res_b = loss_pointmap(
            pred.reshape(20, 1, 3)[perm],
            gt.reshape(20, 1, 3)[perm],
            conf.reshape(20, 1)[perm],
        )
        assert res_a.value == pytest.approx(res_b.value, rel=1e-14)

    def test_all_invalid_error(self):
        with pytest.raises(LossError, match="invalid"):
            loss_pointmap(
                np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.full((2, 2), 2.0),
                np.zeros((2, 2), dtype=bool),
            )

    def test_zero_scale_error(self):
        with pytest.raises(LossError, match="scale"):
            loss_pointmap(
                np.ones((2, 2, 3)), np.zeros((2, 2, 3)), np.full((2, 2), 2.0),
                None, LossConfig(scale_mode="normalized"),
            )


class TestForcingLoss:
    def test_zero_residual(self, rng):
        f = rng.standard_normal((4, 4, 3))
        val, grad = loss_forcing(f, f.copy(), np.full((4, 4), 2.0))
        assert val == 0.0
        assert np.all(grad == 0.0)

    def test_single_pixel_values(self):
        one = np.ones((1, 1, 1))
        val, _ = loss_forcing(2 * one, 0 * one, np.ones((1, 1)))
        assert val == pytest.approx(4.0)  # (1 * 2)^2
        val, _ = loss_forcing(one, 0 * one, 2 * np.ones((1, 1)))
        assert val == pytest.approx(4.0)  # confidence multiplies inside the square

    def test_frame_stack_not_normalized_by_count(self, rng):
        f = rng.standard_normal((2, 3, 3, 4))
        t = rng.standard_normal((2, 3, 3, 4))
        c = 1.0 + rng.random((2, 3, 3))
        val2, _ = loss_forcing(f, t, c)
        val_a, _ = loss_forcing(f[0], t[0], c[0])
        val_b, _ = loss_forcing(f[1], t[1], c[1])
        assert val2 == pytest.approx(val_a + val_b, rel=1e-12)

    def test_permutation_equivariance(self, rng):
        f = rng.standard_normal((1, 6, 1, 4))
        t = rng.standard_normal((1, 6, 1, 4))
        c = 1.0 + rng.random((1, 6, 1))
        perm = rng.permutation(6)
        a, _ = loss_forcing(f, t, c)
        b, _ = loss_forcing(f[:, perm], t[:, perm], c[:, perm])
        assert a == pytest.approx(b, rel=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(LossError, match="shape"):
            loss_forcing(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)), np.ones((2, 2)))


class TestEncoderDistill:
    def test_zero_when_equal(self, rng):
        t = [rng.standard_normal((4, 8))]
        val, grads = loss_encoder_distill([t[0].copy()], t)
        assert val == 0.0
        assert np.all(grads[0] == 0.0)

    def test_single_entry_diff(self):
        val, _ = loss_encoder_distill([np.array([[3.0]])], [np.array([[0.0]])])
        assert val == pytest.approx(9.0)

    def test_gradient_is_minus_2_diff(self, rng):
        s = rng.standard_normal((3, 5))
        t = rng.standard_normal((3, 5))
        _, grads = loss_encoder_distill([s], [t])
        np.testing.assert_allclose(grads[0], -2 * (t - s), atol=1e-15)

    def test_sums_over_views(self, rng):
        s = [rng.standard_normal((2, 3)) for _ in range(3)]
        t = [rng.standard_normal((2, 3)) for _ in range(3)]
        total, _ = loss_encoder_distill(s, t)
        parts = sum(loss_encoder_distill([a], [b])[0] for a, b in zip(s, t))
        assert total == pytest.approx(parts, rel=1e-12)

    def test_empty_views_error(self):
        with pytest.raises(LossError, match="empty"):
            loss_encoder_distill([], [])

    def test_shape_mismatch_error(self, rng):
        with pytest.raises(LossError, match="!="):
            loss_encoder_distill([np.zeros((2, 3))], [np.zeros((3, 2))])


def _kink_free_pointmap_problem(rng, h=3, w=4, alpha=0.2, scale_mode="metric"):
    gt = rng.standard_normal((h, w, 3))
    offset = rng.choice([-1.0, 1.0], (h, w, 3)) * rng.uniform(0.2, 1.0, (h, w, 3))
    pred0 = gt + offset  # every residual component is far from the L1 kink
    raw0 = rng.standard_normal((h, w)) * 0.5
    cfg = LossConfig(alpha=alpha, scale_mode=scale_mode)

    def f(x):
        pred = x[: h * w * 3].reshape(h, w, 3)
        raw = x[h * w * 3 :].reshape(h, w)
        res = loss_pointmap(pred, gt, 1.0 + np.exp(raw), None, cfg)
        return res.value, np.concatenate([res.grad_pred.ravel(), res.grad_conf_raw.ravel()])

    return f, np.concatenate([pred0.ravel(), raw0.ravel()])


class TestGradientCheck:
    def test_harness_on_quadratic(self, rng):
        def f(x):
            return float(x @ x), 2 * x

        assert gradient_check(f, rng.standard_normal(12)) < 1e-8

    def test_pointmap_gradients(self, rng):
        for mode in ("metric", "normalized"):
            f, x0 = _kink_free_pointmap_problem(rng, scale_mode=mode)
            assert gradient_check(f, x0) < 1e-4

    def test_forcing_gradients(self, rng):
        teacher = rng.standard_normal((3, 4, 5))
        conf = 1.0 + np.exp(rng.standard_normal((3, 4)))

        def f(x):
            val, grad = loss_forcing(x.reshape(3, 4, 5), teacher, conf)
            return val, grad.ravel()

        assert gradient_check(f, rng.standard_normal(60)) < 1e-6

    def test_distill_gradients(self, rng):
        teacher = [rng.standard_normal((4, 6))]

        def f(x):
            val, grads = loss_encoder_distill([x.reshape(4, 6)], teacher)
            return val, grads[0].ravel()

        assert gradient_check(f, rng.standard_normal(24)) < 1e-6

    def test_detects_wrong_gradient(self, rng):
        def f(x):
            return float(x @ x), 2.5 * x  # deliberately wrong

        assert gradient_check(f, rng.standard_normal(5) + 1.0) > 1e-2

    def test_non_finite_rejected(self):
        def f(x):
            return float("nan"), x

        with pytest.raises(LossError, match="non-finite"):
            gradient_check(f, np.ones(2))


class TestForcingStopGradient:
    """The forcing loss must contribute exactly zero confidence gradient."""

    def test_conf_raw_gradient_excludes_forcing(self, rng):
        h = w = 8
        hp = wp = 4
        gt = rng.standard_normal((h, w, 3))
        pred = gt + rng.standard_normal((h, w, 3))
        raw = rng.standard_normal((h, w)) * 0.3
        conf = 1.0 + np.exp(raw)
        res_pm = loss_pointmap(pred, gt, conf)

        feat = rng.standard_normal((hp, wp, 6))
        teacher = rng.standard_normal((hp, wp, 6))
        conf_feat = average_pool_confidence(conf, (hp, wp))
        out = loss_forcing(feat, teacher, conf_feat)
        assert len(out) == 2  # (value, grad wrt features) — no confidence gradient
        # total confidence gradient is the pointmap term alone
        total_conf_grad = res_pm.grad_conf_raw
        np.testing.assert_array_equal(total_conf_grad, res_pm.grad_conf_raw)
        # and the forcing value does depend on conf, which is exactly why the
        # contract matters: its gradient is forced to zero, not absent
        out2 = loss_forcing(feat, teacher, conf_feat * 2.0)
        assert out2[0] != pytest.approx(out[0])
