"""Mixing-weight sampling, batch mixing, and the three-domain losses."""

import numpy as np
import pytest
from scipy import stats

from trida.baselines import SourceLoss, ShotLikeLoss
from trida.data import Batch
from trida.errors import ValidationError
from trida.objectives import (TriDAConfig, cross_entropy, loss_feat,
                              loss_pretrain, loss_sem, mix_batch,
                              objective_sfuda_step1, objective_sfuda_step2,
                              objective_uda, sample_lambda)

from helpers import identity_bundle, tiny_bundle


class TestSampleLambda:
    def test_alpha_one_is_uniform(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.01

    def test_symmetry_of_distribution(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_lambda(2.0, rng) for _ in range(100_000)])
        rng2 = np.random.default_rng(2)
        mirrored = 1.0 - np.array([sample_lambda(2.0, rng2) for _ in range(100_000)])
        assert stats.ks_2samp(draws, mirrored).pvalue > 0.01

    def test_alpha_two_variance(self):
        # Var Beta(a, a) = 1 / (4 (2a + 1)); a = 2 gives 1/20
        rng = np.random.default_rng(3)
        draws = np.array([sample_lambda(2.0, rng) for _ in range(100_000)])
        assert abs(draws.var() - 0.05) < 0.005

    def test_invalid_alpha(self):
        with pytest.raises(ValidationError):
            sample_lambda(0.0, np.random.default_rng(0))


class TestMixBatch:
    def _tensors(self):
        rng = np.random.default_rng(4)
        x_p = rng.random((5, 1, 4, 4))
        x_t = rng.random((5, 1, 4, 4))
        return x_p, np.arange(5) % 3, x_t, np.arange(5) % 2

    def test_endpoints(self):
        x_p, y_p, x_t, y_t = self._tensors()
        np.testing.assert_array_equal(mix_batch(x_p, y_p, x_t, y_t, 1.0).x_mixed, x_p)
        np.testing.assert_array_equal(mix_batch(x_p, y_p, x_t, y_t, 0.0).x_mixed, x_t)

    def test_quarter_mix(self):
        x_p = np.zeros((2, 1, 2, 2))
        x_t = np.ones((2, 1, 2, 2))
        mixed = mix_batch(x_p, [0, 1], x_t, [0, 1], 0.25)
        np.testing.assert_allclose(mixed.x_mixed, 0.75)

    def test_inputs_untouched(self):
        x_p, y_p, x_t, y_t = self._tensors()
        x_p0, x_t0 = x_p.copy(), x_t.copy()
        mix_batch(x_p, y_p, x_t, y_t, 0.3)
        np.testing.assert_array_equal(x_p, x_p0)
        np.testing.assert_array_equal(x_t, x_t0)

    def test_validation(self):
        x_p, y_p, x_t, y_t = self._tensors()
        with pytest.raises(ValidationError):
            mix_batch(x_p[:, :, :2], y_p, x_t, y_t, 0.5)
        with pytest.raises(ValidationError):
            mix_batch(x_p, y_p, x_t, y_t, 1.5)


class TestLossPretrain:
    def test_confident_correct_prediction_is_zero(self):
        bundle = identity_bundle(side=2, n_pretrain=2)
        # huge margin on the true class
        bundle.head_pretrain.params["weight"][...] = 0.0
        bundle.head_pretrain.params["bias"][...] = [500.0, -500.0]
        x = np.random.default_rng(5).random((3, 1, 2, 2))
        assert loss_pretrain(bundle, x, np.zeros(3, dtype=int)) < 1e-6

    def test_uniform_logits_give_log_k(self):
        bundle = identity_bundle(side=2, n_pretrain=4)
        bundle.head_pretrain.params["weight"][...] = 0.0
        bundle.head_pretrain.params["bias"][...] = 0.0
        x = np.random.default_rng(6).random((5, 1, 2, 2))
        assert loss_pretrain(bundle, x, np.arange(5) % 4) == pytest.approx(np.log(4))

    def test_matches_hand_computed_cross_entropy(self):
        # two samples, two classes, hand-set logits
        logits = np.array([[1.0, -1.0], [0.5, 2.0]])
        labels = np.array([0, 1])
        value, _ = cross_entropy(logits, labels)
        expected = np.mean([
            -1.0 + np.log(np.exp(1.0) + np.exp(-1.0)),
            -2.0 + np.log(np.exp(0.5) + np.exp(2.0)),
        ])
        assert value == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self):
        bundle = identity_bundle(side=2, n_pretrain=2)
        with pytest.raises(ValidationError):
            loss_pretrain(bundle, np.zeros((1, 1, 2, 2)), np.array([5]))


class TestLossSem:
    def _mixed(self, bundle, lam, seed=7):
        rng = np.random.default_rng(seed)
        x_p = rng.random((6, 1, 8, 8))
        x_t = rng.random((6, 1, 8, 8))
        y_p = rng.integers(0, 4, 6)
        y_t = rng.integers(0, 3, 6)
        return mix_batch(x_p, y_p, x_t, y_t, lam)

    def test_lambda_one_is_pure_pretrain_term(self):
        bundle = tiny_bundle()
        mixed = self._mixed(bundle, 1.0)
        expected = loss_pretrain(bundle, mixed.x_p, mixed.y_p)
        assert loss_sem(bundle, mixed) == pytest.approx(expected, abs=1e-12)

    def test_lambda_zero_is_pure_target_term(self):
        bundle = tiny_bundle()
        mixed = self._mixed(bundle, 0.0)
        fp = bundle.forward(mixed.x_t, with_target=True)
        expected, _ = cross_entropy(fp.logits_target, mixed.y_hat_t)
        assert loss_sem(bundle, mixed) == pytest.approx(expected, abs=1e-12)

    def test_decomposition(self):
        bundle = tiny_bundle()
        mixed = self._mixed(bundle, 0.37)
        fp = bundle.forward(mixed.x_mixed, with_target=True, with_pretrain=True)
        term_p, _ = cross_entropy(fp.logits_pretrain, mixed.y_p)
        term_t, _ = cross_entropy(fp.logits_target, mixed.y_hat_t)
        assert loss_sem(bundle, mixed) == pytest.approx(
            0.37 * term_p + 0.63 * term_t, abs=1e-7)


class TestLossFeat:
    def _mixed(self, lam, seed=8):
        rng = np.random.default_rng(seed)
        x_p = rng.random((5, 1, 8, 8))
        x_t = rng.random((5, 1, 8, 8))
        return mix_batch(x_p, rng.integers(0, 4, 5), x_t, rng.integers(0, 3, 5), lam)

    @pytest.mark.parametrize("lam", [0.0, 1.0])
    def test_endpoints_are_zero(self, lam):
        bundle = tiny_bundle()
        assert loss_feat(bundle, self._mixed(lam)) <= 1e-6

    def test_linear_extractor_gives_zero(self):
        rng = np.random.default_rng(9)
        bundle = identity_bundle(side=4)
        x_p, x_t = rng.random((4, 1, 4, 4)), rng.random((4, 1, 4, 4))
        mixed = mix_batch(x_p, rng.integers(0, 4, 4), x_t, rng.integers(0, 3, 4), 0.42)
        assert loss_feat(bundle, mixed) < 1e-12

    def test_matches_independent_recomputation(self):
        bundle = tiny_bundle(seed=2)
        mixed = self._mixed(0.5, seed=10)
        f_p = bundle.features(mixed.x_p)
        f_t = bundle.features(mixed.x_t)
        f_m = bundle.features(mixed.x_mixed)
        resid = 0.5 * f_p + 0.5 * f_t - f_m
        expected = float(np.abs(resid).sum() / len(resid))
        assert loss_feat(bundle, mixed) == pytest.approx(expected, rel=1e-12)

    def test_non_negative(self):
        bundle = tiny_bundle(seed=4)
        for lam in (0.1, 0.5, 0.9):
            assert loss_feat(bundle, self._mixed(lam, seed=int(lam * 100))) >= 0.0


class TestComposites:
    def _batches(self, seed=11):
        rng = np.random.default_rng(seed)
        src = Batch(rng.random((6, 1, 8, 8)), rng.integers(0, 3, 6), np.arange(6))
        tgt = Batch(rng.random((6, 1, 8, 8)), None, np.arange(6))
        pre = Batch(rng.random((6, 1, 8, 8)), rng.integers(0, 4, 6), np.arange(6))
        mixed = mix_batch(pre.images, pre.labels, tgt.images,
                          rng.integers(0, 3, 6), 0.4)
        return src, tgt, pre, mixed

    def test_step1_reduces_to_source_loss(self):
        bundle = tiny_bundle()
        src, _, _, _ = self._batches()
        cfg = TriDAConfig(use_pretrain_loss=False)
        total, breakdown = objective_sfuda_step1(bundle, src, None, cfg,
                                                 SourceLoss(0.1))
        assert total == SourceLoss(0.1)(bundle, src)
        assert breakdown["loss_pretrain"] == 0.0

    def test_step1_sum_decomposition(self):
        bundle = tiny_bundle()
        src, _, pre, _ = self._batches()
        cfg = TriDAConfig()
        total, breakdown = objective_sfuda_step1(bundle, src, pre, cfg,
                                                 SourceLoss(0.1))
        expected = (SourceLoss(0.1)(bundle, src)
                    + loss_pretrain(bundle, pre.images, pre.labels))
        assert total == pytest.approx(expected, abs=1e-7)
        assert total == pytest.approx(breakdown["loss_source"]
                                      + breakdown["loss_pretrain"], abs=1e-12)

    def test_default_beta_is_tenth(self):
        assert TriDAConfig().beta == 0.1
        assert TriDAConfig().alpha == 2.0

    def test_step2_ablation_identity(self):
        bundle = tiny_bundle()
        _, tgt, _, _ = self._batches()
        baseline = ShotLikeLoss(w_pl=0.0)
        baseline.pseudo = None

        def bare(b, batch, train=False, backward_scale=None):
            from trida.baselines import loss_sfuda_shot_like
            return loss_sfuda_shot_like(b, batch.images,
                                        np.zeros(len(batch), dtype=int), 0.0,
                                        train, backward_scale)

        cfg = TriDAConfig(beta=0.0, use_pretrain_loss=False,
                          use_sem_loss=False, use_feat_loss=False)
        total, _ = objective_sfuda_step2(bundle, tgt, None, None, bare, cfg)
        assert total == bare(bundle, tgt)  # bitwise

    def test_step2_sum_decomposition(self):
        bundle = tiny_bundle()
        _, tgt, pre, mixed = self._batches()

        def bare(b, batch, train=False, backward_scale=None):
            from trida.baselines import loss_sfuda_shot_like
            return loss_sfuda_shot_like(b, batch.images,
                                        np.zeros(len(batch), dtype=int), 0.3,
                                        train, backward_scale)

        cfg = TriDAConfig()
        total, breakdown = objective_sfuda_step2(bundle, tgt, pre, mixed, bare, cfg)
        independent = (bare(bundle, tgt)
                       + loss_pretrain(bundle, pre.images, pre.labels)
                       + 0.1 * (loss_sem(bundle, mixed) + loss_feat(bundle, mixed)))
        assert total == pytest.approx(independent, abs=1e-7)
        assert total == pytest.approx(
            breakdown["loss_baseline"] + breakdown["loss_pretrain"]
            + cfg.beta * (breakdown["loss_sem"] + breakdown["loss_feat"]),
            abs=1e-12)

    def test_uda_sum_decomposition_and_ablation(self):
        from trida.baselines import AdversarialUDALoss
        bundle = tiny_bundle()
        src, tgt, pre, mixed = self._batches()
        adv = AdversarialUDALoss(bundle.feature_dim, hidden=5, seed=1)
        source_loss = SourceLoss(0.1)
        cfg = TriDAConfig()
        total, breakdown = objective_uda(bundle, src, tgt, pre, mixed, adv,
                                         source_loss, cfg)
        independent = (adv(bundle, src, tgt) + source_loss(bundle, src)
                       + loss_pretrain(bundle, pre.images, pre.labels)
                       + 0.1 * (loss_sem(bundle, mixed) + loss_feat(bundle, mixed)))
        assert total == pytest.approx(independent, abs=1e-7)
        off = TriDAConfig(beta=0.0, use_pretrain_loss=False,
                          use_sem_loss=False, use_feat_loss=False)
        bare_total, _ = objective_uda(bundle, src, tgt, None, None, adv,
                                      source_loss, off)
        assert bare_total == adv(bundle, src, tgt) + source_loss(bundle, src)

    def test_all_component_losses_non_negative(self):
        bundle = tiny_bundle(seed=5)
        rng = np.random.default_rng(12)
        for trial in range(5):
            x_p = rng.random((4, 1, 8, 8))
            x_t = rng.random((4, 1, 8, 8))
            mixed = mix_batch(x_p, rng.integers(0, 4, 4), x_t,
                              rng.integers(0, 3, 4), float(rng.uniform(0, 1)))
            assert loss_pretrain(bundle, x_p, mixed.y_p) >= 0.0
            assert loss_sem(bundle, mixed) >= 0.0
            assert loss_feat(bundle, mixed) >= 0.0

    def test_mixing_enabled_requires_mixed_batch(self):
        bundle = tiny_bundle()
        _, tgt, pre, _ = self._batches()
        with pytest.raises(ValidationError):
            objective_sfuda_step2(bundle, tgt, pre, None,
                                  lambda *a, **k: 0.0, TriDAConfig())
