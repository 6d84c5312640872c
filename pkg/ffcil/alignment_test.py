import math
import unittest

import numpy as np

from alignment import (AlignmentConfig, AlignmentError, AlignmentMode, apply_alignment, diwa_eta, diwa_scale,
                       row_norm_means, wa_scale)
from model import ClassifierModel, HeadInit
from utils import new_random_state


def make_model(K=4, C_t=3, seed=0, new_scale=3.0):
    model = ClassifierModel.create(5, 6, new_random_state(seed, "init"))
    model.expand_head(K + C_t, HeadInit.SMALL_UNIFORM, new_random_state(seed, "head"))
    random_state = new_random_state(seed, "rows")
    model.W[:K] = random_state.normal(size=(K, 6))
    model.W[K:] = new_scale * random_state.normal(size=(C_t, 6))
    return model


class TestDiwaEta(unittest.TestCase):
    def test_single_new_class_gives_eta_min(self):
        for eta_min in (0.0, 0.2, 0.5, 1.0):
            self.assertEqual(diwa_eta(1, eta_min, 5.0), eta_min)

    def test_reference_value(self):
        self.assertAlmostEqual(diwa_eta(6, 0.2, 5.0), 0.705696, delta=1e-6)

    def test_monotone_in_class_count(self):
        for eta_min in (0.0, 0.2, 0.7, 1.0):
            for tau in (0.5, 1.0, 5.0, 50.0):
                etas = [diwa_eta(c, eta_min, tau) for c in range(1, 101)]
                self.assertTrue(all(b >= a for a, b in zip(etas, etas[1:])))
                self.assertTrue(all(eta_min <= e <= 1.0 + 1e-12 for e in etas))

    def test_scale_interpolates(self):
        self.assertEqual(diwa_scale(2.0, 4.0, 0.0), 1.0)
        self.assertEqual(diwa_scale(2.0, 4.0, 1.0), 0.5)
        self.assertAlmostEqual(diwa_scale(2.0, 4.0, 0.5), 0.75)


class TestApplyAlignment(unittest.TestCase):
    def test_wa_equalizes_mean_norms(self):
        for seed in range(10):
            model = make_model(seed=seed)
            mu_old, _ = row_norm_means(model.W, 4, 3)
            apply_alignment(model, 4, 3, AlignmentConfig(AlignmentMode.WA))
            _, mu_new = row_norm_means(model.W, 4, 3)
            self.assertLess(abs(mu_new - mu_old), 1e-12 * mu_old)

    def test_only_new_rows_change(self):
        model = make_model()
        before = (model.W.copy(), model.b.copy(), model.W1.copy())
        outcome = apply_alignment(model, 4, 3, AlignmentConfig(AlignmentMode.DIWA))
        np.testing.assert_array_equal(model.W[:4], before[0][:4])
        np.testing.assert_array_equal(model.b, before[1])
        np.testing.assert_array_equal(model.W1, before[2])
        np.testing.assert_allclose(model.W[4:], outcome.gamma * before[0][4:])

    def test_new_class_argmax_survives_in_a_bias_free_head(self):
        for seed in range(10):
            model = make_model(seed=seed)
            model.head_bias = False
            model.b[:] = 0.0
            x = new_random_state(seed, "inputs").normal(size=(50, 5))
            before = np.argmax(model.forward(x)[0][:, 4:], axis=1)
            for mode in (AlignmentMode.WA, AlignmentMode.DIWA):
                aligned = model.copy()
                apply_alignment(aligned, 4, 3, AlignmentConfig(mode))
                np.testing.assert_array_equal(np.argmax(aligned.forward(x)[0][:, 4:], axis=1), before)

    def test_diwa_with_eta_min_one_is_wa(self):
        for C_t in (1, 3, 10):
            wa = make_model(C_t=C_t)
            diwa = make_model(C_t=C_t)
            a = apply_alignment(wa, 4, C_t, AlignmentConfig(AlignmentMode.WA))
            b = apply_alignment(diwa, 4, C_t, AlignmentConfig(AlignmentMode.DIWA, eta_min=1.0))
            self.assertEqual(a.gamma, b.gamma)
            np.testing.assert_array_equal(wa.W, diwa.W)

    def test_eta_zero_leaves_model_unchanged(self):
        model = make_model(C_t=1)
        W = model.W.copy()
        outcome = apply_alignment(model, 4, 1, AlignmentConfig(AlignmentMode.DIWA, eta_min=0.0))
        self.assertEqual(outcome.eta, 0.0)
        self.assertEqual(outcome.gamma, 1.0)
        np.testing.assert_array_equal(model.W, W)

    def test_mode_none(self):
        model = make_model()
        W = model.W.copy()
        outcome = apply_alignment(model, 4, 3, AlignmentConfig())
        self.assertEqual(outcome.gamma, 1.0)
        self.assertTrue(math.isnan(outcome.mu_old))
        np.testing.assert_array_equal(model.W, W)

    def test_needs_old_classes(self):
        model = ClassifierModel.create(5, 6, new_random_state(0)).expand_head(3, HeadInit.SMALL_UNIFORM,
                                                                               new_random_state(1))
        with self.assertRaises(AlignmentError):
            apply_alignment(model, 0, 3, AlignmentConfig(AlignmentMode.WA))

    def test_zero_new_rows(self):
        model = make_model()
        model.W[4:] = 0.0
        with self.assertRaises(AlignmentError):
            apply_alignment(model, 4, 3, AlignmentConfig(AlignmentMode.WA))

    def test_bad_config(self):
        with self.assertRaises(AlignmentError):
            apply_alignment(make_model(), 4, 3, AlignmentConfig(AlignmentMode.DIWA, eta_min=1.5))
        with self.assertRaises(AlignmentError):
            AlignmentConfig(AlignmentMode.DIWA, tau=0.0).check()

    def test_wa_scale(self):
        self.assertEqual(wa_scale(1.0, 2.0), 0.5)


if __name__ == "__main__":
    unittest.main()
