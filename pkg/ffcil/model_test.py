import copy
import math
import os
import tempfile
import unittest

import numpy as np

from losses import AggregatedLoss, BatchView, instance_mean_ce
from model import (AuxHead, ClassifierModel, HeadInit, ModelError, SGDOptimizer, backward, load_checkpoint,
                   save_checkpoint, sgd_step, snapshot)
from utils import new_random_state


def make_model(dim=4, hidden=5, classes=3, seed=0):
    model = ClassifierModel.create(dim, hidden, new_random_state(seed, "init"))
    return model.expand_head(classes, HeadInit.SMALL_UNIFORM, new_random_state(seed, "head"))


class TestClassifierModel(unittest.TestCase):
    def test_forward_shapes(self):
        model = make_model()
        logits, probs = model.forward(np.ones((7, 4)))
        self.assertEqual(logits.shape, (7, 3))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_single_vector_is_a_batch_of_one(self):
        logits, _ = make_model().forward(np.ones(4))
        self.assertEqual(logits.shape, (1, 3))

    def test_wrong_dimension(self):
        with self.assertRaises(ModelError):
            make_model().forward(np.ones((2, 5)))

    def test_no_hidden_layer(self):
        model = make_model(hidden=0)
        self.assertEqual(model.feature_dim, 4)
        x = np.arange(8.0).reshape(2, 4)
        np.testing.assert_array_equal(model.embed(x), x)

    def test_expand_head_keeps_old_rows(self):
        model = make_model()
        old = model.W.copy()
        model.expand_head(2, HeadInit.SMALL_UNIFORM, new_random_state(1, "head"))
        self.assertEqual(model.num_classes, 5)
        np.testing.assert_array_equal(model.W[:3], old)
        self.assertTrue(np.all(np.abs(model.W[3:]) <= 0.01))
        np.testing.assert_array_equal(model.b[3:], 0.0)

    def test_expand_head_zero(self):
        model = make_model().expand_head(2, HeadInit.ZERO)
        np.testing.assert_array_equal(model.W[3:], 0.0)

    def test_expand_head_needs_new_classes(self):
        with self.assertRaises(ModelError):
            make_model().expand_head(0)

    def test_parameters_without_bias(self):
        model = ClassifierModel.create(4, 0, new_random_state(0), head_bias=False)
        self.assertEqual(sorted(model.parameters()), ["W"])

    def test_softmax_reference_value(self):
        model = ClassifierModel(np.zeros((0, 2)), np.zeros(0), np.eye(2), np.zeros(2))
        _, probs = model.forward(np.array([0.0, math.log(3.0)]))
        np.testing.assert_allclose(probs[0], [0.25, 0.75], rtol=0, atol=1e-12)

    def test_constant_logit_shift_keeps_probabilities(self):
        model = make_model()
        x = new_random_state(2, "inputs").normal(size=(6, 4))
        _, probs = model.forward(x)
        model.b = model.b + 7.5
        _, shifted = model.forward(x)
        np.testing.assert_allclose(shifted, probs, rtol=0, atol=1e-12)

    def test_zero_head_is_uniform(self):
        model = ClassifierModel.create(4, 5, new_random_state(0)).expand_head(6, HeadInit.ZERO)
        _, probs = model.forward(new_random_state(1).normal(size=(3, 4)))
        np.testing.assert_allclose(probs, 1 / 6, rtol=0, atol=1e-12)

    def test_expand_head_keeps_old_logits(self):
        model = make_model()
        x = new_random_state(3, "inputs").normal(size=(10, 4))
        before, _ = model.forward(x)
        after, _ = model.copy().expand_head(4, HeadInit.SMALL_UNIFORM, new_random_state(3, "head")).forward(x)
        np.testing.assert_array_equal(after[:, :3], before)


class TestTeacherSnapshot(unittest.TestCase):
    def test_snapshot_is_frozen_and_independent(self):
        model = make_model()
        x = np.ones((2, 4))
        teacher = snapshot(model)
        before = teacher.forward(x)[0]
        model.W += 1.0
        np.testing.assert_array_equal(teacher.forward(x)[0], before)
        with self.assertRaises(ValueError):
            teacher._model.W[0, 0] = 1.0

    def test_deepcopy_shares_the_snapshot(self):
        teacher = snapshot(make_model())
        self.assertIs(copy.deepcopy(teacher), teacher)


class TestBackward(unittest.TestCase):
    def test_non_finite_term_is_named(self):
        model = make_model()
        term = AggregatedLoss("bad", float("nan"), np.ones(2), np.ones(2), np.zeros((2, 3)))
        with self.assertRaises(ModelError) as ctx:
            backward(model, np.ones((2, 4)), [(1.0, term)])
        self.assertEqual(ctx.exception.term, "bad")

    def test_aux_term_without_aux_head(self):
        model = make_model()
        term = AggregatedLoss("aux", 0.0, np.ones(2), np.ones(2), np.zeros((2, 2)), head="aux")
        with self.assertRaises(ModelError):
            backward(model, np.ones((2, 4)), [(1.0, term)])

    def test_aux_gradients_have_head_shapes(self):
        model = make_model()
        aux = AuxHead.create(2, model.feature_dim, new_random_state(0, "aux"))
        term = AggregatedLoss("aux", 0.5, np.ones(2), np.ones(2), np.ones((2, 3)), head="aux")
        grads, aux_grads = backward(model, np.ones((2, 4)), [(1.0, term)], aux)
        self.assertEqual(aux_grads["A"].shape, aux.A.shape)
        np.testing.assert_array_equal(grads["W"], 0.0)
        self.assertTrue(np.any(grads["W1"] != 0.0))

    def test_zero_model_ce_gradient(self):
        x = np.array([[1.0, -2.0, 0.5]])
        model = ClassifierModel.create(3, 0, new_random_state(0)).expand_head(4, HeadInit.ZERO)
        logits, _ = model.forward(x)
        loss = instance_mean_ce(BatchView(logits, np.array([2]), old_classes=0, step_classes=4))
        grads, _ = backward(model, x, [(1.0, loss)])
        expected = np.outer(np.full(4, 0.25) - np.eye(4)[2], x[0])
        np.testing.assert_allclose(grads["W"], expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(grads["W"][2], -0.75 * x[0], rtol=0, atol=1e-12)

    def test_duplicated_batch_keeps_instance_mean_gradient(self):
        model = make_model()
        random_state = new_random_state(4, "inputs")
        x = random_state.normal(size=(5, 4))
        labels = random_state.randint(0, 3, size=5)

        def gradients(x, labels):
            logits, _ = model.forward(x)
            return backward(model, x, [(1.0, instance_mean_ce(BatchView(logits, labels, 0, 3)))])[0]

        single = gradients(x, labels)
        doubled = gradients(np.concatenate([x, x]), np.concatenate([labels, labels]))
        for name in single:
            np.testing.assert_allclose(doubled[name], single[name], rtol=1e-12, atol=1e-15)


class TestSGD(unittest.TestCase):
    def test_plain_step(self):
        model = make_model()
        W = model.W.copy()
        grads = {"W": np.ones_like(W)}
        sgd_step(model, grads, lr=0.1)
        np.testing.assert_allclose(model.W, W - 0.1)

    def test_momentum_and_weight_decay(self):
        theta = np.array([1.0, -2.0])
        optimizer = SGDOptimizer(lr=0.5, momentum=0.9, weight_decay=0.1)
        g = np.array([0.2, 0.4])
        optimizer.step({"p": theta}, {"p": g})
        v1 = g + 0.1 * np.array([1.0, -2.0])
        expected = np.array([1.0, -2.0]) - 0.5 * v1
        np.testing.assert_allclose(theta, expected)
        optimizer.step({"p": theta}, {"p": g})
        v2 = 0.9 * v1 + g + 0.1 * expected
        np.testing.assert_allclose(theta, expected - 0.5 * v2)

    def test_groups_keep_separate_velocity(self):
        optimizer = SGDOptimizer(lr=1.0, momentum=0.5)
        a, b = np.zeros(1), np.zeros(1)
        optimizer.step({"p": a}, {"p": np.ones(1)}, group=0)
        optimizer.step({"p": b}, {"p": np.ones(1)}, group=1)
        np.testing.assert_array_equal(a, b)

    def test_bad_hyperparameters(self):
        with self.assertRaises(ModelError):
            SGDOptimizer(lr=0.1, momentum=1.0)

    def test_zero_learning_rate(self):
        model = make_model()
        before = {name: value.copy() for name, value in model.parameters().items()}
        sgd_step(model, {name: np.ones_like(value) for name, value in before.items()}, lr=0.0, momentum=0.9,
                 weight_decay=0.1)
        for name, value in model.parameters().items():
            np.testing.assert_array_equal(value, before[name])

    def test_momentum_displacement_over_two_steps(self):
        theta = np.array([0.5, -1.0])
        g = np.array([0.3, 0.1])
        optimizer = SGDOptimizer(lr=0.2, momentum=0.9)
        for _ in range(2):
            optimizer.step({"p": theta}, {"p": g})
        np.testing.assert_allclose(theta, np.array([0.5, -1.0]) - 0.2 * g * 2.9, rtol=0, atol=1e-12)


class TestCheckpoint(unittest.TestCase):
    def test_save_and_load(self):
        model = make_model()
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "step0.ckpt")
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
        for name in ("W1", "b1", "W", "b"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))

    def test_rejects_other_files(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "x.ckpt")
            with open(path, "w") as f:
                f.write("hello\n")
            with self.assertRaises(ModelError):
                load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
