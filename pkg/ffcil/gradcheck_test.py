"""
Central finite-difference checks of the analytic gradients for every
objective composition the trainer can build.
"""
import unittest

import numpy as np

from losses import BatchView, combine_weighted, cwm_ce, vanilla_kd
from model import AuxHead, ClassifierModel, HeadInit, backward
from trainer import PRESETS, AuxMode, KDMode, Surrogate, framework_variant, objective_terms
from utils import new_random_state


STEP = 1e-5
TOLERANCE = 1e-5
INSTANCES = 20


def _objective(model, aux_head, x, labels, K, m, teacher_logits, preset, surrogates):
    features = model.embed(x)
    view = BatchView(model.head(features), labels, K, m, teacher_logits,
                     None if aux_head is None else aux_head.logits(features))
    terms = objective_terms(view, preset, surrogates)
    return combine_weighted([(term.value, c) for c, term in terms]), terms


def _relative_error(a, b):
    scale = np.linalg.norm(a) + np.linalg.norm(b)
    if scale < 1e-12:
        return 0.0
    return np.linalg.norm(a - b) / scale


class TestGradients(unittest.TestCase):
    def check(self, preset, surrogates=(), hidden_width=4, head_bias=True, seed_key="default", dim=3,
              classes=None):
        for instance in range(INSTANCES):
            random_state = new_random_state(instance, "gradcheck", seed_key)
            K, m = classes or (random_state.randint(1, 4), random_state.randint(1, 4))
            B = random_state.randint(3, 12)
            model = ClassifierModel.create(dim, hidden_width, random_state, head_bias=head_bias)
            model.expand_head(K + m, HeadInit.SMALL_UNIFORM, random_state)
            model.W *= 100.0
            model.b[:] = random_state.normal(size=K + m) * 0.1
            aux_head = None
            if preset.aux != AuxMode.OFF:
                aux_head = AuxHead.create(m, model.feature_dim, random_state)
                aux_head.A *= 100.0
            x = random_state.normal(size=(B, dim))
            labels = random_state.randint(0, K + m, size=B)
            teacher_logits = random_state.normal(size=(B, K)) if preset.kd != KDMode.OFF else None
            args = (x, labels, K, m, teacher_logits, preset, surrogates)

            _, terms = _objective(model, aux_head, *args)
            grads, aux_grads = backward(model, x, terms, aux_head)

            groups = [(model.parameters(), grads)]
            if aux_head is not None:
                groups.append((aux_head.parameters(), aux_grads))
            for params, analytic in groups:
                for name, theta in params.items():
                    numeric = np.zeros_like(theta)
                    for idx in np.ndindex(theta.shape):
                        original = theta[idx]
                        theta[idx] = original + STEP
                        plus, _ = _objective(model, aux_head, *args)
                        theta[idx] = original - STEP
                        minus, _ = _objective(model, aux_head, *args)
                        theta[idx] = original
                        numeric[idx] = (plus - minus) / (2 * STEP)
                    error = _relative_error(analytic[name], numeric)
                    self.assertLess(error, TOLERANCE, "{} {} instance {}: {}".format(
                        preset.name, name, instance, error))

    def test_instance_mean_ce(self):
        self.check(PRESETS["replay"])

    def test_cwm_ce(self):
        self.check(framework_variant(PRESETS["replay"]))

    def test_ce_with_vanilla_kd(self):
        self.check(PRESETS["kd_replay"]._replace(kd_coeff=0.7))

    def test_sliced_kd(self):
        self.check(PRESETS["kd_replay"]._replace(kd_renormalize=False))

    def test_cwm_with_replay_only_kd(self):
        self.check(framework_variant(PRESETS["kd_replay"]._replace(kd_coeff=0.7)))

    def test_cwm_kd_without_replay(self):
        self.check(framework_variant(PRESETS["kd_replay"], replay=False))

    def test_ce_with_aux(self):
        self.check(PRESETS["aux_expand"]._replace(aux_coeff=0.5))

    def test_cwm_with_cwm_aux(self):
        self.check(framework_variant(PRESETS["aux_expand"]))

    def test_without_hidden_layer_or_bias(self):
        self.check(framework_variant(PRESETS["kd_replay"]), hidden_width=0, head_bias=False)

    def test_normalized_surrogates(self):
        surrogates = (
            Surrogate("ctr", 0.3, cwm_ce),
            Surrogate("kl", 0.2, lambda view: vanilla_kd(view, 1.0)),
        )
        self.check(framework_variant(PRESETS["kd_replay"]), surrogates=surrogates)

    def test_three_classes_in_four_dimensions(self):
        for hidden_width in (0, 4):
            self.check(framework_variant(PRESETS["kd_replay"]), hidden_width=hidden_width, seed_key="d4",
                       dim=4, classes=(2, 1))
            self.check(PRESETS["aux_expand"]._replace(kd=KDMode.VANILLA), hidden_width=hidden_width,
                       seed_key="d4", dim=4, classes=(2, 1))


if __name__ == "__main__":
    unittest.main()
