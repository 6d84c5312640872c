"""
Loss aggregation objectives. Every objective is a weighted sum of per-sample
terms, value = sum_i w_i * l_i, so each function returns the weights next to
the value together with the gradient of the value w.r.t. the logits of the
head it reads. model.backward turns those logit gradients into parameter
gradients, whatever the aggregation.
"""
import math
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax


class BatchView(NamedTuple):
    logits: np.ndarray                      # (B, C) student logits
    labels: np.ndarray                      # (B,) incremental indices
    old_classes: int                        # K
    step_classes: int                       # |C_t|
    teacher_logits: Optional[np.ndarray] = None  # (B, K)
    aux_logits: Optional[np.ndarray] = None      # (B, |C_t| + 1)

    @property
    def batch_size(self) -> int:
        return len(self.labels)

    @property
    def old_mask(self) -> np.ndarray:
        return self.labels < self.old_classes

    @property
    def new_mask(self) -> np.ndarray:
        return ~self.old_mask

    @property
    def b_old(self) -> int:
        return int(self.old_mask.sum())

    @property
    def b_new(self) -> int:
        return self.batch_size - self.b_old

    @property
    def step_labels(self) -> np.ndarray:
        """Auxiliary targets: 0 for every old class, y - K + 1 for new ones."""
        return np.where(self.labels < self.old_classes, 0, self.labels - self.old_classes + 1)

    def class_counts(self) -> dict:
        classes, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(classes, counts)}

    def subset(self, mask) -> "BatchView":
        return self._replace(
            logits=self.logits[mask], labels=self.labels[mask],
            teacher_logits=None if self.teacher_logits is None else self.teacher_logits[mask],
            aux_logits=None if self.aux_logits is None else self.aux_logits[mask])


class AggregatedLoss(NamedTuple):
    name: str
    value: float
    per_sample_weights: np.ndarray
    per_sample_losses: np.ndarray
    logit_grad: np.ndarray
    head: str = "main"


def aggregate(values: np.ndarray, weights: np.ndarray) -> float:
    return float(np.dot(weights, values))


def instance_mean_weights(labels: np.ndarray) -> np.ndarray:
    return np.full(len(labels), 1.0 / len(labels))


def class_wise_weights(labels: np.ndarray) -> np.ndarray:
    """w_i = 1 / (|C_batch| * n_{y_i}): every class present weighs the same."""
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return 1.0 / (len(classes) * counts[inverse])


def replay_only_weights(labels: np.ndarray, old_classes: int) -> np.ndarray:
    """Class-wise mean over old-class samples, scaled by B_old / B; zero elsewhere."""
    weights = np.zeros(len(labels))
    old = labels < old_classes
    b_old = int(old.sum())
    if b_old == 0:
        return weights
    weights[old] = (b_old / len(labels)) * class_wise_weights(labels[old])
    return weights


def cross_entropy_terms(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample CE and its gradient w.r.t. the logits (softmax - onehot)."""
    rows = np.arange(len(labels))
    losses = -log_softmax(logits, axis=1)[rows, labels]
    grad = softmax(logits, axis=1)
    grad[rows, labels] -= 1.0
    return losses, grad


def distillation_terms(logits: np.ndarray, teacher_logits: np.ndarray, temperature: float,
                       renormalize: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample soft cross-entropy h_i = -sum_{c<K} p_i(c) log q_i(c) and its
    gradient w.r.t. the full student logits. p and q are tempered. With
    renormalize, q is the softmax of the first K student logits; otherwise q
    is sliced from the softmax over all logits.
    """
    K = teacher_logits.shape[1]
    p = softmax(teacher_logits / temperature, axis=1)
    grad = np.zeros_like(logits)
    if renormalize:
        log_q = log_softmax(logits[:, :K] / temperature, axis=1)
        grad[:, :K] = (np.exp(log_q) - p) / temperature
    else:
        log_q_full = log_softmax(logits / temperature, axis=1)
        log_q = log_q_full[:, :K]
        grad = np.exp(log_q_full) / temperature
        grad[:, :K] -= p / temperature
    losses = -np.sum(p * log_q, axis=1)
    return losses, grad


def _aggregated(name: str, losses: np.ndarray, grad: np.ndarray, weights: np.ndarray,
                head: str = "main") -> AggregatedLoss:
    return AggregatedLoss(name=name, value=aggregate(losses, weights), per_sample_weights=weights,
                          per_sample_losses=losses, logit_grad=weights[:, None] * grad, head=head)


def instance_mean_ce(view: BatchView) -> AggregatedLoss:
    losses, grad = cross_entropy_terms(view.logits, view.labels)
    return _aggregated("instance_mean_ce", losses, grad, instance_mean_weights(view.labels))


def classwise_decomposed_ce(view: BatchView) -> AggregatedLoss:
    """sum_c (n_c / B) * mean CE of class c: the instance mean written per class."""
    losses, grad = cross_entropy_terms(view.logits, view.labels)
    B = view.batch_size
    value = 0.0
    for c, n_c in view.class_counts().items():
        value += (n_c / B) * losses[view.labels == c].mean()
    weights = instance_mean_weights(view.labels)
    return AggregatedLoss("classwise_decomposed_ce", float(value), weights, losses, weights[:, None] * grad)


def cwm_ce(view: BatchView) -> AggregatedLoss:
    losses, grad = cross_entropy_terms(view.logits, view.labels)
    return _aggregated("cwm_ce", losses, grad, class_wise_weights(view.labels))


def _require_teacher(view: BatchView):
    if view.teacher_logits is None:
        raise ValueError("distillation needs teacher outputs")
    if view.old_classes < 1:
        raise ValueError("distillation needs at least one old class")


def kd_log_likelihood(view: BatchView, temperature: float, renormalize: bool = True) -> np.ndarray:
    """l_i = sum_{c<K} p_i(c) log q_i(c), the (non-positive) per-sample KD quantity."""
    _require_teacher(view)
    losses, _ = distillation_terms(view.logits, view.teacher_logits, temperature, renormalize)
    return -losses


def vanilla_kd(view: BatchView, temperature: float, renormalize: bool = True) -> AggregatedLoss:
    _require_teacher(view)
    losses, grad = distillation_terms(view.logits, view.teacher_logits, temperature, renormalize)
    return _aggregated("vanilla_kd", losses, grad, instance_mean_weights(view.labels))


def replay_only_kd(view: BatchView, temperature: float, renormalize: bool = True) -> AggregatedLoss:
    """Distillation on replayed old-class samples only; exactly 0 when B_old = 0."""
    _require_teacher(view)
    losses, grad = distillation_terms(view.logits, view.teacher_logits, temperature, renormalize)
    return _aggregated("replay_only_kd", losses, grad, replay_only_weights(view.labels, view.old_classes))


def cwm_kd(view: BatchView, temperature: float, renormalize: bool = True) -> AggregatedLoss:
    _require_teacher(view)
    losses, grad = distillation_terms(view.logits, view.teacher_logits, temperature, renormalize)
    return _aggregated("cwm_kd", losses, grad, class_wise_weights(view.labels))


def _require_aux(view: BatchView):
    if view.aux_logits is None:
        raise ValueError("auxiliary loss needs auxiliary logits")


def aux_ce(view: BatchView) -> AggregatedLoss:
    _require_aux(view)
    targets = view.step_labels
    losses, grad = cross_entropy_terms(view.aux_logits, targets)
    return _aggregated("aux_ce", losses, grad, instance_mean_weights(targets), head="aux")


def cwm_aux_ce(view: BatchView) -> AggregatedLoss:
    _require_aux(view)
    targets = view.step_labels
    losses, grad = cross_entropy_terms(view.aux_logits, targets)
    return _aggregated("cwm_aux_ce", losses, grad, class_wise_weights(targets), head="aux")


def normalize_infonce(raw: float, n_eff: int) -> float:
    if n_eff < 2:
        raise ValueError("n_eff must be at least 2, got {}".format(n_eff))
    return raw / math.log(n_eff)


def normalize_kl(raw: float, c_t: int) -> float:
    if c_t < 1:
        raise ValueError("c_t must be at least 1, got {}".format(c_t))
    return raw / c_t


def rescale(loss: AggregatedLoss, factor: float) -> AggregatedLoss:
    return loss._replace(value=loss.value * factor, per_sample_weights=loss.per_sample_weights * factor,
                         logit_grad=loss.logit_grad * factor)


def combine_weighted(terms: Sequence[Tuple[float, float]]) -> float:
    """sum_j lambda_j * value_j over (value, lambda) pairs."""
    return float(sum(coefficient * value for value, coefficient in terms))
