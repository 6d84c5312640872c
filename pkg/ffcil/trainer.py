import logging
from enum import Enum
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from alignment import AlignmentConfig, AlignmentMode
from data import ReplayBuffer, StepData, sample_batches
from losses import (AggregatedLoss, BatchView, aux_ce, combine_weighted, cwm_aux_ce, cwm_ce, cwm_kd,
                    instance_mean_ce, normalize_infonce, normalize_kl, replay_only_kd, rescale, vanilla_kd)
from metrics import accuracy_from_confusion, confusion_matrix, task_accuracies
from model import AuxHead, ClassifierModel, HeadInit, SGDOptimizer, TeacherSnapshot, backward
from stream_protocol import IncrementSchedule


logger = logging.getLogger(__name__)


class TrainingError(Exception):
    def __init__(self, step, cause: Exception):
        super().__init__("step {}: {}: {}".format(step, cause.__class__.__name__, cause))
        self.step = step
        self.cause = cause


class MainLoss(Enum):
    INSTANCE_MEAN = "instance_mean"
    CWM = "cwm"


class KDMode(Enum):
    OFF = "off"
    VANILLA = "vanilla"
    REPLAY_ONLY = "replay_only"
    CWM_NO_REPLAY = "cwm_no_replay"


class AuxMode(Enum):
    OFF = "off"
    INSTANCE_MEAN = "instance_mean"
    CWM = "cwm"


class MethodPreset(NamedTuple):
    name: str
    main_loss: MainLoss = MainLoss.INSTANCE_MEAN
    kd: KDMode = KDMode.OFF
    kd_coeff: float = config.kd_coeff
    aux: AuxMode = AuxMode.OFF
    aux_coeff: float = config.aux_coeff
    alignment: AlignmentConfig = AlignmentConfig()
    normalize_surrogates: bool = False
    temperature: float = config.temperature
    kd_renormalize: bool = True


class TrainConfig(NamedTuple):
    epochs: int = config.epochs
    batch_size: int = config.batch_size
    learning_rate: float = config.learning_rate
    momentum: float = config.momentum
    weight_decay: float = config.weight_decay
    buffer_budget: int = config.buffer_budget
    buffer_selection: str = config.buffer_selection
    herding_space: str = config.herding_space
    hidden_width: int = config.hidden_width
    head_init: HeadInit = HeadInit(config.head_init)
    head_bias: bool = config.head_bias
    seed: int = 0
    checkpoint_dir: Optional[str] = None


class Surrogate(NamedTuple):
    """
    A caller-supplied auxiliary objective of unstable scale. kind "ctr" is
    normalized by ln(N_eff) (N_eff defaults to B - 1 negatives per anchor),
    kind "kl" by the number of new classes of the step.
    """
    kind: str
    coefficient: float
    fn: Callable[[BatchView], AggregatedLoss]
    n_eff: Optional[Callable[[BatchView], int]] = None


PRESETS = {
    "replay": MethodPreset("replay"),
    "kd_replay": MethodPreset("kd_replay", kd=KDMode.VANILLA),
    "wa_kd": MethodPreset("wa_kd", kd=KDMode.VANILLA, alignment=AlignmentConfig(AlignmentMode.WA)),
    "aux_expand": MethodPreset("aux_expand", aux=AuxMode.INSTANCE_MEAN),
}

FRAMEWORK_COMPONENTS = frozenset({"cwm", "replay_kd", "diwa", "normalize"})


def framework_variant(preset: MethodPreset, replay: bool = True,
                      components=FRAMEWORK_COMPONENTS) -> MethodPreset:
    """
    The free-flow variant of a baseline: class-wise mean aggregation for the
    main and auxiliary losses, replay-only distillation (class-wise distillation
    when there is no buffer), DIWA and surrogate normalization. `components`
    selects a subset for ablations.
    """
    changes = {}
    if "cwm" in components:
        changes["main_loss"] = MainLoss.CWM
        if preset.aux != AuxMode.OFF:
            changes["aux"] = AuxMode.CWM
    if "replay_kd" in components and preset.kd != KDMode.OFF:
        changes["kd"] = KDMode.REPLAY_ONLY if replay else KDMode.CWM_NO_REPLAY
    if "diwa" in components:
        changes["alignment"] = preset.alignment._replace(mode=AlignmentMode.DIWA)
    if "normalize" in components:
        changes["normalize_surrogates"] = True
    return preset._replace(**changes)


MAIN_LOSSES = {MainLoss.INSTANCE_MEAN: instance_mean_ce, MainLoss.CWM: cwm_ce}
KD_LOSSES = {KDMode.VANILLA: vanilla_kd, KDMode.REPLAY_ONLY: replay_only_kd, KDMode.CWM_NO_REPLAY: cwm_kd}
AUX_LOSSES = {AuxMode.INSTANCE_MEAN: aux_ce, AuxMode.CWM: cwm_aux_ce}


def _surrogate_term(view: BatchView, surrogate: Surrogate, normalize: bool) -> AggregatedLoss:
    raw = surrogate.fn(view)
    if not normalize:
        return raw
    if surrogate.kind == "ctr":
        n_eff = surrogate.n_eff(view) if surrogate.n_eff else view.batch_size - 1
        value = normalize_infonce(raw.value, n_eff)
        return rescale(raw, 1.0 / np.log(n_eff))._replace(value=value)
    if surrogate.kind == "kl":
        value = normalize_kl(raw.value, view.step_classes)
        return rescale(raw, 1.0 / view.step_classes)._replace(value=value)
    raise ValueError("unknown surrogate kind {!r}".format(surrogate.kind))


def objective_terms(view: BatchView, preset: MethodPreset,
                    surrogates: Sequence[Surrogate] = ()) -> List[Tuple[float, AggregatedLoss]]:
    """(coefficient, loss) pairs of the composed objective; zero-coefficient terms are left out."""
    terms = [(1.0, MAIN_LOSSES[preset.main_loss](view))]
    if preset.kd != KDMode.OFF and preset.kd_coeff and view.teacher_logits is not None:
        kd = KD_LOSSES[preset.kd](view, preset.temperature, preset.kd_renormalize)
        terms.append((preset.kd_coeff, kd))
    if preset.aux != AuxMode.OFF and preset.aux_coeff and view.aux_logits is not None:
        terms.append((preset.aux_coeff, AUX_LOSSES[preset.aux](view)))
    for surrogate in surrogates:
        if surrogate.coefficient:
            terms.append((surrogate.coefficient, _surrogate_term(view, surrogate, preset.normalize_surrogates)))
    return terms


def train_current_step(model: ClassifierModel, teacher: Optional[TeacherSnapshot], aux_head: Optional[AuxHead],
                       buffer: ReplayBuffer, current: StepData, schedule: IncrementSchedule, step: int,
                       preset: MethodPreset, train_config: TrainConfig, random_state: np.random.RandomState,
                       surrogates: Sequence[Surrogate] = ()) -> float:
    """
    Runs train_config.epochs passes over current-step data mixed with the
    replay buffer, updating model (and aux_head) in place. Returns the mean
    objective of the last epoch.
    """
    K = schedule.offsets()[step]
    step_classes = schedule.counts[step]
    optimizer = SGDOptimizer(train_config.learning_rate, train_config.momentum, train_config.weight_decay)
    epoch_loss = float("nan")
    for epoch in range(train_config.epochs):
        batch_losses = []
        for batch in sample_batches(buffer, current, train_config.batch_size, random_state):
            features = model.embed(batch.features)
            view = BatchView(
                logits=model.head(features),
                labels=schedule.to_arrival(batch.labels),
                old_classes=K,
                step_classes=step_classes,
                teacher_logits=None if teacher is None else teacher.forward(batch.features)[0],
                aux_logits=None if aux_head is None else aux_head.logits(features),
            )
            terms = objective_terms(view, preset, surrogates)
            grads, aux_grads = backward(model, batch.features, terms, aux_head)
            optimizer.step(model.parameters(), grads)
            if aux_head is not None:
                optimizer.step(aux_head.parameters(), aux_grads, group=1)
            batch_losses.append(combine_weighted([(term.value, c) for c, term in terms]))
        epoch_loss = float(np.mean(batch_losses))
        logger.debug("Step {} epoch {}/{} loss {:.4f}".format(step, epoch + 1, train_config.epochs, epoch_loss))
    return epoch_loss


class Evaluation(NamedTuple):
    accuracy: float
    confusion: np.ndarray
    task_accuracies: List[float]


def evaluate(model: ClassifierModel, test_set: StepData, counts: Sequence[int]) -> Evaluation:
    """
    test_set labels are incremental indices; counts are the class counts of
    the steps seen so far, so per-task accuracies follow the arrival groups.
    """
    num_classes = model.num_classes
    if test_set.size and test_set.labels.max() >= num_classes:
        raise TrainingError(len(counts) - 1, ValueError("test labels exceed the {} known classes".format(num_classes)))
    logits, _ = model.forward(test_set.features)
    predicted = np.argmax(logits, axis=1)
    confusion = confusion_matrix(test_set.labels, predicted, num_classes)
    return Evaluation(accuracy=accuracy_from_confusion(confusion), confusion=confusion,
                      task_accuracies=task_accuracies(confusion, counts))
