"""
Policies and state update functions for one incremental step. Each cadCAD
timestep is one step of the schedule; state update functions return new
objects and never modify the state they were given.
"""
import functools
import logging
import math
import os
import time

from alignment import AlignmentOutcome, apply_alignment
from data import StepData
from metrics import StepMetrics, prediction_bias
from model import AuxHead, save_checkpoint, snapshot
from trainer import AuxMode, KDMode, TrainingError, evaluate, train_current_step
from utils import new_random_state


logger = logging.getLogger(__name__)


def _reraise_at_step(err: Exception, s):
    if isinstance(err, TrainingError):
        raise err
    raise TrainingError(s["step"], err) from err


# cadCAD dispatches on the positional arity of policies (4) and state update
# functions (5), so the wrappers spell their arguments out.
def at_step(f):
    """Re-raises anything the policy raises as a TrainingError carrying the current step."""
    @functools.wraps(f)
    def wrapper(params, substep, sL, s, **kwargs):
        try:
            return f(params, substep, sL, s, **kwargs)
        except Exception as err:
            _reraise_at_step(err, s)
    return wrapper


def update_at_step(f):
    """at_step for state update functions."""
    @functools.wraps(f)
    def wrapper(params, substep, sL, s, _input, **kwargs):
        try:
            return f(params, substep, sL, s, _input, **kwargs)
        except Exception as err:
            _reraise_at_step(err, s)
    return wrapper


def _current_step(params, s):
    t = s["step"]
    schedule = params["schedule"]
    return t, schedule.offsets()[t], schedule.counts[t]


class BeginStep:
    @staticmethod
    def su_advance_step(params, step, sL, s, _input, **kwargs):
        return "step", s["step"] + 1

    @staticmethod
    def su_start_clock(params, step, sL, s, _input, **kwargs):
        return "clock", time.perf_counter()


class ExpandHead:
    @staticmethod
    @at_step
    def p_new_classes(params, step, sL, s, **kwargs):
        t, K, num_new = _current_step(params, s)
        if K != s["model"].num_classes:
            raise ValueError("model has {} classes but {} are known before step {}".format(
                s["model"].num_classes, K, t))
        logger.debug("Step {}: {} known classes, {} new".format(t, K, num_new))
        return {"known_classes": K, "num_new": num_new}

    @staticmethod
    def su_snapshot_teacher(params, step, sL, s, _input, **kwargs):
        preset = params["preset"]
        if preset.kd == KDMode.OFF or not preset.kd_coeff or _input["known_classes"] == 0:
            return "teacher", None
        return "teacher", snapshot(s["model"])

    @staticmethod
    @update_at_step
    def su_expand_head(params, step, sL, s, _input, **kwargs):
        tc = params["train_config"]
        random_state = new_random_state(params["seed"], "head", s["step"])
        model = s["model"].copy().expand_head(_input["num_new"], tc.head_init, random_state)
        return "model", model

    @staticmethod
    def su_create_aux_head(params, step, sL, s, _input, **kwargs):
        preset = params["preset"]
        if preset.aux == AuxMode.OFF or not preset.aux_coeff:
            return "aux_head", None
        random_state = new_random_state(params["seed"], "aux", s["step"])
        aux_head = AuxHead.create(_input["num_new"], s["model"].feature_dim, random_state,
                                  params["train_config"].head_init)
        return "aux_head", aux_head

    @staticmethod
    def su_known_classes(params, step, sL, s, _input, **kwargs):
        return "known_classes", _input["known_classes"]


class TrainCurrentStep:
    @staticmethod
    @at_step
    def p_train(params, step, sL, s, **kwargs):
        t = s["step"]
        model = s["model"].copy()
        aux_head = None if s["aux_head"] is None else AuxHead(s["aux_head"].A.copy(), s["aux_head"].a.copy())
        loss = train_current_step(
            model, s["teacher"], aux_head, s["buffer"], params["split"].train[t], params["schedule"], t,
            params["preset"], params["train_config"], new_random_state(params["seed"], "batches", t),
            params["surrogates"])
        logger.debug("Step {}: trained, loss {:.4f}".format(t, loss))
        return {"model": model, "aux_head": aux_head, "train_loss": loss}

    @staticmethod
    def su_update_model(params, step, sL, s, _input, **kwargs):
        return "model", _input["model"]

    @staticmethod
    def su_update_aux_head(params, step, sL, s, _input, **kwargs):
        return "aux_head", _input["aux_head"]

    @staticmethod
    def su_record_loss(params, step, sL, s, _input, **kwargs):
        return "train_loss", _input["train_loss"]


class AlignClassifier:
    @staticmethod
    @at_step
    def p_align(params, step, sL, s, **kwargs):
        t, K, num_new = _current_step(params, s)
        model = s["model"].copy()
        if K == 0:
            outcome = AlignmentOutcome(gamma=1.0, eta=0.0, mu_old=math.nan, mu_new=math.nan)
        else:
            outcome = apply_alignment(model, K, num_new, params["preset"].alignment)
        return {"model": model, "alignment": outcome}

    @staticmethod
    def su_update_model(params, step, sL, s, _input, **kwargs):
        return "model", _input["model"]

    @staticmethod
    def su_record_alignment(params, step, sL, s, _input, **kwargs):
        return "alignment", _input["alignment"]

    @staticmethod
    def su_discard_aux_head(params, step, sL, s, _input, **kwargs):
        return "aux_head", None


class UpdateBuffer:
    @staticmethod
    @update_at_step
    def su_update_buffer(params, step, sL, s, _input, **kwargs):
        tc = params["train_config"]
        if tc.buffer_budget == 0:
            return "buffer", s["buffer"]
        t = s["step"]
        feature_map = s["model"].embed if tc.herding_space == "feature" else None
        buffer = s["buffer"].copy().update(params["split"].train[t], params["schedule"].class_sets[t], feature_map)
        logger.debug("Step {}: buffer holds {} exemplars of {} classes".format(t, len(buffer), len(buffer.store)))
        return "buffer", buffer


class EvaluateStep:
    @staticmethod
    @update_at_step
    def su_evaluate(params, step, sL, s, _input, **kwargs):
        t = s["step"]
        schedule = params["schedule"]
        test = params["split"].cumulative_test(t)
        test = StepData(test.features, schedule.to_arrival(test.labels))
        counts = schedule.counts[:t + 1]
        result = evaluate(s["model"], test, counts)
        alignment = s["alignment"]
        metrics = StepMetrics(
            step=t,
            accuracy=result.accuracy,
            task_accuracies=result.task_accuracies,
            confusion=result.confusion,
            prediction_bias=prediction_bias(result.confusion, counts),
            train_loss=s["train_loss"],
            gamma=alignment.gamma,
            eta=alignment.eta,
            wall_ms=(time.perf_counter() - s["clock"]) * 1000.0,
        )
        logger.info("Step {}: {} classes, accuracy {:.4f}, gamma {:.4f}".format(
            t, s["model"].num_classes, result.accuracy, alignment.gamma))
        return "step_metrics", metrics

    @staticmethod
    @update_at_step
    def su_write_checkpoint(params, step, sL, s, _input, **kwargs):
        checkpoint_dir = params["train_config"].checkpoint_dir
        if not checkpoint_dir:
            return "checkpoint", None
        os.makedirs(checkpoint_dir, exist_ok=True)
        path = os.path.join(checkpoint_dir, "step{}.ckpt".format(s["step"]))
        save_checkpoint(s["model"], path)
        return "checkpoint", path
