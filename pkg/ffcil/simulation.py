from typing import Sequence

from data import DatasetSplit, ReplayBuffer, Selection
from model import ClassifierModel
from policies import AlignClassifier, BeginStep, EvaluateStep, ExpandHead, TrainCurrentStep, UpdateBuffer
from trainer import PRESETS, MethodPreset, Surrogate, TrainConfig
from utils import attrs, new_random_state


class IncrementalSimulationConfiguration:
    """
    Everything one incremental run needs. The schedule travels inside the
    dataset split, so the run has exactly one timestep per incremental step.
    """

    def __init__(self,
                 split: DatasetSplit,
                 preset: MethodPreset = PRESETS["replay"],
                 train_config: TrainConfig = TrainConfig(),
                 surrogates: Sequence[Surrogate] = ()):
        self.split = split
        self.schedule = split.schedule
        self.preset = preset
        self.train_config = train_config
        # tuple, since cadCAD reads list-valued params as sweeps
        self.surrogates = tuple(surrogates)
        self.seed = train_config.seed

    def __repr__(self):
        return "<{} {}>".format(self.__class__.__name__, attrs(self))

    @property
    def num_steps(self) -> int:
        return self.schedule.num_steps


def bootstrap_simulation(c: IncrementalSimulationConfiguration):
    tc = c.train_config
    model = ClassifierModel.create(c.split.dim, tc.hidden_width, new_random_state(c.seed, "model_init"),
                                   head_bias=tc.head_bias)
    buffer = ReplayBuffer(tc.buffer_budget, Selection(tc.buffer_selection), seed=c.seed)

    initial_conditions = {
        "step": -1,
        "clock": 0.0,
        "model": model,
        "teacher": None,
        "aux_head": None,
        "buffer": buffer,
        "known_classes": 0,
        "train_loss": float("nan"),
        "alignment": None,
        "checkpoint": None,
        "step_metrics": None,
    }

    simulation_parameters = {
        'T': range(c.num_steps),
        'N': 1,
        'M': {
            "schedule": c.schedule,
            "split": c.split,
            "preset": c.preset,
            "train_config": tc,
            "surrogates": c.surrogates,
            "seed": c.seed,
        }
    }

    return initial_conditions, simulation_parameters


partial_state_update_blocks = [
    {
        "label": "Begin incremental step",
        "policies": {},
        "variables": {
            "step": BeginStep.su_advance_step,
            "clock": BeginStep.su_start_clock,
        }
    },
    {
        "label": "Snapshot teacher and expand heads",
        "policies": {
            "new_classes": ExpandHead.p_new_classes,
        },
        "variables": {
            "teacher": ExpandHead.su_snapshot_teacher,
            "model": ExpandHead.su_expand_head,
            "aux_head": ExpandHead.su_create_aux_head,
            "known_classes": ExpandHead.su_known_classes,
        }
    },
    {
        "label": "Train on current step and replay buffer",
        "policies": {
            "train": TrainCurrentStep.p_train,
        },
        "variables": {
            "model": TrainCurrentStep.su_update_model,
            "aux_head": TrainCurrentStep.su_update_aux_head,
            "train_loss": TrainCurrentStep.su_record_loss,
        }
    },
    {
        "label": "Align classifier norms",
        "policies": {
            "align": AlignClassifier.p_align,
        },
        "variables": {
            "model": AlignClassifier.su_update_model,
            "alignment": AlignClassifier.su_record_alignment,
            "aux_head": AlignClassifier.su_discard_aux_head,
        }
    },
    {
        "label": "Update replay buffer",
        "policies": {},
        "variables": {
            "buffer": UpdateBuffer.su_update_buffer,
        }
    },
    {
        "label": "Evaluate on all classes seen so far",
        "policies": {},
        "variables": {
            "step_metrics": EvaluateStep.su_evaluate,
            "checkpoint": EvaluateStep.su_write_checkpoint,
        }
    },
]
