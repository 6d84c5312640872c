import json
import math
from typing import Dict, List, NamedTuple, Optional, Sequence

import jsonschema
import numpy as np
import pandas as pd


REPORT_FORMAT = "ffcil-run-report/1"

VARIANT_LABELS = {"equ_t": "Equ.T", "ff_org": "FF.org", "ff_ours": "FF.ours"}


class MetricsError(Exception):
    pass


class StepMetrics(NamedTuple):
    step: int
    accuracy: float
    task_accuracies: List[float]
    confusion: np.ndarray
    prediction_bias: List[float]
    train_loss: float = math.nan
    gamma: float = 1.0
    eta: float = 0.0
    wall_ms: float = math.nan

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "accuracy": self.accuracy,
            "task_accuracies": list(self.task_accuracies),
            "confusion": self.confusion.astype(int).tolist(),
            "prediction_bias": list(self.prediction_bias),
            "train_loss": self.train_loss,
            "alignment": {"gamma": self.gamma, "eta": self.eta},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepMetrics":
        return cls(step=d["step"], accuracy=d["accuracy"], task_accuracies=list(d["task_accuracies"]),
                   confusion=np.array(d["confusion"], dtype=np.int64), prediction_bias=list(d["prediction_bias"]),
                   train_loss=d["train_loss"], gamma=d["alignment"]["gamma"], eta=d["alignment"]["eta"])


def confusion_matrix(true: np.ndarray, predicted: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true incremental indices, columns are predictions."""
    flat = np.asarray(true, dtype=np.int64) * num_classes + np.asarray(predicted, dtype=np.int64)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def accuracy_from_confusion(confusion: np.ndarray) -> float:
    total = confusion.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    return float(np.trace(confusion) / total)


def task_accuracies(confusion: np.ndarray, counts: Sequence[int]) -> List[float]:
    """Accuracy on the classes of each step seen so far (a_{t,j})."""
    bounds = np.cumsum([0] + list(counts))
    result = []
    for j in range(len(counts)):
        block = confusion[bounds[j]:bounds[j + 1]]
        total = block.sum()
        result.append(float(np.trace(confusion[bounds[j]:bounds[j + 1], bounds[j]:bounds[j + 1]]) / total)
                      if total else math.nan)
    return result


def prediction_bias(confusion: np.ndarray, counts: Sequence[int]) -> List[float]:
    """Fraction of all predictions that land in each step's class group."""
    predicted = confusion.sum(axis=0)
    total = predicted.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    bounds = np.cumsum([0] + list(counts))
    return [float(predicted[bounds[j]:bounds[j + 1]].sum() / total) for j in range(len(counts))]


def average_forgetting(per_task_acc: Sequence[Sequence[float]], T: Optional[int] = None,
                       variant: str = "max") -> float:
    """
    per_task_acc[t][j] is the accuracy on step j's classes after step t
    (0-indexed, j <= t). "max" compares the final accuracy with the best
    earlier one; "first" compares it with the accuracy right after the task
    was learned.
    """
    T = len(per_task_acc) if T is None else T
    if T < 2:
        raise MetricsError("forgetting needs at least two steps, got {}".format(T))
    final = per_task_acc[T - 1]
    gaps = []
    for j in range(T - 1):
        if variant == "max":
            reference = max(per_task_acc[t][j] for t in range(j, T - 1))
        elif variant == "first":
            reference = per_task_acc[j][j]
        else:
            raise MetricsError("unknown forgetting variant {!r}".format(variant))
        gaps.append(reference - final[j])
    return float(sum(gaps) / (T - 1))


def average_incremental_accuracy(accuracies: Sequence[float]) -> float:
    return float(np.mean(accuracies))


class RunReport:
    """
    Per-step metrics of one incremental run plus its headline numbers. The
    serialized form omits wall-clock times so repeated runs give identical
    files; wall_ms stays available on the object and in the run tables.
    """

    def __init__(self, config: dict, schedule_text: str, steps: List[StepMetrics]):
        self.config = config
        self.schedule_text = schedule_text
        self.steps = steps

    def __repr__(self):
        return "<{} steps={} A_T={:.4f}>".format(self.__class__.__name__, len(self.steps), self.final_accuracy)

    @property
    def final_accuracy(self) -> float:
        return self.steps[-1].accuracy

    def per_task_accuracies(self) -> List[List[float]]:
        return [list(s.task_accuracies) for s in self.steps]

    def forgetting(self, variant: str = "max") -> float:
        if len(self.steps) < 2:
            return math.nan
        return average_forgetting(self.per_task_accuracies(), variant=variant)

    @property
    def average_forgetting(self) -> float:
        return self.forgetting("max")

    @property
    def wall_ms(self) -> float:
        return float(sum(s.wall_ms for s in self.steps))

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "config": self.config,
            "schedule": self.schedule_text,
            "steps": [s.to_dict() for s in self.steps],
            "final_accuracy": self.final_accuracy,
            "average_forgetting": _nullable(self.forgetting("max")),
            "forgetting_first_seen": _nullable(self.forgetting("first")),
            "average_incremental_accuracy": average_incremental_accuracy([s.accuracy for s in self.steps]),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        check_report(d)
        return cls(config=d["config"], schedule_text=d["schedule"],
                   steps=[StepMetrics.from_dict(s) for s in d["steps"]])


def _nullable(x: float) -> Optional[float]:
    return None if math.isnan(x) else x


_NUMBER = {"type": "number"}
_NULLABLE_NUMBER = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "config", "schedule", "steps", "final_accuracy", "average_forgetting",
                 "forgetting_first_seen", "average_incremental_accuracy"],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "config": {"type": "object", "required": ["dataset", "schedule", "method", "alignment", "train", "run"]},
        "schedule": {"type": "string", "pattern": "^steps [0-9]+\n"},
        "steps": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["step", "accuracy", "task_accuracies", "confusion", "prediction_bias",
                             "train_loss", "alignment"],
                "properties": {
                    "step": {"type": "integer", "minimum": 0},
                    "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                    "task_accuracies": {"type": "array", "items": _NUMBER},
                    "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                    "prediction_bias": {"type": "array", "items": _NUMBER},
                    "train_loss": _NULLABLE_NUMBER,
                    "alignment": {"type": "object", "required": ["gamma", "eta"]},
                },
            },
        },
        "final_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "average_forgetting": _NULLABLE_NUMBER,
        "forgetting_first_seen": _NULLABLE_NUMBER,
        "average_incremental_accuracy": _NUMBER,
    },
}


def check_report(d: dict):
    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as err:
        raise MetricsError("run report does not match {}: {}".format(REPORT_FORMAT, err.message))


def summarize_runs(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of A_T and forgetting across seeds."""
    ok = runs[runs["status"] == "ok"]
    summary = ok.groupby(["preset", "variant", "schedule_kind"]).agg(
        seeds=("seed", "count"),
        A_T_mean=("A_T", "mean"), A_T_std=("A_T", "std"),
        forgetting_mean=("forgetting", "mean"), forgetting_std=("forgetting", "std"),
    ).reset_index()
    return summary


def _arrow(delta: float) -> str:
    if pd.isna(delta):
        return ""
    return "{}{:.2f}".format("↑" if delta >= 0 else "↓", abs(delta) * 100)


def comparison_table(summary: pd.DataFrame) -> pd.DataFrame:
    """
    One row per preset and free-flow schedule kind with Equ.T / FF.org /
    FF.ours columns for A_T and forgetting, plus the FF.org - Equ.T and
    FF.ours - FF.org deltas. Equ.T is shared by every kind of a preset.
    """
    rows = []
    for preset, group in summary.groupby("preset"):
        equal = {r["variant"]: r for _, r in group[group["variant"] == "equ_t"].iterrows()}
        free_flow = group[group["variant"] != "equ_t"]
        kinds = sorted(set(free_flow["schedule_kind"])) or ["equal"]
        for kind in kinds:
            by_variant: Dict[str, pd.Series] = dict(equal)
            by_variant.update({r["variant"]: r for _, r in free_flow[free_flow["schedule_kind"] == kind].iterrows()})
            row = {"preset": preset, "schedule_kind": kind}
            for metric in ("A_T", "forgetting"):
                values = {}
                for variant, label in VARIANT_LABELS.items():
                    value = by_variant[variant]["{}_mean".format(metric)] if variant in by_variant else np.nan
                    values[variant] = value
                    row["{} {}".format(label, metric)] = value
                row["{} delta_org".format(metric)] = values["ff_org"] - values["equ_t"]
                row["{} delta_ours".format(metric)] = values["ff_ours"] - values["ff_org"]
                row["{} org_mark".format(metric)] = _arrow(row["{} delta_org".format(metric)])
                row["{} ours_mark".format(metric)] = _arrow(row["{} delta_ours".format(metric)])
            rows.append(row)
    return pd.DataFrame(rows)
