"""
File-level experiment configuration: a TOML subset with the sections
[dataset], [schedule], [method], [alignment], [train] and [run]. Missing keys
take the defaults in config.py; unknown keys, type mismatches and violated
ranges are reported together as diagnostics with the offending line.
"""
import os
import re
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import toml

import config
from alignment import AlignmentConfig, AlignmentError
from data import DatasetSource, Selection, load_feature_matrix, make_gaussian_dataset
from model import HeadInit
from stream_protocol import ScheduleError, ScheduleKind, ScheduleSpec
from trainer import PRESETS, MethodPreset, TrainConfig, framework_variant
from utils import stream_seed


OUTPUT_DIR_ENV = "FFCIL_OUTPUT_DIR"

# ablations name the framework components they switch on
VARIANTS = {
    "equ_t": None,
    "ff_org": frozenset(),
    "ff_ours": frozenset({"cwm", "replay_kd", "diwa", "normalize"}),
    "ff_cwm": frozenset({"cwm"}),
    "ff_cwm_rokd": frozenset({"cwm", "replay_kd"}),
}


class Diagnostic(NamedTuple):
    line: Optional[int]
    key: str
    message: str

    def __str__(self):
        where = "line {}: ".format(self.line) if self.line else ""
        return "{}{}: {}".format(where, self.key, self.message)


class ConfigError(Exception):
    def __init__(self, diagnostics: List[Diagnostic]):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


class DatasetSection(NamedTuple):
    source: str = "synthetic"
    path: str = ""
    num_classes: int = config.num_classes
    dim: int = config.dim
    train_per_class: int = config.train_per_class
    test_per_class: int = config.test_per_class
    separation: float = config.separation
    test_fraction: float = config.test_fraction


class ScheduleSection(NamedTuple):
    kinds: Tuple[str, ...] = ("fluctuating",)
    num_steps: int = config.num_steps
    min_per_step: int = config.min_per_step
    max_per_step: Optional[int] = None
    counts: Optional[Tuple[int, ...]] = None


class MethodSection(NamedTuple):
    presets: Tuple[str, ...] = ("kd_replay",)
    variants: Tuple[str, ...] = ("equ_t", "ff_org", "ff_ours")
    kd_coeff: float = config.kd_coeff
    aux_coeff: float = config.aux_coeff
    temperature: float = config.temperature
    kd_renormalize: bool = True


class AlignmentSection(NamedTuple):
    eta_min: float = config.eta_min
    tau: float = config.tau


class TrainSection(NamedTuple):
    epochs: int = config.epochs
    batch_size: int = config.batch_size
    learning_rate: float = config.learning_rate
    momentum: float = config.momentum
    weight_decay: float = config.weight_decay
    buffer_budget: int = config.buffer_budget
    buffer_selection: str = config.buffer_selection
    herding_space: str = config.herding_space
    hidden_width: int = config.hidden_width
    head_init: str = config.head_init
    head_bias: bool = config.head_bias
    checkpoint_dir: Optional[str] = None


class RunSection(NamedTuple):
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "runs"
    jobs: int = 1


SECTIONS = {
    "dataset": DatasetSection,
    "schedule": ScheduleSection,
    "method": MethodSection,
    "alignment": AlignmentSection,
    "train": TrainSection,
    "run": RunSection,
}


class ExperimentConfig(NamedTuple):
    dataset: DatasetSection = DatasetSection()
    schedule: ScheduleSection = ScheduleSection()
    method: MethodSection = MethodSection()
    alignment: AlignmentSection = AlignmentSection()
    train: TrainSection = TrainSection()
    run: RunSection = RunSection()

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Every effective value; None-valued keys are left out."""
        result = {}
        for name in SECTIONS:
            section = getattr(self, name)._asdict()
            result[name] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in section.items() if v is not None}
        return result

    def narrowed(self, seed: int, preset: str, variant: str, kind: str) -> "ExperimentConfig":
        """The single-run config a report embeds."""
        return self._replace(
            schedule=self.schedule._replace(kinds=(kind,)),
            method=self.method._replace(presets=(preset,), variants=(variant,)),
            run=self.run._replace(seeds=(seed,)),
        )

    def output_dir(self) -> str:
        return os.environ.get(OUTPUT_DIR_ENV) or self.run.output_dir

    def dataset_source(self, seed: int) -> DatasetSource:
        d = self.dataset
        data_seed = stream_seed(seed, "dataset")
        if d.source == "file":
            return load_feature_matrix(d.path, d.test_fraction, data_seed)
        return make_gaussian_dataset(d.num_classes, d.dim, d.train_per_class, d.test_per_class,
                                     d.separation, data_seed)

    def schedule_spec(self, kind: str, seed: int, total_classes: int) -> ScheduleSpec:
        s = self.schedule
        return ScheduleSpec(
            kind=ScheduleKind(kind),
            total_classes=total_classes,
            num_steps=s.num_steps,
            min_per_step=s.min_per_step,
            max_per_step=s.max_per_step,
            explicit_counts=s.counts if kind == ScheduleKind.EXPLICIT.value else None,
            seed=stream_seed(seed, "schedule"),
        )

    def method_preset(self, preset: str, variant: str) -> MethodPreset:
        m = self.method
        base = PRESETS[preset]._replace(
            kd_coeff=m.kd_coeff, aux_coeff=m.aux_coeff, temperature=m.temperature,
            kd_renormalize=m.kd_renormalize,
            alignment=PRESETS[preset].alignment._replace(eta_min=self.alignment.eta_min, tau=self.alignment.tau))
        components = VARIANTS[variant]
        if not components:
            return base
        return framework_variant(base, replay=self.train.buffer_budget > 0, components=components)

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate, momentum=t.momentum,
            weight_decay=t.weight_decay, buffer_budget=t.buffer_budget, buffer_selection=t.buffer_selection,
            herding_space=t.herding_space, hidden_width=t.hidden_width, head_init=HeadInit(t.head_init),
            head_bias=t.head_bias, seed=stream_seed(seed, "train"), checkpoint_dir=t.checkpoint_dir)


_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_]+)\s*=")


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    lines = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        header = _HEADER.match(line)
        if header:
            section = header.group(1)
            lines.setdefault((section, ""), number)
            continue
        key = _KEY.match(line)
        if key:
            lines[(section, key.group(1))] = number
    return lines


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _coerce(value, default, field: str):
    """Converts a TOML value to the type of the field default; raises TypeError on mismatch."""
    if field in ("kinds", "presets", "variants"):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise TypeError("expected a string or an array of strings")
        return tuple(value)
    if field in ("seeds", "counts"):
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            raise TypeError("expected an array of integers")
        return tuple(value)
    if field == "max_per_step":
        if not _is_int(value):
            raise TypeError("expected an integer")
        return value
    if field == "checkpoint_dir":
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value or None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected a boolean")
        return value
    if isinstance(default, int):
        if not _is_int(value):
            raise TypeError("expected an integer")
        return value
    if isinstance(default, float):
        if not (_is_int(value) or isinstance(value, float)):
            raise TypeError("expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    raise TypeError("unsupported value")


_SCHEDULE_BOUNDS = {
    "num_steps": "num_steps",
    "min_per_step": "min_per_step",
    "max_per_step": "max_per_step",
    "explicit_counts": "counts",
    "total_classes": "kinds",
}


def _check_ranges(c: ExperimentConfig) -> List[Tuple[str, str, str]]:
    """(section, key, message) for every violated invariant."""
    problems = []

    def require(ok, section, key, message):
        if not ok:
            problems.append((section, key, message))

    d = c.dataset
    require(d.source in ("synthetic", "file"), "dataset", "source", "must be 'synthetic' or 'file'")
    if d.source == "file":
        require(bool(d.path), "dataset", "path", "required when source is 'file'")
        require(0 < d.test_fraction < 1, "dataset", "test_fraction", "must be in (0, 1)")
    else:
        require(d.num_classes >= 1, "dataset", "num_classes", "must be positive")
        require(d.dim >= 2, "dataset", "dim", "must be at least 2")
        require(d.train_per_class >= 1, "dataset", "train_per_class", "must be positive")
        require(d.test_per_class >= 1, "dataset", "test_per_class", "must be positive")
        require(d.separation >= 0, "dataset", "separation", "must be non-negative")

    s = c.schedule
    require(len(s.kinds) > 0, "schedule", "kinds", "must not be empty")
    kinds = list(s.kinds) + (["equal"] if "equ_t" in c.method.variants else [])
    for kind in dict.fromkeys(kinds):
        if kind not in [k.value for k in ScheduleKind]:
            problems.append(("schedule", "kinds", "unknown schedule kind {!r}".format(kind)))
        elif d.source == "synthetic":
            spec = ScheduleSpec(ScheduleKind(kind), d.num_classes, s.num_steps, s.min_per_step,
                                s.max_per_step, s.counts if kind == "explicit" else None)
            try:
                spec.check()
            except ScheduleError as err:
                key = _SCHEDULE_BOUNDS.get(err.bound, "kinds")
                problems.append(("schedule", key, str(err)))

    m = c.method
    require(len(m.presets) > 0, "method", "presets", "must not be empty")
    for preset in m.presets:
        require(preset in PRESETS, "method", "presets",
                "unknown preset {!r}, expected one of {}".format(preset, sorted(PRESETS)))
    require(len(m.variants) > 0, "method", "variants", "must not be empty")
    for variant in m.variants:
        require(variant in VARIANTS, "method", "variants",
                "unknown variant {!r}, expected one of {}".format(variant, sorted(VARIANTS)))
    require(m.kd_coeff >= 0, "method", "kd_coeff", "must be non-negative")
    require(m.aux_coeff >= 0, "method", "aux_coeff", "must be non-negative")
    require(m.temperature > 0, "method", "temperature", "must be positive")

    try:
        AlignmentConfig(eta_min=c.alignment.eta_min, tau=c.alignment.tau).check()
    except AlignmentError as err:
        key = "eta_min" if "eta_min" in str(err) else "tau"
        problems.append(("alignment", key, str(err)))

    t = c.train
    require(t.epochs >= 1, "train", "epochs", "must be positive")
    require(t.batch_size >= 1, "train", "batch_size", "must be positive")
    require(t.learning_rate > 0, "train", "learning_rate", "must be positive")
    require(0 <= t.momentum < 1, "train", "momentum", "must be in [0, 1)")
    require(t.weight_decay >= 0, "train", "weight_decay", "must be non-negative")
    require(t.buffer_budget >= 0, "train", "buffer_budget", "must be non-negative")
    require(t.buffer_selection in [x.value for x in Selection], "train", "buffer_selection",
            "must be one of {}".format([x.value for x in Selection]))
    require(t.herding_space in ("feature", "input"), "train", "herding_space", "must be 'feature' or 'input'")
    require(t.hidden_width >= 0, "train", "hidden_width", "must be non-negative")
    require(t.head_init in [x.value for x in HeadInit], "train", "head_init",
            "must be one of {}".format([x.value for x in HeadInit]))
    if d.source == "synthetic" and t.buffer_budget > 0:
        require(t.buffer_budget >= d.num_classes, "train", "buffer_budget",
                "must hold at least one exemplar per class ({})".format(d.num_classes))

    r = c.run
    require(len(r.seeds) > 0, "run", "seeds", "must not be empty")
    require(all(0 <= seed < 2**64 for seed in r.seeds), "run", "seeds", "must be unsigned 64-bit integers")
    require(bool(r.output_dir), "run", "output_dir", "must not be empty")
    require(r.jobs >= 1, "run", "jobs", "must be positive")
    return problems


def config_from_dict(data: Dict[str, Any], lines: Optional[Dict[Tuple[str, str], int]] = None) -> ExperimentConfig:
    lines = lines or {}
    diagnostics = []
    sections = {}
    for name, value in data.items():
        if name not in SECTIONS:
            diagnostics.append(Diagnostic(lines.get((name, "")), name, "unknown section"))
        elif not isinstance(value, dict):
            diagnostics.append(Diagnostic(lines.get(("", name)), name, "expected a [{}] section".format(name)))
    for name, section_type in SECTIONS.items():
        values = data.get(name, {})
        if not isinstance(values, dict):
            continue
        defaults = section_type()
        fields = {}
        for key, value in values.items():
            if key not in section_type._fields:
                diagnostics.append(Diagnostic(lines.get((name, key)), "{}.{}".format(name, key), "unknown key"))
                continue
            try:
                fields[key] = _coerce(value, getattr(defaults, key), key)
            except TypeError as err:
                diagnostics.append(Diagnostic(lines.get((name, key)), "{}.{}".format(name, key), str(err)))
        sections[name] = defaults._replace(**fields)
    if diagnostics:
        raise ConfigError(diagnostics)

    c = ExperimentConfig(**sections)
    problems = _check_ranges(c)
    if problems:
        raise ConfigError([Diagnostic(lines.get((section, key)), "{}.{}".format(section, key), message)
                           for section, key, message in problems])
    return c


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = toml.loads(text)
    except toml.TomlDecodeError as err:
        raise ConfigError([Diagnostic(err.lineno, "", err.msg)])
    return config_from_dict(data, _key_lines(text))


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def dump_config(c: ExperimentConfig) -> str:
    return toml.dumps(c.to_dict())


def _parse_value(text: str):
    try:
        return toml.loads("value = {}".format(text))["value"]
    except toml.TomlDecodeError:
        return text


def apply_overrides(c: ExperimentConfig, assignments: Sequence[str]) -> ExperimentConfig:
    """Applies `section.key=value` strings; values use TOML syntax, bare words are strings."""
    data = c.to_dict()
    diagnostics = []
    for assignment in assignments:
        dotted, sep, raw = assignment.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not sep or not dot:
            diagnostics.append(Diagnostic(None, assignment, "expected section.key=value"))
            continue
        data.setdefault(section, {})[key] = _parse_value(raw.strip())
    if diagnostics:
        raise ConfigError(diagnostics)
    return config_from_dict(data)
