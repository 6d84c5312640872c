#!/usr/bin/env python
# coding: utf-8

import argparse
import concurrent.futures
import glob
import json
import logging
import math
import os
import sys
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import pandas as pd
from cadCAD.configuration import Experiment
from cadCAD.engine import ExecutionContext, ExecutionMode, Executor
from tqdm import tqdm

from data import DatasetSplit, split_by_schedule
from experiment import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from metrics import RunReport, comparison_table, summarize_runs
from simulation import (IncrementalSimulationConfiguration, bootstrap_simulation,
                        partial_state_update_blocks)
from stream_protocol import (IncrementSchedule, ScheduleError, generate_schedule, schedule_to_text,
                             validate_schedule)
from trainer import PRESETS, MethodPreset, Surrogate, TrainConfig


logger = logging.getLogger(__name__)

RUN_COLUMNS = ["preset", "variant", "schedule_kind", "seed", "A_T", "forgetting", "wall_ms", "status", "error"]


def run_simulation(c: IncrementalSimulationConfiguration) -> pd.DataFrame:
    initial_conditions, simulation_parameters = bootstrap_simulation(c)

    exp = Experiment()
    exp.append_model(
        initial_state=initial_conditions,
        partial_state_update_blocks=partial_state_update_blocks,
        sim_configs=simulation_parameters
    )

    # single process, so one run never competes with its sweep workers
    exec_mode = ExecutionMode()
    single_proc_context = ExecutionContext(exec_mode.local_mode)
    executor = Executor(single_proc_context, configs=exp.configs)

    raw_system_events, tensor_field, sessions = executor.execute()

    df = pd.DataFrame(raw_system_events)
    return df


def _describe_run(c: IncrementalSimulationConfiguration) -> dict:
    """Config dict for runs started in-process rather than from an ExperimentConfig."""
    preset, tc = c.preset, c.train_config
    return {
        "dataset": {"dim": c.split.dim, "num_classes": c.schedule.total_classes},
        "schedule": {"counts": list(c.schedule.counts), "num_steps": c.schedule.num_steps},
        "method": {"preset": preset.name, "main_loss": preset.main_loss.value, "kd": preset.kd.value,
                   "kd_coeff": preset.kd_coeff, "aux": preset.aux.value, "aux_coeff": preset.aux_coeff,
                   "normalize_surrogates": preset.normalize_surrogates, "temperature": preset.temperature,
                   "kd_renormalize": preset.kd_renormalize, "surrogates": len(c.surrogates)},
        "alignment": {"mode": preset.alignment.mode.value, "eta_min": preset.alignment.eta_min,
                      "tau": preset.alignment.tau},
        "train": {k: (v.value if hasattr(v, "value") else v) for k, v in tc._asdict().items()
                  if k not in ("seed", "checkpoint_dir")},
        "run": {"seed": tc.seed},
    }


def get_run_report(df: pd.DataFrame, c: IncrementalSimulationConfiguration, config: dict) -> RunReport:
    df_final = df[df.substep.eq(len(partial_state_update_blocks))]
    steps = list(df_final["step_metrics"])
    return RunReport(config=config, schedule_text=schedule_to_text(c.schedule), steps=steps)


def run_incremental(schedule: IncrementSchedule, dataset_split: DatasetSplit,
                    preset: MethodPreset = PRESETS["replay"], train_config: TrainConfig = TrainConfig(),
                    surrogates: Sequence[Surrogate] = (), config: Optional[dict] = None) -> RunReport:
    if dataset_split.schedule != schedule:
        raise ScheduleError("schedule", "dataset split was made for a different schedule")
    c = IncrementalSimulationConfiguration(dataset_split, preset, train_config, surrogates)
    logger.info("Running {} on {} steps {}".format(preset.name, schedule.num_steps, list(schedule.counts)))
    df = run_simulation(c)
    return get_run_report(df, c, config if config is not None else _describe_run(c))


class RunKey(NamedTuple):
    preset: str
    variant: str
    schedule_kind: str
    seed: int

    def filename(self) -> str:
        return "{}__{}__seed{}.json".format(self.variant, self.schedule_kind, self.seed)


def make_schedule(config: ExperimentConfig, kind: str, seed: int, total_classes: int) -> IncrementSchedule:
    schedule = generate_schedule(config.schedule_spec(kind, seed, total_classes))
    validation = validate_schedule(schedule, total_classes)
    if not validation.ok:
        raise ScheduleError(validation.violation, validation.detail)
    return schedule


def run_experiment(config: ExperimentConfig, seed: int, preset: str, variant: str,
                   kind: Optional[str] = None) -> RunReport:
    """One run of `preset` in `variant` form; equ_t always uses the equal split."""
    kind = "equal" if variant == "equ_t" else (kind or config.schedule.kinds[0])
    source = config.dataset_source(seed)
    schedule = make_schedule(config, kind, seed, source.num_classes)
    split = split_by_schedule(source, schedule)
    return run_incremental(schedule, split, config.method_preset(preset, variant), config.train_config(seed),
                           config=config.narrowed(seed, preset, variant, kind).to_dict())


def sweep_keys(config: ExperimentConfig) -> List[RunKey]:
    keys = []
    for preset in config.method.presets:
        for variant in config.method.variants:
            kinds = ["equal"] if variant == "equ_t" else config.schedule.kinds
            for kind in kinds:
                for seed in config.run.seeds:
                    keys.append(RunKey(preset, variant, kind, seed))
    return keys


def _run_key(config: ExperimentConfig, key: RunKey) -> Tuple[RunKey, Optional[str], dict]:
    """Worker body: never raises, so failures come back as rows."""
    row = dict(key._asdict(), A_T=math.nan, forgetting=math.nan, wall_ms=math.nan, status="ok", error="")
    try:
        report = run_experiment(config, key.seed, key.preset, key.variant, key.schedule_kind)
    except Exception as err:
        logger.warning("Run {} failed: {}".format(key.filename(), err))
        row.update(status="error", error="{}: {}".format(err.__class__.__name__, err))
        return key, None, row
    row.update(A_T=report.final_accuracy, forgetting=report.average_forgetting, wall_ms=report.wall_ms)
    return key, report.to_json(), row


def _write_tables(runs: pd.DataFrame, out: str) -> pd.DataFrame:
    summary = summarize_runs(runs)
    runs.to_csv(os.path.join(out, "runs.csv"), index=False)
    summary.to_csv(os.path.join(out, "summary.csv"), index=False)
    comparison_table(summary).to_csv(os.path.join(out, "comparison.csv"), index=False)
    return summary


def run_sweep(config: ExperimentConfig, out: Optional[str] = None, jobs: Optional[int] = None,
              progress: bool = True) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Runs every (preset, variant, schedule kind, seed) combination and writes
    one report per run plus runs.csv, summary.csv and comparison.csv. Reports
    are written by this process only, as workers finish.
    """
    out = out or config.output_dir()
    jobs = jobs or config.run.jobs
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.toml"), "w") as f:
        f.write(dump_config(config))

    keys = sweep_keys(config)
    logger.info("Sweep of {} runs into {} with {} job(s)".format(len(keys), out, jobs))
    rows: Dict[RunKey, dict] = {}

    def collect(result):
        key, report_json, row = result
        if report_json is not None:
            with open(os.path.join(out, key.filename()), "w") as f:
                f.write(report_json)
        rows[key] = row

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_key, config, key) for key in keys]
            for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures), disable=not progress):
                collect(future.result())
    else:
        for key in tqdm(keys, disable=not progress):
            collect(_run_key(config, key))

    runs = pd.DataFrame([rows[key] for key in keys], columns=RUN_COLUMNS)
    summary = _write_tables(runs, out)
    failed = int((runs["status"] != "ok").sum())
    if failed:
        logger.warning("{} of {} runs failed, see runs.csv".format(failed, len(runs)))
    return runs, summary


def reaggregate(directory: str) -> pd.DataFrame:
    """Rebuilds the tables from the report files in `directory`, checking each against the schema."""
    wall = {}
    runs_path = os.path.join(directory, "runs.csv")
    if os.path.exists(runs_path):
        previous = pd.read_csv(runs_path)
        for _, r in previous.iterrows():
            wall[(r["variant"], r["schedule_kind"], int(r["seed"]))] = r["wall_ms"]

    rows = []
    for path in sorted(glob.glob(os.path.join(directory, "*__*__seed*.json"))):
        with open(path) as f:
            report = RunReport.from_dict(json.load(f))
        method, schedule, run = report.config["method"], report.config["schedule"], report.config["run"]
        key = RunKey(method["presets"][0], method["variants"][0], schedule["kinds"][0], run["seeds"][0])
        rows.append(dict(key._asdict(), A_T=report.final_accuracy, forgetting=report.average_forgetting,
                         wall_ms=wall.get((key.variant, key.schedule_kind, key.seed), math.nan),
                         status="ok", error=""))
    if not rows:
        raise FileNotFoundError("no run reports in {}".format(directory))
    return _write_tables(pd.DataFrame(rows, columns=RUN_COLUMNS), directory)


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append("run.seeds=[{}]".format(args.seed))
    if getattr(args, "preset", None):
        overrides.append("method.presets=[\"{}\"]".format(args.preset))
    if getattr(args, "schedule", None):
        overrides.append("schedule.kinds=[\"{}\"]".format(args.schedule))
    if getattr(args, "jobs", None):
        overrides.append("run.jobs={}".format(args.jobs))
    return apply_overrides(config, overrides) if overrides else config


def _output_dir(args, config: ExperimentConfig) -> str:
    return args.out or config.output_dir()


def cmd_schedule(args) -> int:
    config = _load(args)
    seed = config.run.seeds[0]
    total = config.dataset_source(seed).num_classes if config.dataset.source == "file" else config.dataset.num_classes
    for kind in config.schedule.kinds:
        schedule = make_schedule(config, kind, seed, total)
        print("# {} seed {}".format(kind, seed))
        print(schedule_to_text(schedule), end="")
    return 0


def cmd_run(args) -> int:
    config = _load(args)
    variant = args.variant or config.method.variants[0]
    key = RunKey(config.method.presets[0], variant,
                 "equal" if variant == "equ_t" else config.schedule.kinds[0], config.run.seeds[0])
    report = run_experiment(config, key.seed, key.preset, key.variant, key.schedule_kind)
    out = _output_dir(args, config)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, key.filename())
    with open(path, "w") as f:
        f.write(report.to_json())
    print("{} A_T={:.4f} forgetting={:.4f} -> {}".format(key.filename(), report.final_accuracy,
                                                         report.average_forgetting, path))
    return 0


def cmd_sweep(args) -> int:
    config = _load(args)
    runs, summary = run_sweep(config, out=_output_dir(args, config), progress=not args.quiet)
    print(summary.to_string(index=False))
    return 0 if (runs["status"] == "ok").all() else 1


def cmd_report(args) -> int:
    directory = args.out or ExperimentConfig().output_dir()
    summary = reaggregate(directory)
    print(comparison_table(summary).to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Free-flow class-incremental learning experiments")
    parser.add_argument("--log-level", default="INFO")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5")
        p.add_argument("--out", help="output directory")
        p.add_argument("--schedule", help="schedule kind")
        if seed:
            p.add_argument("--seed", type=int)

    p = verbs.add_parser("schedule", help="generate and print schedules")
    common(p)
    p.set_defaults(func=cmd_schedule)

    p = verbs.add_parser("run", help="run a single experiment")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--variant")
    p.set_defaults(func=cmd_run)

    p = verbs.add_parser("sweep", help="run the configured grid")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--jobs", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = verbs.add_parser("report", help="re-aggregate existing reports")
    p.add_argument("--out", help="directory holding run reports")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        for diagnostic in err.diagnostics:
            print("config error: {}".format(diagnostic), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
