"""Experiment orchestration: config parsing, runs, persistence, reports.

An experiment is a JSON document selecting a suite, a model, a list of
labelled strategies and a list of seeds. Every (strategy, seed) pair is
an independent run writing into its own directory:

    <output_dir>/
      datasets/<suite-hash>/task<t>_<split>.bin   cached, reused by hash
      runs/<label>/seed<seed>/wer_matrix.csv
      runs/<label>/seed<seed>/task<t>_adapted.ckpt(.json)
      runs/<label>/seed<seed>/task<t>_model.ckpt(.json)
      runs/<label>/seed<seed>/training_log.json
      summary.md, summary.json

A fine-tuning run is added automatically when no configured strategy is
plain fine-tuning, because every report column includes the forward
transfer measured against the fine-tuning diagonal. The environment
variable ``CLFORGE_OUT`` overrides ``output_dir``.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .errors import ConfigError
from .losses import LossConfig
from .metrics import SummaryMetrics, WerMatrix, summarize
from .model import ModelConfig, config_hash
from .params import AveragingSchedule, save_checkpoint
from .strategies import StrategyConfig, TrainConfig, run_sequence
from .tasks import SuiteConfig, dataset_header, gen_task_suite, load_dataset, save_dataset

FINETUNE_REFERENCE_LABEL = "finetune"


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig
    model: ModelConfig
    strategies: tuple  # ((label, StrategyConfig), ...)
    seeds: tuple
    output_dir: Path

    def __post_init__(self):
        labels = [label for label, _ in self.strategies]
        if not labels:
            raise ConfigError("strategies: at least one strategy is required")
        if len(set(labels)) != len(labels):
            raise ConfigError("strategies: labels must be unique")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if self.suite.V != self.model.V:
            raise ConfigError(f"suite.V ({self.suite.V}) and model.V ({self.model.V}) differ")
        if self.suite.d_i != self.model.d_i:
            raise ConfigError(f"suite.d_i ({self.suite.d_i}) and model.d_i ({self.model.d_i}) differ")

    def finetune_label(self):
        for label, cfg in self.strategies:
            if cfg.kind == "finetune":
                return label
        return None


@dataclass
class RunReport:
    output_dir: Path
    # label -> seed -> {"matrix": WerMatrix, "metrics": SummaryMetrics, ...}
    runs: dict = field(default_factory=dict)
    seed_means: dict = field(default_factory=dict)

    def matrix(self, label, seed) -> WerMatrix:
        return self.runs[label][seed]["matrix"]

    def metric(self, label, seed) -> SummaryMetrics:
        return self.runs[label][seed]["metrics"]


def _cfg_error(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _take(obj: dict, path: str, key: str, default=None, required=False):
    if key in obj:
        return obj.pop(key)
    if required:
        _cfg_error(f"{path}.{key}", "missing required field")
    return default


def _no_extras(obj: dict, path: str):
    if obj:
        _cfg_error(f"{path}.{sorted(obj)[0]}", "unknown field")


def parse_schedule(value, path: str) -> AveragingSchedule:
    try:
        if isinstance(value, str):
            if value in ("harmonic", "t^-1", "1/t"):
                return AveragingSchedule.harmonic()
            _cfg_error(path, f"unknown schedule {value!r} (use 'harmonic' or a number)")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return AveragingSchedule.constant(float(value))
        if isinstance(value, dict):
            value = dict(value)
            kind = _take(value, path, "kind", required=True)
            eta = _take(value, path, "eta")
            _no_extras(value, path)
            if kind == "harmonic":
                return AveragingSchedule.harmonic()
            if kind == "constant":
                return AveragingSchedule.constant(float(eta))
            _cfg_error(f"{path}.kind", f"unknown schedule kind {kind!r}")
    except ConfigError:
        raise
    except Exception as exc:
        _cfg_error(path, str(exc))
    _cfg_error(path, f"cannot interpret schedule value {value!r}")


def _parse_dataclass(cls, obj, path, defaults=None, coercions=None):
    if not isinstance(obj, dict):
        _cfg_error(path, f"expected an object, got {type(obj).__name__}")
    obj = dict(obj)
    kwargs = dict(defaults or {})
    allowed = set(cls.__dataclass_fields__)
    for key in list(obj):
        if key not in allowed:
            _cfg_error(f"{path}.{key}", "unknown field")
        value = obj.pop(key)
        if coercions and key in coercions:
            value = coercions[key](value, f"{path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        _cfg_error(path, str(exc))


def _as_tuple(value, path):
    if not isinstance(value, (list, tuple)):
        _cfg_error(path, "expected a list")
    return tuple(value)


def parse_config(doc, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config document (dict) into an ExperimentConfig.

    Error messages name the offending field as a dotted path.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc = dict(doc)
    suite_obj = _take(doc, "config", "suite", default={})
    model_obj = _take(doc, "config", "model", default={})
    train_obj = _take(doc, "config", "train", default={})
    loss_obj = _take(doc, "config", "loss", default={})
    strategies_obj = _take(doc, "config", "strategies", required=True)
    seeds = _take(doc, "config", "seeds", default=[1])
    output_dir = _take(doc, "config", "output_dir", default="runs/experiment")
    _no_extras(doc, "config")

    suite = _parse_dataclass(SuiteConfig, suite_obj, "suite",
                             coercions={"n_train": lambda v, p: tuple(v) if isinstance(v, list) else v,
                                        "frames_per_token": lambda v, p: tuple(_as_tuple(v, p)),
                                        "target_len": lambda v, p: tuple(_as_tuple(v, p)),
                                        "noise_sigma_per_task": lambda v, p: tuple(_as_tuple(v, p))})
    model_defaults = {"V": suite.V, "d_i": suite.d_i}
    model = _parse_dataclass(ModelConfig, model_obj, "model", defaults=model_defaults)
    train = _parse_dataclass(TrainConfig, train_obj, "train")
    loss = _parse_dataclass(LossConfig, loss_obj, "loss")

    if not isinstance(strategies_obj, list) or not strategies_obj:
        _cfg_error("strategies", "expected a non-empty list")
    strategies = []
    for i, entry in enumerate(strategies_obj):
        path = f"strategies[{i}]"
        if not isinstance(entry, dict):
            _cfg_error(path, "expected an object")
        entry = dict(entry)
        kind = _take(entry, path, "kind", required=True)
        label = _take(entry, path, "label", default=kind)
        rename = {"lambda": "lam", "memory_size": "memory"}
        entry = {rename.get(k, k): v for k, v in entry.items()}
        entry_train = train
        if "train" in entry:
            entry_train = _parse_dataclass(TrainConfig, entry.pop("train"), f"{path}.train")
        entry_loss = loss
        if "loss" in entry:
            entry_loss = _parse_dataclass(LossConfig, entry.pop("loss"), f"{path}.loss")
        schedule = None
        if "schedule" in entry:
            schedule = parse_schedule(entry.pop("schedule"), f"{path}.schedule")
        cfg = _parse_dataclass(
            StrategyConfig, entry, path,
            defaults={"kind": kind, "schedule": schedule, "train": entry_train,
                      "loss": entry_loss})
        strategies.append((str(label), cfg))

    seeds = tuple(int(s) for s in _as_tuple(seeds, "seeds"))

    if not any(cfg.kind == "finetune" for _, cfg in strategies):
        # forward transfer always needs the fine-tuning diagonal
        labels = {label for label, _ in strategies}
        ref_label = FINETUNE_REFERENCE_LABEL
        while ref_label in labels:
            ref_label += "_ref"
        strategies.append((ref_label, StrategyConfig(kind="finetune", train=train, loss=loss)))

    out = Path(os.environ.get("CLFORGE_OUT", output_dir))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return ExperimentConfig(suite=suite, model=model, strategies=tuple(strategies),
                            seeds=seeds, output_dir=out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, base_dir=path.parent)


def suite_cache_key(suite: SuiteConfig) -> str:
    text = json.dumps(suite.as_dict(), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def ensure_datasets(suite: SuiteConfig, out_dir: Path):
    """Generate (or reuse) the on-disk datasets; returns (suite_specs, dir)."""
    specs = gen_task_suite(suite)
    ds_dir = out_dir / "datasets" / suite_cache_key(suite)
    ds_dir.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        for split in ("train", "val", "test"):
            path = ds_dir / f"task{spec.task_id}_{split}.bin"
            if not path.exists():
                save_dataset(synthesize_split(spec, split), path,
                             dataset_header(spec, split))
    return specs, ds_dir


def synthesize_split(spec, split):
    from .tasks import synthesize

    return synthesize(spec, split)


class DatasetCache:
    """Loads dataset files once and serves them from memory."""

    def __init__(self, ds_dir: Path):
        self.ds_dir = Path(ds_dir)
        self._cache = {}

    def __call__(self, spec, split):
        key = (spec.task_id, split)
        if key not in self._cache:
            path = self.ds_dir / f"task{spec.task_id}_{split}.bin"
            utterances, _ = load_dataset(path)
            self._cache[key] = utterances
        return self._cache[key]


def _checkpoint_manifest(config: ExperimentConfig, label, strategy, seed, task_ids,
                         kind) -> dict:
    sched = strategy.schedule
    return {
        "model": config.model.as_dict(),
        "model_hash": config_hash(config.model),
        "suite": config.suite.as_dict(),
        "strategy": strategy.kind,
        "label": label,
        "seed": seed,
        "tasks": list(task_ids),
        "schedule": None if sched is None else {"kind": sched.kind, "eta": sched.eta},
        "checkpoint_kind": kind,
    }


def _execute_run(config: ExperimentConfig, label: str, strategy: StrategyConfig,
                 seed: int, ds_dir: Path, suite_specs) -> dict:
    provider = DatasetCache(ds_dir)
    run_dir = config.output_dir / "runs" / label / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    grid, state = run_sequence(suite_specs, strategy, config.model, seed,
                               provider=provider)
    wall = time.perf_counter() - started
    grid.to_csv(run_dir / "wer_matrix.csv")
    ckpt_paths = []
    for t in range(1, len(suite_specs) + 1):
        for kind, store in (("adapted", state.adapted[t - 1]),
                            ("model", state.models[t - 1])):
            path = run_dir / f"task{t}_{kind}.ckpt"
            save_checkpoint(store, path,
                            _checkpoint_manifest(config, label, strategy, seed,
                                                 range(1, t + 1), kind))
            ckpt_paths.append(str(path))
    (run_dir / "training_log.json").write_text(
        json.dumps({"label": label, "seed": seed, "tasks": state.logs},
                   indent=2, default=float) + "\n")
    return {"label": label, "seed": seed, "matrix_csv": str(run_dir / "wer_matrix.csv"),
            "wall_time": wall, "checkpoints": ckpt_paths}


def _run_job(args):
    return _execute_run(*args)


def run_experiment(config: ExperimentConfig, workers: int = 1,
                   log=lambda msg: None) -> RunReport:
    """Execute every (strategy, seed) run and write the reports."""
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    suite_specs, ds_dir = ensure_datasets(config.suite, out)
    log(f"datasets ready under {ds_dir}")

    jobs = [(config, label, strategy, seed, ds_dir, suite_specs)
            for label, strategy in config.strategies for seed in config.seeds]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_job, jobs):
                results.append(res)
                log(f"run {res['label']} seed {res['seed']} done "
                    f"({res['wall_time']:.1f}s)")
    else:
        for job in jobs:
            res = _run_job(job)
            results.append(res)
            log(f"run {res['label']} seed {res['seed']} done ({res['wall_time']:.1f}s)")

    report = RunReport(output_dir=out)
    by_key = {(r["label"], r["seed"]): r for r in results}
    ft_label = config.finetune_label()
    ft_diag = {}
    for seed in config.seeds:
        entry = by_key[(ft_label, seed)]
        ft_diag[seed] = WerMatrix.from_csv(entry["matrix_csv"]).diagonal()

    for label, strategy in config.strategies:
        report.runs[label] = {}
        for seed in config.seeds:
            entry = by_key[(label, seed)]
            grid = WerMatrix.from_csv(entry["matrix_csv"])
            summary = summarize(grid, ft_diag[seed])
            report.runs[label][seed] = {
                "matrix": grid, "metrics": summary,
                "matrix_csv": entry["matrix_csv"],
                "wall_time": entry["wall_time"],
                "checkpoints": entry["checkpoints"],
            }
        finals = np.stack([report.runs[label][s]["matrix"].final_row()
                           for s in config.seeds])
        report.seed_means[label] = {
            "final_row": finals.mean(axis=0),
            "avg": float(np.mean([report.runs[label][s]["metrics"].avg for s in config.seeds])),
            "bwt": float(np.mean([report.runs[label][s]["metrics"].bwt for s in config.seeds])),
            "fwt": float(np.mean([report.runs[label][s]["metrics"].fwt for s in config.seeds])),
        }

    _write_summaries(config, report)
    return report


def _strategy_table_row(label, strategy, cells):
    sched = strategy.schedule.describe() if strategy.schedule else ""
    mem = str(strategy.memory) if strategy.memory else ""
    return f"| {label} | {sched} | {mem} | " + " | ".join(cells) + " |"


def _format_table(config: ExperimentConfig, row_source) -> list:
    T = config.suite.T
    head = ["| Model | eta | Mem. | " + " | ".join(f"T{t}" for t in range(1, T + 1))
            + " | AVG | BWT | FWT |"]
    head.append("|" + "---|" * (T + 6))
    lines = list(head)
    for label, strategy in config.strategies:
        final_row, s_avg, s_bwt, s_fwt = row_source(label)
        cells = [f"{100 * v:.2f}" for v in final_row]
        cells += [f"{100 * s_avg:.2f}", f"{100 * s_bwt:+.2f}", f"{100 * s_fwt:+.2f}"]
        lines.append(_strategy_table_row(label, strategy, cells))
    return lines


def _write_summaries(config: ExperimentConfig, report: RunReport) -> None:
    out = config.output_dir
    lines = ["# Continual-learning run summary", ""]
    lines.append(f"Suite: `{config.suite.kind}`, T={config.suite.T}, V={config.suite.V}, "
                 f"similarity={config.suite.similarity}, master_seed={config.suite.master_seed}.")
    lines.append(f"Seeds: {', '.join(str(s) for s in config.seeds)}. "
                 "Error rates in percent; AVG/BWT/FWT from the final model.")
    lines.append("")
    lines.append("## Mean over seeds")
    lines.append("")
    lines += _format_table(config, lambda label: (
        report.seed_means[label]["final_row"], report.seed_means[label]["avg"],
        report.seed_means[label]["bwt"], report.seed_means[label]["fwt"]))
    for seed in config.seeds:
        lines.append("")
        lines.append(f"## Seed {seed}")
        lines.append("")
        lines += _format_table(config, lambda label, s=seed: (
            report.runs[label][s]["matrix"].final_row(),
            report.runs[label][s]["metrics"].avg,
            report.runs[label][s]["metrics"].bwt,
            report.runs[label][s]["metrics"].fwt))
    (out / "summary.md").write_text("\n".join(lines) + "\n")

    doc = {"suite": config.suite.as_dict(), "model": config.model.as_dict(),
           "seeds": list(config.seeds), "strategies": {}}
    for label, strategy in config.strategies:
        entry = {"kind": strategy.kind,
                 "schedule": strategy.schedule.describe() if strategy.schedule else None,
                 "memory": strategy.memory,
                 "seed_mean": {k: (list(v) if isinstance(v, np.ndarray) else v)
                               for k, v in report.seed_means[label].items()},
                 "seeds": {}}
        for seed in config.seeds:
            run = report.runs[label][seed]
            entry["seeds"][str(seed)] = {
                "metrics": run["metrics"].as_dict(),
                "final_row": list(run["matrix"].final_row()),
                "matrix_csv": run["matrix_csv"],
                "wall_time": run["wall_time"],
            }
        doc["strategies"][label] = entry
    (out / "summary.json").write_text(json.dumps(doc, indent=2, default=float) + "\n")
