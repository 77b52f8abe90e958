"""Command-line entry points.

Verbs:
  run        execute an experiment config end to end
  average    blend two checkpoints (offline weight averaging)
  metrics    recompute AVG/BWT/FWT from a persisted WER matrix CSV
  gen-tasks  materialize a config's datasets without training
  eval       score a checkpoint against a dataset file

Exit codes: 0 success, 2 invalid configuration/arguments, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CLForgeError, ConfigError, TrainingDiverged
from .harness import ensure_datasets, load_config, run_experiment
from .metrics import WerMatrix, avg, bwt, fwt
from .model import ModelConfig, config_hash
from .params import (AveragingSchedule, average, eta_for_task, load_checkpoint,
                     save_checkpoint)
from .strategies import evaluate_wer
from .tasks import load_dataset


def _cmd_run(args) -> int:
    config = load_config(args.config)
    report = run_experiment(config, workers=args.workers, log=print)
    print(f"summary written to {report.output_dir / 'summary.md'}")
    return 0


def _cmd_average(args) -> int:
    old, old_manifest = load_checkpoint(args.old)
    adapted, new_manifest = load_checkpoint(args.adapted)
    old_hash = old_manifest.get("model_hash")
    new_hash = new_manifest.get("model_hash")
    if old_hash != new_hash:
        raise ConfigError(
            f"checkpoints come from different model configs ({old_hash} vs {new_hash})")
    if args.eta is not None:
        eta = args.eta
        if not (0.0 <= eta <= 1.0):
            raise ConfigError(f"--eta must lie in [0, 1], got {eta}")
    else:
        if args.task_index is None or args.schedule is None:
            raise ConfigError("provide --eta, or both --task-index and --schedule")
        if args.task_index < 1:
            raise ConfigError(f"--task-index must be >= 1, got {args.task_index}")
        if args.schedule == "harmonic":
            schedule = AveragingSchedule.harmonic()
        else:
            try:
                schedule = AveragingSchedule.constant(float(args.schedule))
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"--schedule: {exc}") from exc
        eta = eta_for_task(schedule, args.task_index)
    merged = average(old, adapted, eta)
    manifest = dict(new_manifest)
    manifest["checkpoint_kind"] = "averaged"
    manifest["eta"] = eta
    manifest["sources"] = [str(args.old), str(args.adapted)]
    save_checkpoint(merged, args.out, manifest)
    print(f"eta = {eta:g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    grid = WerMatrix.from_csv(args.matrix)
    try:
        record = {"avg": avg(grid), "bwt": bwt(grid) if grid.T >= 2 else None}
        if args.baseline:
            ref = WerMatrix.from_csv(args.baseline).diagonal()
            record["fwt"] = fwt(grid, ref)
        else:
            record["fwt"] = None
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"AVG {record['avg']:.2f}")
    if record["bwt"] is not None:
        print(f"BWT {record['bwt']:.2f}")
    if record["fwt"] is not None:
        print(f"FWT {record['fwt']:.2f}")
    json_path = Path(args.json) if args.json else Path(str(args.matrix) + ".metrics.json")
    json_path.write_text(json.dumps(record, indent=2) + "\n")
    print(f"wrote {json_path}")
    return 0


def _cmd_gen_tasks(args) -> int:
    config = load_config(args.config)
    _, ds_dir = ensure_datasets(config.suite, config.output_dir)
    print(f"datasets written under {ds_dir}")
    return 0


def _cmd_eval(args) -> int:
    store, manifest = load_checkpoint(args.checkpoint)
    if "model" not in manifest:
        raise ConfigError(f"{args.checkpoint}.json: manifest lacks the model config")
    model_cfg = ModelConfig(**manifest["model"])
    if manifest.get("model_hash") not in (None, config_hash(model_cfg)):
        raise ConfigError(f"{args.checkpoint}.json: model hash does not match its config")
    utterances, header = load_dataset(args.dataset)
    task_id = args.task_id if args.task_id is not None else int(header["task_id"])
    max_len = args.max_len
    if max_len is None:
        max_len = 2 * max(len(u.target) for u in utterances) + 4
    rate = evaluate_wer(store, model_cfg, utterances, task_id, max_len)
    print(f"WER {100 * rate:.2f}% on {len(utterances)} utterances "
          f"(task {task_id}, {Path(args.dataset).name})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clforge",
        description="Continual-learning laboratory: run task sequences, average "
                    "checkpoints, and score evaluation grids.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config", help="path to the experiment JSON")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel (strategy, seed) runs")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("average", help="blend two checkpoints")
    p.add_argument("--old", required=True, help="previous model checkpoint")
    p.add_argument("--adapted", required=True, help="adapted model checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--eta", type=float, default=None, help="blend weight in [0, 1]")
    p.add_argument("--task-index", type=int, default=None,
                   help="task index used with --schedule")
    p.add_argument("--schedule", default=None,
                   help="'harmonic' or a constant eta value")
    p.set_defaults(func=_cmd_average)

    p = sub.add_parser("metrics", help="summary metrics from a WER matrix CSV")
    p.add_argument("matrix", help="wer_matrix.csv path")
    p.add_argument("--baseline", default=None,
                   help="fine-tuning matrix CSV supplying the FWT reference diagonal")
    p.add_argument("--json", default=None, help="where to write the JSON record")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("gen-tasks", help="materialize a config's datasets only")
    p.add_argument("config", help="path to the experiment JSON")
    p.set_defaults(func=_cmd_gen_tasks)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset .bin file")
    p.add_argument("--task-id", type=int, default=None,
                   help="head to decode with (defaults to the dataset's task)")
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(exc.diagnostics, indent=2, default=str), file=sys.stderr)
        return 3
    except CLForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
