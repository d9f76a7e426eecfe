"""Command line entry point.

    ktharness run --config exp.toml [--budget 2048] [--resume]
    ktharness judge --config exp.toml RUN
    ktharness trace --config exp.toml RUN
    ktharness report --out reports/ RUN [RUN ...]
    ktharness validate-config --config exp.toml

Exit codes: 0 success, 2 configuration error, 3 transport retries exhausted,
4 empty results (nothing to score, judge or analyse).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config, parse_budget
from .experiment import (
    HarnessError,
    judge_experiment_run,
    list_runs,
    prepare,
    run_experiment,
    trace_experiment_run,
    write_report,
)
from .judge import COLUMN_NAMES, DIMENSIONS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_EMPTY = 4

log = logging.getLogger("ktharness")


def _budget_arg(value: str) -> int | None:
    try:
        return parse_budget(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ktharness", description="LLM knowledge-tracing evaluation harness.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, required: bool = True) -> None:
        p.add_argument("--config", required=required, help="experiment TOML file")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--provider", choices=("mock", "http"), help="override model and judge provider")

    p = sub.add_parser("run", help="run the sampling protocol and write records + metrics")
    with_config(p)
    p.add_argument("--cap", type=int, help="limit the number of evaluation instances")
    p.add_argument("--budget", type=_budget_arg, action="append",
                   help="thinking budget in tokens or 'none'; repeat for a sweep")
    p.add_argument("--variant", help="NoOption | Option | Weight")
    p.add_argument("--mode", help="PredOnly | FB | Rec | FBRec")
    p.add_argument("--resume", action="store_true", help="continue existing runs instead of restarting")

    p = sub.add_parser("judge", help="score feedback/recommendations of a finished run")
    with_config(p, required=False)
    p.add_argument("run", help="run id or run directory")

    p = sub.add_parser("trace", help="label reasoning traces of a finished run and analyse transitions")
    with_config(p, required=False)
    p.add_argument("run", help="run id or run directory")

    p = sub.add_parser("report", help="cross-run tables and figures")
    p.add_argument("runs", nargs="*", help="run ids or directories (default: every run in --runs-dir)")
    p.add_argument("--runs-dir", default="runs", help="where run ids are looked up")
    p.add_argument("--out", default="report", help="output directory")

    p = sub.add_parser("validate-config", help="check a config file and print the resolved plan")
    with_config(p)
    p.add_argument("--cap", type=int)
    p.add_argument("--budget", type=_budget_arg, action="append")
    p.add_argument("--variant")
    p.add_argument("--mode")
    return parser


def _load(args: argparse.Namespace, check_paths: bool = True) -> ExperimentConfig | None:
    if not getattr(args, "config", None):
        return None
    overrides = {
        "seed": args.seed,
        "provider": args.provider,
        "cap": getattr(args, "cap", None),
        "variant": getattr(args, "variant", None),
        "mode": getattr(args, "mode", None),
    }
    cfg = load_config(args.config, overrides, check_paths=check_paths)
    budgets = getattr(args, "budget", None)
    if budgets:
        if len(set(budgets)) != len(budgets):
            raise ConfigError(["--budget: duplicate entries"])
        cfg.budgets = list(budgets)
    return cfg


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    for res in run_experiment(cfg, resume=args.resume):
        m = res.metrics
        c = res.run.counters
        print(f"{res.run_id}  n={m.n}  AUC={_fmt(m.auc)}  ACC={m.accuracy:.4f}  F1={m.f1:.4f}  "
              f"invalid={c['invalid']}/{c['samples']}  -> {res.run_dir}")
    return EXIT_OK


def cmd_judge(args: argparse.Namespace) -> int:
    cfg = _load(args, check_paths=False)
    reports = judge_experiment_run(args.run, cfg, output_dir=None if cfg is None else cfg.output_dir)
    for target, rep in reports.items():
        cells = "  ".join(f"{COLUMN_NAMES[d]}={_fmt(rep.means[d])}" for d in DIMENSIONS)
        print(f"{target:<15} n={rep.n_scored} failed={rep.n_failed}  {cells}")
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    cfg = _load(args, check_paths=False)
    summary = trace_experiment_run(args.run, cfg, output_dir=None if cfg is None else cfg.output_dir)
    print(json.dumps({k: summary[k] for k in ("sequences", "segments_dropped", "group_sizes")}, sort_keys=True))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    refs = args.runs or [str(p) for p in list_runs(args.runs_dir)]
    result = write_report(refs, args.out, output_dir=args.runs_dir)
    sys.stdout.write(result["table"])
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    data = prepare(cfg)
    plan = {
        "runs": [cfg.run_id(b) for b in cfg.budgets],
        "variant": cfg.variant.value,
        "mode": cfg.mode.value,
        "samples": cfg.samples,
        "model": cfg.model.model,
        "provider": cfg.model.provider,
        "data": data.info,
    }
    print(json.dumps(plan, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "judge": cmd_judge, "trace": cmd_trace, "report": cmd_report,
            "validate-config": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
