"""End-to-end orchestration: dataset -> instances -> runs -> metrics, judging and trace analysis.

Every run lives in ``<output_dir>/<run_id>/``:

``experiment.json``   resolved config snapshot
``manifest.json``     run manifest (model config, template version, counters)
``records.jsonl``     one prediction record per line
``metrics.json``      MetricsSummary recomputed from the records
``judge/``            rubric scores, report and figure
``trace/``            episode sequences, matrices, stats and heatmaps
"""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import plots
from .config import ExperimentConfig, config_from_snapshot
from .dataset import (
    EvalInstance,
    OptionWeightTable,
    build_instances,
    cap_instances,
    compute_option_stats,
    read_dataset,
    split_learners,
    subsample_learners,
    synthetic_sequences,
)
from .gateway import Gateway
from .judge import COLUMN_NAMES, DIMENSIONS, JudgeReport, judge_run
from .metrics import MetricsSummary, summarize
from .protocol import INVALID, RunRecord, load_run, run_suite
from .traces import (
    LABEL_NAMES,
    STAT_FIELDS,
    TraceError,
    group_by_correctness,
    label_run,
    long_format_csv,
    matrix_csv,
    trace_stats,
    transition_diff,
    transition_matrix,
)

log = logging.getLogger(__name__)


class HarnessError(RuntimeError):
    exit_code = 1


class TransportExhausted(HarnessError):
    exit_code = 3


class EmptyResults(HarnessError):
    exit_code = 4


class NoGeneratedTexts(EmptyResults):
    """Judging was requested for a run that produced no feedback or recommendations."""


class NoTraces(EmptyResults):
    """Trace analysis was requested for a run without reasoning traces."""


class MissingRun(HarnessError):
    exit_code = 4


@dataclass
class PreparedData:
    instances: list[EvalInstance]
    weights: OptionWeightTable
    info: dict


def prepare(cfg: ExperimentConfig) -> PreparedData:
    """Parse, subsample, split and window the dataset exactly as the config says."""
    d = cfg.dataset
    info: dict = {"format": d.format}
    if d.format == "synthetic":
        seqs = synthetic_sequences(d.synthetic_learners, d.synthetic_length, seed=cfg.seed)
    else:
        report = read_dataset(d.format, d.path)
        seqs = report.sequences
        info.update(rows=report.total_rows, dropped_missing_correct=report.dropped_missing_correct,
                    dropped_missing_kc=report.dropped_missing_kc, merged_skill_rows=report.merged_skill_rows)
    info["learners"] = len(seqs)
    if d.subsample:
        seqs = subsample_learners(seqs, d.subsample, cfg.seed)
        info["subsampled_learners"] = len(seqs)
    train, test = split_learners(seqs, d.train_ratio, cfg.seed)
    weights = compute_option_stats(train)
    instances = build_instances(test, d.history_length, d.last_k)
    info.update(train_learners=len(train), test_learners=len(test), instances_total=len(instances))
    instances = cap_instances(instances, d.cap, cfg.seed)
    info["instances"] = len(instances)
    return PreparedData(instances, weights, info)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cache_dir_for(cfg: ExperimentConfig) -> Path | None:
    if cfg.model.provider == "mock" and cfg.judge.provider == "mock":
        return None
    return Path(cfg.cache_dir) if cfg.cache_dir else Path(cfg.output_dir) / "_cache"


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    budget: int | None
    metrics: MetricsSummary
    run: RunRecord


def run_experiment(cfg: ExperimentConfig, resume: bool = False, gateway_factory=None) -> list[RunResult]:
    """One run per thinking budget in ``cfg.budgets``.

    Without ``resume`` an existing run directory is cleared first; with it,
    already-persisted instances are skipped.
    """
    data = prepare(cfg)
    if not data.instances:
        raise EmptyResults("the configuration yields zero evaluation instances")
    results = []
    for budget in cfg.budgets:
        run_id = cfg.run_id(budget)
        run_dir = Path(cfg.output_dir) / run_id
        if run_dir.exists() and not resume:
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "experiment.json", cfg.snapshot() | {"budget": budget, "run_id": run_id})
        _write_json(run_dir / "data.json", data.info)
        mcfg = cfg.model_for_budget(budget)
        gw = gateway_factory(mcfg) if gateway_factory else Gateway(mcfg, cache_dir_for(cfg))
        try:
            run = run_suite(
                data.instances, gw, cfg.variant, cfg.mode, cfg.samples, run_dir=run_dir,
                weights=data.weights, weight_portion=cfg.dataset.weight_portion, dataset=cfg.dataset.tag,
                history_length=cfg.dataset.history_length, run_id=run_id, extra={"budget": budget},
            )
        finally:
            gw.close()
        c = run.counters
        if c["samples"] and c["transport_error"] == c["samples"]:
            raise TransportExhausted(f"run {run_id}: every sample failed in transport")
        metrics = summarize(run.records)
        _write_json(run_dir / "metrics.json", metrics.to_dict())
        results.append(RunResult(run_id, run_dir, budget, metrics, run))
    return results


def resolve_run(ref: str | Path, output_dir: str | Path | None = None) -> Path:
    p = Path(ref)
    candidates = [p]
    if output_dir is not None:
        candidates.append(Path(output_dir) / str(ref))
    for c in candidates:
        if (c / "manifest.json").exists():
            return c
    raise MissingRun(f"run {ref!r} not found (looked in {', '.join(str(c) for c in candidates)})")


def _run_config(run_dir: Path) -> ExperimentConfig | None:
    path = run_dir / "experiment.json"
    if not path.exists():
        return None
    return config_from_snapshot(json.loads(path.read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# judging


def judge_columns() -> list[str]:
    return [f"FB {COLUMN_NAMES[d]}" for d in DIMENSIONS] + [f"Rec {COLUMN_NAMES[d]}" for d in DIMENSIONS]


def judge_row(reports: dict[str, JudgeReport]) -> dict[str, float | None]:
    row: dict[str, float | None] = {}
    for prefix, target in (("FB", "feedback"), ("Rec", "recommendation")):
        rep = reports.get(target)
        for d in DIMENSIONS:
            row[f"{prefix} {COLUMN_NAMES[d]}"] = None if rep is None else rep.means[d]
    return row


def judge_experiment_run(run_ref: str | Path, cfg: ExperimentConfig | None = None,
                         output_dir: str | Path | None = None, gateway_factory=None) -> dict[str, JudgeReport]:
    run_dir = resolve_run(run_ref, output_dir or (cfg.output_dir if cfg else None))
    run = load_run(run_dir)
    cfg = cfg or _run_config(run_dir)
    if cfg is None:
        raise HarnessError(f"{run_dir}: no experiment.json; pass --config to name the judge model")
    if not any(r.feedback_text or r.recommendation_text for r in run.records):
        raise NoGeneratedTexts(f"run {run.run_id} has no feedback or recommendation texts (mode {run.mode})")
    gw = gateway_factory(cfg.judge) if gateway_factory else Gateway(cfg.judge, cache_dir_for(cfg))
    try:
        reports, entries = judge_run(run.records, gw, run_dir / "judge")
    finally:
        gw.close()
    metrics = summarize(run.records)
    payload = {t: r.to_dict() for t, r in reports.items()}
    _write_json(run_dir / "judge" / "report.json", payload)
    row = {"AUC": metrics.auc} | judge_row(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_id", "mode", *row])
    w.writerow([run.run_id, run.mode, *("" if v is None else f"{v:.4f}" for v in row.values())])
    (run_dir / "judge" / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    plots.grouped_bars(
        [COLUMN_NAMES[d] for d in DIMENSIONS],
        {t: [rep.means[d] for d in DIMENSIONS] for t, rep in reports.items()},
        run_dir / "judge" / "rubric.png", ylabel="mean score (1-5)", title=run.run_id, ylim=(0, 5),
    )
    return reports


# --------------------------------------------------------------------------
# trace analysis


def trace_experiment_run(run_ref: str | Path, cfg: ExperimentConfig | None = None,
                         output_dir: str | Path | None = None, gateway_factory=None) -> dict:
    """Segment, label and analyse every trace of a run; returns the summary written to trace/summary.json."""
    run_dir = resolve_run(run_ref, output_dir or (cfg.output_dir if cfg else None))
    run = load_run(run_dir)
    cfg = cfg or _run_config(run_dir)
    if cfg is None:
        raise HarnessError(f"{run_dir}: no experiment.json; pass --config to name the labeling model")
    if not any(t.strip() for r in run.records for t in r.traces):
        raise NoTraces(f"run {run.run_id} has no reasoning traces (No-Think run?)")
    out = run_dir / "trace"
    gw = gateway_factory(cfg.judge) if gateway_factory else Gateway(cfg.judge, cache_dir_for(cfg))
    try:
        labeling = label_run(run.records, gw, out / "sequences.jsonl")
    finally:
        gw.close()
    if not labeling.sequences:
        raise EmptyResults(f"run {run.run_id}: no trace segment received a usable label")
    return analyse_sequences(run, labeling, out)


def analyse_sequences(run: RunRecord, labeling, out: Path) -> dict:
    groups = group_by_correctness(run.records, labeling.sequences)
    summary: dict = {
        "run_id": run.run_id,
        "traces": labeling.traces_seen,
        "sequences": len(labeling.sequences),
        "segments_dropped": labeling.segments_dropped,
        "traces_without_labels": labeling.empty_sequences,
        "group_sizes": {"correct": len(groups.correct), "incorrect": len(groups.incorrect),
                        "orphans": len(groups.orphans)},
        "matrices": {},
        "stats": {},
        "complexity_measures": list(STAT_FIELDS),
    }
    long_rows = []
    matrices = {}
    for name, seqs in (("all", labeling.sequences), ("correct", groups.correct), ("incorrect", groups.incorrect)):
        if not seqs:
            continue
        summary["stats"][name] = trace_stats(seqs, name).to_dict()
        try:
            m = transition_matrix(seqs, name)
        except TraceError:
            continue
        matrices[name] = m
        (out / f"counts_{name}.csv").write_text(matrix_csv(m.counts, "{:.0f}"), encoding="utf-8")
        (out / f"probs_{name}.csv").write_text(matrix_csv(m.probs), encoding="utf-8")
        long_rows.append((name, m.probs))
        summary["matrices"][name] = {"n_sequences": m.n_sequences, "n_transitions": m.n_transitions}
        plots.heatmap(m.probs, LABEL_NAMES, out / f"heatmap_{name}.png", title=f"transitions ({name})")
    if "correct" in matrices and "incorrect" in matrices:
        diff = transition_diff(matrices["correct"], matrices["incorrect"])
        (out / "diff_pp.csv").write_text(matrix_csv(diff, "{:.3f}"), encoding="utf-8")
        long_rows.append(("diff_pp", diff))
        plots.heatmap(diff, LABEL_NAMES, out / "heatmap_diff_pp.png", title="correct - incorrect (pp)",
                      diverging=True, fmt="{:.1f}")
    (out / "transitions_long.csv").write_text(long_format_csv(long_rows), encoding="utf-8")
    per_group = {}
    for name, seqs in (("correct", groups.correct), ("incorrect", groups.incorrect)):
        if seqs:
            st = trace_stats(seqs, name)
            per_group[name] = {f: [getattr(p, f) for p in st.per_sequence] for f in STAT_FIELDS}
    if per_group:
        plots.box_by_group(per_group, out / "complexity.png", title="trace complexity")
    _write_json(out / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# cross-run report


REPORT_FIELDS = ("run_id", "dataset", "model", "variant", "mode", "think", "n", "AUC", "ACC", "F1", "invalid_rate")


def report_rows(run_dirs: Sequence[Path]) -> list[dict]:
    rows = []
    for run_dir in run_dirs:
        run = load_run(run_dir)
        if not run.records:
            raise EmptyResults(f"run {run.run_id} has no records")
        m = summarize(run.records)
        budget = run.model_config.get("thinking_budget")
        row = {
            "run_id": run.run_id,
            "dataset": run.dataset,
            "model": run.model_config.get("model", ""),
            "variant": run.variant,
            "mode": run.mode,
            "think": "No-Think" if budget is None else f"Think-{budget}",
            "n": m.n,
            "AUC": m.auc,
            "ACC": m.accuracy,
            "F1": m.f1,
            "invalid_rate": m.invalid_rate,
        }
        judge_path = run_dir / "judge" / "report.json"
        if judge_path.exists():
            payload = json.loads(judge_path.read_text(encoding="utf-8"))
            reports = {t: JudgeReport(**d) for t, d in payload.items()}
            row.update(judge_row(reports))
        rows.append(row)
    return rows


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _think_order(label: str) -> tuple:
    return (0, 0) if label == "No-Think" else (1, int(label.split("-")[1]))


def grid_table(rows: list[dict]) -> str:
    """Aligned text grid: one line per (model, think, variant, mode), AUC/ACC/F1 per dataset."""
    datasets = sorted({r["dataset"] for r in rows})
    keyed: dict[tuple, dict[str, dict]] = {}
    for r in rows:
        key = (r["model"], r["think"], r["variant"], r["mode"])
        keyed.setdefault(key, {})[r["dataset"]] = r
    header = ["Model", "Think", "Design", "Mode"]
    for d in datasets:
        header += [f"{d} AUC", f"{d} ACC", f"{d} F1"]
    lines = [header]
    for key in sorted(keyed, key=lambda k: (k[0], _think_order(k[1]), k[2], k[3])):
        line = list(key)
        for d in datasets:
            r = keyed[key].get(d)
            line += [_cell(r[m]) if r else "-" for m in ("AUC", "ACC", "F1")]
        lines.append(line)
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    out = []
    for n, l in enumerate(lines):
        out.append("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def write_report(run_refs: Sequence[str | Path], out_dir: str | Path, output_dir: str | Path | None = None) -> dict:
    """Cross-run CSV, aligned text grid and a metrics figure, all recomputed from disk."""
    if not run_refs:
        raise MissingRun("no runs given")
    run_dirs = [resolve_run(r, output_dir) for r in run_refs]
    rows = report_rows(run_dirs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = list(REPORT_FIELDS)
    if any("FB Rel" in r or "Rec Rel" in r for r in rows):
        fields += judge_columns()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_cell(r.get(f)) for f in fields])
    (out_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    table = grid_table(rows)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    labels = [f"{r['dataset']}/{r['variant']}/{r['mode']}/{r['think']}" for r in rows]
    plots.grouped_bars(labels, {m: [r[m] for r in rows] for m in ("AUC", "ACC", "F1")},
                       out_dir / "report_metrics.png", ylabel="score", ylim=(0, 1))
    return {"rows": rows, "csv": out_dir / "report.csv", "table": table}


def list_runs(output_dir: str | Path) -> list[Path]:
    root = Path(output_dir)
    if not root.exists():
        return []
    return sorted(p for p in root.iterdir() if (p / "manifest.json").exists())


def invalid_rate(run: RunRecord) -> float:
    total = sum(len(r.outcomes) for r in run.records)
    bad = sum(1 for r in run.records for o in r.outcomes if o.label == INVALID)
    return bad / total if total else 0.0
