"""The K-sample prediction protocol, output parsing and resumable run records."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .dataset import EvalInstance, OptionWeightTable
from .gateway import Completion, Gateway, GatewayError
from .prompting import (
    TEMPLATE_VERSION,
    OutputMode,
    PromptVariant,
    format_student_history,
    parse_mode,
    parse_variant,
    render_prediction_prompt,
)

log = logging.getLogger(__name__)

CORRECT = "correct"
WRONG = "wrong"
INVALID = "invalid"
INVALID_REASONS = ("parse_fail", "truncated", "transport_error")

RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class SampleOutcome:
    label: str
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.label not in (CORRECT, WRONG, INVALID):
            raise ValueError(f"bad outcome label {self.label!r}")
        if (self.label == INVALID) != (self.reason is not None):
            raise ValueError("exactly the invalid outcomes carry a reason")
        if self.reason is not None and self.reason not in INVALID_REASONS:
            raise ValueError(f"bad invalid reason {self.reason!r}")

    @property
    def valid(self) -> bool:
        return self.label != INVALID

    def to_json(self) -> str:
        return self.label if self.reason is None else f"invalid:{self.reason}"

    @classmethod
    def from_json(cls, s: str) -> "SampleOutcome":
        if s.startswith("invalid:"):
            return cls(INVALID, s.split(":", 1)[1])
        return cls(s)


def invalid(reason: str) -> SampleOutcome:
    return SampleOutcome(INVALID, reason)


_WORDS = re.compile(r"[a-z]+")


def parse_single_word(answer_text: str) -> SampleOutcome:
    """Last standalone ``correct``/``wrong`` wins; a lone ``incorrect`` counts as wrong."""
    tokens = _WORDS.findall((answer_text or "").lower())
    for tok in reversed(tokens):
        if tok == "correct":
            return SampleOutcome(CORRECT)
        if tok == "wrong":
            return SampleOutcome(WRONG)
    if "incorrect" in tokens:
        return SampleOutcome(WRONG)
    return invalid("parse_fail")


_SECTION = re.compile(
    r"^[ \t>#*_-]*(PREDICTION|FEEDBACK|RECOMMENDATION)[ \t*_]*:[ \t*_]*",
    re.IGNORECASE | re.MULTILINE,
)


@dataclass(frozen=True)
class UnifiedOutput:
    outcome: SampleOutcome
    feedback: str | None
    recommendation: str | None
    missing: tuple[str, ...] = ()


def split_sections(text: str) -> dict[str, str]:
    """Labeled sections in any order; a repeated label keeps its first body."""
    matches = list(_SECTION.finditer(text or ""))
    out: dict[str, str] = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        name = m.group(1).upper()
        body = text[m.end():end].strip()
        if name not in out and body:
            out[name] = body
    return out


def parse_unified(answer_text: str, mode: OutputMode | str) -> UnifiedOutput:
    mode = parse_mode(mode)
    if mode is OutputMode.PRED_ONLY:
        raise ValueError("parse_unified expects FB, Rec or FBRec")
    sections = split_sections(answer_text)
    required = ["PREDICTION"]
    if mode.wants_feedback:
        required.append("FEEDBACK")
    if mode.wants_recommendation:
        required.append("RECOMMENDATION")
    missing = tuple(s for s in required if s not in sections)
    outcome = parse_single_word(sections["PREDICTION"]) if "PREDICTION" in sections else invalid("parse_fail")
    return UnifiedOutput(
        outcome,
        sections.get("FEEDBACK") if mode.wants_feedback else None,
        sections.get("RECOMMENDATION") if mode.wants_recommendation else None,
        missing,
    )


@dataclass(frozen=True)
class Aggregate:
    empirical_p: float
    majority_label: str
    n_valid: int
    degenerate: bool
    tie: bool


def aggregate_outcomes(outcomes: Sequence[SampleOutcome]) -> Aggregate:
    """Empirical P(correct) and majority label over valid samples.

    No valid sample gives p = 0.5 flagged degenerate. Ties go to ``correct``.
    """
    n_correct = sum(1 for o in outcomes if o.label == CORRECT)
    n_wrong = sum(1 for o in outcomes if o.label == WRONG)
    n_valid = n_correct + n_wrong
    if n_valid == 0:
        return Aggregate(0.5, CORRECT, 0, True, False)
    tie = n_correct == n_wrong
    return Aggregate(n_correct / n_valid, CORRECT if n_correct >= n_wrong else WRONG, n_valid, False, tie)


@dataclass
class PredictionRecord:
    instance_id: str
    learner_id: str
    position: int
    ground_truth: int
    outcomes: list[SampleOutcome]
    empirical_p: float
    majority_label: str
    degenerate: bool = False
    tie: bool = False
    feedback_text: str | None = None
    recommendation_text: str | None = None
    text_sample_index: int | None = None
    traces: list[str] = field(default_factory=list)
    truncated: list[bool] = field(default_factory=list)
    missing_sections: int = 0
    student_history: str = ""
    config_fingerprint: str = ""

    @property
    def majority_correct(self) -> int:
        return 1 if self.majority_label == CORRECT else 0

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "learner_id": self.learner_id,
            "position": self.position,
            "ground_truth": self.ground_truth,
            "outcomes": [o.to_json() for o in self.outcomes],
            "empirical_p": self.empirical_p,
            "majority_label": self.majority_label,
            "degenerate": self.degenerate,
            "tie": self.tie,
            "feedback_text": self.feedback_text,
            "recommendation_text": self.recommendation_text,
            "text_sample_index": self.text_sample_index,
            "traces": self.traces,
            "truncated": self.truncated,
            "missing_sections": self.missing_sections,
            "student_history": self.student_history,
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        d = dict(d)
        d["outcomes"] = [SampleOutcome.from_json(o) for o in d["outcomes"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


def _sample_outcome(completion: Completion | GatewayError, mode: OutputMode):
    if isinstance(completion, GatewayError):
        return invalid("transport_error"), None, None, 0
    if completion.truncated and not completion.answer_text.strip():
        return invalid("truncated"), None, None, 0
    if mode is OutputMode.PRED_ONLY:
        return parse_single_word(completion.answer_text), None, None, 0
    parsed = parse_unified(completion.answer_text, mode)
    return parsed.outcome, parsed.feedback, parsed.recommendation, len(parsed.missing)


def run_instance(
    instance: EvalInstance,
    gateway: Gateway,
    variant: PromptVariant | str,
    mode: OutputMode | str,
    k: int = 10,
    weights: OptionWeightTable | None = None,
    weight_portion: float = 1.0,
) -> PredictionRecord:
    """Query ``k`` samples for one instance and aggregate them.

    Transport failures become invalid samples; they never abort the record.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    variant = parse_variant(variant)
    mode = parse_mode(mode)
    prompt = render_prediction_prompt(instance, variant, mode, weights, weight_portion)
    outcomes: list[SampleOutcome] = []
    traces: list[str] = []
    truncated: list[bool] = []
    fb = rec = None
    text_idx = None
    missing = 0
    for i in range(k):
        try:
            comp: Completion | GatewayError = gateway.complete(prompt, sample_index=i)
        except GatewayError as exc:
            log.warning("instance %s sample %d failed: %s", instance.instance_id, i, exc)
            comp = exc
        outcome, s_fb, s_rec, s_missing = _sample_outcome(comp, mode)
        outcomes.append(outcome)
        missing += s_missing
        if isinstance(comp, GatewayError):
            traces.append("")
            truncated.append(False)
        else:
            traces.append(comp.reasoning_trace)
            truncated.append(comp.truncated)
        if text_idx is None and outcome.valid and mode is not OutputMode.PRED_ONLY:
            fb, rec, text_idx = s_fb, s_rec, i
    agg = aggregate_outcomes(outcomes)
    return PredictionRecord(
        instance_id=instance.instance_id,
        learner_id=instance.learner_id,
        position=instance.position,
        ground_truth=instance.target_correct,
        outcomes=outcomes,
        empirical_p=agg.empirical_p,
        majority_label=agg.majority_label,
        degenerate=agg.degenerate,
        tie=agg.tie,
        feedback_text=fb,
        recommendation_text=rec,
        text_sample_index=text_idx,
        traces=traces,
        truncated=truncated,
        missing_sections=missing,
        student_history=format_student_history(instance),
        config_fingerprint=gateway.config.fingerprint(),
    )


# --------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    run_id: str
    model_config: dict
    variant: str
    mode: str
    history_length: int
    dataset: str
    samples: int
    template_version: str
    records: list[PredictionRecord]
    counters: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def manifest(self, complete: bool) -> dict:
        return {
            "run_id": self.run_id,
            "model_config": self.model_config,
            "variant": self.variant,
            "mode": self.mode,
            "history_length": self.history_length,
            "dataset": self.dataset,
            "samples": self.samples,
            "template_version": self.template_version,
            "n_records": len(self.records),
            "counters": self.counters,
            "timing": self.timing,
            "complete": complete,
            "extra": self.extra,
        }


class RunPersistenceError(RuntimeError):
    pass


def read_records(path: str | Path) -> list[PredictionRecord]:
    """Records from a JSONL file; a torn final line from a crash is ignored."""
    path = Path(path)
    if not path.exists():
        return []
    out = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(PredictionRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError):
            if n == len(lines) - 1:
                log.warning("dropping torn trailing line in %s", path)
                continue
            raise RunPersistenceError(f"corrupt record at {path}:{n + 1}")
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_run(run_dir: str | Path) -> RunRecord:
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise FileNotFoundError(f"no run manifest at {manifest_path}")
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    return RunRecord(
        run_id=m["run_id"],
        model_config=m["model_config"],
        variant=m["variant"],
        mode=m["mode"],
        history_length=m["history_length"],
        dataset=m["dataset"],
        samples=m["samples"],
        template_version=m["template_version"],
        records=read_records(run_dir / RECORDS_FILE),
        counters=m.get("counters", {}),
        timing=m.get("timing", {}),
        extra=m.get("extra", {}),
    )


def count_failures(records: Iterable[PredictionRecord]) -> dict:
    c: Counter = Counter()
    for r in records:
        c["instances"] += 1
        c["degenerate"] += int(r.degenerate)
        c["ties"] += int(r.tie)
        c["missing_sections"] += r.missing_sections
        c["truncated"] += sum(r.truncated)
        for o in r.outcomes:
            c["samples"] += 1
            c[o.label] += 1
            if o.reason:
                c[o.reason] += 1
    keys = ("instances", "samples", CORRECT, WRONG, INVALID, *INVALID_REASONS,
            "truncated", "degenerate", "ties", "missing_sections")
    return {k: int(c.get(k, 0)) for k in keys}


def default_run_id(dataset: str, variant: str, mode: str, config_fingerprint: str, extra: str = "") -> str:
    digest = hashlib.sha256(f"{config_fingerprint}|{extra}".encode()).hexdigest()[:8]
    return f"{dataset}-{variant}-{mode}-{digest}"


def run_suite(
    instances: Sequence[EvalInstance],
    gateway: Gateway,
    variant: PromptVariant | str,
    mode: OutputMode | str,
    k: int = 10,
    run_dir: str | Path | None = None,
    weights: OptionWeightTable | None = None,
    weight_portion: float = 1.0,
    dataset: str = "unknown",
    history_length: int | None = None,
    run_id: str | None = None,
    extra: dict | None = None,
) -> RunRecord:
    """Run every instance, persisting each record as soon as it is assembled.

    With ``run_dir`` set, records already present in ``records.jsonl`` are
    skipped, so an interrupted run resumes where it stopped. On completion the
    file is rewritten sorted by ``instance_id``.
    """
    if not instances:
        raise ValueError("no instances to run")
    variant = parse_variant(variant)
    mode = parse_mode(mode)
    ids = [i.instance_id for i in instances]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate instance ids")
    run_id = run_id or default_run_id(dataset, variant.value, mode.value, gateway.config.fingerprint())
    hl = history_length if history_length is not None else max(len(i.history) for i in instances)

    run = RunRecord(
        run_id=run_id,
        model_config=gateway.config.snapshot(),
        variant=variant.value,
        mode=mode.value,
        history_length=hl,
        dataset=dataset,
        samples=k,
        template_version=TEMPLATE_VERSION,
        records=[],
        extra=extra or {},
    )

    done: dict[str, PredictionRecord] = {}
    records_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise RunPersistenceError(f"cannot create {run_dir}: {exc}") from exc
        records_path = run_dir / RECORDS_FILE
        wanted = set(ids)
        for r in read_records(records_path):
            if r.instance_id in wanted:
                done[r.instance_id] = r
        # drop any torn line by rewriting what survived
        _atomic_write(records_path, "".join(done[i].to_json() + "\n" for i in sorted(done)))
        _atomic_write(run_dir / MANIFEST_FILE, json.dumps(run.manifest(False), indent=2, sort_keys=True))
    resumed = len(done)
    todo = [inst for inst in instances if inst.instance_id not in done]
    write_lock = threading.Lock()
    start = time.perf_counter()

    def work(inst: EvalInstance) -> PredictionRecord:
        return run_instance(inst, gateway, variant, mode, k, weights, weight_portion)

    def persist(rec: PredictionRecord) -> None:
        done[rec.instance_id] = rec
        if records_path is not None:
            with write_lock:
                try:
                    with records_path.open("a", encoding="utf-8") as fh:
                        fh.write(rec.to_json() + "\n")
                        fh.flush()
                except OSError as exc:
                    raise RunPersistenceError(f"cannot append to {records_path}: {exc}") from exc

    workers = gateway.config.max_parallel
    if workers <= 1:
        for inst in todo:
            persist(work(inst))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(work, inst) for inst in todo]
            try:
                for fut in as_completed(futures):
                    persist(fut.result())
            except BaseException:
                for f in futures:
                    f.cancel()
                raise

    run.records = [done[i] for i in sorted(done)]
    run.counters = count_failures(run.records)
    run.timing = {"wall_seconds": round(time.perf_counter() - start, 3), "resumed": resumed}
    if run_dir is not None:
        _atomic_write(records_path, "".join(r.to_json() + "\n" for r in run.records))
        _atomic_write(run_dir / MANIFEST_FILE, json.dumps(run.manifest(True), indent=2, sort_keys=True))
    return run
