"""Rubric scoring of generated feedback and recommendations by a judge model.

Report columns follow the usual Rel / Spec / Corr / Struct / Diag layout. The
rubric prompts call the third and fourth criteria "Accuracy" and
"Constructiveness"; they are stored as ``correctness`` and
``constructiveness`` and reported as Corr and Struct.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .gateway import Gateway, GatewayError
from .prompting import render_feedback_judge_prompt, render_recommendation_judge_prompt
from .protocol import PredictionRecord

log = logging.getLogger(__name__)

DIMENSIONS = ("relevance", "specificity", "correctness", "constructiveness", "diagnostic")
COLUMN_NAMES = {"relevance": "Rel", "specificity": "Spec", "correctness": "Corr",
                "constructiveness": "Struct", "diagnostic": "Diag"}
TARGETS = ("feedback", "recommendation")

# normalized judge key -> stored dimension
_ALIASES = {
    "relevance": "relevance",
    "rel": "relevance",
    "specificity": "specificity",
    "spec": "specificity",
    "accuracy": "correctness",
    "correctness": "correctness",
    "corr": "correctness",
    "constructiveness": "constructiveness",
    "structiveness": "constructiveness",
    "struct": "constructiveness",
    "diagnostic_quality": "diagnostic",
    "diagnostic": "diagnostic",
    "diag": "diagnostic",
}


class JudgeParseError(ValueError):
    pass


@dataclass(frozen=True)
class RubricScore:
    relevance: int
    specificity: int
    correctness: int
    constructiveness: int
    diagnostic: int
    explanations: dict = field(default_factory=dict)
    target: str = "feedback"
    instance_id: str = ""

    def __post_init__(self) -> None:
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise ValueError(f"{dim} score must be an integer in 1..5, got {v!r}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown judge target {self.target!r}")

    def scores(self) -> dict[str, int]:
        return {d: getattr(self, d) for d in DIMENSIONS}


def first_json_object(text: str) -> str:
    """The first balanced ``{...}`` span in ``text``, respecting JSON strings."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escape = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escape:
                    escape = False
                elif ch == "\\":
                    escape = True
                elif ch == '"':
                    in_str = False
                continue
            if ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start:i + 1]
        start = text.find("{", start + 1)
    raise JudgeParseError("no balanced JSON object in judge reply")


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z]+", "_", key.lower()).strip("_")


def _as_score(value) -> int:
    if isinstance(value, bool):
        raise JudgeParseError(f"boolean is not a score: {value!r}")
    if isinstance(value, int):
        score = value
    elif isinstance(value, float) and value.is_integer():
        score = int(value)
    elif isinstance(value, str) and value.strip().isdigit():
        score = int(value.strip())
    else:
        raise JudgeParseError(f"score is not an integer: {value!r}")
    if not 1 <= score <= 5:
        raise JudgeParseError(f"score {score} outside 1..5")
    return score


def parse_score_document(reply: str, target: str = "feedback", instance_id: str = "") -> RubricScore:
    """Parse a judge reply into a :class:`RubricScore`; any defect raises JudgeParseError."""
    try:
        doc = json.loads(first_json_object(reply))
    except json.JSONDecodeError as exc:
        raise JudgeParseError(f"judge reply is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise JudgeParseError("score document is not an object")
    for wrapper in ("scores", "criteria", "evaluation", "rubric"):
        if isinstance(doc.get(wrapper), dict) and len(doc) == 1:
            doc = doc[wrapper]
    found: dict[str, int] = {}
    explanations: dict[str, str] = {}
    for key, value in doc.items():
        dim = _ALIASES.get(_norm_key(str(key)))
        if dim is None:
            continue
        if dim in found:
            raise JudgeParseError(f"dimension {dim} given twice")
        if isinstance(value, dict):
            if "score" not in value:
                raise JudgeParseError(f"{key}: object without a score")
            found[dim] = _as_score(value["score"])
            explanations[dim] = str(value.get("explanation", ""))
        else:
            found[dim] = _as_score(value)
            explanations[dim] = ""
    missing = [d for d in DIMENSIONS if d not in found]
    if missing:
        raise JudgeParseError(f"missing dimensions: {missing}")
    return RubricScore(**found, explanations=explanations, target=target, instance_id=instance_id)


def _judge(record: PredictionRecord, gateway: Gateway, target: str) -> RubricScore:
    if target == "feedback":
        prompt = render_feedback_judge_prompt(record)
    else:
        prompt = render_recommendation_judge_prompt(record)
    reply = gateway.complete(prompt, sample_index=0, temperature=0.0, budget=None)
    return parse_score_document(reply.answer_text, target, record.instance_id)


def judge_feedback(record: PredictionRecord, gateway: Gateway) -> RubricScore:
    return _judge(record, gateway, "feedback")


def judge_recommendation(record: PredictionRecord, gateway: Gateway) -> RubricScore:
    return _judge(record, gateway, "recommendation")


@dataclass
class JudgeReport:
    target: str
    means: dict[str, float | None]
    n_scored: int
    n_failed: int
    judge_model: str = ""
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_scores(
    scores: Sequence[RubricScore], failures: int = 0, judge_model: str = "", target: str = "feedback"
) -> JudgeReport:
    """Per-dimension arithmetic means; no scores yields a degenerate report."""
    if not scores:
        return JudgeReport(target, {d: None for d in DIMENSIONS}, 0, failures, judge_model, True)
    # sort so float summation order never depends on input order
    means = {d: sum(sorted(getattr(s, d) for s in scores)) / len(scores) for d in DIMENSIONS}
    return JudgeReport(target, means, len(scores), failures, judge_model, False)


# --------------------------------------------------------------------------
# persisted judging of a whole run


@dataclass
class JudgeEntry:
    instance_id: str
    target: str
    score: RubricScore | None
    error: str | None = None

    def to_json(self) -> str:
        d = {"instance_id": self.instance_id, "target": self.target, "error": self.error,
             "scores": self.score.scores() if self.score else None,
             "explanations": self.score.explanations if self.score else None}
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "JudgeEntry":
        d = json.loads(line)
        score = None
        if d.get("scores"):
            score = RubricScore(**d["scores"], explanations=d.get("explanations") or {},
                                target=d["target"], instance_id=d["instance_id"])
        return cls(d["instance_id"], d["target"], score, d.get("error"))


def judge_targets(records: Iterable[PredictionRecord]) -> list[tuple[PredictionRecord, str]]:
    jobs = []
    for r in records:
        if r.feedback_text:
            jobs.append((r, "feedback"))
        if r.recommendation_text:
            jobs.append((r, "recommendation"))
    return jobs


def judge_run(
    records: Sequence[PredictionRecord], gateway: Gateway, out_dir: str | Path | None = None
) -> tuple[dict[str, JudgeReport], list[JudgeEntry]]:
    """Score every generated text once and aggregate per target.

    Entries are appended to ``out_dir/scores.jsonl`` as they finish; a rerun
    skips (instance, target) pairs already present, so interrupted judging
    resumes. Transport failures are recorded like parse failures and reduce n.
    """
    jobs = judge_targets(records)
    done: dict[tuple[str, str], JudgeEntry] = {}
    path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "scores.jsonl"
        if path.exists():
            lines = path.read_text(encoding="utf-8").splitlines()
            for n, line in enumerate(lines):
                try:
                    e = JudgeEntry.from_json(line)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    if n == len(lines) - 1:
                        continue
                    raise
                done[(e.instance_id, e.target)] = e
    lock = threading.Lock()

    def work(job: tuple[PredictionRecord, str]) -> None:
        rec, target = job
        try:
            entry = JudgeEntry(rec.instance_id, target, _judge(rec, gateway, target))
        except JudgeParseError as exc:
            entry = JudgeEntry(rec.instance_id, target, None, f"parse_fail: {exc}")
        except GatewayError as exc:
            entry = JudgeEntry(rec.instance_id, target, None, f"transport_error: {exc}")
        with lock:
            done[(rec.instance_id, target)] = entry
            if path is not None:
                with path.open("a", encoding="utf-8") as fh:
                    fh.write(entry.to_json() + "\n")

    todo = [j for j in jobs if (j[0].instance_id, j[1]) not in done]
    with ThreadPoolExecutor(max_workers=gateway.config.max_parallel) as pool:
        list(pool.map(work, todo))

    wanted = {(r.instance_id, t) for r, t in jobs}
    entries = [done[k] for k in sorted(done) if k in wanted]
    if path is not None:
        tmp = path.with_suffix(".jsonl.tmp")
        tmp.write_text("".join(e.to_json() + "\n" for e in entries), encoding="utf-8")
        tmp.replace(path)
    reports = {}
    for target in TARGETS:
        mine = [e for e in entries if e.target == target]
        if not mine:
            continue
        ok = [e.score for e in mine if e.score is not None]
        reports[target] = aggregate_scores(ok, len(mine) - len(ok), gateway.config.model, target)
    return reports, entries
