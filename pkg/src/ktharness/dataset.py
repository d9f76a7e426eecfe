"""Interaction-log parsing, learner splits and evaluation-instance construction.

Three raw CSV layouts are understood (column names are matched by header):

* ``assist09``: ``order_id, user_id, problem_id, skill_id, answer_id, correct``.
  Time order is ``order_id``. Rows sharing an ``order_id`` are one interaction
  tagged with several skills; they are merged into a single interaction whose
  KC set is the union of the skills.
* ``dbekt22``: ``student_id, question_id, skill_ids, option_id, is_correct,
  timestamp`` with ``skill_ids`` joined by ``;``.
* ``ednet``: a directory of per-learner CSV files (or one such file) with
  ``timestamp, question_id, tags, user_answer, correct``; the learner id is the
  file stem.

The normalized interchange format is JSON Lines, one learner per line.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

FORMATS = ("assist09", "dbekt22", "ednet")

_MISSING = {"", "na", "nan", "null", "none"}


class DatasetError(ValueError):
    """Raised for unreadable inputs, unknown formats or empty datasets."""


@dataclass(frozen=True)
class Question:
    question_id: str
    kc_ids: tuple[str, ...]
    options: tuple[str, ...] = ()


@dataclass(frozen=True)
class Interaction:
    question_id: str
    kc_ids: tuple[str, ...]
    selected_option: str | None
    correct: int

    def __post_init__(self) -> None:
        if self.correct not in (0, 1):
            raise ValueError(f"correct must be 0 or 1, got {self.correct!r}")
        if not self.kc_ids:
            raise ValueError(f"question {self.question_id!r} has no KC ids")

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "kc_ids": list(self.kc_ids),
            "selected_option": self.selected_option,
            "correct": self.correct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Interaction":
        return cls(
            question_id=str(d["question_id"]),
            kc_ids=tuple(str(k) for k in d["kc_ids"]),
            selected_option=None if d.get("selected_option") is None else str(d["selected_option"]),
            correct=int(d["correct"]),
        )


@dataclass(frozen=True)
class LearnerSequence:
    learner_id: str
    interactions: tuple[Interaction, ...]

    def __post_init__(self) -> None:
        if not self.interactions:
            raise ValueError(f"learner {self.learner_id!r} has no interactions")

    def __len__(self) -> int:
        return len(self.interactions)

    def to_dict(self) -> dict:
        return {
            "learner_id": self.learner_id,
            "interactions": [i.to_dict() for i in self.interactions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSequence":
        return cls(
            learner_id=str(d["learner_id"]),
            interactions=tuple(Interaction.from_dict(i) for i in d["interactions"]),
        )


@dataclass(frozen=True)
class EvalInstance:
    """A bounded history window and the item that immediately follows it."""

    learner_id: str
    position: int
    history: tuple[Interaction, ...]
    target_question_id: str
    target_kc_ids: tuple[str, ...]
    target_correct: int
    instance_id: str

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "learner_id": self.learner_id,
            "position": self.position,
            "history": [i.to_dict() for i in self.history],
            "target_question_id": self.target_question_id,
            "target_kc_ids": list(self.target_kc_ids),
            "target_correct": self.target_correct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalInstance":
        return cls(
            learner_id=str(d["learner_id"]),
            position=int(d["position"]),
            history=tuple(Interaction.from_dict(i) for i in d["history"]),
            target_question_id=str(d["target_question_id"]),
            target_kc_ids=tuple(str(k) for k in d["target_kc_ids"]),
            target_correct=int(d["target_correct"]),
            instance_id=str(d["instance_id"]),
        )


@dataclass
class ParseReport:
    sequences: list[LearnerSequence]
    total_rows: int = 0
    dropped_missing_correct: int = 0
    dropped_missing_kc: int = 0
    merged_skill_rows: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_missing_correct + self.dropped_missing_kc


@dataclass
class OptionWeightTable:
    """Per-question option selection frequencies computed from training learners."""

    frequencies: dict[str, dict[str, float]] = field(default_factory=dict)
    question_counts: dict[str, int] = field(default_factory=dict)

    def get(self, question_id: str, option: str | None) -> float | None:
        if option is None or question_id not in self.frequencies:
            return None
        return self.frequencies[question_id].get(option, 0.0)

    def __contains__(self, question_id: str) -> bool:
        return question_id in self.frequencies


# --------------------------------------------------------------------------
# parsing


def learner_sort_key(learner_id: str) -> tuple:
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, int(learner_id), "")
    except ValueError:
        return (1, 0, learner_id)


def _time_key(value: str) -> tuple:
    try:
        return (0, float(value), "")
    except ValueError:
        return (1, 0.0, value)


def _is_missing(value: str | None) -> bool:
    return value is None or value.strip().lower() in _MISSING


def _parse_correct(value: str | None) -> int | None:
    if _is_missing(value):
        return None
    try:
        v = float(value)
    except ValueError:
        return None
    if v == 0:
        return 0
    if v == 1:
        return 1
    return None


def _clean_id(value: str) -> str:
    value = value.strip()
    # "12.0" style ids coming from spreadsheet exports
    if value.endswith(".0") and value[:-2].lstrip("-").isdigit():
        value = value[:-2]
    return value


def _split_ids(value: str | None) -> tuple[str, ...]:
    if _is_missing(value):
        return ()
    out: list[str] = []
    for part in value.split(";"):
        part = _clean_id(part)
        if part and part.lower() not in _MISSING and part not in out:
            out.append(part)
    return tuple(out)


def _option(value: str | None) -> str | None:
    return None if _is_missing(value) else _clean_id(value)


def _read_rows(path: Path) -> Iterator[dict[str, str]]:
    try:
        fh = path.open(newline="", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return
        reader.fieldnames = [f.strip() for f in reader.fieldnames]
        yield from reader


def _require_columns(path: Path, rows: Iterable[dict], cols: Sequence[str]) -> list[dict]:
    rows = list(rows)
    if rows:
        missing = [c for c in cols if c not in rows[0]]
        if missing:
            raise DatasetError(f"{path}: missing columns {missing}")
    return rows


def _parse_assist09(path: Path, report: ParseReport) -> dict[str, list[tuple[tuple, Interaction]]]:
    rows = _require_columns(
        path, _read_rows(path), ("order_id", "user_id", "problem_id", "skill_id", "answer_id", "correct")
    )
    # order_id -> accumulated row; skills merged across duplicate rows
    merged: dict[tuple[str, str], dict] = {}
    order: list[tuple[str, str]] = []
    for row in rows:
        report.total_rows += 1
        correct = _parse_correct(row.get("correct"))
        if correct is None:
            report.dropped_missing_correct += 1
            continue
        skills = _split_ids(row.get("skill_id"))
        if not skills:
            report.dropped_missing_kc += 1
            continue
        key = (_clean_id(row["user_id"]), _clean_id(row["order_id"]))
        if key in merged:
            report.merged_skill_rows += 1
            entry = merged[key]
            entry["kc"].extend(s for s in skills if s not in entry["kc"])
            continue
        merged[key] = {
            "qid": _clean_id(row["problem_id"]),
            "kc": list(skills),
            "opt": _option(row.get("answer_id")),
            "correct": correct,
        }
        order.append(key)
    by_learner: dict[str, list] = defaultdict(list)
    for idx, key in enumerate(order):
        e = merged[key]
        inter = Interaction(e["qid"], tuple(e["kc"]), e["opt"], e["correct"])
        by_learner[key[0]].append(((_time_key(key[1]), idx), inter))
    return by_learner


def _parse_dbekt22(path: Path, report: ParseReport) -> dict[str, list[tuple[tuple, Interaction]]]:
    rows = _require_columns(
        path, _read_rows(path), ("student_id", "question_id", "skill_ids", "option_id", "is_correct", "timestamp")
    )
    by_learner: dict[str, list] = defaultdict(list)
    for idx, row in enumerate(rows):
        report.total_rows += 1
        correct = _parse_correct(row.get("is_correct"))
        if correct is None:
            report.dropped_missing_correct += 1
            continue
        skills = _split_ids(row.get("skill_ids"))
        if not skills:
            report.dropped_missing_kc += 1
            continue
        inter = Interaction(_clean_id(row["question_id"]), skills, _option(row.get("option_id")), correct)
        by_learner[_clean_id(row["student_id"])].append(((_time_key(row["timestamp"].strip()), idx), inter))
    return by_learner


def _parse_ednet(path: Path, report: ParseReport) -> dict[str, list[tuple[tuple, Interaction]]]:
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    by_learner: dict[str, list] = defaultdict(list)
    for file in files:
        rows = _require_columns(
            file, _read_rows(file), ("timestamp", "question_id", "tags", "user_answer", "correct")
        )
        learner = file.stem
        for idx, row in enumerate(rows):
            report.total_rows += 1
            correct = _parse_correct(row.get("correct"))
            if correct is None:
                report.dropped_missing_correct += 1
                continue
            tags = _split_ids(row.get("tags"))
            if not tags:
                report.dropped_missing_kc += 1
                continue
            inter = Interaction(_clean_id(row["question_id"]), tags, _option(row.get("user_answer")), correct)
            by_learner[learner].append(((_time_key(row["timestamp"].strip()), idx), inter))
    return by_learner


_PARSERS = {"assist09": _parse_assist09, "dbekt22": _parse_dbekt22, "ednet": _parse_ednet}


def read_dataset(fmt: str, source: str | Path) -> ParseReport:
    """Parse ``source`` and return the sequences together with row accounting."""
    if fmt not in _PARSERS:
        raise DatasetError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    path = Path(source)
    if not path.exists():
        raise DatasetError(f"dataset source not found: {path}")
    report = ParseReport(sequences=[])
    by_learner = _PARSERS[fmt](path, report)
    seqs = []
    for learner in sorted(by_learner, key=learner_sort_key):
        rows = sorted(by_learner[learner], key=lambda r: r[0])
        seqs.append(LearnerSequence(learner, tuple(inter for _, inter in rows)))
    if not seqs:
        raise DatasetError(f"{path}: zero usable rows ({report.total_rows} read, {report.dropped} dropped)")
    report.sequences = seqs
    return report


def parse_dataset(fmt: str, source: str | Path) -> list[LearnerSequence]:
    return read_dataset(fmt, source).sequences


def question_catalog(sequences: Iterable[LearnerSequence]) -> dict[str, Question]:
    """Questions seen in ``sequences`` with their KC sets and observed options."""
    kcs: dict[str, tuple[str, ...]] = {}
    options: dict[str, set[str]] = defaultdict(set)
    for seq in sequences:
        for it in seq.interactions:
            kcs.setdefault(it.question_id, it.kc_ids)
            if it.selected_option is not None:
                options[it.question_id].add(it.selected_option)
    return {
        q: Question(q, kc, tuple(sorted(options[q], key=learner_sort_key)))
        for q, kc in sorted(kcs.items(), key=lambda kv: learner_sort_key(kv[0]))
    }


# --------------------------------------------------------------------------
# normalized JSONL interchange


def dumps_sequences(sequences: Iterable[LearnerSequence]) -> str:
    return "".join(
        json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n"
        for s in sequences
    )


def write_sequences(sequences: Iterable[LearnerSequence], path: str | Path) -> None:
    Path(path).write_text(dumps_sequences(sequences), encoding="utf-8")


def read_sequences(path: str | Path) -> list[LearnerSequence]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(LearnerSequence.from_dict(json.loads(line)))
    return out


# --------------------------------------------------------------------------
# splitting and sampling


def _round_half_up(x: float) -> int:
    # guard against 0.8 * 10 = 8.000000000000002 style noise before flooring
    return math.floor(round(x, 9) + 0.5)


def _canonical(sequences: Iterable[LearnerSequence]) -> list[LearnerSequence]:
    return sorted(sequences, key=lambda s: learner_sort_key(s.learner_id))


def split_learners(
    sequences: Sequence[LearnerSequence], ratio: float = 0.8, seed: int = 0
) -> tuple[list[LearnerSequence], list[LearnerSequence]]:
    """Learner-level train/test partition with ``round(ratio * N)`` training learners."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(sequences) < 2:
        raise ValueError("need at least two learners to split")
    ids = [s.learner_id for s in sequences]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate learner ids")
    ordered = _canonical(sequences)
    shuffled = list(ordered)
    random.Random(seed).shuffle(shuffled)
    n_train = _round_half_up(ratio * len(ordered))
    train_ids = {s.learner_id for s in shuffled[:n_train]}
    train = [s for s in ordered if s.learner_id in train_ids]
    test = [s for s in ordered if s.learner_id not in train_ids]
    return train, test


def subsample_learners(sequences: Sequence[LearnerSequence], n: int, seed: int = 0) -> list[LearnerSequence]:
    """Uniformly pick ``n`` learners without replacement."""
    if n > len(sequences):
        raise ValueError(f"cannot subsample {n} learners from {len(sequences)}")
    if n < 0:
        raise ValueError("n must be non-negative")
    ordered = _canonical(sequences)
    chosen = set(random.Random(seed).sample(range(len(ordered)), n))
    return [s for i, s in enumerate(ordered) if i in chosen]


def instance_id_for(learner_id: str, position: int) -> str:
    return hashlib.sha256(f"{learner_id}\x1f{position}".encode()).hexdigest()[:16]


def build_instances(
    test_sequences: Iterable[LearnerSequence], history_length: int = 25, last_k: int | None = None
) -> list[EvalInstance]:
    """One instance per position with at least one prior interaction.

    ``last_k`` keeps only the final ``last_k`` positions of each learner.
    """
    if history_length < 1:
        raise ValueError("history_length must be >= 1")
    out: list[EvalInstance] = []
    for seq in test_sequences:
        inters = seq.interactions
        positions = range(1, len(inters))
        if last_k is not None and last_k > 0:
            positions = positions[-last_k:]
        for t in positions:
            target = inters[t]
            out.append(
                EvalInstance(
                    learner_id=seq.learner_id,
                    position=t,
                    history=inters[max(0, t - history_length):t],
                    target_question_id=target.question_id,
                    target_kc_ids=target.kc_ids,
                    target_correct=target.correct,
                    instance_id=instance_id_for(seq.learner_id, t),
                )
            )
    return out


def cap_instances(instances: Sequence[EvalInstance], cap: int | None, seed: int = 0) -> list[EvalInstance]:
    """Seeded subsample of ``cap`` instances, original order preserved."""
    if cap is None or cap <= 0 or cap >= len(instances):
        return list(instances)
    keep = set(random.Random(seed).sample(range(len(instances)), cap))
    return [inst for i, inst in enumerate(instances) if i in keep]


def compute_option_stats(train_sequences: Iterable[LearnerSequence]) -> OptionWeightTable:
    """Selection frequency of each option among training interactions on a question."""
    per_question: dict[str, Counter] = defaultdict(Counter)
    totals: Counter = Counter()
    for seq in train_sequences:
        for it in seq.interactions:
            totals[it.question_id] += 1
            if it.selected_option is not None:
                per_question[it.question_id][it.selected_option] += 1
    freqs = {
        q: {o: c / totals[q] for o, c in sorted(per_question[q].items())}
        for q in sorted(totals, key=learner_sort_key)
    }
    return OptionWeightTable(frequencies=freqs, question_counts=dict(totals))


# --------------------------------------------------------------------------
# synthetic data for offline runs


def synthetic_sequences(
    n_learners: int = 40,
    length: int = 30,
    seed: int = 0,
    n_questions: int = 60,
    n_kcs: int = 12,
    n_options: int = 4,
) -> list[LearnerSequence]:
    """Learners with a latent ability per KC; correctness follows a logistic model.

    Used for offline runs against the mock model; all draws come from one
    seeded generator so output is reproducible.
    """
    rng = random.Random(seed)
    q_kcs = {}
    q_difficulty = {}
    for q in range(1, n_questions + 1):
        k = rng.randint(1, 2)
        q_kcs[str(q)] = tuple(sorted({str(rng.randint(1, n_kcs)) for _ in range(k)}, key=int))
        q_difficulty[str(q)] = rng.gauss(0.0, 1.0)
    seqs = []
    for learner in range(1, n_learners + 1):
        base = rng.gauss(0.8, 1.0)
        skill = {str(k): base + rng.gauss(0.0, 0.7) for k in range(1, n_kcs + 1)}
        inters = []
        for _ in range(length):
            q = str(rng.randint(1, n_questions))
            theta = sum(skill[k] for k in q_kcs[q]) / len(q_kcs[q])
            p = 1.0 / (1.0 + math.exp(-(theta - q_difficulty[q])))
            correct = int(rng.random() < p)
            # option "1" is the key; distractors drawn uniformly
            opt = "1" if correct else str(rng.randint(2, n_options))
            inters.append(Interaction(q, q_kcs[q], opt, correct))
            for k in q_kcs[q]:
                skill[k] += 0.05
        seqs.append(LearnerSequence(str(learner), tuple(inters)))
    return seqs
