"""Reasoning-trace segmentation, episode labeling and transition statistics."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .gateway import Gateway, count_tokens
from .prompting import render_trace_label_prompt
from .protocol import CORRECT, WRONG, PredictionRecord

log = logging.getLogger(__name__)

MIN_SEGMENT_TOKENS = 10


class TraceError(ValueError):
    pass


class EpisodeLabel(str, enum.Enum):
    READ = "Read"
    PLAN = "Plan"
    IMPLEMENT = "Implement"
    ANALYZE = "Analyze"
    MONITOR = "Monitor"
    EXPLORE = "Explore"
    VERIFY = "Verify"


LABELS = tuple(EpisodeLabel)
LABEL_NAMES = tuple(l.value for l in LABELS)
_INDEX = {l: i for i, l in enumerate(LABELS)}


@dataclass
class EpisodeSequence:
    instance_id: str
    sample_index: int
    labels: list[EpisodeLabel]
    segments: list[str]
    dropped: int = 0

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.segments):
            raise ValueError("labels and segments differ in length")
        if not self.labels:
            raise ValueError("an episode sequence needs at least one label")

    def to_json(self) -> str:
        return json.dumps(
            {"instance_id": self.instance_id, "sample_index": self.sample_index,
             "labels": [l.value for l in self.labels], "segments": self.segments, "dropped": self.dropped},
            sort_keys=True, ensure_ascii=False,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSequence":
        return cls(d["instance_id"], d["sample_index"], [EpisodeLabel(l) for l in d["labels"]],
                   list(d["segments"]), d.get("dropped", 0))


def seq_of(labels: Iterable[str], instance_id: str = "", sample_index: int = 0) -> EpisodeSequence:
    """Convenience constructor from label names (segments left blank)."""
    labs = [EpisodeLabel(l) for l in labels]
    return EpisodeSequence(instance_id, sample_index, labs, [""] * len(labs))


# --------------------------------------------------------------------------
# segmentation

_PARAGRAPH = re.compile(r"\n\s*\n")
_SENTENCE = re.compile(r"(?<=[.!?])\s+")


def segment_trace(trace_text: str, min_tokens: int = MIN_SEGMENT_TOKENS) -> list[str]:
    """Split on blank lines and sentence ends, then merge short pieces.

    A piece under ``min_tokens`` whitespace tokens is merged into its
    successor; a short tail is merged into the previous segment.
    """
    if not trace_text or not trace_text.strip():
        raise TraceError("cannot segment an empty trace")
    pieces = []
    for para in _PARAGRAPH.split(trace_text.strip()):
        for sent in _SENTENCE.split(para.strip()):
            sent = " ".join(sent.split())
            if sent:
                pieces.append(sent)
    segments: list[str] = []
    carry = ""
    for piece in pieces:
        cur = f"{carry} {piece}" if carry else piece
        if count_tokens(cur) < min_tokens:
            carry = cur
        else:
            segments.append(cur)
            carry = ""
    if carry:
        if segments:
            segments[-1] = f"{segments[-1]} {carry}"
        else:
            segments.append(carry)
    return segments


# --------------------------------------------------------------------------
# labeling

_STRIP = " \t\r\n`'\"*.:!"


def match_label(reply: str) -> EpisodeLabel | None:
    """Strict case-insensitive match of the whole reply against the seven names."""
    word = (reply or "").strip().strip(_STRIP)
    for lab in LABELS:
        if word.lower() == lab.value.lower():
            return lab
    return None


def label_segments(
    segments: Sequence[str], gateway: Gateway, instance_id: str = "", sample_index: int = 0
) -> EpisodeSequence | None:
    """One judge call per segment; an unmatched reply gets one retry, then the segment is dropped.

    Returns None when every segment was dropped.
    """
    if not segments:
        raise TraceError("no segments to label")

    def one(seg: str) -> EpisodeLabel | None:
        prompt = render_trace_label_prompt(seg)
        for attempt in range(2):
            reply = gateway.complete(prompt, sample_index=attempt, temperature=0.0, budget=None)
            lab = match_label(reply.answer_text)
            if lab is not None:
                return lab
        return None

    if gateway.config.max_parallel > 1 and len(segments) > 1:
        with ThreadPoolExecutor(max_workers=gateway.config.max_parallel) as pool:
            results = list(pool.map(one, segments))
    else:
        results = [one(s) for s in segments]
    kept = [(lab, seg) for lab, seg in zip(results, segments) if lab is not None]
    dropped = len(segments) - len(kept)
    if not kept:
        return None
    return EpisodeSequence(instance_id, sample_index, [k[0] for k in kept], [k[1] for k in kept], dropped)


# --------------------------------------------------------------------------
# transition statistics


@dataclass
class TransitionMatrix:
    counts: np.ndarray
    probs: np.ndarray
    n_sequences: int
    group: str = "all"

    @property
    def n_transitions(self) -> int:
        return int(self.counts.sum())

    def row_entropies(self) -> np.ndarray:
        out = np.zeros(len(LABELS))
        for i, row in enumerate(self.probs):
            nz = row[row > 0]
            out[i] = float(-(nz * np.log2(nz)).sum()) if nz.size else 0.0
        return out

    def prob(self, src: str, dst: str) -> float:
        return float(self.probs[_INDEX[EpisodeLabel(src)], _INDEX[EpisodeLabel(dst)]])


def transition_counts(sequences: Iterable[EpisodeSequence]) -> tuple[np.ndarray, int]:
    counts = np.zeros((len(LABELS), len(LABELS)), dtype=np.int64)
    n = 0
    for s in sequences:
        n += 1
        for a, b in zip(s.labels, s.labels[1:]):
            counts[_INDEX[a], _INDEX[b]] += 1
    return counts, n


def normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.zeros(counts.shape, dtype=float)
    np.divide(counts, totals, out=probs, where=totals > 0)
    return probs


def transition_matrix(sequences: Iterable[EpisodeSequence], group: str = "all") -> TransitionMatrix:
    counts, n = transition_counts(sequences)
    if counts.sum() == 0:
        raise TraceError("no transitions: every sequence has a single label")
    return TransitionMatrix(counts, normalize_rows(counts), n, group)


def transition_diff(correct: TransitionMatrix, incorrect: TransitionMatrix) -> np.ndarray:
    """Signed percentage-point difference, correct minus incorrect."""
    return 100.0 * (correct.probs - incorrect.probs)


@dataclass(frozen=True)
class SequenceStats:
    length: int
    distinct: int
    entropy: float
    self_loop: float


def sequence_stats(seq: EpisodeSequence) -> SequenceStats:
    """Length, distinct labels, conditional transition entropy (bits) and self-loop fraction.

    Entropy is H(next | current) over the sequence's own transitions: each
    source label's outgoing distribution entropy weighted by how often that
    label starts a transition. It is bounded by log2(7).
    """
    pairs = list(zip(seq.labels, seq.labels[1:]))
    distinct = len(set(seq.labels))
    if not pairs:
        return SequenceStats(len(seq.labels), distinct, 0.0, 0.0)
    by_src: dict[EpisodeLabel, dict[EpisodeLabel, int]] = {}
    for a, b in pairs:
        by_src.setdefault(a, {}).setdefault(b, 0)
        by_src[a][b] += 1
    h = 0.0
    for a in sorted(by_src, key=_INDEX.get):
        outs = by_src[a]
        total = sum(outs.values())
        row_h = -sum((c / total) * math.log2(c / total) for c in outs.values())
        h += (total / len(pairs)) * row_h
    loops = sum(1 for a, b in pairs if a == b)
    return SequenceStats(len(seq.labels), distinct, h, loops / len(pairs))


@dataclass
class TraceStats:
    per_sequence: list[SequenceStats]
    means: dict[str, float]
    stds: dict[str, float]
    group: str = "all"

    def to_dict(self) -> dict:
        return {"group": self.group, "n": len(self.per_sequence), "means": self.means, "stds": self.stds}


STAT_FIELDS = ("length", "distinct", "entropy", "self_loop")


def trace_stats(sequences: Sequence[EpisodeSequence], group: str = "all") -> TraceStats:
    """Per-sequence complexity measures with group means and population std devs."""
    if not sequences:
        raise TraceError("no sequences")
    per = [sequence_stats(s) for s in sequences]
    means, stds = {}, {}
    for f in STAT_FIELDS:
        vals = [float(getattr(p, f)) for p in per]
        means[f] = statistics.fmean(vals)
        stds[f] = statistics.pstdev(vals)
    return TraceStats(per, means, stds, group)


@dataclass
class Grouping:
    correct: list[EpisodeSequence] = field(default_factory=list)
    incorrect: list[EpisodeSequence] = field(default_factory=list)
    orphans: list[EpisodeSequence] = field(default_factory=list)


def group_by_correctness(records: Iterable[PredictionRecord], sequences: Iterable[EpisodeSequence]) -> Grouping:
    """Split sequences by whether their own sample's outcome matched the ground truth.

    Sequences whose (instance_id, sample_index) has no record are orphans.
    Invalid samples never match the ground truth and land in ``incorrect``.
    """
    by_id = {r.instance_id: r for r in records}
    g = Grouping()
    for s in sequences:
        rec = by_id.get(s.instance_id)
        if rec is None or not 0 <= s.sample_index < len(rec.outcomes):
            g.orphans.append(s)
            continue
        label = rec.outcomes[s.sample_index].label
        hit = (label == CORRECT and rec.ground_truth == 1) or (label == WRONG and rec.ground_truth == 0)
        (g.correct if hit else g.incorrect).append(s)
    return g


# --------------------------------------------------------------------------
# export


def matrix_csv(matrix: np.ndarray, fmt: str = "{:.6f}") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from/to", *LABEL_NAMES])
    for name, row in zip(LABEL_NAMES, matrix):
        w.writerow([name, *(fmt.format(v) for v in row)])
    return buf.getvalue()


def long_format_csv(rows: Iterable[tuple[str, np.ndarray]]) -> str:
    """``from,to,group,value`` rows for heatmap tools."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from", "to", "group", "value"])
    for group, m in rows:
        for i, src in enumerate(LABEL_NAMES):
            for j, dst in enumerate(LABEL_NAMES):
                w.writerow([src, dst, group, f"{float(m[i, j]):.6f}"])
    return buf.getvalue()


def read_sequences(path: str | Path) -> list[EpisodeSequence]:
    out = []
    path = Path(path)
    if not path.exists():
        return out
    lines = path.read_text(encoding="utf-8").splitlines()
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(EpisodeSequence.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError):
            if n == len(lines) - 1:
                continue
            raise
    return out


@dataclass
class TraceLabeling:
    sequences: list[EpisodeSequence]
    traces_seen: int
    segments_dropped: int
    empty_sequences: int


def label_run(records: Sequence[PredictionRecord], gateway: Gateway,
              out_path: str | Path | None = None) -> TraceLabeling:
    """Segment and label every non-empty trace in ``records``.

    Finished sequences are appended to ``out_path`` so an interrupted pass
    resumes; traces whose every segment was dropped are remembered as empty.
    """
    done: dict[tuple[str, int], EpisodeSequence | None] = {}
    empty_path = None
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        for s in read_sequences(out_path):
            done[(s.instance_id, s.sample_index)] = s
        empty_path = out_path.with_name(out_path.stem + ".empty.jsonl")
        if empty_path.exists():
            for line in empty_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    d = json.loads(line)
                    done[(d["instance_id"], d["sample_index"])] = None
    jobs = [(r.instance_id, i, t) for r in records for i, t in enumerate(r.traces) if t and t.strip()]
    for iid, idx, trace in jobs:
        if (iid, idx) in done:
            continue
        seq = label_segments(segment_trace(trace), gateway, iid, idx)
        done[(iid, idx)] = seq
        if out_path is not None:
            if seq is None:
                with empty_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"instance_id": iid, "sample_index": idx}) + "\n")
            else:
                with out_path.open("a", encoding="utf-8") as fh:
                    fh.write(seq.to_json() + "\n")
    keys = sorted((iid, idx) for iid, idx, _ in jobs)
    seqs = [done[k] for k in keys if done[k] is not None]
    if out_path is not None:
        out_path.write_text("".join(s.to_json() + "\n" for s in seqs), encoding="utf-8")
    return TraceLabeling(
        sequences=seqs,
        traces_seen=len(jobs),
        segments_dropped=sum(s.dropped for s in seqs),
        empty_sequences=sum(1 for k in keys if done[k] is None),
    )
