from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import FIXTURES, ScriptedGateway, answer, make_record
from ktharness.gateway import ModelConfig
from ktharness.protocol import SampleOutcome
from ktharness.traces import (
    LABEL_NAMES,
    EpisodeLabel,
    TraceError,
    group_by_correctness,
    label_segments,
    match_label,
    segment_trace,
    seq_of,
    sequence_stats,
    trace_stats,
    transition_counts,
    transition_diff,
    transition_matrix,
)

R, P, I, AN, MO, EX, V = LABEL_NAMES


# ---------------------------------------------------------------- segmentation


def test_short_sentences_merge_into_one_segment():
    assert segment_trace("A. B. C.") == ["A. B. C."]


def test_two_long_paragraphs_give_two_segments():
    para = " ".join(f"w{i}" for i in range(19)) + " end."
    assert segment_trace(f"{para}\n\n{para}") == [para, para]


EIGHT_SENTENCES = (
    "The student has attempted five questions on fractions so far. Hmm. "
    "Wait, the last two answers were wrong on KC 72. "
    "So mastery of that component looks weak right now, I think.\n\n"
    "Check again. Yes. The next question also uses KC 72 and looks hard for them. Wrong."
)

# segmented by hand: pieces under 10 tokens join their successor, the short tail joins the last segment
EIGHT_SENTENCES_GOLDEN = [
    "The student has attempted five questions on fractions so far.",
    "Hmm. Wait, the last two answers were wrong on KC 72.",
    "So mastery of that component looks weak right now, I think.",
    "Check again. Yes. The next question also uses KC 72 and looks hard for them. Wrong.",
]


def test_eight_sentence_fixture_matches_golden():
    assert segment_trace(EIGHT_SENTENCES) == EIGHT_SENTENCES_GOLDEN


def test_empty_trace_is_an_error():
    with pytest.raises(TraceError):
        segment_trace("  \n ")


# ---------------------------------------------------------------- labeling


@pytest.mark.parametrize("reply,label", [("Verify", EpisodeLabel.VERIFY), ("verify", EpisodeLabel.VERIFY),
                                         ("**Plan**", EpisodeLabel.PLAN), ("Analyze.", EpisodeLabel.ANALYZE),
                                         ("verification step", None), ("Read and Plan", None), ("", None)])
def test_match_label(reply, label):
    assert match_label(reply) is label


def labeler(replies: dict[tuple[str, int], str]) -> ScriptedGateway:
    def reply(prompt, k):
        seg = prompt.text.split("Reasoning Trace Segment: ")[1].split("\n\nOutput:")[0]
        return answer(replies[(seg, k)])

    return ScriptedGateway(reply, config=ModelConfig(provider="mock", max_parallel=1))


def test_unmatched_reply_is_retried_then_dropped():
    gw = labeler({("s1", 0): "Verify", ("s2", 0): "verification step", ("s2", 1): "verification step",
                  ("s3", 0): "uh", ("s3", 1): "Plan"})
    seq = label_segments(["s1", "s2", "s3"], gw, "i", 0)
    assert seq.labels == [EpisodeLabel.VERIFY, EpisodeLabel.PLAN]
    assert seq.segments == ["s1", "s3"] and seq.dropped == 1
    assert gw.calls == 5


def test_all_segments_dropped_gives_none():
    gw = labeler({("s", 0): "?", ("s", 1): "?"})
    assert label_segments(["s"], gw) is None


# ---------------------------------------------------------------- transitions


def test_counts_for_small_sequence():
    m = transition_matrix([seq_of([R, AN, AN])])
    assert m.counts[0, 3] == 1 and m.counts[3, 3] == 1 and m.n_transitions == 2
    assert m.prob(R, AN) == 1.0 and m.prob(AN, AN) == 1.0


def test_identical_groups_have_zero_diff():
    seqs = [seq_of([R, P, I, V]), seq_of([R, AN, V])]
    m = transition_matrix(seqs)
    assert not transition_diff(m, transition_matrix(list(seqs))).any()


def test_single_label_sequences_have_no_transitions():
    with pytest.raises(TraceError):
        transition_matrix([seq_of([R])])


def test_sequence_stats_examples():
    s = sequence_stats(seq_of([V, V, V]))
    assert (s.entropy, s.self_loop, s.distinct) == (0.0, 1.0, 1)
    alt = sequence_stats(seq_of([R, P, R, P]))
    assert (alt.length, alt.distinct, alt.self_loop, alt.entropy) == (4, 2, 0.0, 0.0)
    one = sequence_stats(seq_of([R]))
    assert (one.entropy, one.self_loop) == (0.0, 0.0)


def load_fixture():
    data = json.loads((FIXTURES / "transitions_50.json").read_text(encoding="utf-8"))
    seqs = [seq_of(d["labels"], d["instance_id"]) for d in data["sequences"]]
    groups = [d["group"] for d in data["sequences"]]
    return seqs, groups


# hand-computed from the five patterns (x10 each):
#   A Read>Analyze>Verify   B Read>Plan>Implement>Implement   C Read>Analyze>Analyze>Monitor
#   D Plan>Explore>Verify>Verify   E Read
HAND_COUNTS = {(R, AN): 20, (R, P): 10, (AN, V): 10, (AN, AN): 10, (AN, MO): 10,
               (P, I): 10, (P, EX): 10, (I, I): 10, (EX, V): 10, (V, V): 10}
HAND_PROBS = {(R, AN): 2 / 3, (R, P): 1 / 3, (AN, V): 1 / 3, (AN, AN): 1 / 3, (AN, MO): 1 / 3,
              (P, I): 0.5, (P, EX): 0.5, (I, I): 1.0, (EX, V): 1.0, (V, V): 1.0}
HAND_DIFF_PP = {(R, AN): -50.0, (R, P): 50.0, (AN, V): 100.0, (AN, AN): -50.0, (AN, MO): -50.0,
                (P, I): 100.0, (P, EX): -100.0, (I, I): 100.0, (EX, V): -100.0, (V, V): -100.0}


def as_dict(matrix: np.ndarray) -> dict:
    return {(LABEL_NAMES[i], LABEL_NAMES[j]): matrix[i, j]
            for i in range(len(LABEL_NAMES)) for j in range(len(LABEL_NAMES)) if matrix[i, j] != 0}


def test_fixture_counts_probs_and_diff():
    seqs, groups = load_fixture()
    m = transition_matrix(seqs)
    assert as_dict(m.counts) == HAND_COUNTS
    assert as_dict(m.probs) == HAND_PROBS
    rows = m.probs.sum(axis=1)
    for i, name in enumerate(LABEL_NAMES):
        assert rows[i] == pytest.approx(0.0 if name == MO else 1.0, abs=1e-9)
    correct = transition_matrix([s for s, g in zip(seqs, groups) if g == "correct"])
    incorrect = transition_matrix([s for s, g in zip(seqs, groups) if g == "incorrect"])
    assert as_dict(transition_diff(correct, incorrect)) == HAND_DIFF_PP


def test_fixture_complexity_stats():
    seqs, groups = load_fixture()
    st_all = trace_stats(seqs)
    assert st_all.means["length"] == pytest.approx(16 / 5, abs=1e-12)
    assert st_all.means["distinct"] == pytest.approx(13 / 5, abs=1e-12)
    assert st_all.means["entropy"] == pytest.approx(2 / 15, abs=1e-12)
    assert st_all.means["self_loop"] == pytest.approx(1 / 5, abs=1e-12)
    # pattern C: the Analyze row splits 1:1 and carries 2 of 3 transitions
    assert sequence_stats(seqs[20]).entropy == pytest.approx(2 / 3, abs=1e-12)
    correct = trace_stats([s for s, g in zip(seqs, groups) if g == "correct"])
    assert correct.means == pytest.approx({"length": 3.5, "distinct": 3.0, "entropy": 0.0, "self_loop": 1 / 6})
    assert correct.stds["length"] == pytest.approx(0.5)


def test_schema_contrast_example_is_computable():
    # the layout used for Read->Analyze style contrasts: percentages per group and their pp difference
    seqs, groups = load_fixture()
    correct = transition_matrix([s for s, g in zip(seqs, groups) if g == "correct"])
    incorrect = transition_matrix([s for s, g in zip(seqs, groups) if g == "incorrect"])
    assert 100 * correct.prob(R, AN) == 50.0 and 100 * incorrect.prob(R, AN) == 100.0


# ---------------------------------------------------------------- grouping


def test_grouping_rules():
    recs = [make_record("a", 0.7, 1), make_record("b", 0.7, 0)]
    recs[1].outcomes[1] = SampleOutcome("invalid", "parse_fail")
    seqs = [seq_of([R], "a", 0), seq_of([R], "b", 0), seq_of([R], "b", 1), seq_of([R], "b", 9),
            seq_of([R], "zzz", 0), seq_of([R], "a", 10)]
    g = group_by_correctness(recs, seqs)
    # a#0 correct on truth 1 -> correct; b#0 correct on truth 0 -> incorrect; invalid -> incorrect;
    # b#9 wrong on truth 0 -> correct; unknown instance / index -> orphans
    assert [(s.instance_id, s.sample_index) for s in g.correct] == [("a", 0), ("b", 9)]
    assert [(s.instance_id, s.sample_index) for s in g.incorrect] == [("b", 0), ("b", 1)]
    assert len(g.orphans) == 2
    assert len(g.correct) + len(g.incorrect) + len(g.orphans) == len(seqs)


# ---------------------------------------------------------------- properties

label_lists = st.lists(st.sampled_from(LABEL_NAMES), min_size=1, max_size=15)


@settings(max_examples=150, deadline=None)
@given(st.lists(label_lists, min_size=1, max_size=12))
def test_matrix_properties(raw):
    seqs = [seq_of(l) for l in raw]
    counts, n = transition_counts(seqs)
    assert counts.tolist() == oracles.transition_counts(raw, LABEL_NAMES) and n == len(raw)
    if counts.sum() == 0:
        return
    m = transition_matrix(seqs)
    for i, row in enumerate(m.probs):
        assert abs(row.sum() - (1.0 if counts[i].sum() else 0.0)) <= 1e-9
    assert (m.row_entropies() <= math.log2(7) + 1e-12).all()


@settings(max_examples=150, deadline=None)
@given(label_lists)
def test_sequence_entropy_bounds(labels):
    s = sequence_stats(seq_of(labels))
    assert 0.0 <= s.entropy <= math.log2(7) + 1e-12
    assert 0.0 <= s.self_loop <= 1.0
    assert s.distinct == len(set(labels))
