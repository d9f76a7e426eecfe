"""Prompt rendering for prediction, rubric judging and trace labeling.

Templates live under ``templates/<version>/`` as UTF-8 text with ``{name}``
slots. Only lowercase identifiers inside braces are slots, so literal braces
such as ``{3, 72}`` or JSON examples survive rendering.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import TYPE_CHECKING, Iterable, Mapping

from .dataset import EvalInstance, Interaction, OptionWeightTable, _round_half_up

if TYPE_CHECKING:
    from .protocol import PredictionRecord

TEMPLATE_VERSION = "v1"

_SLOT = re.compile(r"\{([a-z_]+)\}")


class PromptError(ValueError):
    pass


class PromptVariant(str, enum.Enum):
    NO_OPTION = "NoOption"
    OPTION = "Option"
    WEIGHT = "Weight"


class OutputMode(str, enum.Enum):
    PRED_ONLY = "PredOnly"
    FB = "FB"
    REC = "Rec"
    FB_REC = "FBRec"

    @property
    def wants_feedback(self) -> bool:
        return self in (OutputMode.FB, OutputMode.FB_REC)

    @property
    def wants_recommendation(self) -> bool:
        return self in (OutputMode.REC, OutputMode.FB_REC)


def parse_variant(value: str | PromptVariant) -> PromptVariant:
    if isinstance(value, PromptVariant):
        return value
    key = value.replace("-", "").replace("_", "").lower()
    for v in PromptVariant:
        if v.value.lower() == key:
            return v
    raise PromptError(f"unknown prompt variant {value!r}")


def parse_mode(value: str | OutputMode) -> OutputMode:
    if isinstance(value, OutputMode):
        return value
    key = value.replace("-", "").replace("_", "").replace("+", "").replace(" ", "").lower()
    aliases = {"pred": OutputMode.PRED_ONLY, "predonly": OutputMode.PRED_ONLY, "fbrec": OutputMode.FB_REC}
    if key in aliases:
        return aliases[key]
    for m in OutputMode:
        if m.value.lower() == key:
            return m
    raise PromptError(f"unknown output mode {value!r}")


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    kind: str
    instance_id: str | None = None
    variant: PromptVariant | None = None
    mode: OutputMode | None = None
    template_version: str = TEMPLATE_VERSION


@dataclass(frozen=True)
class WeightDescriptor:
    label: str
    frequency: float | None


# lower bounds of each bucket, checked from the top
_WEIGHT_BUCKETS = ((0.8, "very high"), (0.5, "high"), (0.3, "medium"), (0.1, "low"), (0.0, "very low"))


def describe_weight(frequency: float | None) -> WeightDescriptor:
    if frequency is None:
        return WeightDescriptor("NaN", None)
    if not 0.0 <= frequency <= 1.0:
        raise PromptError(f"option frequency must lie in [0, 1], got {frequency}")
    for lower, label in _WEIGHT_BUCKETS:
        if frequency >= lower:
            return WeightDescriptor(label, frequency)
    raise AssertionError("unreachable")


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    path = resources.files("ktharness").joinpath("templates", version, f"{name}.txt")
    try:
        return path.read_text(encoding="utf-8").rstrip("\n")
    except FileNotFoundError as exc:
        raise PromptError(f"template {version}/{name}.txt not found") from exc


def fill_slots(template: str, values: Mapping[str, str]) -> str:
    """Single-pass slot substitution; unknown names are left untouched."""
    return _SLOT.sub(lambda m: values[m.group(1)] if m.group(1) in values else m.group(0), template)


# --------------------------------------------------------------------------
# field formatting


def format_list(items: Iterable[str]) -> str:
    return "[" + ", ".join(items) + "]"


def format_kc_set(kc_ids: Iterable[str]) -> str:
    return "{" + ", ".join(kc_ids) + "}"


def correctness_word(correct: int) -> str:
    return "correct" if correct else "wrong"


def _option_token(it: Interaction) -> str:
    return "NaN" if it.selected_option is None else it.selected_option


def option_weight_labels(
    history: tuple[Interaction, ...], weights: OptionWeightTable, portion: float = 1.0
) -> list[str]:
    """Weight descriptors for the most recent ``portion`` of the history, NaN before it."""
    if not 0.0 <= portion <= 1.0:
        raise PromptError(f"weight portion must lie in [0, 1], got {portion}")
    n_weighted = _round_half_up(portion * len(history))
    start = len(history) - n_weighted
    labels = []
    for i, it in enumerate(history):
        if i < start:
            labels.append("NaN")
        else:
            labels.append(describe_weight(weights.get(it.question_id, it.selected_option)).label)
    return labels


def format_student_history(instance: EvalInstance) -> str:
    """Compact one-line history used inside the judge prompts."""
    h = instance.history
    return (
        f"Question ID sequence: {format_list(i.question_id for i in h)}; "
        f"KC ID sequence: {format_list(format_kc_set(i.kc_ids) for i in h)}; "
        f"Correctness sequence: {format_list(correctness_word(i.correct) for i in h)}; "
        f"Next question ID: {instance.target_question_id}; "
        f"Next question's KC ID: {format_kc_set(instance.target_kc_ids)}"
    )


_KC_NOTE = (
    " (Note: This is a list of KC IDs associated with the next question. For example, if next_kc_id is "
    "{3, 72}, it means the next question involves KC IDs 3 and 72.)"
)

_CONSIDERATIONS = (
    ("all", "The student's overall correctness pattern."),
    ("all", "The complexity and difficulty levels of the questions and KC IDs."),
    ("options", "How the selected options reflect their weight on the student's understanding and confidence."),
    ("all", "Recent trends in the student's performance."),
    ("all", "The student's progression and knowledge improvement over time."),
    ("all", "The student's current knowledge state for each KC and how it matches the KC IDs in the next question."),
    ("weights", "Ignore any NaN values in the option weights."),
)

_SECTION_LINES = {
    "PREDICTION": "PREDICTION: `correct` or `wrong`",
    "FEEDBACK": "FEEDBACK: personalized feedback describing the student's recent performance",
    "RECOMMENDATION": "RECOMMENDATION: the next concept or practice question for the student, with a brief reason",
}


def _numbered(lines: list[str]) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def output_instruction(mode: OutputMode, version: str = TEMPLATE_VERSION) -> str:
    if mode is OutputMode.PRED_ONLY:
        return load_template("output_pred_only", version)
    sections = ["PREDICTION"]
    if mode.wants_feedback:
        sections.append("FEEDBACK")
    if mode.wants_recommendation:
        sections.append("RECOMMENDATION")
    body = "\n".join(_SECTION_LINES[s] for s in sections)
    return fill_slots(load_template("output_unified", version), {"section_lines": body})


def render_prediction_prompt(
    instance: EvalInstance,
    variant: PromptVariant | str,
    mode: OutputMode | str,
    weights: OptionWeightTable | None = None,
    weight_portion: float = 1.0,
    version: str = TEMPLATE_VERSION,
) -> RenderedPrompt:
    variant = parse_variant(variant)
    mode = parse_mode(mode)
    if variant is PromptVariant.WEIGHT and weights is None:
        raise PromptError("the Weight variant needs an option weight table")
    h = instance.history
    history_lines = [
        f"Question ID sequence: {format_list(i.question_id for i in h)}",
        f"KC ID sequence: {format_list(format_kc_set(i.kc_ids) for i in h)}{_KC_NOTE}",
    ]
    if variant is not PromptVariant.NO_OPTION:
        history_lines.append(f"Selected option sequence: {format_list(_option_token(i) for i in h)}")
    if variant is PromptVariant.WEIGHT:
        history_lines.append(f"Selected option weights: {format_list(option_weight_labels(h, weights, weight_portion))}")
    history_lines.append(f"Correctness sequence: {format_list(correctness_word(i.correct) for i in h)}")

    allowed = {"all"}
    if variant is not PromptVariant.NO_OPTION:
        allowed.add("options")
    if variant is PromptVariant.WEIGHT:
        allowed.add("weights")
    considerations = [text for tag, text in _CONSIDERATIONS if tag in allowed]

    text = fill_slots(
        load_template("prediction", version),
        {
            "history_lines": _numbered(history_lines),
            "consideration_lines": _numbered(considerations),
            "next_question_id": instance.target_question_id,
            "next_kc_id": format_kc_set(instance.target_kc_ids),
            "output_instruction": output_instruction(mode, version),
        },
    )
    return RenderedPrompt(text, "prediction", instance.instance_id, variant, mode, version)


def _judge_slots(record: "PredictionRecord", version: str) -> dict[str, str]:
    return {
        "student_history": record.student_history,
        "prediction": record.majority_label,
        "ground_truth": correctness_word(record.ground_truth),
        "score_format": load_template("score_format", version),
    }


def render_feedback_judge_prompt(record: "PredictionRecord", version: str = TEMPLATE_VERSION) -> RenderedPrompt:
    if not record.feedback_text:
        raise PromptError(f"record {record.instance_id} has no feedback text")
    slots = _judge_slots(record, version) | {"generated_feedback": record.feedback_text}
    text = fill_slots(load_template("feedback_judge", version), slots)
    return RenderedPrompt(text, "feedback_judge", record.instance_id, template_version=version)


def render_recommendation_judge_prompt(
    record: "PredictionRecord", version: str = TEMPLATE_VERSION
) -> RenderedPrompt:
    if not record.recommendation_text:
        raise PromptError(f"record {record.instance_id} has no recommendation text")
    slots = _judge_slots(record, version) | {"generated_recommendation": record.recommendation_text}
    text = fill_slots(load_template("recommendation_judge", version), slots)
    return RenderedPrompt(text, "recommendation_judge", record.instance_id, template_version=version)


def render_trace_label_prompt(segment_text: str, version: str = TEMPLATE_VERSION) -> RenderedPrompt:
    if not segment_text or not segment_text.strip():
        raise PromptError("cannot label an empty segment")
    text = fill_slots(load_template("trace_label", version), {"segment": segment_text})
    return RenderedPrompt(text, "trace_label", template_version=version)
