"""Shared fixture loaders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

from ktharness.dataset import EvalInstance, OptionWeightTable
from ktharness.prompting import OutputMode, PromptVariant, format_student_history
from ktharness.protocol import PredictionRecord, SampleOutcome

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
GOLDEN = TESTS / "golden"
PROMPT_GOLDEN = GOLDEN / "prompts" / "v1"

# one "PASS/FAIL/SKIP" line per acceptance criterion, printed in the pytest summary
ACCEPTANCE_LINES: list[str] = []

VARIANT_SLUG = {PromptVariant.NO_OPTION: "noopt", PromptVariant.OPTION: "opt", PromptVariant.WEIGHT: "weight"}
MODE_SLUG = {OutputMode.PRED_ONLY: "pred", OutputMode.FB: "fb", OutputMode.REC: "rec", OutputMode.FB_REC: "fbrec"}


def prompt_fixture() -> dict:
    return json.loads((FIXTURES / "prompt_fixture.json").read_text(encoding="utf-8"))


def fixture_instance() -> EvalInstance:
    return EvalInstance.from_dict(prompt_fixture()["instance"])


def fixture_weights() -> OptionWeightTable:
    return OptionWeightTable(prompt_fixture()["weights"])


def fixture_record() -> PredictionRecord:
    fx = prompt_fixture()
    inst = fixture_instance()
    outcomes = [SampleOutcome("correct")] * 6 + [SampleOutcome("wrong")] * 4
    return PredictionRecord(
        instance_id=inst.instance_id, learner_id=inst.learner_id, position=inst.position,
        ground_truth=inst.target_correct, outcomes=outcomes, empirical_p=0.6, majority_label="correct",
        feedback_text=fx["feedback"], recommendation_text=fx["recommendation"], text_sample_index=0,
        student_history=format_student_history(inst),
    )


def golden_name(variant: PromptVariant, mode: OutputMode) -> str:
    return f"{VARIANT_SLUG[variant]}_{MODE_SLUG[mode]}.txt"


class ScriptedGateway:
    """Gateway stand-in that answers from a callable ``(prompt, sample_index) -> Completion | Exception``."""

    def __init__(self, reply, config=None) -> None:
        from ktharness.gateway import ModelConfig

        self.config = config or ModelConfig(provider="mock", max_parallel=1)
        self.reply = reply
        self.calls = 0

    def complete(self, prompt, sample_index=0, temperature=None, budget="config"):
        self.calls += 1
        out = self.reply(prompt, sample_index)
        if isinstance(out, BaseException):
            raise out
        return out

    def close(self) -> None:
        pass


def answer(text: str, trace: str = "", truncated: bool = False):
    from ktharness.gateway import Completion, count_tokens

    return Completion(trace, text, count_tokens(trace), count_tokens(text), truncated=truncated)


class Interrupted(Exception):
    pass


class KillAfter:
    """Wraps a real gateway and raises once ``n`` completions have been served."""

    def __init__(self, gateway, n: int) -> None:
        self.inner = gateway
        self.config = gateway.config
        self.left = n

    def complete(self, *args, **kwargs):
        if self.left <= 0:
            raise Interrupted("simulated kill")
        self.left -= 1
        return self.inner.complete(*args, **kwargs)

    def close(self) -> None:
        pass


def make_record(iid: str, p: float, y: int, majority: int | None = None, k: int = 10) -> PredictionRecord:
    """Record with the given empirical p and ground truth; majority defaults to p >= 0.5."""
    if majority is None:
        majority = 1 if p >= 0.5 else 0
    n_correct = round(p * k)
    outs = [SampleOutcome("correct")] * n_correct + [SampleOutcome("wrong")] * (k - n_correct)
    return PredictionRecord(iid, "u", 0, y, outs, p, "correct" if majority else "wrong")


def mock_config(output_dir, **sections):
    """Experiment config on synthetic data with the mock model; ``sections`` patch the TOML-like mapping."""
    from ktharness.config import build_config

    raw = {
        "experiment": {"name": "t", "output_dir": str(output_dir), "seed": 42},
        "dataset": {"format": "synthetic", "cap": 200},
        "protocol": {"variant": "Weight", "mode": "PredOnly", "samples": 10, "budgets": ["none"]},
        "model": {"provider": "mock", "max_parallel": 4},
        "judge": {"provider": "mock"},
    }
    for name, patch in sections.items():
        raw[name] = {**raw.get(name, {}), **patch}
    return build_config(raw, "/", check_paths=False)
