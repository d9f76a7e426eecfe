"""Re-render the prompt golden files from tests/fixtures/prompt_fixture.json.

Only run this after an intentional template change, then review the diff.
noopt_pred.txt was written by hand and is never overwritten unless --all is given.

    python3 tests/golden/regen_prompts.py [--all]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from helpers import PROMPT_GOLDEN, fixture_instance, fixture_record, fixture_weights, golden_name, prompt_fixture  # noqa: E402

from ktharness.prompting import (  # noqa: E402
    OutputMode,
    PromptVariant,
    render_feedback_judge_prompt,
    render_prediction_prompt,
    render_recommendation_judge_prompt,
    render_trace_label_prompt,
)

HAND_WRITTEN = {"noopt_pred.txt"}


def render_all() -> dict[str, str]:
    inst, weights, rec = fixture_instance(), fixture_weights(), fixture_record()
    out = {}
    for v in PromptVariant:
        for m in OutputMode:
            out[golden_name(v, m)] = render_prediction_prompt(inst, v, m, weights=weights).text
    out["fb_judge.txt"] = render_feedback_judge_prompt(rec).text
    out["rec_judge.txt"] = render_recommendation_judge_prompt(rec).text
    out["trace_label.txt"] = render_trace_label_prompt(prompt_fixture()["trace_segment"]).text
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--all", action="store_true", help="also overwrite hand-written goldens")
    args = ap.parse_args()
    PROMPT_GOLDEN.mkdir(parents=True, exist_ok=True)
    for name, text in render_all().items():
        if name in HAND_WRITTEN and not args.all:
            continue
        (PROMPT_GOLDEN / name).write_text(text, encoding="utf-8")
        print(f"wrote {name}")


if __name__ == "__main__":
    main()
