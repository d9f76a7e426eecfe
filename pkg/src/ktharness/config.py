"""Experiment configuration: a TOML file with sections, overridable from the CLI.

Example::

    [experiment]
    name = "assist09-weight"
    output_dir = "runs"
    seed = 42

    [dataset]
    format = "assist09"          # assist09 | dbekt22 | ednet | synthetic
    path = "data/skill_builder_data.csv"
    history_length = 25
    cap = 200

    [protocol]
    variant = "Weight"
    mode = "PredOnly"
    samples = 10
    budgets = ["none", 2048]

    [model]
    provider = "http"
    model = "qwen3-1.7b"
    endpoint = "http://localhost:8000/v1/chat/completions"

    [judge]
    provider = "http"
    model = "solar-pro2"
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import FORMATS
from .gateway import ModelConfig
from .prompting import OutputMode, PromptError, PromptVariant, parse_mode, parse_variant

DATASET_FORMATS = (*FORMATS, "synthetic")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class DatasetConfig:
    format: str = "synthetic"
    path: str | None = None
    train_ratio: float = 0.8
    subsample: int | None = None
    history_length: int = 25
    last_k: int | None = None
    cap: int | None = None
    weight_portion: float = 1.0
    synthetic_learners: int = 100
    synthetic_length: int = 30

    @property
    def tag(self) -> str:
        if self.format == "ednet" and self.subsample:
            return f"ednet-{self.subsample}"
        return self.format


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    output_dir: str = "runs"
    cache_dir: str | None = None
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    variant: PromptVariant = PromptVariant.WEIGHT
    mode: OutputMode = OutputMode.PRED_ONLY
    samples: int = 10
    budgets: list[int | None] = field(default_factory=lambda: [None])
    model: ModelConfig = field(default_factory=ModelConfig)
    judge: ModelConfig = field(default_factory=lambda: ModelConfig(temperature=0.0))

    def model_for_budget(self, budget: int | None) -> ModelConfig:
        return dataclasses.replace(self.model, thinking_budget=budget)

    def snapshot(self) -> dict:
        return {
            "name": self.name,
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "seed": self.seed,
            "dataset": dataclasses.asdict(self.dataset),
            "variant": self.variant.value,
            "mode": self.mode.value,
            "samples": self.samples,
            "budgets": list(self.budgets),
            "model": self.model.snapshot(),
            "judge": self.judge.snapshot(),
        }

    def run_id(self, budget: int | None) -> str:
        snap = self.snapshot()
        snap["budgets"] = [budget]
        snap.pop("output_dir")
        snap.pop("cache_dir")
        snap["model"] = self.model_for_budget(budget).fingerprint()
        snap["judge"] = self.judge.fingerprint()
        digest = hashlib.sha256(json.dumps(snap, sort_keys=True).encode()).hexdigest()[:8]
        think = "nothink" if budget is None else f"think{budget}"
        return f"{self.name}-{self.dataset.tag}-{self.variant.value}-{self.mode.value}-{think}-{digest}"


_SECTIONS = ("experiment", "dataset", "protocol", "model", "judge")
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"thinking_budget"}
_DATASET_FIELDS = {f.name for f in dataclasses.fields(DatasetConfig)}


def parse_budget(value: Any) -> int | None:
    if value is None:
        return None
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("none", "nothink", "no-think", "off", ""):
            return None
        value = int(v)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"budget must be an integer or 'none', got {value!r}")
    if value < 0:
        raise ValueError("budget must be >= 0")
    return value


def _check_keys(section: str, data: dict, allowed: set[str], problems: list[str]) -> None:
    for key in data:
        if key not in allowed:
            problems.append(f"{section}.{key}: unknown key")


def _model_config(section: str, data: dict, defaults: dict, problems: list[str]) -> ModelConfig:
    _check_keys(section, data, _MODEL_FIELDS, problems)
    kwargs = dict(defaults)
    kwargs.update({k: v for k, v in data.items() if k in _MODEL_FIELDS})
    try:
        return ModelConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{section}: {exc}")
        return ModelConfig(**defaults)


def build_config(raw: dict, base_dir: str | Path = ".", overrides: dict | None = None,
                 check_paths: bool = True) -> ExperimentConfig:
    """Validate a parsed config mapping; every problem is reported with its field path."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    base_dir = Path(base_dir)
    problems: list[str] = []
    for key in raw:
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown section")
    exp = dict(raw.get("experiment", {}))
    ds = dict(raw.get("dataset", {}))
    proto = dict(raw.get("protocol", {}))
    _check_keys("experiment", exp, {"name", "output_dir", "cache_dir", "seed"}, problems)
    _check_keys("dataset", ds, _DATASET_FIELDS, problems)
    _check_keys("protocol", proto, {"variant", "mode", "samples", "budgets"}, problems)

    cfg = ExperimentConfig()
    cfg.name = str(exp.get("name", cfg.name))
    cfg.output_dir = str(base_dir / exp.get("output_dir", cfg.output_dir))
    if exp.get("cache_dir"):
        cfg.cache_dir = str(base_dir / exp["cache_dir"])
    seed = overrides.get("seed", exp.get("seed", 0))
    if isinstance(seed, bool) or not isinstance(seed, int):
        problems.append(f"experiment.seed: must be an integer, got {seed!r}")
        seed = 0
    cfg.seed = seed

    dcfg = DatasetConfig(**{k: v for k, v in ds.items() if k in _DATASET_FIELDS})
    if "cap" in overrides:
        dcfg.cap = overrides["cap"]
    if dcfg.format not in DATASET_FORMATS:
        problems.append(f"dataset.format: must be one of {DATASET_FORMATS}, got {dcfg.format!r}")
    if dcfg.format != "synthetic":
        if not dcfg.path:
            problems.append("dataset.path: required for real datasets")
        else:
            dcfg.path = str(base_dir / dcfg.path)
            if check_paths and not Path(dcfg.path).exists():
                problems.append(f"dataset.path: {dcfg.path} does not exist")
    if not isinstance(dcfg.train_ratio, (int, float)) or not 0 < dcfg.train_ratio < 1:
        problems.append(f"dataset.train_ratio: must lie in (0, 1), got {dcfg.train_ratio!r}")
    if not isinstance(dcfg.history_length, int) or dcfg.history_length < 1:
        problems.append(f"dataset.history_length: must be an integer >= 1, got {dcfg.history_length!r}")
    for key in ("subsample", "last_k", "cap"):
        v = getattr(dcfg, key)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
            problems.append(f"dataset.{key}: must be a non-negative integer, got {v!r}")
    if not isinstance(dcfg.weight_portion, (int, float)) or not 0 <= dcfg.weight_portion <= 1:
        problems.append(f"dataset.weight_portion: must lie in [0, 1], got {dcfg.weight_portion!r}")
    cfg.dataset = dcfg

    try:
        cfg.variant = parse_variant(overrides.get("variant", proto.get("variant", "Weight")))
    except PromptError as exc:
        problems.append(f"protocol.variant: {exc}")
    try:
        cfg.mode = parse_mode(overrides.get("mode", proto.get("mode", "PredOnly")))
    except PromptError as exc:
        problems.append(f"protocol.mode: {exc}")
    samples = proto.get("samples", 10)
    if isinstance(samples, bool) or not isinstance(samples, int) or samples < 1:
        problems.append(f"protocol.samples: must be an integer >= 1, got {samples!r}")
    else:
        cfg.samples = samples

    budgets_raw = [overrides["budget"]] if "budget" in overrides else proto.get("budgets", ["none"])
    if not isinstance(budgets_raw, list) or not budgets_raw:
        problems.append("protocol.budgets: must be a non-empty list")
        budgets_raw = ["none"]
    budgets = []
    for i, b in enumerate(budgets_raw):
        try:
            budgets.append(parse_budget(b))
        except ValueError as exc:
            problems.append(f"protocol.budgets[{i}]: {exc}")
    if len(set(budgets)) != len(budgets):
        problems.append("protocol.budgets: duplicate entries")
    cfg.budgets = budgets

    model_raw = dict(raw.get("model", {}))
    if "provider" in overrides:
        model_raw["provider"] = overrides["provider"]
    cfg.model = _model_config("model", model_raw, {"seed": cfg.seed}, problems)
    judge_raw = dict(raw.get("judge", {}))
    if "provider" in overrides:
        judge_raw["provider"] = overrides["provider"]
    cfg.judge = _model_config("judge", judge_raw, {"seed": cfg.seed, "temperature": 0.0, "model": "mock-judge"},
                              problems)

    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path, overrides: dict | None = None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"{path}: config file not found"])
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: invalid TOML: {exc}"])
    return build_config(raw, path.parent, overrides, check_paths)


def config_from_snapshot(snap: dict) -> ExperimentConfig:
    """Rebuild a config from the snapshot embedded in run artifacts."""
    model = dict(snap["model"])
    model.pop("thinking_budget", None)
    raw = {
        "experiment": {"name": snap["name"], "output_dir": snap["output_dir"], "seed": snap["seed"],
                       **({"cache_dir": snap["cache_dir"]} if snap.get("cache_dir") else {})},
        "dataset": snap["dataset"],
        "protocol": {"variant": snap["variant"], "mode": snap["mode"], "samples": snap["samples"],
                     "budgets": ["none" if b is None else b for b in snap["budgets"]]},
        "model": model,
        "judge": {k: v for k, v in snap["judge"].items() if k != "thinking_budget"},
    }
    return build_config(raw, ".", check_paths=False)
