"""Chat-completion access with thinking budgets, retries, caching and a mock model.

Two providers share one :class:`Gateway` front:

``http``
    POSTs an OpenAI-style chat-completions body. The reasoning budget is
    written at a configurable dotted path (``reasoning.max_tokens`` by
    default) and No-Think requests merge a configurable "disable" patch into
    the body. Raw response bodies are cached on disk by content digest.
``mock``
    A deterministic offline model that reads the correctness sequence back
    out of the prompt it is given. Used by tests and dry runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .prompting import RenderedPrompt

log = logging.getLogger(__name__)

EPISODE_MARKERS = ("Read", "Plan", "Implement", "Analyze", "Monitor", "Explore", "Verify")

_TOKEN = re.compile(r"\S+")
_THINK_BLOCK = re.compile(r"<think>(.*?)(?:</think>|$)", re.S)


class GatewayError(RuntimeError):
    """Base class for failures that surface from a completion call."""

    kind = "transport_error"


class TransportTimeout(GatewayError):
    pass


class HTTPStatusFailure(GatewayError):
    def __init__(self, status: int, body: str = "") -> None:
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


class MalformedResponse(GatewayError):
    pass


class PromptParseError(ValueError):
    """The mock model could not read the fields it needs from the prompt."""


OPERATIONAL_FIELDS = frozenset({"timeout", "max_parallel", "retry_attempts", "backoff_base", "api_key_env"})


@dataclass
class ModelConfig:
    provider: str = "mock"
    model: str = "mock-kt"
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    thinking_budget: int | None = None
    temperature: float = 1.0
    max_answer_tokens: int = 512
    timeout: float = 120.0
    max_parallel: int = 4
    retry_attempts: int = 3
    backoff_base: float = 1.0
    seed: int = 0
    api_key_env: str = "OPENAI_API_KEY"
    budget_path: str = "reasoning.max_tokens"
    disable_patch: dict = field(default_factory=lambda: {"reasoning": {"enabled": False}})
    send_seed: bool = True
    # mock-only knobs
    mock_trace_tokens: tuple[int, int] = (40, 400)
    mock_continuation_fail_rate: float = 0.0
    mock_parse_fail_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.provider not in ("mock", "http"):
            raise ValueError(f"provider must be 'mock' or 'http', got {self.provider!r}")
        if self.thinking_budget is not None and self.thinking_budget < 0:
            raise ValueError("thinking_budget must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retry_attempts < 1:
            raise ValueError("retry_attempts must be >= 1")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.mock_trace_tokens = tuple(self.mock_trace_tokens)

    @property
    def think_label(self) -> str:
        return "No-Think" if self.thinking_budget is None else f"Think-{self.thinking_budget}"

    def snapshot(self) -> dict:
        d = asdict(self)
        d["mock_trace_tokens"] = list(self.mock_trace_tokens)
        return d

    def fingerprint(self) -> str:
        """Hash of the fields that can change model output; transport tuning is left out."""
        d = {k: v for k, v in self.snapshot().items() if k not in OPERATIONAL_FIELDS}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class Completion:
    reasoning_trace: str
    answer_text: str
    trace_token_count: int
    answer_token_count: int
    latency_ms: float = 0.0
    provider_usage: dict | None = None
    truncated: bool = False
    continued: bool = False
    cached: bool = False


def count_tokens(text: str, reported: int | None = None) -> int:
    """Provider-reported count when given, else a whitespace word count."""
    if reported is not None:
        return int(reported)
    return len(_TOKEN.findall(text or ""))


def cut_tokens(text: str, limit: int) -> str:
    """Prefix of ``text`` holding at most ``limit`` whitespace tokens."""
    if limit <= 0:
        return ""
    for i, m in enumerate(_TOKEN.finditer(text)):
        if i == limit - 1:
            return text[: m.end()]
    return text


def cache_key(
    model: str,
    template_version: str,
    prompt_text: str,
    temperature: float,
    budget: int | None,
    sample_index: int,
    continuation: bool = False,
) -> str:
    material = json.dumps(
        [model, template_version, prompt_text, repr(float(temperature)), budget, sample_index, continuation],
        ensure_ascii=False,
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed response store: one JSON file per key.

    Writes go through a temp file and ``os.replace`` so concurrent writers
    never expose partial files.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            log.warning("ignoring corrupt cache entry %s", path)
            return None

    def put(self, key: str, value: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(value, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, path)


# --------------------------------------------------------------------------
# mock model


def _unit(*parts: object) -> float:
    """Deterministic uniform draw in [0, 1) from a hash of ``parts``."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


_CORRECTNESS_LINE = re.compile(r"Correctness sequence: \[([^\]]*)\]")
_NEXT_Q_LINE = re.compile(r"Next question ID: (.+)")
_NEXT_KC_LINE = re.compile(r"Next question's KC ID: \{([^}]*)\}")


def parse_prediction_prompt(text: str) -> tuple[list[int], str, list[str]]:
    """Recover (history correctness, next question id, next KC ids) from a prediction prompt."""
    m = _CORRECTNESS_LINE.search(text)
    q = _NEXT_Q_LINE.search(text)
    kc = _NEXT_KC_LINE.search(text)
    if not (m and q and kc):
        raise PromptParseError("prompt does not contain the correctness sequence and next-question fields")
    words = [w.strip() for w in m.group(1).split(",") if w.strip()]
    if not words or any(w not in ("correct", "wrong") for w in words):
        raise PromptParseError(f"unreadable correctness sequence {m.group(1)!r}")
    kcs = [k.strip() for k in kc.group(1).split(",") if k.strip()]
    return [1 if w == "correct" else 0 for w in words], q.group(1).strip(), kcs


def mock_probability(history: list[int]) -> float:
    recent = history[-5:]
    return min(0.95, max(0.05, sum(recent) / len(recent)))


_MOCK_SENTENCES = {
    "Read": "the student history lists {n} prior attempts and the next item is question {q}",
    "Plan": "next I will weigh the recent attempts against the knowledge components of question {q}",
    "Implement": "counting the recent answers gives {k} correct out of the last {r} attempts",
    "Analyze": "mastery of the components {kcs} looks {level} given the recent correctness pattern",
    "Monitor": "wait, the pattern is mixed so the earlier estimate needs another look",
    "Explore": "perhaps the student guessed on some items, which would change the estimate for {q}",
    "Verify": "checking the count again confirms {k} correct answers in the recent window",
}
_FILLER = "considering the evidence from the recent attempts carefully".split()


def _mock_trace(prompt_id: str, seed: int, sample_index: int, history: list[int], qid: str,
                kcs: list[str], length: int) -> str:
    recent = history[-5:]
    k = sum(recent)
    level = "strong" if k >= 4 else "weak" if k <= 1 else "partial"
    labels = ["Read" if _unit(seed, prompt_id, sample_index, "first") < 0.85 else "Plan"]
    for pos in (1, 2):
        u = _unit(seed, prompt_id, sample_index, "label", pos)
        labels.append(EPISODE_MARKERS[int(u * len(EPISODE_MARKERS))])
    per_sentence = max(12, math.ceil(length / 3))
    sentences = []
    for lab in labels:
        body = _MOCK_SENTENCES[lab].format(
            n=len(history), q=qid, k=k, r=len(recent), kcs="{" + ", ".join(kcs) + "}", level=level
        )
        words = [f"[{lab}]"] + body.split()
        i = 0
        while len(words) < per_sentence:
            words.append(_FILLER[i % len(_FILLER)])
            i += 1
        sentences.append(" ".join(words) + ".")
    return " ".join(sentences)


def _mock_answer(mode: str | None, word: str, history: list[int], qid: str, kcs: list[str]) -> str:
    if mode in (None, "PredOnly"):
        return word
    recent = history[-5:]
    k = sum(recent)
    kc_text = ", ".join(kcs)
    parts = [f"PREDICTION: {word}"]
    if mode in ("FB", "FBRec"):
        parts.append(
            f"FEEDBACK: You answered {k} of your last {len(recent)} questions correctly; "
            f"review KC {kc_text} before attempting question {qid}."
        )
    if mode in ("Rec", "FBRec"):
        parts.append(f"RECOMMENDATION: Practice another question on KC {kc_text} before question {qid}.")
    return "\n".join(parts)


def mock_complete(
    prompt: RenderedPrompt,
    seed: int,
    sample_index: int,
    budget: int | None = None,
    trace_tokens: tuple[int, int] = (40, 400),
    continuation_fail_rate: float = 0.0,
    parse_fail_rate: float = 0.0,
) -> Completion:
    """Deterministic stand-in for a reasoning model on prediction prompts.

    Predicts ``correct`` with probability equal to the mean of the last five
    history outcomes clamped to [0.05, 0.95]; the draw is a hash of
    ``(seed, instance_id, sample_index)``. With a budget the model "thinks"
    for a hash-chosen number of tokens; when that overruns the budget the
    trace is cut and a forced-answer continuation is simulated.
    """
    history, qid, kcs = parse_prediction_prompt(prompt.text)
    pid = prompt.instance_id or hashlib.sha256(prompt.text.encode()).hexdigest()[:16]
    mode = prompt.mode.value if prompt.mode is not None else None
    p = mock_probability(history)
    word = "correct" if _unit(seed, pid, sample_index) < p else "wrong"
    answer = _mock_answer(mode, word, history, qid, kcs)
    if _unit(seed, pid, sample_index, "garble") < parse_fail_rate:
        answer = "I am not sure about this one."

    if budget is None:
        return Completion("", answer, 0, count_tokens(answer))

    lo, hi = trace_tokens
    natural = lo + int(_unit(seed, pid, sample_index, "length") * (hi - lo + 1))
    trace = _mock_trace(pid, seed, sample_index, history, qid, kcs, natural)
    n_trace = count_tokens(trace)
    if n_trace <= budget:
        return Completion(trace, answer, n_trace, count_tokens(answer))
    trace = cut_tokens(trace, budget)
    if _unit(seed, pid, sample_index, "continue") < continuation_fail_rate:
        answer = ""
    return Completion(trace, answer, count_tokens(trace), count_tokens(answer), truncated=True, continued=True)


_RUBRIC_KEYS = ("relevance", "specificity", "accuracy", "constructiveness", "diagnostic_quality")
_GENERATED = re.compile(r"- Generated (?:Feedback|Recommendation): (.*)")
_SEGMENT = re.compile(r"Reasoning Trace Segment: (.*?)\n\nOutput:", re.S)
_MARKER = re.compile(r"\[(" + "|".join(EPISODE_MARKERS) + r")\]")


def mock_judge_reply(prompt_text: str) -> str:
    """Rubric document whose scores are a hash of the judged text."""
    m = _GENERATED.search(prompt_text)
    text = m.group(1) if m else prompt_text
    doc = {
        key: {"score": 1 + int(_unit("judge", key, text) * 5), "explanation": f"mock assessment of {key}"}
        for key in _RUBRIC_KEYS
    }
    return json.dumps(doc)


def mock_label_reply(prompt_text: str) -> str:
    """First episode marker found in the segment, or an unusable reply."""
    m = _SEGMENT.search(prompt_text)
    seg = m.group(1) if m else ""
    marker = _MARKER.search(seg)
    return marker.group(1) if marker else "unclear"


# --------------------------------------------------------------------------
# gateway


def _set_path(body: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = body
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _deep_merge(base: dict, patch: dict) -> dict:
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_merge(base[k], v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def _sample_seed(seed: int, sample_index: int) -> int:
    return int(hashlib.sha256(f"{seed}:{sample_index}".encode()).hexdigest()[:8], 16)


class Gateway:
    """Completion front-end bound to one :class:`ModelConfig`.

    ``requests_sent`` counts HTTP requests actually issued (cache hits do not
    count), which lets callers observe cache behaviour.
    """

    def __init__(
        self,
        config: ModelConfig,
        cache_dir: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ) -> None:
        self.config = config
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._transport = transport
        self._client: httpx.Client | None = None
        self._lock = threading.Lock()
        self._sleep = sleep
        self.requests_sent = 0

    # -- public --------------------------------------------------------------

    def complete(self, prompt: RenderedPrompt, sample_index: int = 0, temperature: float | None = None,
                 budget: int | None | str = "config") -> Completion:
        cfg = self.config
        temp = cfg.temperature if temperature is None else temperature
        b = cfg.thinking_budget if budget == "config" else budget
        if cfg.provider == "mock":
            return self._mock(prompt, sample_index, b)
        return self._http_complete(prompt, sample_index, temp, b)

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- mock ----------------------------------------------------------------

    def _mock(self, prompt: RenderedPrompt, sample_index: int, budget: int | None) -> Completion:
        cfg = self.config
        if prompt.kind == "prediction":
            return mock_complete(
                prompt, cfg.seed, sample_index, budget, cfg.mock_trace_tokens,
                cfg.mock_continuation_fail_rate, cfg.mock_parse_fail_rate,
            )
        if prompt.kind in ("feedback_judge", "recommendation_judge"):
            reply = mock_judge_reply(prompt.text)
        elif prompt.kind == "trace_label":
            reply = mock_label_reply(prompt.text)
        else:
            raise PromptParseError(f"mock provider cannot answer prompt kind {prompt.kind!r}")
        return Completion("", reply, 0, count_tokens(reply))

    # -- http ----------------------------------------------------------------

    def _http(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                headers = {"Content-Type": "application/json"}
                key = os.environ.get(self.config.api_key_env, "")
                if key:
                    headers["Authorization"] = f"Bearer {key}"
                self._client = httpx.Client(timeout=self.config.timeout, headers=headers, transport=self._transport)
            return self._client

    def build_body(self, messages: list[dict], temperature: float, budget: int | None, sample_index: int) -> dict:
        cfg = self.config
        body: dict[str, Any] = {
            "model": cfg.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": cfg.max_answer_tokens + (budget or 0),
        }
        if budget is None:
            _deep_merge(body, cfg.disable_patch)
        else:
            _set_path(body, cfg.budget_path, budget)
        if cfg.send_seed:
            body["seed"] = _sample_seed(cfg.seed, sample_index)
        return body

    def _post(self, body: dict) -> tuple[dict, float]:
        cfg = self.config
        last: GatewayError | None = None
        for attempt in range(cfg.retry_attempts):
            if attempt:
                self._sleep(cfg.backoff_base * 2 ** (attempt - 1))
            with self._lock:
                self.requests_sent += 1
            start = time.perf_counter()
            try:
                resp = self._http().post(cfg.endpoint, json=body)
            except httpx.TimeoutException as exc:
                last = TransportTimeout(f"timeout after {cfg.timeout}s: {exc}")
                continue
            except httpx.HTTPError as exc:
                last = GatewayError(f"transport failure: {exc}")
                continue
            latency = (time.perf_counter() - start) * 1000
            if resp.status_code >= 400:
                last = HTTPStatusFailure(resp.status_code, resp.text)
                if resp.status_code in (408, 409, 429) or resp.status_code >= 500:
                    continue
                raise last
            try:
                payload = resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"response body is not JSON: {resp.text[:200]}") from exc
            return payload, latency
        assert last is not None
        raise last

    def _cached_post(self, body: dict, key: str) -> tuple[dict, float, bool]:
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit["response"], hit["meta"]["latency_ms"], True
        payload, latency = self._post(body)
        parse_response(payload)  # never cache bodies we cannot read
        if self.cache is not None:
            self.cache.put(key, {"response": payload, "meta": {"latency_ms": latency, "model": self.config.model}})
        return payload, latency, False

    def _http_complete(self, prompt: RenderedPrompt, sample_index: int, temperature: float,
                       budget: int | None) -> Completion:
        cfg = self.config
        messages = [{"role": "user", "content": prompt.text}]
        key = cache_key(cfg.model, prompt.template_version, prompt.text, temperature, budget, sample_index)
        payload, latency, cached = self._cached_post(self.build_body(messages, temperature, budget, sample_index), key)
        trace, answer, usage, finish = parse_response(payload)

        reported = _reasoning_tokens(usage)
        n_trace = count_tokens(trace, reported if trace else None)
        truncated = False
        if budget is not None and n_trace > budget:
            trace = cut_tokens(trace, budget)
            n_trace = count_tokens(trace)
            truncated = True
        if budget is not None and not answer.strip() and (finish == "length" or truncated):
            truncated = True
        if truncated and not answer.strip():
            # reasoning ran out before an answer; force one with thinking off
            cont_messages = messages + [
                {"role": "assistant", "content": f"<think>\n{trace}\n</think>"},
                {"role": "user", "content": "Your reasoning budget is exhausted. Give your final answer now, "
                                            "following the output instructions exactly."},
            ]
            ckey = cache_key(cfg.model, prompt.template_version, prompt.text, temperature, budget, sample_index, True)
            cpayload, clat, ccached = self._cached_post(
                self.build_body(cont_messages, temperature, None, sample_index), ckey
            )
            _, answer, cusage, _ = parse_response(cpayload)
            latency += clat
            cached = cached and ccached
            return Completion(trace, answer, n_trace, count_tokens(answer, _completion_tokens(cusage)),
                              latency, usage, truncated=True, continued=True, cached=cached)
        return Completion(trace, answer, n_trace, count_tokens(answer), latency, usage, truncated, False, cached)


def _reasoning_tokens(usage: dict | None) -> int | None:
    if not usage:
        return None
    details = usage.get("completion_tokens_details") or {}
    val = details.get("reasoning_tokens", usage.get("reasoning_tokens"))
    return int(val) if isinstance(val, (int, float)) and val > 0 else None


def _completion_tokens(usage: dict | None) -> int | None:
    if not usage:
        return None
    val = usage.get("completion_tokens")
    return int(val) if isinstance(val, (int, float)) else None


def parse_response(payload: Any) -> tuple[str, str, dict | None, str | None]:
    """Extract (reasoning, answer, usage, finish_reason) from a chat-completions body."""
    try:
        choice = payload["choices"][0]
        message = choice["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no choices[0].message in response: {str(payload)[:200]}") from exc
    if not isinstance(message, dict):
        raise MalformedResponse("choices[0].message is not an object")
    content = message.get("content") or ""
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    reasoning = message.get("reasoning_content") or message.get("reasoning") or ""
    if not isinstance(reasoning, str):
        reasoning = ""
    think = _THINK_BLOCK.search(content)
    if think:
        reasoning = reasoning or think.group(1).strip()
        content = _THINK_BLOCK.sub("", content).strip()
    usage = payload.get("usage") if isinstance(payload.get("usage"), dict) else None
    return reasoning, content.strip(), usage, choice.get("finish_reason")
