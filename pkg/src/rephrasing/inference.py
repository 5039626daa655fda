"""Drive an external completion endpoint at high throughput.

Jobs are sorted and grouped by prompt length for better device
utilization, run through a bounded pool of in-flight requests with
retries, and written to an append-only checkpoint so preempted runs can
resume and still produce byte-identical output.  Results always come
back in the original job order regardless of scheduling.

The wire protocol is a plain-text completion interface (prompt in,
completion out, with stop sequences and temperature) as served by
vLLM-style servers; the prompts embed their own chat framing, so no
chat-message interface is needed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import requests

from .prompts import DEFAULT_TEMPERATURE, RenderedPrompt

STATE_PENDING = "pending"
STATE_IN_FLIGHT = "in_flight"
STATE_DONE = "done"
STATE_FAILED = "failed"

FINISH_STOP = "stop_sequence"
FINISH_LENGTH = "length_cap"
FINISH_ERROR = "error"


class BackendError(Exception):
    """Permanent backend failure."""


class TransientBackendError(BackendError):
    """Retryable failure (timeouts, 429/5xx, connection resets)."""


class AuthError(BackendError):
    """Authentication failure; aborts the whole run."""


class CheckpointMismatchError(Exception):
    """Checkpoint was written under a different config fingerprint."""


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = ""
    # Name of the environment variable holding the auth token; tokens
    # never appear inline in config files.
    auth_token_env: str = ""
    model: str = ""
    max_in_flight: int = 4
    max_output_tokens: int = 1024
    temperature: float = DEFAULT_TEMPERATURE
    # Total tries per job, first attempt included.
    max_retries: int = 3
    timeout_s: float = 120.0
    retry_backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


@dataclass(frozen=True)
class JobKey:
    doc_id: str
    index: int
    template_id: str

    def to_obj(self) -> list:
        return [self.doc_id, self.index, self.template_id]

    @staticmethod
    def from_obj(obj: Sequence) -> "JobKey":
        return JobKey(str(obj[0]), int(obj[1]), str(obj[2]))


@dataclass
class RephraseJob:
    key: JobKey
    prompt: RenderedPrompt
    attempts: int = 0
    state: str = STATE_PENDING


@dataclass(frozen=True)
class Completion:
    """One backend response."""

    text: str
    finish: str
    model_id: str = ""


@dataclass(frozen=True)
class RephraseResult:
    key: JobKey
    text: str
    finish: str
    model_id: str = ""
    attempts: int = 1
    # Wall-clock only; excluded from serialization so resumed runs stay
    # byte-identical to uninterrupted ones.
    latency_s: float = 0.0

    @property
    def failed(self) -> bool:
        return self.finish == FINISH_ERROR

    def to_obj(self) -> dict:
        return {
            "key": self.key.to_obj(),
            "text": self.text,
            "finish": self.finish,
            "model_id": self.model_id,
            "attempts": self.attempts,
        }

    @staticmethod
    def from_obj(obj: Mapping) -> "RephraseResult":
        return RephraseResult(
            key=JobKey.from_obj(obj["key"]),
            text=str(obj["text"]),
            finish=str(obj["finish"]),
            model_id=str(obj.get("model_id", "")),
            attempts=int(obj.get("attempts", 1)),
        )


class CompletionBackend:
    """Minimal completion interface every backend implements."""

    def complete(
        self,
        prompt: str,
        *,
        temperature: float,
        stop: Sequence[str],
        max_tokens: int,
    ) -> Completion:
        raise NotImplementedError

    def option_logprobs(self, prompt: str, options: Sequence[str]) -> list[float]:
        """Log-probability of each option continuing the prompt."""
        raise BackendError("backend does not expose log-probabilities")


@dataclass(frozen=True)
class MockRule:
    pattern: str
    response: str


class MockBackend(CompletionBackend):
    """Script-driven backend for tests and dry runs.

    ``rules`` map prompt regexes to response templates; the first match
    wins and the template may reference capture groups (``\\1`` style).
    Responses containing a stop sequence are cut after its first
    occurrence with the stop string included, mirroring a vLLM server
    configured with ``include_stop_str_in_output``.  ``fail_first`` makes
    the first N attempts of every request raise a transient error.
    """

    def __init__(
        self,
        rules: Iterable[MockRule] = (),
        *,
        default_response: str = "",
        fail_first: int = 0,
        auth_fail: bool = False,
        model_id: str = "mock",
        logprob_rules: Iterable[tuple[str, float, float]] = (),
        latency_s: float = 0.0,
    ):
        self._rules = [(re.compile(r.pattern, re.DOTALL), r.response) for r in rules]
        self._default_response = default_response
        self._fail_first = fail_first
        self._auth_fail = auth_fail
        self._model_id = model_id
        self._logprob_rules = [
            (re.compile(p, re.DOTALL), lp_yes, lp_no) for p, lp_yes, lp_no in logprob_rules
        ]
        self._latency_s = latency_s
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @staticmethod
    def from_config(obj: Mapping) -> "MockBackend":
        return MockBackend(
            rules=[MockRule(r["pattern"], r["response"]) for r in obj.get("rules", [])],
            default_response=obj.get("default_response", ""),
            fail_first=int(obj.get("fail_first", 0)),
            auth_fail=bool(obj.get("auth_fail", False)),
            model_id=obj.get("model_id", "mock"),
            logprob_rules=[
                (r["pattern"], float(r["yes"]), float(r["no"]))
                for r in obj.get("logprob_rules", [])
            ],
        )

    def _respond(self, prompt: str) -> str:
        for pattern, response in self._rules:
            match = pattern.search(prompt)
            if match:
                return match.expand(response)
        return self._default_response

    def complete(self, prompt, *, temperature, stop, max_tokens):
        if self._auth_fail:
            raise AuthError("mock auth failure")
        with self._lock:
            self.calls += 1
            if self._fail_first:
                digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
                n = self._attempts.get(digest, 0) + 1
                self._attempts[digest] = n
                if n <= self._fail_first:
                    raise TransientBackendError(f"scripted failure {n}/{self._fail_first}")
        if self._latency_s:
            time.sleep(self._latency_s)
        response = self._respond(prompt)
        best_pos: int | None = None
        best_stop = ""
        for s in stop:
            pos = response.find(s)
            if pos >= 0 and (best_pos is None or pos < best_pos):
                best_pos, best_stop = pos, s
        if best_pos is not None:
            return Completion(response[: best_pos + len(best_stop)], FINISH_STOP, self._model_id)
        return Completion(response, FINISH_LENGTH, self._model_id)

    def option_logprobs(self, prompt, options):
        for pattern, lp_yes, lp_no in self._logprob_rules:
            if pattern.search(prompt):
                return [lp_yes, lp_no][: len(options)]
        # Deterministic pseudo-scores: the normalized pair works out to a
        # uniform value derived from the prompt hash.
        u = int(hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:8], 16) / 2**32
        u = min(max(u, 1e-9), 1 - 1e-9)
        return [math.log(u), math.log(1 - u)][: len(options)]


class HttpBackend(CompletionBackend):
    """vLLM/OpenAI-compatible completions endpoint over HTTP.

    Requests ask the server to include the matched stop string in the
    returned text so tagged extraction can see the closing tag.
    """

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self._session = requests.Session()
        token = os.environ.get(cfg.auth_token_env, "") if cfg.auth_token_env else ""
        self._headers = {"Authorization": f"Bearer {token}"} if token else {}

    def _post(self, payload: dict) -> dict:
        try:
            response = self._session.post(
                self.cfg.endpoint,
                json=payload,
                headers=self._headers,
                timeout=self.cfg.timeout_s,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientBackendError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthError(f"endpoint returned {response.status_code}")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"endpoint returned {response.status_code}")
        if response.status_code != 200:
            raise BackendError(f"endpoint returned {response.status_code}: {response.text[:200]}")
        return response.json()

    def complete(self, prompt, *, temperature, stop, max_tokens):
        payload = {
            "prompt": prompt,
            "temperature": temperature,
            "stop": list(stop),
            "max_tokens": max_tokens,
            "include_stop_str_in_output": True,
        }
        if self.cfg.model:
            payload["model"] = self.cfg.model
        obj = self._post(payload)
        try:
            choice = obj["choices"][0]
            text = choice.get("text", "")
            reason = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        finish = FINISH_STOP if reason == "stop" else FINISH_LENGTH
        return Completion(text, finish, obj.get("model", self.cfg.model))

    def _prompt_tokens(self, prompt: str) -> tuple[int, list]:
        payload = {
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": True,
            "logprobs": 0,
        }
        if self.cfg.model:
            payload["model"] = self.cfg.model
        obj = self._post(payload)
        try:
            n = int(obj["usage"]["prompt_tokens"])
            logprobs = obj["choices"][0]["logprobs"]["token_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"endpoint does not echo prompt logprobs: {exc}") from exc
        return n, logprobs

    def option_logprobs(self, prompt, options):
        base_tokens, _ = self._prompt_tokens(prompt)
        scores = []
        for option in options:
            n, logprobs = self._prompt_tokens(prompt + option)
            span = logprobs[base_tokens:n]
            scores.append(sum(lp for lp in span if lp is not None))
        return scores


@dataclass(frozen=True)
class ExecutionPlan:
    """Jobs reordered by ascending prompt length, grouped into buckets.

    ``order[k]`` is the original index of the k-th job to execute; the
    permutation is inverted on output so results return in input order.
    """

    order: tuple[int, ...]
    buckets: tuple[tuple[int, int], ...]


def schedule(jobs: Sequence[RephraseJob], bucket_size: int = 64) -> ExecutionPlan:
    if not jobs:
        raise ValueError("cannot schedule an empty job collection")
    order = tuple(sorted(range(len(jobs)), key=lambda i: len(jobs[i].prompt.text)))
    buckets = tuple(
        (start, min(start + bucket_size, len(order)))
        for start in range(0, len(order), bucket_size)
    )
    return ExecutionPlan(order, buckets)


_CHECKPOINT_HEADER = "header"
_CHECKPOINT_RESULT = "result"


class CheckpointWriter:
    """Append-only completion ledger, one JSON line per finished job.

    The first line pins the config fingerprint; appending to a ledger
    written under a different fingerprint aborts.  Appends are
    serialized and flushed so a preemption loses at most one record.
    """

    def __init__(self, path: Path | str, fingerprint: str):
        self.path = Path(path)
        self.fingerprint = fingerprint
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            _verify_checkpoint_header(self.path, fingerprint)
        self._handle = self.path.open("a", encoding="utf-8")
        if fresh:
            header = {"kind": _CHECKPOINT_HEADER, "fingerprint": fingerprint}
            self._handle.write(json.dumps(header) + "\n")
            self._handle.flush()

    def append(self, result: RephraseResult) -> None:
        record = {"kind": _CHECKPOINT_RESULT, **result.to_obj()}
        line = json.dumps(record, ensure_ascii=False) + "\n"
        with self._lock:
            self._handle.write(line)
            self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "CheckpointWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _verify_checkpoint_header(path: Path, fingerprint: str) -> None:
    with path.open("r", encoding="utf-8") as handle:
        first = handle.readline().strip()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CheckpointMismatchError(f"checkpoint {path} has no readable header") from exc
    if header.get("kind") != _CHECKPOINT_HEADER or "fingerprint" not in header:
        raise CheckpointMismatchError(f"checkpoint {path} has no readable header")
    if header["fingerprint"] != fingerprint:
        raise CheckpointMismatchError(
            f"checkpoint {path} was written under fingerprint "
            f"{header['fingerprint']}, current config is {fingerprint}"
        )


def load_checkpoint(path: Path | str, fingerprint: str) -> dict[JobKey, RephraseResult]:
    """Replayable results from a checkpoint; empty when the file is absent.

    A truncated final line (crash mid-write) is ignored; later records
    win over earlier ones for the same key.
    """
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return {}
    _verify_checkpoint_header(path, fingerprint)
    results: dict[JobKey, RephraseResult] = {}
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle):
            if lineno == 0:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if obj.get("kind") != _CHECKPOINT_RESULT:
                continue
            result = RephraseResult.from_obj(obj)
            results[result.key] = result
    return results


def resume(
    checkpoint_path: Path | str,
    jobs: Sequence[RephraseJob],
    fingerprint: str,
) -> tuple[list[RephraseJob], dict[JobKey, RephraseResult]]:
    """Split jobs into still-to-run and already-done-per-checkpoint.

    Failed records are not replayed; those jobs run again.
    """
    recorded = load_checkpoint(checkpoint_path, fingerprint)
    replayed = {key: res for key, res in recorded.items() if not res.failed}
    remaining = [job for job in jobs if job.key not in replayed]
    return remaining, replayed


def _run_one(job: RephraseJob, backend: CompletionBackend, cfg: BackendConfig) -> RephraseResult:
    start = time.monotonic()
    last_error: Exception | None = None
    for attempt in range(1, cfg.max_retries + 1):
        job.attempts = attempt
        try:
            completion = backend.complete(
                job.prompt.text,
                temperature=job.prompt.temperature,
                stop=job.prompt.stop,
                max_tokens=cfg.max_output_tokens,
            )
        except AuthError:
            raise
        except TransientBackendError as exc:
            last_error = exc
            if attempt < cfg.max_retries:
                time.sleep(cfg.retry_backoff_s * 2 ** (attempt - 1))
            continue
        except BackendError as exc:
            last_error = exc
            break
        job.state = STATE_DONE
        return RephraseResult(
            key=job.key,
            text=completion.text,
            finish=completion.finish,
            model_id=completion.model_id,
            attempts=attempt,
            latency_s=time.monotonic() - start,
        )
    job.state = STATE_FAILED
    return RephraseResult(
        key=job.key,
        text=f"{type(last_error).__name__}: {last_error}" if last_error else "",
        finish=FINISH_ERROR,
        attempts=job.attempts,
        latency_s=time.monotonic() - start,
    )


def run_batch(
    jobs: Sequence[RephraseJob],
    backend: CompletionBackend,
    cfg: BackendConfig,
    *,
    plan: ExecutionPlan | None = None,
    checkpoint: CheckpointWriter | None = None,
    replayed: Mapping[JobKey, RephraseResult] | None = None,
    on_result: Callable[[RephraseResult], None] | None = None,
) -> list[RephraseResult]:
    """Execute jobs with bounded concurrency; results in original order.

    At most ``cfg.max_in_flight`` requests are outstanding at any
    instant.  Each finished job is appended to the checkpoint before the
    next result is collected.  Every job key appears exactly once in the
    output, done or failed.
    """
    if not jobs:
        return []
    results: dict[JobKey, RephraseResult] = dict(replayed or {})
    todo = [jobs[i] for i in (plan or schedule(jobs)).order if jobs[i].key not in results]

    if todo:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            pending = {pool.submit(_run_one, job, backend, cfg) for job in todo}
            try:
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for future in done:
                        result = future.result()
                        results[result.key] = result
                        if checkpoint is not None:
                            checkpoint.append(result)
                        if on_result is not None:
                            on_result(result)
            except BaseException:
                for future in pending:
                    future.cancel()
                raise

    return [results[job.key] for job in jobs]


def map_bounded(fn, items: Sequence, max_workers: int) -> list:
    """Apply fn to items with a bounded worker pool; results in order."""
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        return list(pool.map(fn, items))
