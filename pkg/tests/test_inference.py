from __future__ import annotations

import json
import math

import pytest

from rephrasing.inference import (
    AuthError,
    BackendConfig,
    BackendError,
    CheckpointMismatchError,
    CheckpointWriter,
    Completion,
    CompletionBackend,
    JobKey,
    MockBackend,
    MockRule,
    RephraseJob,
    RephraseResult,
    load_checkpoint,
    resume,
    run_batch,
    schedule,
)
from rephrasing.prompts import RenderedPrompt

CFG = BackendConfig(max_in_flight=4, max_retries=3, retry_backoff_s=0.0)

ECHO_RULES = [MockRule(r"PROMPT (\d+)", r"OK \1</text>")]


def make_job(i: int, length: int = 0) -> RephraseJob:
    prompt = RenderedPrompt(
        doc_id=f"doc{i:03d}",
        index=0,
        template_id="qa_opt_en",
        text=f"PROMPT {i:03d} " + "x" * length,
        stop=("</text>", "</s>"),
        temperature=0.0,
    )
    return RephraseJob(key=JobKey(prompt.doc_id, 0, prompt.template_id), prompt=prompt)


def make_jobs(n: int) -> list[RephraseJob]:
    return [make_job(i) for i in range(n)]


class TestSchedule:
    def test_sorted_by_length_restored_on_output(self):
        jobs = [make_job(0, 900), make_job(1, 100), make_job(2, 500)]
        plan = schedule(jobs)
        assert list(plan.order) == [1, 2, 0]
        results = run_batch(jobs, MockBackend(ECHO_RULES), CFG, plan=plan)
        assert [r.key.doc_id for r in results] == ["doc000", "doc001", "doc002"]

    def test_equal_lengths_stable(self):
        jobs = [make_job(i, 50) for i in range(10)]
        assert list(schedule(jobs).order) == list(range(10))

    def test_single_job_identity(self):
        plan = schedule([make_job(0)])
        assert plan.order == (0,)
        assert plan.buckets == ((0, 1),)

    def test_buckets_cover_all(self):
        jobs = [make_job(i, i) for i in range(150)]
        plan = schedule(jobs, bucket_size=64)
        assert [b for b in plan.buckets] == [(0, 64), (64, 128), (128, 150)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            schedule([])


class TestMockBackend:
    def test_stop_sequence_included_and_marked(self):
        backend = MockBackend(ECHO_RULES)
        completion = backend.complete(
            "PROMPT 007 x", temperature=0.0, stop=("</text>",), max_tokens=100
        )
        assert completion.text == "OK 007</text>"
        assert completion.finish == "stop_sequence"

    def test_no_stop_is_length_cap(self):
        backend = MockBackend(default_response="runs on and on")
        completion = backend.complete("anything", temperature=0.0, stop=("</s>",), max_tokens=10)
        assert completion.finish == "length_cap"

    def test_first_matching_rule_wins(self):
        backend = MockBackend(
            [MockRule("special", "A</s>"), MockRule(".", "B</s>")]
        )
        assert backend.complete("special case", temperature=0, stop=("</s>",), max_tokens=9).text == "A</s>"
        assert backend.complete("other", temperature=0, stop=("</s>",), max_tokens=9).text == "B</s>"

    def test_logprob_rules_and_default_hash(self):
        backend = MockBackend(logprob_rules=[("good", 0.0, -5.0)])
        assert backend.option_logprobs("a good doc", ["yes", "no"]) == [0.0, -5.0]
        first = backend.option_logprobs("some doc", ["yes", "no"])
        second = backend.option_logprobs("some doc", ["yes", "no"])
        assert first == second
        assert all(math.isfinite(v) for v in first)


class TestRunBatch:
    def test_hundred_jobs_all_done(self):
        jobs = make_jobs(100)
        results = run_batch(jobs, MockBackend(ECHO_RULES), CFG)
        assert len(results) == 100
        assert all(not r.failed for r in results)
        assert [r.key for r in results] == [j.key for j in jobs]
        assert results[42].text == "OK 042</text>"

    def test_fail_first_attempt_retried(self):
        jobs = make_jobs(20)
        backend = MockBackend(ECHO_RULES, fail_first=1)
        results = run_batch(jobs, backend, CFG)
        assert all(not r.failed for r in results)
        assert all(r.attempts == 2 for r in results)

    def test_exhausted_retries_mark_failed_run_continues(self):
        jobs = make_jobs(10)
        backend = MockBackend(ECHO_RULES, fail_first=99)
        results = run_batch(jobs, backend, CFG)
        assert all(r.failed for r in results)
        assert all(r.attempts == CFG.max_retries for r in results)

    def test_auth_failure_aborts(self):
        with pytest.raises(AuthError):
            run_batch(make_jobs(5), MockBackend(auth_fail=True), CFG)

    def test_exactly_once_each_key(self):
        jobs = make_jobs(50)
        results = run_batch(jobs, MockBackend(ECHO_RULES, fail_first=2), CFG)
        assert len({r.key for r in results}) == 50

    def test_permanent_backend_error_marks_failed(self):
        class Permanent(CompletionBackend):
            def complete(self, prompt, *, temperature, stop, max_tokens):
                raise BackendError("no such model")

        results = run_batch(make_jobs(3), Permanent(), CFG)
        assert all(r.failed for r in results)
        assert all(r.attempts == 1 for r in results)


class TestCheckpoint:
    def test_append_and_load(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        result = RephraseResult(JobKey("d", 0, "qa"), "text", "stop_sequence", "mock", 1)
        with CheckpointWriter(path, "fp1") as writer:
            writer.append(result)
        loaded = load_checkpoint(path, "fp1")
        assert loaded[result.key].text == "text"

    def test_fingerprint_mismatch_aborts(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        with CheckpointWriter(path, "fp1"):
            pass
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, "fp2")
        with pytest.raises(CheckpointMismatchError):
            CheckpointWriter(path, "fp2")

    def test_truncated_final_line_tolerated(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        result = RephraseResult(JobKey("d", 0, "qa"), "text", "stop_sequence")
        with CheckpointWriter(path, "fp") as writer:
            writer.append(result)
        with path.open("a", encoding="utf-8") as handle:
            handle.write('{"kind": "result", "key": ["e", 1')  # mid-write crash
        loaded = load_checkpoint(path, "fp")
        assert list(loaded) == [result.key]

    def test_missing_checkpoint_is_empty(self, tmp_path):
        assert load_checkpoint(tmp_path / "absent.jsonl", "fp") == {}

    def test_latency_not_serialized(self):
        result = RephraseResult(JobKey("d", 0, "qa"), "t", "stop_sequence", latency_s=1.23)
        assert "latency" not in json.dumps(result.to_obj())


class TestResume:
    def run_with_kill(self, jobs, path, kill_after):
        class Killed(Exception):
            pass

        seen = 0

        def bomb(result):
            nonlocal seen
            seen += 1
            if seen >= kill_after:
                raise Killed()

        backend = MockBackend(ECHO_RULES)
        with CheckpointWriter(path, "fp") as checkpoint:
            with pytest.raises(Killed):
                run_batch(jobs, backend, CFG, checkpoint=checkpoint, on_result=bomb)

    def test_kill_at_50_resume_issues_exactly_50(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        jobs = make_jobs(100)
        self.run_with_kill(jobs, path, kill_after=50)

        fresh_jobs = make_jobs(100)
        remaining, replayed = resume(path, fresh_jobs, "fp")
        assert len(replayed) == 50
        assert len(remaining) == 50
        resumed_backend = MockBackend(ECHO_RULES)
        with CheckpointWriter(path, "fp") as checkpoint:
            results = run_batch(
                fresh_jobs, resumed_backend, CFG, checkpoint=checkpoint, replayed=replayed
            )
        assert resumed_backend.calls == 50
        uninterrupted = run_batch(make_jobs(100), MockBackend(ECHO_RULES), CFG)
        assert [r.to_obj() for r in results] == [r.to_obj() for r in uninterrupted]

    def test_resume_with_empty_checkpoint_runs_all(self, tmp_path):
        jobs = make_jobs(10)
        remaining, replayed = resume(tmp_path / "cp.jsonl", jobs, "fp")
        assert len(remaining) == 10
        assert replayed == {}

    def test_resume_after_completion_issues_zero(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        jobs = make_jobs(10)
        with CheckpointWriter(path, "fp") as checkpoint:
            run_batch(jobs, MockBackend(ECHO_RULES), CFG, checkpoint=checkpoint)
        remaining, replayed = resume(path, make_jobs(10), "fp")
        assert remaining == []
        backend = MockBackend(ECHO_RULES)
        results = run_batch(make_jobs(10), backend, CFG, replayed=replayed)
        assert backend.calls == 0
        assert len(results) == 10

    def test_failed_jobs_rerun_on_resume(self, tmp_path):
        path = tmp_path / "cp.jsonl"
        jobs = make_jobs(5)
        with CheckpointWriter(path, "fp") as checkpoint:
            run_batch(jobs, MockBackend(ECHO_RULES, fail_first=99), CFG, checkpoint=checkpoint)
        remaining, replayed = resume(path, make_jobs(5), "fp")
        assert len(remaining) == 5
        assert replayed == {}


class TestCompletionDataclasses:
    def test_result_round_trip(self):
        result = RephraseResult(JobKey("d", 2, "qa"), "body", "length_cap", "m", 3)
        assert RephraseResult.from_obj(result.to_obj()) == result

    def test_backend_config_validation(self):
        with pytest.raises(ValueError):
            BackendConfig(max_in_flight=0)
        with pytest.raises(ValueError):
            BackendConfig(temperature=-1.0)

    def test_completion_defaults(self):
        assert Completion("x", "stop_sequence").model_id == ""
