"""Exercise the HTTP wire interfaces against a local stub server."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from rephrasing.config import load_config
from rephrasing.inference import (
    AuthError,
    BackendConfig,
    HttpBackend,
    TransientBackendError,
)
from rephrasing.pipeline import stage_preprocess

from conftest import make_docs, write_fixture_config


class _Handler(BaseHTTPRequestHandler):
    server_version = "stub/0"

    def log_message(self, *args):
        pass

    def _payload(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        return json.loads(self.rfile.read(length))

    def _reply(self, code: int, obj: dict) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        state = self.server.state
        payload = self._payload()
        state["requests"].append({"path": self.path, "payload": payload,
                                  "auth": self.headers.get("Authorization")})

        if state.get("require_token") and self.headers.get("Authorization") != (
            f"Bearer {state['require_token']}"
        ):
            self._reply(401, {"error": "unauthorized"})
            return
        if state.get("fail_next", 0) > 0:
            state["fail_next"] -= 1
            self._reply(503, {"error": "busy"})
            return

        if self.path == "/tokenize":
            # Exact tokenizer wire interface: one token per 4 chars.
            self._reply(200, {"tokens": len(payload["text"]) // 4})
            return

        prompt = payload["prompt"]
        if payload.get("echo"):
            # Echoed prompt logprobs: -0.5 per whitespace token.
            tokens = prompt.split()
            self._reply(
                200,
                {
                    "usage": {"prompt_tokens": len(tokens)},
                    "choices": [
                        {"text": "", "logprobs": {"token_logprobs": [None] + [-0.5] * (len(tokens) - 1)}}
                    ],
                },
            )
            return

        stop = payload.get("stop", [])
        completion = f"echo of {len(prompt)} chars" + (stop[0] if stop else "")
        self._reply(
            200,
            {
                "model": "stub-model",
                "choices": [{"text": completion, "finish_reason": "stop"}],
            },
        )


@pytest.fixture
def server():
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    httpd.state = {"requests": []}
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    try:
        yield httpd
    finally:
        httpd.shutdown()
        thread.join(timeout=5)


def endpoint(server, path="/v1/completions") -> str:
    host, port = server.server_address
    return f"http://{host}:{port}{path}"


def backend_for(server, **kw) -> HttpBackend:
    cfg = BackendConfig(
        endpoint=endpoint(server),
        max_retries=3,
        retry_backoff_s=0.0,
        timeout_s=10.0,
        **kw,
    )
    return HttpBackend(cfg)


class TestCompletionWire:
    def test_request_carries_contract_fields(self, server):
        backend = backend_for(server, model="stub-model")
        completion = backend.complete(
            "tell me things", temperature=0.7, stop=("</text>", "</s>"), max_tokens=64
        )
        payload = server.state["requests"][-1]["payload"]
        assert payload["prompt"] == "tell me things"
        assert payload["temperature"] == 0.7
        assert payload["stop"] == ["</text>", "</s>"]
        assert payload["max_tokens"] == 64
        assert payload["include_stop_str_in_output"] is True
        assert payload["model"] == "stub-model"
        assert completion.finish == "stop_sequence"
        assert completion.model_id == "stub-model"
        assert completion.text.endswith("</text>")

    def test_auth_token_from_environment(self, server, monkeypatch):
        server.state["require_token"] = "sekrit"
        monkeypatch.setenv("STUB_TOKEN", "sekrit")
        backend = backend_for(server, auth_token_env="STUB_TOKEN")
        backend.complete("hi", temperature=0.0, stop=(), max_tokens=8)
        assert server.state["requests"][-1]["auth"] == "Bearer sekrit"

    def test_missing_token_is_auth_error(self, server):
        server.state["require_token"] = "sekrit"
        backend = backend_for(server)
        with pytest.raises(AuthError):
            backend.complete("hi", temperature=0.0, stop=(), max_tokens=8)

    def test_5xx_is_transient(self, server):
        server.state["fail_next"] = 1
        backend = backend_for(server)
        with pytest.raises(TransientBackendError):
            backend.complete("hi", temperature=0.0, stop=(), max_tokens=8)

    def test_connection_refused_is_transient(self):
        cfg = BackendConfig(endpoint="http://127.0.0.1:9/nothing", timeout_s=0.2)
        with pytest.raises(TransientBackendError):
            HttpBackend(cfg).complete("hi", temperature=0.0, stop=(), max_tokens=8)

    def test_option_logprobs_sums_option_span(self, server):
        backend = backend_for(server)
        # Base prompt has 3 whitespace tokens; each option adds one
        # token scored -0.5, so both options come back at -0.5.
        scores = backend.option_logprobs("judge this doc\nChoice:", [" yes", " no"])
        assert scores == [-0.5, -0.5]


class TestExactTokenizerWire:
    def test_calibration_uses_endpoint(self, server, tmp_path):
        docs = make_docs(20, seed=12)
        config_path = write_fixture_config(
            tmp_path,
            docs,
            extra={
                "estimator": {
                    "default_ratio": 0.5,
                    "sample_size": 10,
                    "exact_endpoint": endpoint(server, "/tokenize"),
                }
            },
        )
        cfg = load_config(config_path)
        report = stage_preprocess(cfg)
        assert report["estimator"]["calibrated"] is True
        # The stub counts floor(chars / 4) tokens, so calibration lands
        # just under 0.25 regardless of the configured 0.5 default.
        assert report["estimator"]["tokens_per_char"] == pytest.approx(0.25, abs=5e-3)
        assert report["estimator"]["tokens_per_char"] != 0.5
        paths = [r["path"] for r in server.state["requests"]]
        assert all(p == "/tokenize" for p in paths)
