import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from kopa.backend import CompletionBackend, run_backend
from kopa.errors import ConfigError
from kopa.prompts import PromptInstance


def make_instances(n):
    return [
        PromptInstance("zsr", "judge this", None, f"fact {i}", None, (0, 0, i))
        for i in range(n)
    ]


class _Script(BaseHTTPRequestHandler):
    """Replies per the server's scripted behavior function."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length)) if length else {}
        status, payload = self.server.behavior(body, self.server)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if payload is not None:
            self.wfile.write(payload.encode("utf-8"))

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    servers = []

    def start(behavior):
        httpd = ThreadingHTTPServer(("127.0.0.1", 0), _Script)
        httpd.behavior = behavior
        httpd.hits = 0
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        servers.append(httpd)
        return f"http://127.0.0.1:{httpd.server_address[1]}/complete"

    yield start
    for httpd in servers:
        httpd.shutdown()


def test_echo_true_all_predictions_true(server):
    url = server(lambda body, srv: (200, json.dumps({"text": "true"})))
    results = run_backend(CompletionBackend(url, timeout=5), make_instances(6))
    assert [r.answer for r in results] == ["true"] * 6
    assert not any(r.failed for r in results)


def test_mixed_echo_follows_responses(server):
    def behavior(body, srv):
        reply = "false" if "fact 1" in body["prompt"] else "it is true"
        return 200, json.dumps({"text": reply})

    url = server(behavior)
    results = run_backend(CompletionBackend(url, timeout=5), make_instances(3))
    assert [r.answer for r in results] == ["true", "false", "true"]


def test_unreachable_endpoint_marks_all_failed():
    backend = CompletionBackend("http://127.0.0.1:9/nope", timeout=0.2,
                                max_retries=1, backoff_base=0.01)
    results = run_backend(backend, make_instances(3))
    assert all(r.failed for r in results)
    assert all(r.answer == "unknown" for r in results)


def test_malformed_response_yields_unknown_not_failure(server):
    url = server(lambda body, srv: (200, "this is not json"))
    results = run_backend(CompletionBackend(url, timeout=5), make_instances(2))
    assert [r.answer for r in results] == ["unknown", "unknown"]
    assert not any(r.failed for r in results)


def test_missing_field_yields_unknown(server):
    url = server(lambda body, srv: (200, json.dumps({"completion": "true"})))
    results = run_backend(CompletionBackend(url, timeout=5), make_instances(1))
    assert results[0].answer == "unknown"


def test_retries_recover_from_transient_500(server):
    def behavior(body, srv):
        srv.hits += 1
        if srv.hits <= 2:
            return 500, json.dumps({"error": "boom"})
        return 200, json.dumps({"text": "false"})

    url = server(behavior)
    backend = CompletionBackend(url, timeout=5, max_retries=3, max_in_flight=1,
                                backoff_base=0.01)
    results = run_backend(backend, make_instances(1))
    assert results[0].answer == "false"
    assert not results[0].failed


def test_429_retry_after_honored(server):
    def behavior(body, srv):
        srv.hits += 1
        if srv.hits == 1:
            return 429, json.dumps({"error": "slow down"})
        return 200, json.dumps({"text": "true"})

    url = server(behavior)
    backend = CompletionBackend(url, timeout=5, max_retries=2, max_in_flight=1,
                                backoff_base=0.01)
    results = run_backend(backend, make_instances(1))
    assert results[0].answer == "true"


def test_custom_field_names(server):
    def behavior(body, srv):
        assert "query" in body
        return 200, json.dumps({"completion": "false"})

    url = server(behavior)
    backend = CompletionBackend(url, timeout=5, prompt_field="query",
                                response_field="completion")
    results = run_backend(backend, make_instances(2))
    assert [r.answer for r in results] == ["false", "false"]


def test_result_order_preserved_with_concurrency(server):
    def behavior(body, srv):
        idx = body["prompt"].rsplit(" ", 1)[1]
        return 200, json.dumps({"text": f"fact {idx} is {'true' if int(idx) % 2 else 'false'}"})

    url = server(behavior)
    backend = CompletionBackend(url, timeout=5, max_in_flight=4)
    results = run_backend(backend, make_instances(10))
    expected = ["true" if i % 2 else "false" for i in range(10)]
    assert [r.answer for r in results] == expected


def test_invalid_backend_config():
    with pytest.raises(ConfigError):
        CompletionBackend("http://x", timeout=0)
    with pytest.raises(ConfigError):
        CompletionBackend("http://x", max_in_flight=0)
