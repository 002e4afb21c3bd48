import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from machina.errors import MachinaError, SchemaError
from machina.providers import (
    CompletionRequest,
    HttpError,
    HttpProvider,
    ScriptExhausted,
    ScriptMismatch,
    ScriptStep,
    ScriptedProvider,
    load_script,
    snapshot_stats,
)


def req(prompt="hello", **kw):
    return CompletionRequest(prompt=prompt, **kw)


class TestRequest:
    def test_defaults(self):
        r = req()
        assert r.temperature == 0.01
        assert r.max_output_bytes == 16384

    @pytest.mark.parametrize("temperature", [-0.1, 2.5])
    def test_temperature_range(self, temperature):
        with pytest.raises(MachinaError):
            req(temperature=temperature)


class TestScripted:
    def test_reply_and_count(self):
        p = ScriptedProvider.from_replies(["counting"])
        assert p.complete(req("anything")) == "counting"
        assert p.snapshot_stats().calls == 1

    def test_strict_match(self):
        p = ScriptedProvider([ScriptStep(reply="ok", match="classify")], strict=True)
        with pytest.raises(ScriptMismatch):
            p.complete(req("a filter prompt"))
        assert p.snapshot_stats().calls == 1  # failed call still counted

    def test_match_ignored_when_not_strict(self):
        p = ScriptedProvider([ScriptStep(reply="ok", match="classify")], strict=False)
        assert p.complete(req("a filter prompt")) == "ok"

    def test_exhausted_second_call(self):
        p = ScriptedProvider.from_replies(["once"])
        p.complete(req())
        with pytest.raises(ScriptExhausted):
            p.complete(req())
        assert p.snapshot_stats().calls == 2

    def test_deterministic_replay(self):
        steps = ["a", "b", "c"]
        first = ScriptedProvider.from_replies(steps)
        second = ScriptedProvider.from_replies(steps)
        prompts = ["p1", "p2", "p3"]
        assert [first.complete(req(p)) for p in prompts] == [
            second.complete(req(p)) for p in prompts
        ]

    def test_stats_monotone(self):
        p = ScriptedProvider.from_replies(["a", "b", "c"])
        seen = [snapshot_stats(p).calls]
        for _ in range(3):
            p.complete(req())
            seen.append(snapshot_stats(p).calls)
        assert seen == [0, 1, 2, 3]

    def test_snapshot_is_a_copy(self):
        p = ScriptedProvider.from_replies(["a"])
        before = p.snapshot_stats()
        p.complete(req())
        assert before.calls == 0

    def test_reply_clipped_to_max_bytes(self):
        p = ScriptedProvider.from_replies(["x" * 100])
        assert p.complete(req(max_output_bytes=10)) == "x" * 10

    def test_prompt_and_reply_bytes(self):
        p = ScriptedProvider.from_replies(["ab"])
        p.complete(req("abcd", system="s"))
        stats = p.snapshot_stats()
        assert stats.prompt_bytes == 5
        assert stats.reply_bytes == 2


class TestScriptFile:
    def test_load(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(
            json.dumps({"strict": True, "steps": [{"reply": "hi", "match": "q"}]})
        )
        p = load_script(path)
        assert p.strict and p.steps == [ScriptStep(reply="hi", match="q")]

    @pytest.mark.parametrize(
        "doc",
        [
            {"steps": "nope"},
            {"steps": [{"match": "q"}]},
            {"steps": [], "extra": 1},
            {"steps": [{"reply": "x", "bogus": 1}]},
        ],
    )
    def test_bad_script(self, tmp_path, doc):
        path = tmp_path / "script.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError):
            load_script(path)


class _Handler(BaseHTTPRequestHandler):
    plan: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append(
            {"path": self.path, "auth": self.headers.get("Authorization"), "body": body}
        )
        status, payload = _Handler.plan.pop(0)
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.plan = []
    _Handler.seen = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join()


def ok_body(content="pong"):
    return {"choices": [{"message": {"content": content}}]}


class TestHttp:
    def test_success_roundtrip(self, stub_server):
        _Handler.plan = [(200, ok_body("the reply"))]
        provider = HttpProvider(stub_server, model="m1", api_key="secret")
        reply = provider.complete(req("ping", system="sys"))
        assert reply == "the reply"
        seen = _Handler.seen[0]
        assert seen["path"] == "/chat/completions"
        assert seen["auth"] == "Bearer secret"
        assert seen["body"]["model"] == "m1"
        assert seen["body"]["temperature"] == 0.01
        assert seen["body"]["messages"] == [
            {"role": "system", "content": "sys"},
            {"role": "user", "content": "ping"},
        ]
        assert provider.snapshot_stats().calls == 1

    def test_api_key_from_environment(self, stub_server, monkeypatch):
        monkeypatch.setenv("SHERPA_API_KEY", "from-env")
        _Handler.plan = [(200, ok_body())]
        HttpProvider(stub_server, model="m").complete(req())
        assert _Handler.seen[0]["auth"] == "Bearer from-env"

    def test_retry_on_429_then_success(self, stub_server):
        _Handler.plan = [(429, {}), (200, ok_body("after retry"))]
        sleeps = []
        provider = HttpProvider(stub_server, model="m", api_key="k", sleep=sleeps.append)
        assert provider.complete(req()) == "after retry"
        assert provider.snapshot_stats().calls == 2
        assert sleeps == [0.5]

    def test_5xx_exhausts_retries(self, stub_server):
        _Handler.plan = [(503, {}), (503, {}), (503, {})]
        sleeps = []
        provider = HttpProvider(stub_server, model="m", api_key="k", sleep=sleeps.append)
        with pytest.raises(HttpError) as err:
            provider.complete(req())
        assert err.value.status == 503
        assert provider.snapshot_stats().calls == 3
        assert sleeps == [0.5, 2.0]

    def test_4xx_fails_immediately(self, stub_server):
        _Handler.plan = [(404, {"error": "nope"})]
        provider = HttpProvider(stub_server, model="m", api_key="k", sleep=lambda s: None)
        with pytest.raises(HttpError) as err:
            provider.complete(req())
        assert err.value.status == 404
        assert provider.snapshot_stats().calls == 1

    def test_malformed_body(self, stub_server):
        _Handler.plan = [(200, {"nonsense": True})]
        provider = HttpProvider(stub_server, model="m", api_key="k")
        with pytest.raises(HttpError):
            provider.complete(req())
        assert provider.snapshot_stats().calls == 1


class TestRequestEdges:
    def test_max_output_bytes_positive(self):
        with pytest.raises(MachinaError):
            req(max_output_bytes=0)

    def test_strict_flag_must_be_boolean(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"steps": [], "strict": "yes"}))
        with pytest.raises(SchemaError):
            load_script(path)
