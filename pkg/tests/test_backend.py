import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest
from hypothesis import given, strategies as st

from eventadl.backend import (
    AuthFailure,
    BackendConfig,
    BadResponse,
    ChatClient,
    DraftStatus,
    FaultPlan,
    ScriptedBackend,
    TransportFailure,
    UnknownPromptKey,
    balanced_objects,
    complete,
    parse_response,
    prompt_hash,
    write_script,
)
from eventadl.config import load_preset
from eventadl.ingest import ActivityCatalog

ARUBA = ActivityCatalog.from_mapping(load_preset("aruba")["catalog"])


class TestParseResponse:
    def test_fenced_json(self):
        d = parse_response('```json\n{"activity": "sleeping"}\n```', ARUBA)
        assert (d.status, d.label) == (DraftStatus.VALID, "sleeping")

    def test_reasoning_then_json(self):
        raw = 'The kitchen sensor fired, then the couch.\nSo the answer is {"activity":"Relaxing"}'
        d = parse_response(raw, ARUBA)
        assert (d.status, d.label) == (DraftStatus.VALID, "relaxing")
        assert d.reasoning.startswith("The kitchen sensor fired")

    def test_unknown_label(self):
        d = parse_response('{"activity":"dancing"}', ARUBA)
        assert (d.status, d.label) == (DraftStatus.INVALID_LABEL, "dancing")

    def test_last_object_wins(self):
        raw = ('Step 1: {"activity": "eating"} looks possible but the stove was off.\n'
               'Final: {"activity": "washing dishes"}')
        assert parse_response(raw, ARUBA).label == "washing dishes"

    def test_nested_object(self):
        d = parse_response('{"result": {"activity": "  Bathroom   ACTIVITY "}, "note": "x"}', ARUBA)
        assert d.label == "bathroom activity"

    def test_braces_inside_strings(self):
        d = parse_response('{"why": "a } stray brace", "activity": "working"}', ARUBA)
        assert d.label == "working"

    @pytest.mark.parametrize("raw", [
        "{'activity': 'eating'}",
        '{"activity": "eating",}',
        "{“activity”: “eating”}",
    ])
    def test_light_repairs(self, raw):
        assert parse_response(raw, ARUBA).label == "eating"

    @pytest.mark.parametrize("raw", ["", "no json here", '{"answer": "eating"}', '{"activity": ', "{{{"])
    def test_parse_failures(self, raw):
        assert parse_response(raw, ARUBA).status is DraftStatus.PARSE_FAILURE

    def test_non_string_label(self):
        assert parse_response('{"activity": 3}', ARUBA).status is DraftStatus.INVALID_LABEL

    def test_near_miss_is_not_coerced(self):
        assert parse_response('{"activity": "sleep"}', ARUBA).status is DraftStatus.INVALID_LABEL

    @given(st.text())
    def test_total_and_idempotent(self, raw):
        d = parse_response(raw, ARUBA)
        assert isinstance(d.status, DraftStatus)
        assert parse_response(d.raw, ARUBA) == d
        assert d.valid == (d.label in ARUBA)

    @given(
        st.sampled_from(ARUBA.labels),
        st.lists(st.sampled_from([str.upper, str.title, str.lower]), min_size=1, max_size=1),
        st.text(alphabet=" \t", max_size=3),
        st.text(alphabet=st.characters(blacklist_characters="{}`"), max_size=60),
    )
    def test_valid_labels_are_catalog_members(self, label, casing, pad, noise):
        raw = noise + "\n" + json.dumps({"activity": pad + casing[0](label).replace(" ", " " + pad) + pad})
        d = parse_response(raw, ARUBA)
        assert d.status is DraftStatus.VALID
        assert d.label == label

    def test_balanced_objects(self):
        assert balanced_objects('x {"a": {"b": 1}} y {}') == [(8, 16), (2, 17), (20, 22)]


class TestScripted:
    def test_same_answer_three_times(self):
        h = prompt_hash("user")
        backend = ScriptedBackend({h: ['{"activity":"eating"}']})
        drafts = [parse_response(backend.complete("sys", "user").text, ARUBA) for _ in range(3)]
        assert [d.label for d in drafts] == ["eating"] * 3
        assert backend.calls == 3

    def test_cycles_and_explicit_repetition(self):
        h = prompt_hash("u")
        backend = ScriptedBackend({h: ["a", "b"]})
        assert [backend.complete("s", "u", repetition=r).text for r in (0, 1, 2, 3)] == ["a", "b", "a", "b"]

    def test_fault_plan(self):
        h = prompt_hash("u")
        backend = ScriptedBackend({h: ['{"activity":"eating"}']}, faults=FaultPlan({1: "malformed"}))
        drafts = [parse_response(backend.complete("s", "u").text, ARUBA).status for _ in range(3)]
        assert drafts == [DraftStatus.VALID, DraftStatus.PARSE_FAILURE, DraftStatus.VALID]

    def test_per_key_faults(self):
        h = prompt_hash("u")
        plan = FaultPlan({0: "malformed"}, {h: {0: "unknown_label", 2: "timeout"}})
        backend = ScriptedBackend({h: ['{"activity":"eating"}']}, faults=plan)
        assert parse_response(backend.complete("s", "u", 0).text, ARUBA).status is DraftStatus.INVALID_LABEL
        with pytest.raises(TransportFailure):
            backend.complete("s", "u", 2)
        assert parse_response(backend.complete("s", "other", 0).text, ARUBA).status is DraftStatus.PARSE_FAILURE

    def test_unknown_key(self):
        with pytest.raises(UnknownPromptKey):
            ScriptedBackend({}).complete("s", "u")

    def test_default(self):
        d = parse_response(ScriptedBackend({}, default="other").complete("s", "u").text, ARUBA)
        assert (d.status, d.label) == (DraftStatus.VALID, "other")

    def test_bad_fault_kind(self):
        with pytest.raises(ValueError):
            FaultPlan({0: "explode"})

    def test_file_round_trip(self, tmp_path):
        write_script({"ab": ["x", "y"]}, tmp_path / "s.json")
        assert ScriptedBackend.from_file(tmp_path / "s.json").script == {"ab": ["x", "y"]}

    def test_concurrent_cursor(self):
        from concurrent.futures import ThreadPoolExecutor

        h = prompt_hash("u")
        backend = ScriptedBackend({h: [str(i) for i in range(100)]})
        with ThreadPoolExecutor(8) as pool:
            got = list(pool.map(lambda _: backend.complete("s", "u").text, range(100)))
        assert sorted(got, key=int) == [str(i) for i in range(100)]


# --- HTTP client --------------------------------------------------------------


class FakeServer:
    """Minimal chat-completions server answering from a queue of (status, body)."""

    def __init__(self):
        self.replies = []
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                outer.requests.append((self.path, dict(self.headers), json.loads(self.rfile.read(length))))
                status, body = outer.replies.pop(0) if outer.replies else (200, reply("ok"))
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


def reply(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


@pytest.fixture
def server():
    s = FakeServer()
    yield s
    s.close()


def config(url, **kw):
    kw.setdefault("backoff", 0.0)
    return BackendConfig(endpoint=url, model="gemma3:4b", **kw)


class TestChatClient:
    def test_wire_format(self, server, monkeypatch):
        monkeypatch.setenv("TEST_KEY", "sekrit")
        server.replies.append((200, reply('{"activity": "eating"}')))
        with ChatClient(config(server.url, temperature=1.0, api_key_env="TEST_KEY", max_tokens=64)) as client:
            out = client.complete("SYS", "USER")
        assert out.text == '{"activity": "eating"}'
        assert out.latency > 0
        path, headers, body = server.requests[0]
        assert path == "/v1/chat/completions"
        assert headers["Authorization"] == "Bearer sekrit"
        assert body == {
            "model": "gemma3:4b",
            "temperature": 1.0,
            "messages": [{"role": "system", "content": "SYS"}, {"role": "user", "content": "USER"}],
            "max_tokens": 64,
        }

    def test_module_level_complete(self, server):
        server.replies.append((200, reply("hello")))
        assert complete(config(server.url), "s", "u") == "hello"

    def test_retries_transient_errors(self, server):
        server.replies += [(500, {"error": "boom"}), (429, {"error": "slow down"}), (200, reply("done"))]
        sleeps = []
        client = ChatClient(config(server.url, max_retries=3, backoff=0.5), sleep=sleeps.append)
        assert client.complete("s", "u").text == "done"
        assert len(server.requests) == 3
        assert sleeps == [0.5, 1.0]

    def test_gives_up(self, server):
        server.replies += [(503, {})] * 3
        client = ChatClient(config(server.url, max_retries=2), sleep=lambda s: None)
        with pytest.raises(TransportFailure):
            client.complete("s", "u")
        assert len(server.requests) == 3

    def test_auth_failure_not_retried(self, server):
        server.replies.append((401, {"error": "no key"}))
        with pytest.raises(AuthFailure):
            ChatClient(config(server.url)).complete("s", "u")
        assert len(server.requests) == 1

    @pytest.mark.parametrize("body", [{"choices": []}, {"nothing": 1}, b"not json",
                                      {"choices": [{"message": {"content": None}}]}])
    def test_bad_response(self, server, body):
        server.replies.append((200, body))
        with pytest.raises(BadResponse):
            ChatClient(config(server.url)).complete("s", "u")

    def test_unreachable(self):
        with socket.socket() as sock:
            sock.bind(("127.0.0.1", 0))
            port = sock.getsockname()[1]
        client = ChatClient(config(f"http://127.0.0.1:{port}/v1", max_retries=0, timeout=2))
        with pytest.raises(TransportFailure):
            client.complete("s", "u")

    def test_timeout_is_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            if len(calls) == 1:
                raise httpx.ReadTimeout("slow", request=request)
            return httpx.Response(200, json=reply("late"))

        client = ChatClient(config("http://model.local/v1", max_retries=1), transport=httpx.MockTransport(handler),
                            sleep=lambda s: None)
        assert client.complete("s", "u").text == "late"
        assert len(calls) == 2

    @pytest.mark.parametrize("kw", [{"temperature": -0.1}, {"temperature": 2.5}, {"max_retries": -1}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            config("http://localhost:1/v1", **kw)

    def test_bad_url(self):
        with pytest.raises(ValueError):
            BackendConfig(endpoint="localhost:8000", model="m")
