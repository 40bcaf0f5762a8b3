import json
import hashlib

import pytest
import requests

from companion.data import FormatError
from companion.prompts import load_prompt
from companion.gateway import (
    ChatRequest,
    MockScript,
    MockGateway,
    HTTPGateway,
    TransportError,
    MissingScriptError,
    StructuredOutputError,
    fingerprint,
    extract_fenced_json,
    make_gateway,
)


class FakeResponse:
    def __init__(self, status_code: int, body=None, text: str = ""):
        self.status_code = status_code
        self.body = body
        self.text = text

    def json(self):
        if self.body is None:
            raise ValueError("No JSON")
        return self.body


class FakeSession:
    """
    Replays a list of responses (or exceptions) and records each post
    """

    def __init__(self, outcomes: list):
        self.outcomes = list(outcomes)
        self.posts = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.posts.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def completion(text: str) -> FakeResponse:
    return FakeResponse(
        200,
        {"choices": [{"message": {"content": text}}], "usage": {"total_tokens": 7}},
    )


class TestRequests:
    def test_fingerprint(self):
        expected = hashlib.sha256("sys\x00user".encode("utf-8")).hexdigest()
        assert fingerprint("sys", "user") == expected
        assert ChatRequest("sys", "user").fingerprint == expected
        # the separator keeps the two prompts apart
        assert fingerprint("ab", "c") != fingerprint("a", "bc")

    def test_decoding_parameters(self):
        with pytest.raises(ValueError):
            ChatRequest("s", "u", temperature=2.5)
        with pytest.raises(ValueError):
            ChatRequest("s", "u", top_p=0)
        with pytest.raises(ValueError):
            ChatRequest("s", "u", max_tokens=0)

    def test_fenced_json(self):
        text = 'Sure.\n```json\n{"labels": ["ENUM"]}\n```\nmore ```{"x": 1}```'
        assert extract_fenced_json(text) == {"labels": ["ENUM"]}
        assert extract_fenced_json('```\n{"a": 1}\n```') == {"a": 1}
        with pytest.raises(StructuredOutputError):
            extract_fenced_json('{"a": 1}')
        with pytest.raises(StructuredOutputError):
            extract_fenced_json("```json\n{oops}\n```")
        with pytest.raises(StructuredOutputError):
            extract_fenced_json("```json\n[1, 2]\n```")

    def test_prompts(self):
        for name in ("generate", "route", "semantics", "normalize", "constraint"):
            assert load_prompt(name).strip()
        with pytest.raises(FileNotFoundError):
            load_prompt("route", version=99)


class TestMock:
    def test_scripted(self):
        gateway = MockGateway.scripted({("sys", "user"): "hello"})
        assert gateway.ask("sys", "user") == "hello"
        with pytest.raises(MissingScriptError):
            gateway.ask("sys", "other")

    def test_script_file(self, tmp_path):
        script = MockScript(tmp_path / "a.mockscript.json")
        script.data = {fingerprint("sys", "user"): "```json\n{\"ok\": true}\n```"}
        script.write()
        gateway = MockGateway.from_file(script.fname)
        assert gateway.ask_json("sys", "user") == {"ok": True}
        assert dict(MockScript(script.fname)) == script.data

    def test_bad_script(self, tmp_path):
        path = tmp_path / "bad.mockscript.json"
        path.write_text(json.dumps({"abc": 3}))
        with pytest.raises(FormatError):
            MockScript.load(path)
        path.write_text("[")
        with pytest.raises(FormatError):
            MockScript.load(path)
        with pytest.raises(FileNotFoundError):
            MockScript.load(tmp_path / "nope.mockscript.json")

    def test_in_flight(self):
        with pytest.raises(ValueError):
            MockGateway(max_in_flight=0)


class TestHTTP:
    def _get_fake_gateway(self, outcomes: list, **kwargs):
        session = FakeSession(outcomes)
        delays = []
        gateway = HTTPGateway(
            "http://llm.test/v1/",
            model="m1",
            api_key="secret",
            session=session,
            sleep=delays.append,
            **kwargs,
        )
        return gateway, session, delays

    def test_payload(self):
        gateway, session, delays = self._get_fake_gateway([completion("SELECT 1")])
        response = gateway.chat(ChatRequest("sys", "user", temperature=0))
        assert response.text == "SELECT 1"
        assert response.usage == {"total_tokens": 7}
        (post,) = session.posts
        assert post["url"] == "http://llm.test/v1/chat/completions"
        assert post["headers"]["Authorization"] == "Bearer secret"
        assert post["json"]["model"] == "m1"
        assert post["json"]["temperature"] == 0
        assert post["json"]["messages"] == [
            {"role": "system", "content": "sys"},
            {"role": "user", "content": "user"},
        ]
        assert delays == []

    def test_retries(self):
        outcomes = [
            requests.Timeout("slow"),
            FakeResponse(503),
            requests.ConnectionError("down"),
            completion("done"),
        ]
        gateway, session, delays = self._get_fake_gateway(outcomes)
        assert gateway.ask("sys", "user") == "done"
        assert len(session.posts) == 4
        assert delays == [1, 2, 4]

    def test_backoff_frees_slot(self):
        free = []

        def sleep(delay):
            acquired = gateway._slots.acquire(blocking=False)
            free.append(acquired)
            if acquired:
                gateway._slots.release()

        gateway = HTTPGateway(
            "http://llm.test/v1",
            session=FakeSession([FakeResponse(503), completion("ok")]),
            max_in_flight=1,
            sleep=sleep,
        )
        assert gateway.ask("sys", "user") == "ok"
        assert free == [True]
        # and the slot is returned once the request completes
        assert gateway._slots.acquire(blocking=False)

    def test_gives_up(self):
        outcomes = [FakeResponse(429)] * 3
        gateway, session, delays = self._get_fake_gateway(
            outcomes, max_retries=2, backoff=0.5
        )
        with pytest.raises(TransportError):
            gateway.ask("sys", "user")
        assert len(session.posts) == 3
        assert delays == [0.5, 1]

    def test_permanent_failure(self):
        gateway, session, delays = self._get_fake_gateway(
            [FakeResponse(401, text="denied")]
        )
        with pytest.raises(TransportError):
            gateway.ask("sys", "user")
        assert len(session.posts) == 1

    def test_malformed_body(self):
        gateway, _, _ = self._get_fake_gateway(
            [FakeResponse(200, {"choices": []}), FakeResponse(200)]
        )
        with pytest.raises(TransportError):
            gateway.ask("sys", "user")
        with pytest.raises(TransportError):
            gateway.ask("sys", "user")


class TestMakeGateway:
    def test_offline(self, monkeypatch):
        monkeypatch.delenv("CA_LLM_BASE_URL", raising=False)
        assert make_gateway() is None

    def test_mock(self, tmp_path):
        path = tmp_path / "x.mockscript.json"
        path.write_text("{}")
        assert isinstance(make_gateway(mock_script=path), MockGateway)

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("CA_LLM_BASE_URL", "http://llm.test")
        monkeypatch.setenv("CA_LLM_MODEL", "m2")
        gateway = make_gateway(max_in_flight=2)
        assert isinstance(gateway, HTTPGateway)
        assert gateway.model == "m2"
        assert gateway.max_in_flight == 2
