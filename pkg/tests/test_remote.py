import numpy as np
import pytest

from qsteer.env import Instruction
from qsteer.policy import Context
from qsteer.remote import (
    API_KEY_ENV,
    INVALID_ACTION,
    EndpointConfig,
    MalformedResponse,
    RemoteError,
    RemotePolicy,
    parse_action,
    remote_propose,
    render_prompt,
)

from chat_stub import ChatStub, closed_port_url

CTX = Context(
    Instruction("chainqa-3", 3, "who founded the company?"),
    (("search[acme]", "acme. [founder] [city]"),),
    ("lookup[founder]", "lookup[city]"),
    "acme. [founder] [city]",
)


class Sleeps(list):
    def __call__(self, seconds):
        self.append(seconds)


def test_parse_action():
    assert parse_action("Thought: hmm\nAction: lookup[founder]") == "lookup[founder]"
    assert parse_action("Action: search[a]\nThought: wait\naction:  Lookup[Founder] ") == "lookup[founder]"
    assert parse_action("I think the founder is Bob.") == INVALID_ACTION
    assert parse_action("") == INVALID_ACTION


def test_prompt_lists_history_and_candidates():
    system, user = render_prompt(CTX)
    assert system["role"] == "system" and "Action:" in system["content"]
    assert "who founded the company?" in user["content"]
    assert "Action: search[acme]" in user["content"]
    assert "lookup[founder], lookup[city]" in user["content"]


def test_n_choices_parsed_and_deduplicated(monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    contents = ["Action: lookup[founder]", "Thought: x\nAction: lookup[city]", "Action: lookup[founder]"]
    with ChatStub([contents]) as stub:
        out = remote_propose(EndpointConfig(stub.url, "m"), CTX, 3, 0.7)
    assert out == ["lookup[founder]", "lookup[city]"]
    req = stub.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["body"]["n"] == 3 and req["body"]["temperature"] == 0.7 and req["body"]["model"] == "m"
    assert req["body"]["messages"] == render_prompt(CTX)
    assert "Authorization" not in req["headers"]


def test_prose_reply_gives_sentinel():
    with ChatStub([["The answer is obvious."]]) as stub:
        assert remote_propose(EndpointConfig(stub.url, "m"), CTX, 1, 1.0) == [INVALID_ACTION]


def test_bearer_token_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sekret")
    with ChatStub() as stub:
        remote_propose(EndpointConfig(stub.url, "m"), CTX, 1, 1.0)
        remote_propose(EndpointConfig(stub.url, "m", api_key="explicit"), CTX, 1, 1.0)
    assert stub.requests[0]["headers"]["Authorization"] == "Bearer sekret"
    assert stub.requests[1]["headers"]["Authorization"] == "Bearer explicit"


def test_server_errors_are_retried_with_backoff():
    sleeps = Sleeps()
    with ChatStub([503, 500, ["Action: lookup[city]"]]) as stub:
        out = remote_propose(EndpointConfig(stub.url, "m", backoff=0.25), CTX, 1, 1.0, sleep=sleeps)
    assert out == ["lookup[city]"]
    assert len(stub.requests) == 3 and sleeps == [0.25, 0.5]


def test_retries_exhausted_on_server_errors():
    sleeps = Sleeps()
    with ChatStub([502, 502, 502, ["Action: lookup[city]"]]) as stub:
        with pytest.raises(RemoteError):
            remote_propose(EndpointConfig(stub.url, "m"), CTX, 1, 1.0, sleep=sleeps)
    assert len(stub.requests) == 3 and sleeps == [0.5, 1.0]


def test_client_errors_not_retried():
    sleeps = Sleeps()
    with ChatStub([401]) as stub:
        with pytest.raises(RemoteError) as info:
            remote_propose(EndpointConfig(stub.url, "m"), CTX, 1, 1.0, sleep=sleeps)
    assert not isinstance(info.value, MalformedResponse)
    assert len(stub.requests) == 1 and sleeps == []


def test_connection_refused():
    sleeps = Sleeps()
    with pytest.raises(RemoteError, match="3 attempts"):
        remote_propose(EndpointConfig(closed_port_url(), "m", timeout=2), CTX, 1, 1.0, sleep=sleeps)
    assert sleeps == [0.5, 1.0]


@pytest.mark.parametrize("body", ["not json", '{"choices": []}', '{"choices": [{"text": "x"}]}', "[1, 2]"])
def test_malformed_bodies(body):
    with ChatStub([body]) as stub:
        with pytest.raises(MalformedResponse):
            remote_propose(EndpointConfig(stub.url, "m"), CTX, 1, 1.0, sleep=Sleeps())


def test_remote_policy_greedy_uses_zero_temperature():
    with ChatStub() as stub:
        pol = RemotePolicy(EndpointConfig(stub.url, "m"))
        assert pol.greedy(CTX, np.random.default_rng(0)) == "search[x]"
        assert pol.propose(CTX, 2, 1.0, np.random.default_rng(0)) == ["search[x]"]
    assert stub.requests[0]["body"]["temperature"] == 0.0 and stub.requests[0]["body"]["n"] == 1
    with pytest.raises(ValueError):
        remote_propose(EndpointConfig("http://x", "m"), CTX, 0, 1.0)
