import json

import pytest

from trialmatch.errors import AuthError, ContextOverflow, ReplayMiss, TransportError
from trialmatch.llm_gateway import (
    ChatClient,
    ChatMessage,
    CompletionConfig,
    PromptBundle,
    ReplayTransport,
    TranscriptRecorder,
    assemble_messages,
    estimate_tokens,
    request_hash,
)


class StubTransport:
    """Scripted transport: raises the queued exceptions, then returns text."""

    def __init__(self, response="ok", failures=None):
        self.response = response
        self.failures = list(failures or [])
        self.calls = 0

    def send(self, payload):
        self.calls += 1
        if self.failures:
            raise self.failures.pop(0)
        return self.response


def _bundle(shots=0) -> PromptBundle:
    demos = [(f"demo input {i}", f"demo output {i}") for i in range(shots)]
    return PromptBundle(
        system_message="You are a structuring agent.",
        instructions="Emit a JSON array of clauses.",
        demonstrations=demos,
        user_input="<brief_title>T</brief_title>",
    )


# --- prompt assembly ----------------------------------------------------------

def test_zero_shot_shape():
    messages = assemble_messages(_bundle())
    assert [m.role for m in messages] == ["system", "user"]
    assert messages[1].content.endswith("Eligibility Criteria Output:")
    assert messages[1].content == "Input:\n<brief_title>T</brief_title>\n\nEligibility Criteria Output:"


def test_demonstrations_extend_system_prefix():
    zero = assemble_messages(_bundle(0))
    three = assemble_messages(_bundle(3))
    assert three[0].content.startswith(zero[0].content)
    assert three[0].content.count("Eligibility Criteria Output:") == 3
    assert zero[1].content == three[1].content


def test_assembly_is_pure():
    bundle = _bundle(3)
    assert assemble_messages(bundle) == assemble_messages(bundle)


def test_bundle_rejects_too_many_demos():
    with pytest.raises(ValueError):
        PromptBundle("s", "i", demonstrations=[("a", "b")] * 4)


def test_message_validation():
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")
    with pytest.raises(ValueError):
        ChatMessage("user", "")


# --- token estimation -----------------------------------------------------------

def test_estimate_tokens():
    assert estimate_tokens("") == 0
    assert estimate_tokens("x" * 300) == 100
    assert estimate_tokens("ab") == 1


# --- completion behavior ---------------------------------------------------------

def _messages():
    return [ChatMessage("system", "sys"), ChatMessage("user", "hello")]


def test_context_overflow_preflight_never_calls_transport():
    transport = StubTransport()
    config = CompletionConfig(max_output_tokens=100, context_token_limit=100)
    client = ChatClient(transport, config)
    with pytest.raises(ContextOverflow):
        client.complete(_messages())
    assert transport.calls == 0


def test_retry_then_success():
    transport = StubTransport(
        response="fine",
        failures=[TransportError("boom"), TransportError("boom again")],
    )
    client = ChatClient(transport, CompletionConfig(), sleep=lambda s: None)
    assert client.complete(_messages()) == "fine"
    assert transport.calls == 3


def test_retries_exhaust():
    transport = StubTransport(failures=[TransportError("x")] * 3)
    client = ChatClient(transport, CompletionConfig(), sleep=lambda s: None)
    with pytest.raises(TransportError):
        client.complete(_messages())
    assert transport.calls == 3


def test_auth_error_not_retried():
    transport = StubTransport(failures=[AuthError("denied")])
    client = ChatClient(transport, CompletionConfig(), sleep=lambda s: None)
    with pytest.raises(AuthError):
        client.complete(_messages())
    assert transport.calls == 1


# --- record / replay --------------------------------------------------------------

def test_record_then_replay_round_trip(tmp_path):
    path = tmp_path / "transcript.jsonl"
    live = ChatClient(StubTransport(response="recorded answer"), CompletionConfig(),
                      recorder=TranscriptRecorder(path))
    assert live.complete(_messages()) == "recorded answer"

    entry = json.loads(path.read_text().splitlines()[0])
    assert set(entry) == {"request_hash", "messages", "response", "timestamp"}
    assert entry["request_hash"] == request_hash(_messages())

    replay = ChatClient(ReplayTransport(path), CompletionConfig())
    assert replay.complete(_messages()) == "recorded answer"


def test_replay_miss_is_transport_error(tmp_path):
    path = tmp_path / "transcript.jsonl"
    path.write_text("")
    client = ChatClient(ReplayTransport(path), CompletionConfig(), sleep=lambda s: None)
    with pytest.raises(ReplayMiss):
        client.complete(_messages())


def test_config_validation():
    with pytest.raises(ValueError):
        CompletionConfig(context_token_limit=0)
    with pytest.raises(ValueError):
        CompletionConfig(temperature=-1)
