import json

import httpx
import pytest

from groupthink.engine import SamplerConfig, SourceError, run_think_phase
from groupthink.remote import (
    ENV_API_KEY,
    ENV_BASE_URL,
    ENV_MODEL,
    CompletionClient,
    RemoteConfig,
    RemoteError,
    RemoteJudge,
    RemoteSource,
    default_template,
    render_context,
)
from groupthink.scheduler import GroupConfig, Mode

CFG = RemoteConfig(base_url="http://test/v1", model="m", api_key="k", retries=2, backoff=0.5)


class Server:
    """Scripted completion endpoint recording every request body."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.bodies = []
        self.headers = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.bodies.append(json.loads(request.content))
        self.headers.append(request.headers)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        if isinstance(reply, int):
            return httpx.Response(reply, text="busy")
        if callable(reply):
            reply = reply(self.bodies[-1])
        return httpx.Response(200, json={"choices": [{"text": reply}]})


def client_for(server, cfg=CFG, sleeps=None):
    sleeps = [] if sleeps is None else sleeps
    return CompletionClient(cfg, transport=httpx.MockTransport(server), sleep=sleeps.append)


def test_completion_request_shape():
    server = Server(["hello"])
    client = client_for(server)
    assert client.complete("prompt", 3, temperature=0.6, seed=9, stop=["\n"]) == "hello"
    assert server.bodies == [
        {"model": "m", "prompt": "prompt", "max_tokens": 3, "temperature": 0.6, "seed": 9, "stop": ["\n"]}
    ]
    assert server.headers[0]["authorization"] == "Bearer k"


def test_retries_with_exponential_backoff():
    sleeps = []
    server = Server([503, httpx.ConnectError("down"), "ok"])
    client = client_for(server, sleeps=sleeps)
    assert client.complete("p", 1) == "ok"
    assert client.calls == 3
    assert sleeps == [0.5, 1.0]


def test_gives_up_after_retries():
    server = Server([429, 429, 429])
    with pytest.raises(RemoteError, match="after 3 attempts"):
        client_for(server).complete("p", 1)


def test_client_errors_are_not_retried():
    server = Server([400])
    client = client_for(server)
    with pytest.raises(RemoteError, match="HTTP 400"):
        client.complete("p", 1)
    assert client.calls == 1


def test_malformed_body():
    def handler(request):
        return httpx.Response(200, json={"choices": []})

    client = CompletionClient(CFG, transport=httpx.MockTransport(handler))
    with pytest.raises(RemoteError, match="malformed"):
        client.complete("p", 1)


def test_config_from_environment():
    env = {ENV_BASE_URL: "http://x", ENV_MODEL: "mm", ENV_API_KEY: "secret"}
    cfg = RemoteConfig().resolved(env)
    assert (cfg.base_url, cfg.model, cfg.api_key) == ("http://x", "mm", "secret")
    fallback = RemoteConfig(model="m").resolved({"OPENAI_BASE_URL": "http://o", "OPENAI_API_KEY": "o"})
    assert fallback.base_url == "http://o" and fallback.api_key == "o"
    assert RemoteConfig(base_url="http://own", model="m").resolved(env).base_url == "http://own"
    with pytest.raises(ValueError, match=ENV_BASE_URL):
        RemoteConfig().resolved({})
    with pytest.raises(ValueError, match=ENV_MODEL):
        RemoteConfig(base_url="http://x").resolved({})


def test_config_validation():
    with pytest.raises(ValueError):
        RemoteConfig(chunk_tokens=0)
    with pytest.raises(ValueError):
        RemoteConfig.from_dict({"base_url": "x", "colour": 1})
    assert RemoteConfig.from_dict({"model": "m", "chunk_tokens": 4}).chunk_tokens == 4


def test_render_context():
    template = "Q: {QUESTION}\nYou are Thinker{ThinkerID}.\n"
    assert render_context(template, "why", 2, {2: []}) == "Q: why\nYou are Thinker2.\n"
    got = render_context(template, "why", 2, {1: ["a", "b"], 2: ["c"], 3: []})
    assert got == (
        "Q: why\nYou are Thinker2."
        "\n\n[Other thinkers so far]\nThinker1: ab\nThinker3: "
        "\n\n[Thinker2]\nc"
    )


def test_default_template_has_placeholders():
    text = default_template()
    assert "{QUESTION}" in text and "{ThinkerID}" in text


def test_remote_source_drives_lockstep_run():
    def reply(body):
        # echo the thinker id found at the end of the context
        prompt = body["prompt"]
        agent = prompt.split("Thinker")[-1][0] if "[Thinker" in prompt else prompt.split("Thinker")[1][0]
        return f"<{agent}>"

    server = Server([reply] * 6)
    source = RemoteSource(client_for(server), "count", template="{QUESTION} Thinker{ThinkerID}\n")
    t = run_think_phase(GroupConfig(2, 3, Mode.GROUP_THINK_LOCKSTEP), source, [], SamplerConfig())
    assert t.agent_texts() == ["<1><1><1>", "<2><2><2>"]
    assert all(b["max_tokens"] == 1 for b in server.bodies)
    # the last request for thinker 2 sees thinker 1's first two chunks only
    assert "Thinker1: <1><1>\n" in server.bodies[-1]["prompt"]


def test_remote_source_independent_mode_hides_others():
    server = Server(["a", "b", "c", "d"])
    source = RemoteSource(client_for(server), "q", template="{QUESTION}")
    run_think_phase(GroupConfig(2, 2, Mode.INDEPENDENT_SAMPLING), source, [], SamplerConfig())
    assert all("Other thinkers" not in b["prompt"] for b in server.bodies)


def test_empty_completion_stops_thinker():
    server = Server(["x", "y", "", "y2", "y3"])
    source = RemoteSource(client_for(server), "q", template="{QUESTION}")
    t = run_think_phase(GroupConfig(2, 3, Mode.GROUP_THINK_LOCKSTEP), source, [], SamplerConfig())
    assert t.lengths() == {1: 1, 2: 3}


def test_remote_failure_becomes_source_error():
    server = Server([500, 500, 500])
    source = RemoteSource(client_for(server), "q", template="{QUESTION}")
    with pytest.raises(SourceError):
        run_think_phase(GroupConfig(1, 1, Mode.SINGLE_COT), source, [], SamplerConfig())


def test_judge_parses_json_reply():
    payload = json.dumps({"code_with_evaluation_tokens": "code <DONE_STEP_1>"})
    server = Server([f"Sure:\n{payload}\n", "not json at all"])
    judge = RemoteJudge(client_for(server))
    assert judge.mark_steps("q", "ref", "code") == "code <DONE_STEP_1>"
    assert "Reference solution:\nref" in server.bodies[0]["prompt"]
    assert judge.mark_steps("q", "ref", "code") == "not json at all"
