import json
import math

import httpx
import pytest

from conftest import doc
from toolloop.backends import (ELISION, GenerationRequest, NoFixtureMatch, PolicyBackend, RemoteChatBackend,
                                SamplingParams, ScriptedBackend, count_tokens, cut_at_stop, generate_text,
                                head_tail, prompt_hash, render_prompt, simulate_tool, summarize, tokenize_pieces)
from toolloop.errors import BackendUnavailable, ContextOverflow
from toolloop.protocol import ToolCallRequest


def req(segments, stops=(), max_tokens=1000, logprobs=False):
    return GenerationRequest(list(segments), SamplingParams(max_tokens=max_tokens, stop_sequences=list(stops)), logprobs)


@pytest.mark.parametrize("n", [0, 1, 2, 3, 7, 10, 100, 999])
def test_count_tokens_matches_ceil(n):
    assert count_tokens(" ".join(["w"] * n)) == math.ceil(1.3 * n - 1e-9)


def test_sampling_defaults():
    p = SamplingParams()
    assert (p.temperature, p.top_p, p.top_k, p.repetition_penalty, p.max_tokens) == (0.7, 0.8, 20, 1.05, 81920)


def test_pieces_concatenate():
    text = "a <tool_call>{\"x\": 1}</tool_call>\n  ünï"
    assert "".join(tokenize_pieces(text)) == text


def test_cut_at_stop_earliest():
    assert cut_at_stop("ab</x>cd</y>", ["</y>", "</x>"]) == ("ab</x>", True)
    assert cut_at_stop("abc", ["</x>"]) == ("abc", False)


def test_head_tail_budget():
    text = " ".join(f"w{i}" for i in range(1000))
    out = head_tail(text, 100)
    assert count_tokens(out) <= 100 and ELISION in out
    assert out.startswith("w0 ") and out.endswith("w999")
    assert head_tail("short text", 100) == "short text"


def test_scripted_longest_suffix_wins():
    b = ScriptedBackend([{"match": "world", "response": "A"}, {"match": "hello world", "response": "B"}])
    assert generate_text(b, req([("user", "say hello world")])) == "B"
    assert generate_text(b, req([("user", "brave new world")])) == "A"
    with pytest.raises(NoFixtureMatch):
        generate_text(b, req([("user", "nothing")]))


def test_scripted_hash_match():
    segs = [("system", "s"), ("user", "q")]
    b = ScriptedBackend([{"match": prompt_hash(segs), "response": "hashed"}])
    assert generate_text(b, req(segs)) == "hashed"


def test_scripted_stop_and_length():
    b = ScriptedBackend([{"match": "q", "response": "one two <tool_call>{}</tool_call> three"}])
    assert generate_text(b, req([("user", "q")], ["</tool_call>"])).endswith("</tool_call>")
    chunks = list(b.generate(req([("user", "q")], max_tokens=2)))
    assert "".join(c.text for c in chunks) == "one " and chunks[-1].finish == "length"


def test_scripted_logprobs_follow_pieces():
    b = ScriptedBackend([{"match": "q", "response": "a b", "logprobs": [-0.1, -0.2, -0.3]}])
    chunks = list(b.generate(req([("user", "q")], logprobs=True)))
    assert [c.logprobs for c in chunks] == [[-0.1], [-0.2], [-0.3]]


def test_context_overflow_is_raised_on_first_pull():
    b = PolicyBackend(lambda s: "x", context_window=3)
    with pytest.raises(ContextOverflow):
        next(iter(b.generate(req([("user", "one two three four five")]))))


def test_render_prompt_skips_empty():
    assert render_prompt([("system", "s"), ("user", "q"), ("assistant", "")]) == "<|system|>\ns\n<|user|>\nq"


def sse(*events):
    return "".join(f"data: {json.dumps(e)}\n\n" for e in events) + "data: [DONE]\n\n"


def delta(text, lp=None, finish=None):
    ch = {"delta": {"content": text}, "finish_reason": finish}
    if lp is not None:
        ch["logprobs"] = {"content": [{"token": text, "logprob": lp}]}
    return {"choices": [ch]}


def remote(handler, **kw):
    return RemoteChatBackend("http://llm/v1", "m", client=httpx.Client(transport=httpx.MockTransport(handler)), **kw)


def test_remote_streams_and_stops_client_side(monkeypatch):
    monkeypatch.setenv("TOOLLOOP_API_KEY", "sekret")
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, text=sse(delta("go <tool_", -0.5), delta("call>{}</tool_call> extra", -0.25),
                                            delta(" more")))

    b = remote(handler)
    chunks = list(b.generate(req([("system", "s"), ("user", "q"), ("assistant", "partial")], ["</tool_call>"],
                                 logprobs=True)))
    assert "".join(c.text for c in chunks) == "go <tool_call>{}</tool_call>"
    assert chunks[0].logprobs == [-0.5] and chunks[-1].finish == "stop"
    body = seen["body"]
    assert body["continue_final_message"] is True and body["messages"][-1] == {"role": "assistant", "content": "partial"}
    assert body["temperature"] == 0.7 and body["top_k"] == 20 and body["stream"] is True
    assert seen["auth"] == "Bearer sekret"


def test_remote_http_error_is_backend_unavailable():
    b = remote(lambda r: httpx.Response(503, text="overloaded"))
    with pytest.raises(BackendUnavailable, match="503"):
        list(b.generate(req([("user", "q")])))


def test_remote_without_endpoint(monkeypatch):
    monkeypatch.delenv("TOOLLOOP_API_BASE", raising=False)
    with pytest.raises(BackendUnavailable):
        RemoteChatBackend().generate(req([("user", "q")]))


def test_summarize_uses_aux_then_falls_back():
    long = " ".join(["word"] * 3000)
    aux = PolicyBackend(lambda s: "a short summary")
    assert summarize(aux, long, 2048) == "a short summary"
    broken = ScriptedBackend([])
    out = summarize(broken, long, 2048)
    assert ELISION in out and count_tokens(out) <= 2048


def test_simulate_tool_table_then_template():
    d = doc("lookup", "look things up", {"q": {"type": "string"}}, source="simulated")
    table = ScriptedBackend([{"tool": "lookup", "arguments": {"q": "a"}, "response": "A!"}])
    assert simulate_tool(table, d, ToolCallRequest("lookup", {"q": "a"})) == "A!"
    prompts = []
    aux = PolicyBackend(lambda s: prompts.append(s) or '{"ok": true}')
    assert simulate_tool(aux, d, ToolCallRequest("lookup", {"q": "b"})) == '{"ok": true}'
    assert '"lookup"' in prompts[0][-1][1] and '{"q":"b"}' in prompts[0][-1][1]
