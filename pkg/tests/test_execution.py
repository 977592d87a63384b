import json
import threading
import time

import httpx
import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import doc
from toolloop.backends import ScriptedBackend
from toolloop.execution import (ToolBackends, ToolResult, coerce_arguments, dispatch, validate_arguments)
from toolloop.protocol import ToolCallRequest
from toolloop.registry import ToolRegistry

TYPED = doc("typed", "", {
    "s": {"type": "string"},
    "i": {"type": "integer"},
    "n": {"type": "number"},
    "b": {"type": "boolean"},
    "l": {"type": "array"},
    "o": {"type": "object"},
    "e": {"type": "string", "enum": ["x", "y"]},
}, required=["s", "i"])


def test_dispatch_ok(echo_registry):
    r = dispatch(echo_registry, ToolCallRequest("add", {"a": 2, "b": 3}))
    assert (r.status, r.content) == ("ok", "5")


def test_numeric_strings_coerced(echo_registry):
    assert dispatch(echo_registry, ToolCallRequest("add", {"a": "2", "b": " 40"})).content == "42"
    assert coerce_arguments(TYPED, {"i": "1.5", "n": "1.5", "s": "7"}) == {"i": "1.5", "n": 1.5, "s": "7"}


@pytest.mark.parametrize("args,fragment", [
    ({"a": 1}, "missing required parameter 'b'"),
    ({"a": 1, "b": 2, "c": 3}, "unknown parameter 'c'"),
    ({"a": True, "b": 2}, "should be integer"),
    ({"a": 1.5, "b": 2}, "should be integer"),
])
def test_validation_errors(echo_registry, args, fragment):
    r = dispatch(echo_registry, ToolCallRequest("add", args))
    assert r.status == "validation_error" and fragment in r.content
    assert r.observation_text().startswith("validation_error: ")


def test_enum_checked():
    assert validate_arguments(TYPED, ToolCallRequest("typed", {"s": "a", "i": 1, "e": "z"}))


def test_unknown_tool_suggests_search(echo_registry):
    r = dispatch(echo_registry, ToolCallRequest("nope", {}))
    assert r.status == "unknown_tool" and "tool_search" in r.content


def test_tool_exception_encapsulated():
    reg = ToolRegistry().register_tool(doc("boom", params={}), lambda: 1 / 0)
    r = dispatch(reg, ToolCallRequest("boom", {}))
    assert r.status == "tool_error" and "ZeroDivisionError" in r.content


def test_timeout():
    reg = ToolRegistry().register_tool(doc("slow", params={}), lambda: time.sleep(2))
    t0 = time.monotonic()
    r = dispatch(reg, ToolCallRequest("slow", {}), timeout_ms=50)
    assert r.status == "timeout" and time.monotonic() - t0 < 1.0


def test_non_string_results_are_json(echo_registry):
    reg = ToolRegistry().register_tool(doc("d", params={}), lambda: {"k": [1, "é"]})
    assert json.loads(dispatch(reg, ToolCallRequest("d", {})).content) == {"k": [1, "é"]}


def test_serialized_tools_do_not_overlap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def work():
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return "done"

    reg = ToolRegistry().register_tool(doc("shared", params={}), work, serialize=True)
    backends = ToolBackends()
    threads = [threading.Thread(target=dispatch, args=(reg, ToolCallRequest("shared", {}), backends))
               for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] == 1


def http_registry(cfg):
    return ToolRegistry().register_tool(
        doc("weather", "", {"city": {"type": "string"}, "units": {"type": "string"}}, required=["city"],
            source="http", endpoint_config=cfg))


def test_http_get(monkeypatch):
    monkeypatch.setenv("WEATHER_TOKEN", "t0k")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, text='{"temp": 21}')

    reg = http_registry({"url_template": "http://api/w/{city}", "method": "GET", "auth_env": "WEATHER_TOKEN"})
    tb = ToolBackends(http_client=httpx.Client(transport=httpx.MockTransport(handler)))
    r = dispatch(reg, ToolCallRequest("weather", {"city": "São Paulo", "units": "c"}), tb)
    assert r.content == '{"temp": 21}'
    assert seen["url"] == "http://api/w/S%C3%A3o%20Paulo?units=c" and seen["auth"] == "Bearer t0k"


def test_http_post_and_error():
    bodies = []

    def handler(request):
        bodies.append(json.loads(request.content))
        return httpx.Response(500, text="down")

    reg = http_registry({"url_template": "http://api/w", "method": "POST"})
    tb = ToolBackends(http_client=httpx.Client(transport=httpx.MockTransport(handler)))
    r = dispatch(reg, ToolCallRequest("weather", {"city": "Oslo"}), tb)
    assert r.status == "tool_error" and "HTTP 500" in r.content
    assert bodies == [{"city": "Oslo"}]


def test_force_simulated_routes_local_tools_to_simulator(echo_registry):
    aux = ScriptedBackend([{"tool": "echo", "arguments": {"text": "hi"}, "response": "simulated hi"}])
    r = dispatch(echo_registry, ToolCallRequest("echo", {"text": "hi"}), ToolBackends(aux=aux, force_simulated=True))
    assert r.content == "simulated hi"


def test_tool_result_text():
    assert ToolResult("ok", "x").observation_text() == "x"
    assert ToolResult("timeout", "slow").observation_text() == "timeout: slow"


values = st.one_of(st.none(), st.booleans(), st.integers(-5, 5), st.floats(-3, 3, allow_nan=False),
                   st.text(max_size=3), st.lists(st.integers(), max_size=2),
                   st.dictionaries(st.text(max_size=2), st.integers(), max_size=2))
keys = st.sampled_from(["s", "i", "n", "b", "l", "o", "e", "zz"])


@settings(max_examples=1000, deadline=None)
@given(st.dictionaries(keys, values, max_size=5))
def test_validator_agrees_with_jsonschema(args):
    schema = dict(TYPED.parameters, additionalProperties=False)
    ours = not validate_arguments(TYPED, ToolCallRequest("typed", args))
    theirs = jsonschema.Draft202012Validator(schema).is_valid(args)
    assert ours == theirs
