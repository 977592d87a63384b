import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolloop.protocol import (FINAL_ANSWER, FOLD_TOKEN, MEMORY_FOLD, THINK, TOOL_CALL, TOOL_CALL_RESULT,
                                TOOL_SEARCH, MalformedCall, Observation, Scanner, ToolCallRequest,
                                UnclosedTag, parse_tool_call, render_call, render_observation, scan)


def chunked(text, cuts):
    s = Scanner()
    events = []
    prev = 0
    for c in sorted(cuts) + [len(text)]:
        events += s.feed(text[prev:c])
        prev = c
    tail, errs = s.finalize()
    return events + tail, errs


def test_basic_sequence():
    text = 'hmm <tool_search>weather api</tool_search> ok <tool_call>{"name": "w", "arguments": {}}</tool_call>'
    events, errs = scan(text)
    assert errs == []
    assert [e.kind for e in events] == [THINK, TOOL_SEARCH, THINK, TOOL_CALL]
    assert [e.ordinal for e in events] == [1, 2, 3, 4]
    s = events[1]
    assert text[s.span[0]:s.span[1]] == "<tool_search>weather api</tool_search>"
    assert s.payload == "weather api"


def test_fold_token_has_empty_payload():
    events, _ = scan(f"need room {FOLD_TOKEN}")
    assert events[-1].kind == MEMORY_FOLD and events[-1].payload == ""
    assert events[-1].span == (10, 10 + len(FOLD_TOKEN))


def test_spans_are_character_offsets():
    # non-ascii before the tag: spans count characters, not bytes
    text = "é€ü <final_answer>42</final_answer>"
    events, _ = scan(text)
    fa = events[-1]
    assert fa.kind == FINAL_ANSWER
    assert text[fa.span[0]:fa.span[1]].startswith("<final_answer>")


def test_unclosed_tag_reported():
    events, errs = scan("x <tool_call>{\"name\": ")
    assert [e.kind for e in events] == [THINK]
    assert errs == [UnclosedTag(TOOL_CALL, (2, 22))]


def test_unknown_and_partial_tags_are_text():
    events, errs = scan("a <b> c <tool_sea")
    assert errs == []
    assert [(e.kind, e.payload) for e in events] == [(THINK, "a <b> c <tool_sea")]


def test_nested_open_is_literal_payload():
    events, _ = scan("<tool_search>find <tool_call> docs</tool_search>")
    assert events[0].payload == "find <tool_call> docs"


def test_offset_and_ordinal_continue():
    s = Scanner(offset=100, ordinal=7)
    ev = s.feed("<final_answer>a</final_answer>")
    assert ev[0].span == (100, 130) and ev[0].ordinal == 7
    assert s.next_ordinal == 8


def test_split_every_character():
    text = 'go <tool_call>{"name": "a"}</tool_call><tool_call_result>ok</tool_call_result> done'
    whole = scan(text)
    assert chunked(text, list(range(1, len(text)))) == whole


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["<tool_search>", "</tool_search>", "<tool_call>", "</tool_call>", FOLD_TOKEN,
                                 "<final_answer>", "</final_answer>", "<", ">", "/", "x", " ", "tool", "\n"]),
                max_size=40),
       st.randoms(use_true_random=False))
def test_chunking_invariance(parts, rnd):
    text = "".join(parts)
    cuts = rnd.sample(range(1, len(text)), min(5, max(len(text) - 1, 0))) if len(text) > 1 else []
    assert chunked(text, cuts) == scan(text)


@pytest.mark.parametrize("payload,reason", [
    ("not json", "invalid JSON"),
    ('{"arguments": {}}', "missing name"),
    ('["a"]', "JSON object"),
    ('{"name": "a b"}', "whitespace"),
    ('{"name": "a", "arguments": [1]}', "arguments must be"),
])
def test_malformed_calls(payload, reason):
    with pytest.raises(MalformedCall, match=reason):
        parse_tool_call(payload)


def test_string_encoded_arguments_accepted():
    assert parse_tool_call('{"name": "f", "arguments": "{\\"q\\": 1}"}') == ToolCallRequest("f", {"q": 1})


def test_render_round_trip():
    call = ToolCallRequest("lookup", {"q": "<tag> & ünïcode", "n": 3})
    events, _ = scan(render_call(call))
    assert parse_tool_call(events[0].payload) == call
    obs = Observation(TOOL_CALL_RESULT, "value 3")
    events, _ = scan(render_observation(obs))
    assert (events[0].kind, events[0].payload) == (TOOL_CALL_RESULT, "value 3")


def test_observation_kind_checked():
    with pytest.raises(ValueError):
        Observation(TOOL_CALL, "x")


def test_random_partitions_smoke():
    rng = random.Random(3)
    text = "think <tool_search>a</tool_search> more " + FOLD_TOKEN + " <final_answer>b</final_answer>"
    for _ in range(50):
        cuts = rng.sample(range(1, len(text)), 6)
        assert chunked(text, cuts) == scan(text)
