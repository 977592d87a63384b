"""Deterministic scripted policies that play generated tasks through the runtime.

Each policy is a pure function of the prompt it is shown, so episodes driven
by them are reproducible byte for byte.
"""

from __future__ import annotations

import json
import re

from ..backends import PolicyBackend
from ..protocol import TOOL_CALL_RESULT, TOOL_SEARCH_RESULT, ToolCallRequest, render_call, scan
from .toolqa import FINAL_HINT, SyntheticToolTask


def _observations(segments) -> list[tuple[str, str]]:
    """Result blocks of the current context, in order."""
    text = "\n".join(t for role, t in segments if role == "assistant")
    events, _ = scan(text)
    return [(e.kind, e.payload) for e in events if e.kind in (TOOL_SEARCH_RESULT, TOOL_CALL_RESULT)]


def _answer(value: str) -> str:
    return f"I have everything I need.\n<final_answer>{value}</final_answer>"


def gold_chain_policy(task: SyntheticToolTask, search: bool = True, corrupt_at: int | None = None):
    """Replays the gold chain: (search, call) per hop, then answers.

    ``corrupt_at`` injects one extra call to a wrong tool before hop ``corrupt_at``.
    """
    gold_docs = {d.name: d for d in task.toolset}
    decoy = next((d.name for d in task.toolset if d.name not in task.gold_tool_names), None)

    def policy(segments) -> str:
        obs = _observations(segments)
        calls = [c for k, c in obs if k == TOOL_CALL_RESULT]
        good = calls
        if corrupt_at is not None and decoy is not None and len(calls) > corrupt_at:
            good = calls[:corrupt_at] + calls[corrupt_at + 1:]
        good = [c for c in good if c.startswith("{")]  # failed calls are retried
        hop = len(good)
        value = json.loads(good[-1])["value"] if good else task.start_entity
        if hop >= task.depth:
            return _answer(value)
        h = task.hops[hop]
        if corrupt_at is not None and decoy is not None and len(calls) == corrupt_at == hop:
            param = gold_docs[decoy].parameters["required"][0]
            return f"Let me try another tool first.\n{render_call(ToolCallRequest(decoy, {param: value}))}"
        last_kind = obs[-1][0] if obs else None
        if search and last_kind != TOOL_SEARCH_RESULT:
            return f"I need the {h.relation} of the {h.domain} {value}.\n<tool_search>{gold_docs[h.tool].canonical_text()}</tool_search>"
        args = {f"{h.domain}_name": value}
        return f"Calling {h.tool} on {value}.\n{render_call(ToolCallRequest(h.tool, args))}"

    return policy


_NEED_Q = re.compile(r"the (\w+) '([^']+)' and look up its (\w+)")
_NEED_H = re.compile(r"look up the (\w+) of this (\w+)")


def _known_docs(segments) -> list[dict]:
    docs = []
    text = "\n".join(t for _, t in segments)
    for line in text.splitlines():
        line = line.strip()
        for piece in re.split(r"(?=\{\"name\": )", line):
            piece = piece.strip().removeprefix("<tool_search_result>").removesuffix("</tool_search_result>")
            if not piece.startswith('{"name": '):
                continue
            try:
                d = json.loads(piece)
            except json.JSONDecodeError:
                continue
            if isinstance(d, dict) and "description" in d:
                docs.append(d)
    return docs


def hint_following_policy(task: SyntheticToolTask):
    """An imperfect agent for progressive tasks.

    It only learns its next need from the latest result, searches with a
    paraphrase (``"<relation> of <type>"``), and when no listed tool matches
    the need it gives up and answers with the value it has.
    """

    def policy(segments) -> str:
        question = segments[1][1] if len(segments) > 1 else ""
        m = _NEED_Q.search(question)
        domain, value, relation = (m.group(1), m.group(2), m.group(3)) if m else ("", "", "")
        obs = _observations(segments)
        last_kind = None
        for kind, payload in obs:
            last_kind = kind
            if kind == TOOL_CALL_RESULT:
                try:
                    out = json.loads(payload)
                except json.JSONDecodeError:
                    continue
                value = out.get("value", value)
                hint = out.get("next", "")
                if hint == FINAL_HINT:
                    return _answer(value)
                mh = _NEED_H.search(hint)
                if mh:
                    relation, domain = mh.group(1), mh.group(2)
        want = f"the {relation} of the given {domain}"
        match = next((d for d in _known_docs(segments) if want in d["description"]), None)
        if match is not None:
            param = match["parameters"]["required"][0]
            return f"{match['name']} fits.\n{render_call(ToolCallRequest(match['name'], {param: value}))}"
        search_disabled = "Tool search is disabled" in (segments[0][1] if segments else "")
        if search_disabled or last_kind == TOOL_SEARCH_RESULT:
            return _answer(value)
        return f"I need a tool for the {relation} of a {domain}.\n<tool_search>{relation} of {domain}</tool_search>"

    return policy


def textworld_gold_policy(task):
    """Replays the scripted solver's calls, one per turn."""
    gold = list(task.gold_calls)

    def policy(segments) -> str:
        done = sum(1 for k, _ in _observations(segments) if k == TOOL_CALL_RESULT)
        if done >= len(gold):
            return _answer("done")
        name, args = gold[done]
        return f"Next: {name}.\n{render_call(ToolCallRequest(name, args))}"

    return policy


def backend_for(policy) -> PolicyBackend:
    return PolicyBackend(policy)
