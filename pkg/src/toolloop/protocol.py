"""Streaming scanner for the tagged action protocol.

The model requests actions by emitting flat tags inside its reasoning text::

    <tool_search>query</tool_search>
    <tool_call>{"name": ..., "arguments": {...}}</tool_call>
    <fold_thought>
    <final_answer>...</final_answer>

and the runtime answers with ``<tool_search_result>`` / ``<tool_call_result>``
blocks.  :class:`Scanner` consumes text in arbitrary chunks and emits the same
event list regardless of how the stream was split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

THINK = "think"
TOOL_SEARCH = "tool_search"
TOOL_CALL = "tool_call"
MEMORY_FOLD = "memory_fold"
FINAL_ANSWER = "final_answer"
TOOL_SEARCH_RESULT = "tool_search_result"
TOOL_CALL_RESULT = "tool_call_result"

FOLD_TOKEN = "<fold_thought>"

# kind -> (open tag, close tag); close is None for the bare fold token
TAGS: dict[str, tuple[str, str | None]] = {
    TOOL_SEARCH: ("<tool_search>", "</tool_search>"),
    TOOL_CALL: ("<tool_call>", "</tool_call>"),
    TOOL_SEARCH_RESULT: ("<tool_search_result>", "</tool_search_result>"),
    TOOL_CALL_RESULT: ("<tool_call_result>", "</tool_call_result>"),
    FINAL_ANSWER: ("<final_answer>", "</final_answer>"),
    MEMORY_FOLD: (FOLD_TOKEN, None),
}
_OPEN_TO_KIND = {open_: kind for kind, (open_, _) in TAGS.items()}

#: Kinds that hand control back to the runtime.
ACTION_KINDS = frozenset({TOOL_SEARCH, TOOL_CALL, MEMORY_FOLD, FINAL_ANSWER})
OBSERVATION_KINDS = frozenset({TOOL_SEARCH_RESULT, TOOL_CALL_RESULT})

#: Stop sequences the runtime registers so generation returns after each action.
ACTION_STOP_SEQUENCES = ("</tool_search>", "</tool_call>", "</final_answer>", FOLD_TOKEN)


class ProtocolError(Exception):
    pass


class UnclosedTag(ProtocolError):
    def __init__(self, kind: str, span: tuple[int, int]):
        super().__init__(f"unclosed <{kind}> tag at {span[0]}..{span[1]}")
        self.kind = kind
        self.span = span

    def __eq__(self, other):
        return isinstance(other, UnclosedTag) and (self.kind, self.span) == (other.kind, other.span)

    def __hash__(self):
        return hash((self.kind, self.span))


class MalformedCall(ProtocolError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class ActionEvent:
    kind: str
    payload: str
    span: tuple[int, int]
    ordinal: int

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload, "span": list(self.span), "ordinal": self.ordinal}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionEvent":
        return cls(d["kind"], d["payload"], tuple(d["span"]), d["ordinal"])


@dataclass(frozen=True)
class ToolCallRequest:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Observation:
    kind: str
    content: str

    def __post_init__(self):
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f"not an observation kind: {self.kind!r}")


def _partial_tag_suffix(text: str, tags) -> int:
    """Length of the longest suffix of ``text`` that is a proper prefix of a tag."""
    i = text.find("<", max(0, len(text) - 32))
    while i != -1:
        tail = text[i:]
        if any(len(t) > len(tail) and t.startswith(tail) for t in tags):
            return len(tail)
        i = text.find("<", i + 1)
    return 0


class Scanner:
    """Incremental, chunking-invariant scanner.

    Offsets in spans are character offsets into the scanned stream, counted
    from ``offset`` (the position of the first character this scanner sees).
    """

    def __init__(self, offset: int = 0, ordinal: int = 1):
        self.pos = offset           # stream position of buf[0]
        self.buf = ""
        self.next_ordinal = ordinal
        self.think = ""
        self.think_start = offset
        self.region: str | None = None   # kind of the open tagged region
        self.region_start = 0
        self.region_body = ""       # payload consumed so far inside region

    def _emit(self, kind, payload, span, out):
        out.append(ActionEvent(kind, payload, span, self.next_ordinal))
        self.next_ordinal += 1

    def _flush_think(self, out):
        if self.think:
            self._emit(THINK, self.think, (self.think_start, self.think_start + len(self.think)), out)
        self.think = ""

    def feed(self, chunk: str) -> list[ActionEvent]:
        out: list[ActionEvent] = []
        self.buf += chunk
        while self.buf:
            if self.region is None:
                if not self._scan_outside(out):
                    break
            elif not self._scan_inside(out):
                break
        return out

    def _scan_outside(self, out) -> bool:
        buf = self.buf
        hit, hit_at = None, len(buf)
        at = buf.find("<")
        while at != -1:
            for open_ in _OPEN_TO_KIND:
                if buf.startswith(open_, at):
                    hit, hit_at = open_, at
                    break
            if hit:
                break
            at = buf.find("<", at + 1)
        if hit is None:
            keep = _partial_tag_suffix(buf, _OPEN_TO_KIND)
            safe = len(buf) - keep
            if safe:
                if not self.think:
                    self.think_start = self.pos
                self.think += buf[:safe]
                self._advance(safe)
            return False
        if hit_at:
            if not self.think:
                self.think_start = self.pos
            self.think += buf[:hit_at]
            self._advance(hit_at)
        self._flush_think(out)
        kind = _OPEN_TO_KIND[hit]
        start = self.pos
        self._advance(len(hit))
        if TAGS[kind][1] is None:
            self._emit(kind, "", (start, self.pos), out)
        else:
            self.region, self.region_start, self.region_body = kind, start, ""
        return True

    def _scan_inside(self, out) -> bool:
        close = TAGS[self.region][1]
        at = self.buf.find(close)
        if at == -1:
            keep = _partial_tag_suffix(self.buf, (close,))
            safe = len(self.buf) - keep
            self.region_body += self.buf[:safe]
            self._advance(safe)
            return False
        self.region_body += self.buf[:at]
        self._advance(at + len(close))
        self._emit(self.region, self.region_body, (self.region_start, self.pos), out)
        self.region, self.region_body = None, ""
        return True

    def _advance(self, n: int):
        self.buf = self.buf[n:]
        self.pos += n

    def finalize(self) -> tuple[list[ActionEvent], list[ProtocolError]]:
        out: list[ActionEvent] = []
        errors: list[ProtocolError] = []
        if self.region is not None:
            errors.append(UnclosedTag(self.region, (self.region_start, self.pos + len(self.buf))))
            self.region = None
            self.region_body = ""
            self.buf = ""
        elif self.buf:
            # a dangling partial tag is literal text
            if not self.think:
                self.think_start = self.pos
            self.think += self.buf
            self._advance(len(self.buf))
        self._flush_think(out)
        return out, errors


def feed_chunk(state: Scanner | None, chunk: str) -> tuple[Scanner, list[ActionEvent]]:
    state = state or Scanner()
    return state, state.feed(chunk)


def finalize(state: Scanner) -> tuple[list[ActionEvent], list[ProtocolError]]:
    return state.finalize()


def scan(text: str) -> tuple[list[ActionEvent], list[ProtocolError]]:
    """Scan a complete text in one go."""
    s = Scanner()
    events = s.feed(text)
    tail, errors = s.finalize()
    return events + tail, errors


def parse_tool_call(payload: str) -> ToolCallRequest:
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError as e:
        raise MalformedCall(f"invalid JSON: {e.msg} at position {e.pos}") from None
    if not isinstance(obj, dict):
        raise MalformedCall("call body must be a JSON object")
    if "name" not in obj:
        raise MalformedCall("missing name")
    name = obj["name"]
    if not isinstance(name, str) or not name or any(c.isspace() for c in name):
        raise MalformedCall("name must be a non-empty string without whitespace")
    args = obj.get("arguments", {})
    if args is None:
        args = {}
    if isinstance(args, str):
        # some models double-encode the arguments object
        try:
            args = json.loads(args)
        except json.JSONDecodeError:
            raise MalformedCall("arguments is a string that is not a JSON object") from None
    if not isinstance(args, dict):
        raise MalformedCall("arguments must be a JSON object")
    return ToolCallRequest(name, args)


def render_observation(obs: Observation) -> str:
    open_, close = TAGS[obs.kind]
    return f"{open_}{obs.content}{close}"


def render_call(call: ToolCallRequest) -> str:
    body = json.dumps({"name": call.name, "arguments": call.arguments}, ensure_ascii=False)
    return f"<tool_call>{body}</tool_call>"
