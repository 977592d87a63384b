"""Generation backends: remote chat-completions, fixture replay, and callables.

Every backend exposes ``generate(request) -> Iterator[GenerationChunk]``.  Stop
sequences are enforced client-side so the stream always ends *with* the stop
string that halted it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Callable, Iterator

import httpx

from .errors import BackendUnavailable, ContextOverflow

log = logging.getLogger(__name__)

TOOL_RESULT_THRESHOLD = 2048
TOOL_DOC_THRESHOLD = 4096
ELISION = "[...]"

_WORD = re.compile(r"\S+")
_PIECE = re.compile(r"<[^<>\s]{1,32}>|\s+|\w+|[^\w\s]")


def count_tokens(text: str) -> int:
    """Approximate token count: whitespace words x 1.3, rounded up."""
    words = sum(1 for _ in _WORD.finditer(text))
    return (13 * words + 9) // 10


def tokenize_pieces(text: str) -> list[str]:
    """Split text into token-like pieces that concatenate back to ``text``."""
    return _PIECE.findall(text)


def load_prompt(name: str) -> Template:
    return Template(resources.files("toolloop.prompts").joinpath(name).read_text())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class SamplingParams:
    max_tokens: int = 81920
    temperature: float = 0.7
    top_p: float = 0.8
    top_k: int = 20
    repetition_penalty: float = 1.05
    stop_sequences: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


@dataclass
class GenerationRequest:
    prompt_segments: list[tuple[str, str]]
    params: SamplingParams = field(default_factory=SamplingParams)
    want_logprobs: bool = False


@dataclass
class GenerationChunk:
    text: str
    token_ids: list[int] | None = None
    logprobs: list[float] | None = None
    finish: str | None = None


def render_prompt(segments) -> str:
    """Flatten prompt segments to text (used for matching and token counting)."""
    return "\n".join(f"<|{role}|>\n{text}" for role, text in segments if text).rstrip()


def prompt_hash(segments) -> str:
    return "sha256:" + hashlib.sha256(render_prompt(segments).encode()).hexdigest()


def cut_at_stop(text: str, stops) -> tuple[str, bool]:
    """Truncate ``text`` right after the earliest stop sequence."""
    best = None
    for s in stops:
        if not s:
            continue
        i = text.find(s)
        if i != -1 and (best is None or i + len(s) < best):
            best = i + len(s)
    if best is None:
        return text, False
    return text[:best], True


class NoFixtureMatch(BackendUnavailable):
    pass


def _stream_text(text: str, request: GenerationRequest, logprobs: list[float] | None = None,
                 context_window: int | None = None) -> Iterator[GenerationChunk]:
    """Shared streaming for in-process backends: stop, length, per-piece chunks."""
    if context_window is not None:
        need = count_tokens(render_prompt(request.prompt_segments))
        if need > context_window:
            raise ContextOverflow(need, context_window)
    text, stopped = cut_at_stop(text, request.params.stop_sequences)
    pieces = tokenize_pieces(text)
    finish = "stop"
    if len(pieces) > request.params.max_tokens:
        pieces = pieces[:request.params.max_tokens]
        finish = "length"
    if logprobs is not None and len(logprobs) < len(pieces):
        raise ValueError("fixture logprobs shorter than its response")
    for i, p in enumerate(pieces):
        lp = [logprobs[i]] if (logprobs is not None and request.want_logprobs) else None
        last = i == len(pieces) - 1
        yield GenerationChunk(p, None, lp, finish if last else None)
    if not pieces:
        yield GenerationChunk("", None, [] if request.want_logprobs and logprobs is not None else None, finish)


class ScriptedBackend:
    """Replays recorded responses keyed by prompt suffix or prompt hash.

    Fixture entries: ``{"match": suffix | "sha256:<hex>", "response": text,
    "logprobs": [...]}``; entries with ``"tool"``/``"arguments"`` instead of
    ``"match"`` answer simulated tool calls.  The longest matching suffix wins.
    """

    deterministic = True

    def __init__(self, fixtures: list[dict] = (), context_window: int | None = None):
        self.entries = []
        self.tool_table: dict[tuple[str, str], str] = {}
        self.context_window = context_window
        for f in fixtures:
            if "tool" in f:
                self.tool_table[(f["tool"], canonical_json(f.get("arguments", {})))] = f["response"]
            else:
                self.entries.append(f)

    @classmethod
    def from_file(cls, path: str | Path, **kw) -> "ScriptedBackend":
        return cls(json.loads(Path(path).read_text()), **kw)

    def lookup(self, segments) -> dict:
        text = render_prompt(segments)
        h = None
        best, best_len = None, -1
        for e in self.entries:
            m = e["match"]
            if m.startswith("sha256:"):
                h = h or prompt_hash(segments)
                if m == h:
                    return e
            else:
                m = m.rstrip()
                if text.endswith(m) and len(m) > best_len:
                    best, best_len = e, len(m)
        if best is None:
            raise NoFixtureMatch(f"no fixture matches prompt ending {text[-80:]!r}")
        return best

    def lookup_tool(self, name: str, arguments: dict) -> str | None:
        return self.tool_table.get((name, canonical_json(arguments)))

    def generate(self, request: GenerationRequest) -> Iterator[GenerationChunk]:
        e = self.lookup(request.prompt_segments)
        return _stream_text(e["response"], request, e.get("logprobs"), self.context_window)


class PolicyBackend:
    """Backend driven by a deterministic Python callable ``policy(segments) -> text``.

    Used for scripted agents whose next move depends on observations.
    """

    deterministic = True

    def __init__(self, policy: Callable[[list[tuple[str, str]]], str], context_window: int | None = None,
                 logprob_fn: Callable[[str], float] | None = None):
        self.policy = policy
        self.context_window = context_window
        self.logprob_fn = logprob_fn

    def generate(self, request: GenerationRequest) -> Iterator[GenerationChunk]:
        text = self.policy(request.prompt_segments)
        lps = None
        if self.logprob_fn is not None:
            lps = [self.logprob_fn(p) for p in tokenize_pieces(text)]
        return _stream_text(text, request, lps, self.context_window)


class RemoteChatBackend:
    """Streaming client for an OpenAI-compatible ``/chat/completions`` endpoint."""

    deterministic = False

    def __init__(self, base_url: str | None = None, model: str | None = None,
                 api_key_env: str = "TOOLLOOP_API_KEY", context_window: int | None = None,
                 timeout: float = 600.0, client: httpx.Client | None = None):
        self.base_url = (base_url or os.environ.get("TOOLLOOP_API_BASE", "")).rstrip("/")
        self.model = model or os.environ.get("TOOLLOOP_MODEL", "")
        self.api_key = os.environ.get(api_key_env)
        self.context_window = context_window
        self.client = client or httpx.Client(timeout=timeout)

    def _messages(self, segments):
        msgs = []
        for role, text in segments:
            if msgs and msgs[-1]["role"] == role:
                msgs[-1]["content"] += "\n" + text
            elif text or role == "assistant":
                msgs.append({"role": role, "content": text})
        if msgs and msgs[-1]["role"] == "assistant" and not msgs[-1]["content"]:
            msgs.pop()
        return msgs

    def payload(self, request: GenerationRequest) -> dict:
        p = request.params
        body = {
            "model": self.model,
            "messages": self._messages(request.prompt_segments),
            "max_tokens": p.max_tokens,
            "temperature": p.temperature,
            "top_p": p.top_p,
            "top_k": p.top_k,
            "repetition_penalty": p.repetition_penalty,
            "stream": True,
        }
        if body["messages"] and body["messages"][-1]["role"] == "assistant":
            # continue the partial assistant turn instead of opening a new one
            body["continue_final_message"] = True
            body["add_generation_prompt"] = False
        if request.want_logprobs:
            body["logprobs"] = True
        return body

    def generate(self, request: GenerationRequest) -> Iterator[GenerationChunk]:
        if not self.base_url:
            raise BackendUnavailable("no chat endpoint configured (set TOOLLOOP_API_BASE)")
        if self.context_window is not None:
            need = count_tokens(render_prompt(request.prompt_segments))
            if need > self.context_window:
                raise ContextOverflow(need, self.context_window)
        return self._stream(request)

    def _stream(self, request: GenerationRequest) -> Iterator[GenerationChunk]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        stops = request.params.stop_sequences
        emitted = ""
        try:
            with self.client.stream("POST", f"{self.base_url}/chat/completions",
                                    json=self.payload(request), headers=headers) as resp:
                if resp.status_code >= 400:
                    resp.read()
                    raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
                for line in resp.iter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[5:].strip()
                    if data == "[DONE]":
                        break
                    choice = json.loads(data)["choices"][0]
                    text = (choice.get("delta") or {}).get("content") or ""
                    lps = None
                    lp_content = (choice.get("logprobs") or {}).get("content")
                    if lp_content:
                        lps = [t["logprob"] for t in lp_content]
                    cut, stopped = cut_at_stop(emitted + text, stops)
                    if stopped:
                        tail = cut[len(emitted):]
                        yield GenerationChunk(tail, None, lps if tail == text else None, "stop")
                        return
                    emitted += text
                    if text or choice.get("finish_reason"):
                        yield GenerationChunk(text, None, lps, choice.get("finish_reason"))
        except httpx.HTTPError as e:
            raise BackendUnavailable(f"chat request failed: {e}") from e


# -- auxiliary services --------------------------------------------------------

def generate_text(backend, request: GenerationRequest) -> str:
    return "".join(c.text for c in backend.generate(request))


def head_tail(text: str, budget_tokens: int) -> str:
    """Keep the first and last halves of the word budget around an elision marker."""
    if count_tokens(text) <= budget_tokens:
        return text
    max_words = (10 * budget_tokens) // 13
    words = list(_WORD.finditer(text))
    if max_words < 3:
        return " ".join(w.group() for w in words[:max_words])
    keep = max_words - 1
    head, tail = (keep + 1) // 2, keep // 2
    out = text[:words[head - 1].end()] + " " + ELISION
    if tail:
        out += " " + text[words[-tail].start():]
    return out


def summarize(aux_backend, text: str, budget_tokens: int, what: str = "tool output") -> str:
    """Condense ``text`` to at most ``budget_tokens`` (approximate count)."""
    if count_tokens(text) <= budget_tokens:
        return text
    if aux_backend is not None:
        prompt = load_prompt("summarize.v1.txt").substitute(what=what, budget=budget_tokens, text=text)
        req = GenerationRequest([("user", prompt)], SamplingParams(max_tokens=budget_tokens, temperature=0.0, top_p=1.0))
        try:
            return head_tail(generate_text(aux_backend, req).strip(), budget_tokens)
        except Exception as e:  # deterministic fallback is always available
            log.debug("aux summarizer unavailable, using head-tail: %s", e)
    return head_tail(text, budget_tokens)


def simulate_tool(aux_backend, doc, call) -> str:
    """Answer a call to a simulated tool as the real API would."""
    if doc.source != "simulated":
        raise ValueError(f"{doc.name} is not a simulated tool")
    lookup = getattr(aux_backend, "lookup_tool", None)
    if lookup is not None:
        hit = lookup(call.name, call.arguments)
        if hit is not None:
            return hit
    prompt = load_prompt("tool_simulator.v1.txt").substitute(
        tool_doc=json.dumps(doc.function_definition(), indent=1),
        arguments=canonical_json(call.arguments))
    persona = (doc.endpoint_config or {}).get("persona")
    segments = ([("system", persona)] if persona else []) + [("user", prompt)]
    req = GenerationRequest(segments, SamplingParams(max_tokens=2048, temperature=0.0, top_p=1.0))
    return generate_text(aux_backend, req).strip()
