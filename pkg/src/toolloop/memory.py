"""Memory folding: compress an interaction history into episodic, working and
tool memory, and render the snapshot as the restart context."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .backends import (GenerationRequest, SamplingParams, count_tokens, generate_text,
                       load_prompt)
from .protocol import TOOL_CALL, TOOL_SEARCH
from .trajectory import Trajectory

log = logging.getLogger(__name__)

RETRY_BUDGET = 3
NEXT_ACTION_TYPES = ("tool_call", "planning", "decision")
CONTINUE_SENTENCE = "Continue the task from this state."

# Field names and descriptions as the aux model sees them.
EPISODIC_SCHEMA = {
    "task_description": "A general summary of what the reasoning history has been doing and the overall goals it has been striving for.",
    "key_events": [{
        "step": "step number",
        "description": "A detailed description of the specific action taken, decision made, or milestone achieved at this step, including relevant context and reasoning behind the choice.",
        "outcome": "A detailed account of the direct result, observation, or feedback received from this action or decision, including any new information gained or changes in the task state.",
    }],
    "current_progress": "A general summary of the current progress of the task, including what has been completed and what is left to be done.",
}
WORKING_SCHEMA = {
    "immediate_goal": "A clear summary of the current subgoal: what you are actively working toward at this moment.",
    "current_challenges": "A concise summary of the main obstacles or difficulties you are presently encountering.",
    "next_actions": [{
        "type": "tool_call or planning or decision",
        "description": "Anticipate and describe the next concrete action you intend to take to advance the task.",
    }],
}
TOOL_SCHEMA = {
    "tools_used": [{
        "tool_name": "string",
        "success_rate": "float",
        "effective_parameters": ["param1", "param2"],
        "common_errors": ["error_type1", "error_type2"],
        "response_pattern": "description of typical output",
        "experience": "Reflect and summarize your experience, including both successes and failures.",
    }],
    "derived_rules": ["When X condition occurs, prefer tool Y", "Tool Z works best with parameter A set to B"],
}
SCHEMAS = {"episodic": EPISODIC_SCHEMA, "working": WORKING_SCHEMA, "tool": TOOL_SCHEMA}
HEADINGS = {"episodic": "Episodic Memory", "working": "Working Memory", "tool": "Tool Memory"}


class SchemaViolation(ValueError):
    def __init__(self, violations: list[tuple[str, str]]):
        self.violations = violations
        super().__init__("; ".join(f"{p}: {r}" for p, r in violations))


class FoldFailed(RuntimeError):
    pass


class FoldRejected(RuntimeError):
    """The rendered snapshot would not be shorter than the history it replaces."""

    def __init__(self, rendered_tokens: int, source_tokens: int):
        super().__init__(f"snapshot renders to {rendered_tokens} tokens, history is {source_tokens}")
        self.rendered_tokens = rendered_tokens
        self.source_tokens = source_tokens


@dataclass
class KeyEvent:
    step: int
    description: str
    outcome: str


@dataclass
class EpisodicMemory:
    task_description: str
    key_events: list[KeyEvent]
    current_progress: str


@dataclass
class NextAction:
    type: str
    description: str


@dataclass
class WorkingMemory:
    immediate_goal: str
    current_challenges: str
    next_actions: list[NextAction]


@dataclass
class ToolUsage:
    tool_name: str
    success_rate: float
    effective_parameters: list[str]
    common_errors: list[str]
    response_pattern: str
    experience: str


@dataclass
class ToolMemory:
    tools_used: list[ToolUsage]
    derived_rules: list[str] = field(default_factory=list)


@dataclass
class MemorySnapshot:
    episodic: EpisodicMemory
    working: WorkingMemory
    tool: ToolMemory
    folded_at_step: int = 0
    source_token_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MemorySnapshot":
        return _build_snapshot(d, known_tools=None)


# -- validation ----------------------------------------------------------------

_FENCE = re.compile(r"^\s*```[\w-]*\s*\n(.*?)\n?```\s*$", re.S)


def strip_fences(raw: str) -> str:
    m = _FENCE.match(raw)
    return m.group(1) if m else raw.strip()


def _text(v, path, errs, allow_empty=False):
    if not isinstance(v, str):
        errs.append((path, "must be a string"))
        return ""
    if not allow_empty and not v.strip():
        errs.append((path, "must be non-empty"))
    return v


def _str_list(v, path, errs):
    if not isinstance(v, list):
        errs.append((path, "must be a list of strings"))
        return []
    out = []
    for i, x in enumerate(v):
        if isinstance(x, str):
            out.append(x)
        else:
            errs.append((f"{path}[{i}]", "must be a string"))
    return out


def _obj(v, path, errs, keys):
    if not isinstance(v, dict):
        errs.append((path, "must be an object"))
        return None
    for k in keys:
        if k not in v:
            errs.append((f"{path}.{k}", "is required"))
    for k in v:
        if k not in keys:
            errs.append((f"{path}.{k}", "is not part of the schema"))
    return v


def check_episodic(d, errs, path="episodic") -> EpisodicMemory | None:
    if _obj(d, path, errs, ("task_description", "key_events", "current_progress")) is None:
        return None
    task = _text(d.get("task_description"), f"{path}.task_description", errs)
    progress = _text(d.get("current_progress"), f"{path}.current_progress", errs)
    events = []
    raw_events = d.get("key_events")
    if not isinstance(raw_events, list):
        errs.append((f"{path}.key_events", "must be a list"))
        raw_events = []
    last = None
    for i, e in enumerate(raw_events):
        p = f"{path}.key_events[{i}]"
        if _obj(e, p, errs, ("step", "description", "outcome")) is None:
            continue
        step = e.get("step")
        if isinstance(step, str) and step.strip().isdigit():
            step = int(step)
        if not isinstance(step, int) or isinstance(step, bool):
            errs.append((f"{p}.step", "must be an integer"))
            step = None
        elif last is not None and step <= last:
            errs.append((f"{p}.step", f"must be greater than previous step {last}"))
        if step is not None:
            last = step
        events.append(KeyEvent(step, _text(e.get("description"), f"{p}.description", errs),
                               _text(e.get("outcome"), f"{p}.outcome", errs)))
    return EpisodicMemory(task, events, progress)


def check_working(d, errs, path="working", terminal=False) -> WorkingMemory | None:
    if _obj(d, path, errs, ("immediate_goal", "current_challenges", "next_actions")) is None:
        return None
    goal = _text(d.get("immediate_goal"), f"{path}.immediate_goal", errs)
    challenges = _text(d.get("current_challenges"), f"{path}.current_challenges", errs, allow_empty=True)
    actions = []
    raw = d.get("next_actions")
    if not isinstance(raw, list):
        errs.append((f"{path}.next_actions", "must be a list"))
        raw = []
    if not raw and not terminal:
        errs.append((f"{path}.next_actions", "must contain at least one action"))
    for i, a in enumerate(raw):
        p = f"{path}.next_actions[{i}]"
        if _obj(a, p, errs, ("type", "description")) is None:
            continue
        if a.get("type") not in NEXT_ACTION_TYPES:
            errs.append((f"{p}.type", f"must be one of {', '.join(NEXT_ACTION_TYPES)}"))
        actions.append(NextAction(a.get("type"), _text(a.get("description"), f"{p}.description", errs)))
    return WorkingMemory(goal, challenges, actions)


def check_tool(d, errs, path="tool", known_tools=None) -> ToolMemory | None:
    if _obj(d, path, errs, ("tools_used", "derived_rules")) is None:
        return None
    used = []
    raw = d.get("tools_used")
    if not isinstance(raw, list):
        errs.append((f"{path}.tools_used", "must be a list"))
        raw = []
    keys = ("tool_name", "success_rate", "effective_parameters", "common_errors", "response_pattern", "experience")
    for i, t in enumerate(raw):
        p = f"{path}.tools_used[{i}]"
        if _obj(t, p, errs, keys) is None:
            continue
        name = _text(t.get("tool_name"), f"{p}.tool_name", errs)
        if known_tools is not None and name and name not in known_tools:
            errs.append((f"{p}.tool_name", f"tool '{name}' does not appear in the history"))
        rate = t.get("success_rate")
        if isinstance(rate, str):
            try:
                rate = float(rate)
            except ValueError:
                pass
        if isinstance(rate, bool) or not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
            errs.append((f"{p}.success_rate", "must be a number in [0, 1]"))
            rate = 0.0
        used.append(ToolUsage(
            name, float(rate),
            _str_list(t.get("effective_parameters"), f"{p}.effective_parameters", errs),
            _str_list(t.get("common_errors"), f"{p}.common_errors", errs),
            _text(t.get("response_pattern"), f"{p}.response_pattern", errs, allow_empty=True),
            _text(t.get("experience"), f"{p}.experience", errs, allow_empty=True),
        ))
    rules = _str_list(d.get("derived_rules"), f"{path}.derived_rules", errs)
    return ToolMemory(used, rules)


CHECKERS = {"episodic": check_episodic, "working": check_working, "tool": check_tool}


def validate_component(component: str, raw: str, known_tools=None):
    """Parse and check one memory component from aux-model output."""
    errs: list[tuple[str, str]] = []
    try:
        obj = json.loads(strip_fences(raw))
    except json.JSONDecodeError as e:
        raise SchemaViolation([(component, f"not valid JSON: {e.msg}")]) from None
    if component == "tool":
        value = check_tool(obj, errs, known_tools=known_tools)
    else:
        value = CHECKERS[component](obj, errs)
    if errs:
        raise SchemaViolation(errs)
    return value


def _build_snapshot(d: dict, known_tools) -> MemorySnapshot:
    errs: list[tuple[str, str]] = []
    if not isinstance(d, dict):
        raise SchemaViolation([("$", "snapshot must be an object")])
    for k in ("episodic", "working", "tool"):
        if k not in d:
            errs.append((k, "is required"))
    ep = check_episodic(d.get("episodic"), errs) if "episodic" in d else None
    wm = check_working(d.get("working"), errs) if "working" in d else None
    tm = check_tool(d.get("tool"), errs, known_tools=known_tools) if "tool" in d else None
    step = d.get("folded_at_step", 0)
    src = d.get("source_token_count", 0)
    for name, v in (("folded_at_step", step), ("source_token_count", src)):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            errs.append((name, "must be a non-negative integer"))
    if errs:
        raise SchemaViolation(errs)
    snap = MemorySnapshot(ep, wm, tm, step, src)
    if src:
        rendered = count_tokens(render_snapshot(snap))
        if rendered >= src:
            raise SchemaViolation([("source_token_count",
                                    f"rendered snapshot ({rendered} tokens) is not shorter than the source ({src})")])
    return snap


_HEADER = re.compile(r"Memory snapshot \(folded at step (\d+); compressed from (\d+) tokens\)")


def validate_snapshot(raw: str, known_tools=None) -> MemorySnapshot:
    """Parse either a JSON snapshot object or a rendered snapshot block."""
    body = strip_fences(raw)
    try:
        return _build_snapshot(json.loads(body), known_tools)
    except json.JSONDecodeError:
        pass
    d: dict = {}
    m = _HEADER.search(body)
    if m:
        d["folded_at_step"], d["source_token_count"] = int(m.group(1)), int(m.group(2))
    marks = {k: body.find(f"## {h}\n") for k, h in HEADINGS.items()}
    order = sorted((pos, k) for k, pos in marks.items() if pos != -1)
    errs = []
    for n, (pos, k) in enumerate(order):
        start = pos + len(f"## {HEADINGS[k]}\n")
        end = order[n + 1][0] if n + 1 < len(order) else len(body)
        chunk = body[start:end].strip()
        if chunk.endswith(CONTINUE_SENTENCE):
            chunk = chunk[: -len(CONTINUE_SENTENCE)].strip()
        try:
            d[k] = json.loads(strip_fences(chunk))
        except json.JSONDecodeError as e:
            errs.append((k, f"not valid JSON: {e.msg}"))
    if errs:
        raise SchemaViolation(errs)
    return _build_snapshot(d, known_tools)


def render_snapshot(snapshot: MemorySnapshot) -> str:
    d = snapshot.to_dict()
    parts = [f"Memory snapshot (folded at step {snapshot.folded_at_step}; "
             f"compressed from {snapshot.source_token_count} tokens)"]
    for k in ("episodic", "working", "tool"):
        parts.append(f"## {HEADINGS[k]}\n{json.dumps(d[k], indent=2, ensure_ascii=False)}")
    return "\n\n".join(parts)


def restart_context(instruction: str, question: str, snapshot: MemorySnapshot) -> list[tuple[str, str]]:
    """Prompt segments that replace the raw history after a fold."""
    user = f"{question}\n\n{render_snapshot(snapshot)}\n\n{CONTINUE_SENTENCE}"
    return [("system", instruction), ("user", user), ("assistant", "")]


# -- folding -------------------------------------------------------------------

def _clip(text: str, n: int) -> str:
    text = " ".join(text.split())
    return text if len(text) <= n else text[:n]


def _describe(step) -> str:
    if step.kind == TOOL_SEARCH:
        return f"Searched for tools: {_clip(step.action.payload, 160)}"
    call = step.call()
    if call is None:
        return f"Issued a malformed tool call: {_clip(step.action.payload, 160)}"
    return _clip(f"Called {call.name} with {json.dumps(call.arguments, sort_keys=True)}", 200)


def tools_in_history(traj: Trajectory) -> set[str]:
    names = set()
    for s in traj.call_steps():
        c = s.call()
        if c is not None:
            names.add(c.name)
    return names


def fallback_fold(traj: Trajectory, folded_at_step: int | None = None, source_token_count: int = 0) -> MemorySnapshot:
    """Deterministic snapshot built by counting and truncation."""
    acted = [(i + 1, s) for i, s in enumerate(traj.steps) if s.kind in (TOOL_SEARCH, TOOL_CALL)]
    events = []
    for n, s in acted[-10:]:
        outcome = s.observation.content if s.observation else ""
        events.append(KeyEvent(n, _describe(s), _clip(outcome, 200) or "(empty observation)"))
    calls = [s for _, s in acted if s.kind == TOOL_CALL]
    n_ok = sum(1 for s in calls if s.status == "ok")
    if acted:
        last = acted[-1][1]
        progress = (f"{len(acted)} actions taken ({len(acted) - len(calls)} searches, {len(calls)} tool calls, "
                    f"{n_ok} successful). Last action: {_describe(last)}")
    else:
        last = None
        progress = "No actions taken yet."
    question = traj.question.strip() or "(no question recorded)"

    if last is None:
        nxt = NextAction("planning", "Search for a tool relevant to the task.")
    elif last.kind == TOOL_SEARCH:
        nxt = NextAction("tool_call", "Call the most relevant tool returned by the last search.")
    elif last.status == "ok":
        nxt = NextAction("decision", f"Use the result of {_describe(last)} to choose the next tool call or give the final answer.")
    else:
        nxt = NextAction("planning", "Repair the failed call or search for a different tool.")
    failures = [s for s in calls if s.status not in (None, "ok")]
    challenge = (_clip(failures[-1].observation.content, 200) if failures and failures[-1].observation
                 else "No outstanding errors.")
    working = WorkingMemory(f"Continue solving: {_clip(question, 200)}", challenge, [nxt])

    per_tool: dict[str, dict] = {}
    for s in calls:
        c = s.call()
        if c is None:
            continue
        t = per_tool.setdefault(c.name, {"total": 0, "ok": 0, "params": set(), "errors": [], "pattern": None})
        t["total"] += 1
        if s.status == "ok":
            t["ok"] += 1
            t["params"].update(c.arguments)
            if t["pattern"] is None and s.observation is not None:
                t["pattern"] = _clip(s.observation.content, 100)
        elif s.status and s.status not in t["errors"]:
            t["errors"].append(s.status)
    usages, rules = [], []
    for name in sorted(per_tool):
        t = per_tool[name]
        usages.append(ToolUsage(name, t["ok"] / t["total"], sorted(t["params"]), t["errors"],
                                t["pattern"] or "no successful responses",
                                f"{t['ok']} of {t['total']} calls succeeded."))
        if t["errors"]:
            rules.append(f"When {name} returns {t['errors'][0]}, check its parameters before retrying.")
    step = folded_at_step if folded_at_step is not None else len(traj.steps)
    return MemorySnapshot(EpisodicMemory(question, events, progress), working, ToolMemory(usages, rules),
                          step, source_token_count)


def _fold_prompt(component: str, question: str, history: str, violations) -> str:
    repair = ""
    if violations:
        lines = "\n".join(f"- {p}: {r}" for p, r in violations)
        repair = f"\nYour previous answer violated the schema:\n{lines}\nFix every listed problem.\n"
    return load_prompt("fold.v1.txt").substitute(
        component=component, schema=json.dumps(SCHEMAS[component], indent=1),
        question=question, history=history, repair=repair)


def _fold_component(component, aux, question, history, known_tools, retries):
    violations = None
    for attempt in range(retries):
        prompt = _fold_prompt(component, question, history, violations)
        req = GenerationRequest([("user", prompt)], SamplingParams(max_tokens=4096, temperature=0.0, top_p=1.0))
        try:
            raw = generate_text(aux, req)
            return validate_component(component, raw, known_tools)
        except SchemaViolation as e:
            violations = e.violations
            log.info("fold %s attempt %d invalid: %s", component, attempt + 1, e)
        except Exception as e:  # backend trouble counts as a failed attempt
            violations = [(component, f"generation failed: {e}")]
            log.info("fold %s attempt %d failed: %s", component, attempt + 1, e)
    return None


def fold(traj: Trajectory, context_text: str, aux_backend=None, folded_at_step: int | None = None,
         retries: int = RETRY_BUDGET) -> MemorySnapshot:
    """Compress the current context into a snapshot.

    The three components are requested concurrently from the aux backend;
    any component still invalid after ``retries`` attempts comes from
    :func:`fallback_fold`.
    """
    if not traj.steps and not context_text.strip():
        raise ValueError("cannot fold an empty history")
    source = count_tokens(context_text)
    fallback = fallback_fold(traj, folded_at_step, source)
    known = tools_in_history(traj)
    parts = {}
    if aux_backend is not None:
        with ThreadPoolExecutor(max_workers=3) as pool:
            futures = {c: pool.submit(_fold_component, c, aux_backend, traj.question, context_text, known, retries)
                       for c in ("episodic", "working", "tool")}
            parts = {c: f.result() for c, f in futures.items()}
    snap = MemorySnapshot(parts.get("episodic") or fallback.episodic,
                          parts.get("working") or fallback.working,
                          parts.get("tool") or fallback.tool,
                          fallback.folded_at_step, source)
    errs: list[tuple[str, str]] = []
    check_episodic(asdict(snap.episodic), errs)
    check_working(asdict(snap.working), errs)
    check_tool(asdict(snap.tool), errs, known_tools=known)
    if errs:
        raise FoldFailed(str(SchemaViolation(errs)))
    rendered = count_tokens(render_snapshot(snap))
    if rendered >= source:
        raise FoldRejected(rendered, source)
    return snap
