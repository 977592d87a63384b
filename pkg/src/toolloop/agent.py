"""The episode loop: generate, intercept actions, execute, observe, fold."""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field

from .backends import (TOOL_DOC_THRESHOLD, TOOL_RESULT_THRESHOLD, GenerationRequest, SamplingParams,
                       load_prompt, render_prompt, summarize)
from .errors import BackendUnavailable, ContextOverflow
from .execution import DEFAULT_TIMEOUT_MS, ToolBackends, dispatch
from .memory import FoldRejected, fold, restart_context
from .protocol import (ACTION_KINDS, ACTION_STOP_SEQUENCES, FINAL_ANSWER, FOLD_TOKEN, MEMORY_FOLD,
                       TOOL_CALL, TOOL_CALL_RESULT, TOOL_SEARCH, TOOL_SEARCH_RESULT, MalformedCall,
                       Observation, Scanner, parse_tool_call, render_observation, scan)
from .registry import EmptyIndex, ToolDoc, ToolRegistry
from .trajectory import Step, Trajectory

log = logging.getLogger(__name__)

MODES = ("labeled", "open_set")
ANSWER_NOW = ("The action or token budget is exhausted. Do not call more tools. "
              "Give your best final answer now inside <final_answer></final_answer>.")
NUDGE = "Continue: take an action with one of the tags, or give your answer inside <final_answer></final_answer>."


@dataclass
class EpisodeConfig:
    max_actions: int = 50
    max_total_tokens: int = 81_920
    retrieval_k: int = 5
    fold_enabled: bool = True
    tool_mode: str = "open_set"
    sampling: SamplingParams = field(default_factory=SamplingParams)
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    search_enabled: bool = True
    upfront_retrieval: bool = False
    answer_now_tokens: int = 1024
    want_logprobs: bool = True

    def __post_init__(self):
        if self.max_actions < 1:
            raise ValueError("max_actions must be >= 1")
        if self.tool_mode not in MODES:
            raise ValueError(f"tool_mode must be one of {MODES}")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1")


@dataclass
class EpisodeTask:
    question: str
    task_id: str = ""
    gold_tools: list[ToolDoc] = field(default_factory=list)


@dataclass
class Backends:
    main: object
    aux: object = None
    tools: ToolBackends | None = None

    def tool_backends(self) -> ToolBackends:
        if self.tools is None:
            self.tools = ToolBackends(aux=self.aux)
        return self.tools


def _docs_block(docs) -> str:
    return "\n".join(json.dumps(d.function_definition(), ensure_ascii=False) for d in docs)


def system_prompt(task: EpisodeTask, registry: ToolRegistry, config: EpisodeConfig) -> str:
    parts = [load_prompt("agent_system.v1.txt").template.strip()]
    if config.tool_mode == "labeled":
        parts.append("You can call these tools (function definitions):\n" + _docs_block(task.gold_tools))
    elif config.upfront_retrieval:
        hits = registry.search(task.question, config.retrieval_k)
        parts.append("Tools retrieved for this task (function definitions):\n"
                     + _docs_block(registry.docs[n] for n in hits.names))
    if not config.search_enabled:
        parts.append("Tool search is disabled; use only the tools listed above.")
    return "\n\n".join(parts)


class _Episode:
    def __init__(self, task, registry, backends, config, created_at):
        self.task, self.registry, self.backends, self.config = task, registry, backends, config
        self.traj = Trajectory(task.question, system_prompt(task, registry, config), task.task_id,
                               fold_enabled=config.fold_enabled, mode=config.tool_mode, created_at=created_at)
        self.segments = [("system", self.traj.instruction), ("user", task.question)]
        self.assistant = ""
        self.stream_pos = 0
        self.ordinal = 1
        self.turns = 0
        self.tok_starts: list[int] = []
        self.stops = [s for s in ACTION_STOP_SEQUENCES if config.fold_enabled or s != FOLD_TOKEN]
        self.actionable = ACTION_KINDS if config.fold_enabled else ACTION_KINDS - {MEMORY_FOLD}

    # -- generation ------------------------------------------------------

    def _record(self, text: str, logprobs):
        if not text:
            return
        lp = None
        if logprobs:
            lp = logprobs[0] if len(logprobs) == 1 else float(sum(logprobs))
        self.tok_starts.append(self.stream_pos)
        self.traj.generated_tokens.append((text, lp))
        self.stream_pos += len(text)

    def _token_span(self, span) -> tuple[int, int]:
        starts = self.tok_starts
        lo = bisect.bisect_right(starts, span[0]) - 1
        hi = bisect.bisect_left(starts, span[1])
        return max(lo, 0), hi

    def _generate(self, segments, max_tokens, stops):
        """Stream one generation; stop consuming at the first actionable event."""
        params = SamplingParams(max_tokens=max_tokens, temperature=self.config.sampling.temperature,
                                top_p=self.config.sampling.top_p, top_k=self.config.sampling.top_k,
                                repetition_penalty=self.config.sampling.repetition_penalty,
                                stop_sequences=list(stops))
        req = GenerationRequest(segments, params, self.config.want_logprobs)
        scanner = Scanner(offset=self.stream_pos, ordinal=self.ordinal)
        kept = []
        action = None
        stream = self.backends.main.generate(req)
        try:
            for chunk in stream:
                start = self.stream_pos
                events = scanner.feed(chunk.text)
                hit = next((e for e in events if e.kind in self.actionable), None)
                text = chunk.text if hit is None else chunk.text[: hit.span[1] - start]
                self._record(text, chunk.logprobs)
                kept.append(text)
                if hit is not None:
                    action = hit
                    break
        finally:
            close = getattr(stream, "close", None)
            if close:
                close()
        if action is None:
            scanner.finalize()
        self.ordinal = action.ordinal + 1 if action else scanner.next_ordinal
        return "".join(kept), action

    # -- action handlers -----------------------------------------------------

    def _search(self, payload: str) -> tuple[Observation, str]:
        if not self.config.search_enabled:
            return Observation(TOOL_SEARCH_RESULT, "tool_search is disabled in this mode; use the listed tools"), "error"
        try:
            hits = self.registry.search(payload.strip(), self.config.retrieval_k)
        except (EmptyIndex, RuntimeError) as e:
            return Observation(TOOL_SEARCH_RESULT, f"tool_search failed: {e}"), "error"
        except ValueError as e:
            return Observation(TOOL_SEARCH_RESULT, f"tool_search failed: {e}"), "error"
        body = _docs_block(self.registry.docs[n] for n in hits.names)
        body = summarize(self.backends.aux, body, TOOL_DOC_THRESHOLD, what="tool documentation")
        return Observation(TOOL_SEARCH_RESULT, body), "ok"

    def _call(self, payload: str) -> tuple[Observation, str]:
        try:
            call = parse_tool_call(payload)
        except MalformedCall as e:
            return Observation(TOOL_CALL_RESULT, f"validation_error: malformed call: {e.reason}"), "validation_error"
        result = dispatch(self.registry, call, self.backends.tool_backends(), self.config.timeout_ms)
        text = summarize(self.backends.aux, result.observation_text(), TOOL_RESULT_THRESHOLD)
        return Observation(TOOL_CALL_RESULT, text), result.status

    def _fold(self, step_index: int) -> str:
        context = render_prompt(self.segments + [("assistant", self.assistant)])
        try:
            snap = fold(self.traj, context, self.backends.aux, folded_at_step=step_index)
        except FoldRejected as e:
            log.info("fold at step %d rejected: %s", step_index, e)
            return "rejected"
        self.traj.folds.append((step_index, snap.to_dict()))
        self.segments = restart_context(self.traj.instruction, self.task.question, snap)[:2]
        self.assistant = ""
        return "ok"

    # -- loop ------------------------------------------------------------------

    def _salvage(self):
        segments = self.segments + [("assistant", self.assistant), ("user", ANSWER_NOW), ("assistant", "")]
        try:
            text, _ = self._generate(segments, self.config.answer_now_tokens, ["</final_answer>"])
        except Exception as e:  # salvage is best effort
            log.info("answer-now generation failed: %s", e)
            return
        events, _ = scan(text)
        answers = [e for e in events if e.kind == FINAL_ANSWER]
        if answers:
            self.traj.final_answer = answers[0].payload.strip()

    def run(self) -> Trajectory:
        cfg, traj = self.config, self.traj
        while True:
            if traj.tokens_used >= cfg.max_total_tokens:
                traj.termination = "token_limit"
                self._salvage()
                break
            if self.turns >= cfg.max_actions:
                traj.termination = "action_limit"
                self._salvage()
                break
            segments = self.segments + [("assistant", self.assistant)]
            budget = min(cfg.sampling.max_tokens, cfg.max_total_tokens - traj.tokens_used)
            try:
                text, action = self._generate(segments, budget, self.stops)
            except ContextOverflow as e:
                log.info("context overflow: %s", e)
                traj.termination = "token_limit"
                break
            except BackendUnavailable as e:
                log.warning("main backend unavailable: %s", e)
                traj.termination = "backend_error"
                break
            self.assistant += text
            if action is None:
                self.turns += 1
                self.segments = self.segments + [("assistant", self.assistant), ("user", NUDGE)]
                self.assistant = ""
                continue
            step = Step(action, token_span=self._token_span(action.span))
            traj.steps.append(step)
            if action.kind == FINAL_ANSWER:
                traj.final_answer = action.payload.strip()
                traj.termination = "answered"
                break
            self.turns += 1
            if action.kind == TOOL_SEARCH:
                step.observation, step.status = self._search(action.payload)
            elif action.kind == TOOL_CALL:
                step.observation, step.status = self._call(action.payload)
            else:
                step.status = self._fold(len(traj.steps))
            if step.observation is not None:
                self.assistant += render_observation(step.observation)
        return traj


def run_episode(task: EpisodeTask, registry: ToolRegistry, backends: Backends,
                config: EpisodeConfig | None = None, created_at: str = "") -> Trajectory:
    config = config or EpisodeConfig()
    if config.tool_mode == "open_set" and (config.search_enabled or config.upfront_retrieval):
        if registry.index is None:
            raise EmptyIndex("open_set mode needs an indexed registry")
    return _Episode(task, registry, backends, config, created_at).run()


def answer_of(traj: Trajectory) -> str | None:
    return traj.final_answer if traj.termination == "answered" else None


def transcript(traj: Trajectory) -> str:
    """Generated text with observations and fold markers spliced back in."""
    text = traj.generated_text
    inserts = []
    for i, s in enumerate(traj.steps):
        if s.observation is not None:
            inserts.append((s.action.span[1], i, "\n" + render_observation(s.observation) + "\n"))
    for step_index, _ in traj.folds:
        s = traj.steps[step_index - 1]
        inserts.append((s.action.span[1], step_index - 1, f"\n[memory folded after step {step_index}]\n"))
    out, pos = [], 0
    for at, _, block in sorted(inserts, key=lambda t: (t[0], t[1])):
        out.append(text[pos:at])
        out.append(block)
        pos = at
    out.append(text[pos:])
    header = f"Question: {traj.question}\n\n"
    footer = f"\n\n[termination: {traj.termination}; actions: {traj.actions_used}; tokens: {traj.tokens_used}]\n"
    return header + "".join(out) + footer


def transcript_actions(text: str) -> list[tuple[str, str]]:
    """Action sequence recovered from a transcript (for consistency checks)."""
    events, _ = scan(text)
    return [(e.kind, e.payload) for e in events if e.kind in ACTION_KINDS]
