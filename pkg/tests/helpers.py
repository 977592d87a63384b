"""Scripted episodes and random rollout groups shared by several test files."""

import json
import math
import random

from toolloop.agent import Backends, EpisodeConfig, EpisodeTask, run_episode
from toolloop.backends import PolicyBackend, count_tokens, render_prompt
from toolloop.protocol import FOLD_TOKEN, ActionEvent, ToolCallRequest, render_call
from toolloop.registry import ToolDoc, ToolRegistry
from toolloop.trajectory import Step, Trajectory

PAGE_WORDS = 1100

#: lines printed by the acceptance suite at the end of the session
ACCEPTANCE_LINES: list[str] = []


def page_text(p: int) -> str:
    # a unique marker sits well past any excerpt length
    words = [f"p{p}w{j}" for j in range(PAGE_WORDS)]
    words.insert(PAGE_WORDS // 2, f"MARKER{p}X")
    return f"log page {p}: " + " ".join(words)


def log_registry() -> ToolRegistry:
    reg = ToolRegistry()
    reg.register_tool(ToolDoc("read_log", "read one page of the server log",
                              {"type": "object", "properties": {"page": {"type": "integer"}}, "required": ["page"]}),
                      lambda page: page_text(page))
    return reg


class LogReader:
    """Reads log pages; folds each time the live context passes ``fold_at`` tokens."""

    def __init__(self, pages: int, fold_at: int = 12_000, max_folds: int = 99):
        self.pages, self.fold_at, self.max_folds = pages, fold_at, max_folds
        self.next_page = 0
        self.folds = 0
        self.prompts: list[str] = []      # rendered prompt of every turn
        self.fold_turns: list[int] = []   # index into prompts where a fold was requested
        self.context_at_fold: list[int] = []

    def __call__(self, segments) -> str:
        text = render_prompt(segments)
        self.prompts.append(text)
        if count_tokens(text) >= self.fold_at and self.folds < self.max_folds:
            self.folds += 1
            self.fold_turns.append(len(self.prompts) - 1)
            self.context_at_fold.append(count_tokens(text))
            return f"The log is getting long, compressing. {FOLD_TOKEN}"
        if self.next_page >= self.pages:
            return "<final_answer>all pages read</final_answer>"
        p = self.next_page
        self.next_page += 1
        return f"Reading page {p}.\n{render_call(ToolCallRequest('read_log', {'page': p}))}"


def run_log_episode(pages: int = 9, fold_at: int = 12_000, max_folds: int = 99, aux=None, **cfg):
    reader = LogReader(pages, fold_at, max_folds)
    config = EpisodeConfig(tool_mode="labeled", search_enabled=False, **cfg)
    reg = log_registry()
    task = EpisodeTask("Read every page of the server log and report when done.", "log-task",
                       [reg.get("read_log")])
    traj = run_episode(task, reg, Backends(PolicyBackend(reader), aux=aux), config)
    return traj, reader


# -- random rollout groups for reward/advantage checks --------------------------

TOOL_POOL = ["alpha", "beta", "gamma", "delta"]


def random_call(rng: random.Random):
    return rng.choice(TOOL_POOL), {"x": rng.randint(0, 2)}


def random_trajectory(rng: random.Random, fold_enabled=None) -> Trajectory:
    n = rng.randint(6, 40)
    toks = [(f"t{i} ", rng.uniform(-3.0, -0.01)) for i in range(n)]
    steps = []
    pos = 0
    ordinal = 1
    while pos < n - 2 and rng.random() < 0.8:
        lo = rng.randint(pos, n - 2)
        hi = rng.randint(lo + 1, min(n, lo + 6))
        kind = rng.choice(["tool_call", "tool_call", "tool_search", "memory_fold"])
        if kind == "tool_call":
            name, args = random_call(rng)
            payload = json.dumps({"name": name, "arguments": args}) if rng.random() > 0.1 else "{broken"
        else:
            payload = "q" if kind == "tool_search" else ""
        steps.append(Step(ActionEvent(kind, payload, (lo, hi), ordinal), None, (lo, hi), "ok"))
        ordinal += 1
        pos = hi
    fe = rng.random() < 0.5 if fold_enabled is None else fold_enabled
    return Trajectory("q", steps=steps, generated_tokens=toks, final_answer=rng.choice(["a", "b", None]),
                      termination="answered", fold_enabled=fe)


def random_group(rng: random.Random, k: int = 8):
    group = [random_trajectory(rng) for _ in range(k)]
    gold = [random_call(rng) for _ in range(rng.randint(1, 4))]
    return group, gold


def oracle_report(group, gold_answer, gold_calls, call_w=1.0, fold_w=1.0, eps=0.2, new=None):
    """Scalar loops straight from the definitions."""
    k = len(group)
    successes = [1.0 if (t.final_answer or "").strip() == gold_answer and t.final_answer is not None else 0.0
              for t in group]
    mean = sum(successes) / k
    success_adv = [r - mean for r in successes]
    gold = [(n, json.dumps(a, sort_keys=True, separators=(",", ":"))) for n, a in gold_calls]
    direct = [t.tokens_used for t in group if not t.fold_enabled]
    action_rewards = []
    for t in group:
        j, correct = 0, 0
        for s in t.steps:
            if s.kind != "tool_call":
                continue
            try:
                obj = json.loads(s.action.payload)
                c = (obj["name"], json.dumps(obj.get("arguments", {}), sort_keys=True, separators=(",", ":")))
            except ValueError:
                continue
            if j < len(gold) and c == gold[j]:
                correct += 1
                j += 1
        pref = 0.0
        if t.fold_enabled and direct:
            ld = sum(direct) / len(direct)
            pref = (ld - t.tokens_used) / (ld + t.tokens_used)
        action_rewards.append(call_w * correct + fold_w * pref)
    m2 = sum(action_rewards) / k
    action_adv = [r - m2 for r in action_rewards]
    per_traj = []
    for i, t in enumerate(group):
        mask = [0] * t.tokens_used
        for s in t.steps:
            if s.kind in ("tool_call", "memory_fold"):
                for p in range(s.token_span[0], s.token_span[1]):
                    mask[p] = 1
        terms = []
        for p, (_, old) in enumerate(t.generated_tokens):
            adv = success_adv[i] + mask[p] * action_adv[i]
            lp_new = old if new is None else new[i][p]
            rho = math.exp(lp_new - old)
            clipped = min(max(rho, 1 - eps), 1 + eps)
            terms.append(min(rho * adv, clipped * adv))
        per_traj.append(sum(terms) / len(terms))
    return success_adv, action_adv, sum(per_traj) / k
