"""Rollout rewards, group-relative advantages and the clipped surrogate objective.

For a group of K rollouts of one prompt, each rollout gets two rewards: a
task success score, and an action reward of
``call_weight * correct_calls + fold_weight * fold_preference``. Both are
centred on their group mean. A token's advantage is the success advantage,
plus the action advantage when the token belongs to a tool call or a fold.
The objective averages ``min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)``
with ``ratio = exp(new_logprob - old_logprob)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .protocol import MEMORY_FOLD, TOOL_CALL, TOOL_SEARCH
from .trajectory import Trajectory

AGGREGATIONS = ("sum", "token-mean", "trajectory-mean")


class LengthMismatch(ValueError):
    pass


@dataclass
class RewardSpec:
    call_weight: float = 1.0
    fold_weight: float = 1.0
    clip_epsilon: float = 0.2
    grpo_only: bool = False
    aggregation: str = "trajectory-mean"
    mask_search: bool = False

    def __post_init__(self):
        if self.call_weight < 0 or self.fold_weight < 0:
            raise ValueError("call_weight and fold_weight must be >= 0")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class TrajectoryScores:
    success: float
    call_correctness: list[dict]
    fold_preference: float | None
    action_reward: float


@dataclass
class AdvantageReport:
    success_adv: list[float]
    action_adv: list[float]
    per_token: list[list[tuple[int, int, float]]]
    loss: float
    per_token_loss_terms: list[float]
    scores: list[TrajectoryScores] = field(default_factory=list)
    ratios: list[list[float]] = field(default_factory=list)
    terms: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "success_adv": self.success_adv,
            "action_adv": self.action_adv,
            "per_token": [[list(t) for t in traj] for traj in self.per_token],
            "loss": self.loss,
            "per_token_loss_terms": self.per_token_loss_terms,
            "scores": [asdict(s) for s in self.scores],
        }

    def token_table(self) -> str:
        """Tab-separated per-token view: trajectory, token, mask, advantage, ratio, term."""
        lines = ["trajectory\ttoken\tmask\tadvantage\tratio\tterm"]
        for k, rows in enumerate(self.per_token):
            for (i, m, a), r, t in zip(rows, self.ratios[k], self.terms[k]):
                lines.append(f"{k}\t{i}\t{m}\t{a!r}\t{r!r}\t{t!r}")
        return "\n".join(lines) + "\n"


# -- rewards -----------------------------------------------------------------

def _normalize_numbers(obj):
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, float) and obj.is_integer():
        return int(obj)
    if isinstance(obj, dict):
        return {k: _normalize_numbers(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize_numbers(v) for v in obj]
    return obj


def canonical_arguments(arguments: dict) -> str:
    return json.dumps(_normalize_numbers(arguments), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def canonical_call(name: str, arguments: dict) -> tuple[str, str]:
    return name, canonical_arguments(arguments)


def exact_match_grader(gold_answer: str) -> Callable[[Trajectory], float]:
    gold = gold_answer.strip()

    def grade(traj: Trajectory) -> float:
        ans = traj.final_answer
        return 1.0 if ans is not None and ans.strip() == gold else 0.0
    return grade


def success_reward(traj: Trajectory, grader: Callable[[Trajectory], float]) -> float:
    r = float(grader(traj))
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"grader returned {r}, expected a score in [0, 1]")
    return r


def trajectory_calls(traj: Trajectory) -> list[tuple[int, tuple[str, str] | None]]:
    """(step index, canonical call or None for malformed) for every tool_call step."""
    out = []
    for i, s in enumerate(traj.steps):
        if s.kind != TOOL_CALL:
            continue
        c = s.call()
        out.append((i, None if c is None else canonical_call(c.name, c.arguments)))
    return out


def match_calls(predicted: Sequence, gold: Sequence) -> list[int]:
    """Greedy in-order matching: a call is correct iff it equals the next unmatched gold call."""
    flags, j = [], 0
    for p in predicted:
        if p is not None and j < len(gold) and p == gold[j]:
            flags.append(1)
            j += 1
        else:
            flags.append(0)
    return flags


def call_correctness(traj: Trajectory, gold_calls) -> list[dict]:
    gold = [canonical_call(n, a) for n, a in gold_calls]
    calls = trajectory_calls(traj)
    flags = match_calls([c for _, c in calls], gold)
    return [{"step": i, "correct": f} for (i, _), f in zip(calls, flags)]


def length_preference(len_direct: float, len_fold: float) -> float:
    if len_direct <= 0 or len_fold <= 0:
        raise ValueError("lengths must be positive")
    return (len_direct - len_fold) / (len_direct + len_fold)


def action_reward(n_correct: int, fold_preference: float | None, spec: RewardSpec) -> float:
    return spec.call_weight * n_correct + spec.fold_weight * (fold_preference if fold_preference is not None else 0.0)


def group_advantages(rewards: Sequence[float]) -> list[float]:
    if len(rewards) < 2:
        raise ValueError("a group needs at least two rollouts")
    mean = math.fsum(rewards) / len(rewards)
    return [r - mean for r in rewards]


def length_preferences(group: Sequence[Trajectory]) -> list[float | None]:
    """Pair each fold-enabled rollout with the mean length of the fold-disabled ones."""
    direct = [t.tokens_used for t in group if not t.fold_enabled]
    if not direct:
        return [None] * len(group)
    mean_direct = math.fsum(direct) / len(direct)
    out = []
    for t in group:
        if t.fold_enabled and t.tokens_used > 0 and mean_direct > 0:
            out.append(length_preference(mean_direct, t.tokens_used))
        else:
            out.append(None)
    return out


# -- token-level quantities ----------------------------------------------------------

def action_mask(traj: Trajectory, include_search: bool = False) -> list[int]:
    kinds = {TOOL_CALL, MEMORY_FOLD} | ({TOOL_SEARCH} if include_search else set())
    mask = [0] * len(traj.generated_tokens)
    for s in traj.steps:
        if s.kind in kinds:
            lo, hi = s.token_span
            for i in range(max(lo, 0), min(hi, len(mask))):
                mask[i] = 1
    return mask


def token_advantages(mask: Sequence[int], success_adv: float, action_adv: float, grpo_only: bool = False) -> list[float]:
    if grpo_only:
        return [success_adv] * len(mask)
    return [success_adv + action_adv if m else success_adv for m in mask]


def surrogate_terms(new_logprobs, old_logprobs, advantages, epsilon: float) -> tuple[list[float], list[float]]:
    if not (len(new_logprobs) == len(old_logprobs) == len(advantages)):
        raise LengthMismatch(f"lengths differ: {len(new_logprobs)}, {len(old_logprobs)}, {len(advantages)}")
    ratios, terms = [], []
    lo, hi = 1.0 - epsilon, 1.0 + epsilon
    for new, old, a in zip(new_logprobs, old_logprobs, advantages):
        rho = math.exp(new - old)
        terms.append(min(rho * a, min(max(rho, lo), hi) * a))
        ratios.append(rho)
    return ratios, terms


def surrogate_loss(new_logprobs, old_logprobs, advantages, epsilon: float = 0.2) -> tuple[float, list[float]]:
    """Token-mean clipped objective (to maximise) and its per-token terms."""
    _, terms = surrogate_terms(new_logprobs, old_logprobs, advantages, epsilon)
    return (math.fsum(terms) / len(terms) if terms else 0.0), terms


def aggregate(terms_per_traj: list[list[float]], how: str) -> float:
    if how == "token-mean":
        flat = [t for ts in terms_per_traj for t in ts]
        return math.fsum(flat) / len(flat) if flat else 0.0
    if how == "sum":
        per = [math.fsum(ts) for ts in terms_per_traj]
    else:
        per = [math.fsum(ts) / len(ts) if ts else 0.0 for ts in terms_per_traj]
    return math.fsum(per) / len(per) if per else 0.0


def old_logprobs(traj: Trajectory) -> list[float]:
    return [0.0 if lp is None else lp for _, lp in traj.generated_tokens]


def compute_report(group: Sequence[Trajectory], graders, gold_calls, spec: RewardSpec | None = None,
                   new_logprobs: Sequence[Sequence[float]] | None = None) -> AdvantageReport:
    """Everything a trainer needs for one group of K rollouts.

    ``graders`` is one grader or one per trajectory; ``gold_calls`` is one gold
    call list shared by the group. ``new_logprobs`` defaults to the recorded
    ones (ratio 1).
    """
    spec = spec or RewardSpec()
    k = len(group)
    if not callable(graders):
        if len(graders) != k:
            raise LengthMismatch("need one grader per trajectory")
        grader_list = list(graders)
    else:
        grader_list = [graders] * k
    successes = [success_reward(t, g) for t, g in zip(group, grader_list)]
    success_adv = group_advantages(successes)
    scores = []
    if spec.grpo_only:
        action_adv = [0.0] * k
        for r in successes:
            scores.append(TrajectoryScores(r, [], None, 0.0))
    else:
        prefs = length_preferences(group)
        action_rewards = []
        for t, r, sp in zip(group, successes, prefs):
            cc = call_correctness(t, gold_calls)
            ra = action_reward(sum(c["correct"] for c in cc), sp, spec)
            action_rewards.append(ra)
            scores.append(TrajectoryScores(r, cc, sp, ra))
        action_adv = group_advantages(action_rewards)

    per_token, ratios, terms = [], [], []
    for idx, t in enumerate(group):
        mask = action_mask(t, spec.mask_search)
        adv = token_advantages(mask, success_adv[idx], action_adv[idx], spec.grpo_only)
        old = old_logprobs(t)
        new = list(new_logprobs[idx]) if new_logprobs is not None else old
        rho, tm = surrogate_terms(new, old, adv, spec.clip_epsilon)
        per_token.append([(i, m, a) for i, (m, a) in enumerate(zip(mask, adv))])
        ratios.append(rho)
        terms.append(tm)
    loss = aggregate(terms, spec.aggregation)
    flat = [x for tm in terms for x in tm]
    return AdvantageReport(success_adv, action_adv, per_token, loss, flat, scores, ratios, terms)
