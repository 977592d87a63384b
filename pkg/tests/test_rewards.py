import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolloop.rewards import (LengthMismatch, RewardSpec, action_mask, aggregate, compute_report,
                              exact_match_grader, group_advantages, match_calls, length_preference, length_preferences,
                              surrogate_loss, surrogate_terms, token_advantages)
from toolloop.trajectory import Trajectory
from helpers import oracle_report, random_group, random_trajectory


def test_worked_clip_example():
    # rho = 2, A = 1, eps = 0.2 -> min(2, 1.2) = 1.2
    _, terms = surrogate_loss([math.log(2.0)], [0.0], [1.0], 0.2)
    assert terms == [1.2]
    _, terms = surrogate_loss([math.log(2.0)], [0.0], [-1.0], 0.2)
    assert terms == [-2.0]


def test_pref_score_values():
    assert length_preference(3000, 1000) == 0.5
    assert length_preference(1234, 1234) == 0.0
    assert length_preference(1000, 3000) == -0.5
    with pytest.raises(ValueError):
        length_preference(0, 10)


def test_group_advantages_zero_mean():
    adv = group_advantages([1.0, 0.0, 0.0, 1.0, 1.0])
    assert adv == [0.4, -0.6, -0.6, 0.4, 0.4]
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_token_advantage_composition():
    assert token_advantages([0, 1, 1, 0], 0.5, 2.0) == [0.5, 2.5, 2.5, 0.5]
    assert token_advantages([0, 1], 0.5, 2.0, grpo_only=True) == [0.5, 0.5]


def test_match_calls_greedy():
    a, b, c = ("a", "{}"), ("b", "{}"), ("c", "{}")
    assert match_calls([a, c, b, b], [a, b]) == [1, 0, 1, 0]
    assert match_calls([b, a], [a, b]) == [0, 1]
    assert match_calls([None, a], [a]) == [0, 1]


def lcs(p, g):
    t = [[0] * (len(g) + 1) for _ in range(len(p) + 1)]
    for i in range(len(p)):
        for j in range(len(g)):
            t[i + 1][j + 1] = t[i][j] + 1 if p[i] is not None and p[i] == g[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from("abcd"), max_size=8), st.lists(st.sampled_from("abcd"), max_size=5))
def test_greedy_never_beats_lcs(pred, gold):
    greedy = sum(match_calls(pred, gold))
    assert greedy <= lcs(pred, gold)
    # when the gold chain is a prefix of the predictions, both agree
    assert sum(match_calls(gold + pred, gold)) == len(gold)


def test_argument_canonicalisation():
    t = Trajectory("q", fold_enabled=False)
    from toolloop.protocol import ActionEvent
    from toolloop.trajectory import Step
    t.steps = [Step(ActionEvent("tool_call", '{"name": "f", "arguments": {"n": 2.0, "b": "x"}}', (0, 1), 1))]
    t.generated_tokens = [("x", -1.0)]
    rep = compute_report([t, t], exact_match_grader("z"), [("f", {"b": "x", "n": 2})])
    assert rep.scores[0].call_correctness == [{"step": 0, "correct": 1}]


def test_pref_scores_pair_with_direct_mean():
    rng = random.Random(0)
    direct = [random_trajectory(rng, fold_enabled=False) for _ in range(3)]
    folded = [random_trajectory(rng, fold_enabled=True) for _ in range(2)]
    mean_direct = sum(t.tokens_used for t in direct) / 3
    got = length_preferences(direct + folded)
    assert got[:3] == [None] * 3
    assert got[3:] == [length_preference(mean_direct, t.tokens_used) for t in folded]
    assert length_preferences(folded) == [None, None]


def test_report_matches_oracle():
    rng = random.Random(11)
    for _ in range(200):
        group, gold = random_group(rng)
        new = [[lp + rng.uniform(-0.5, 0.5) for _, lp in t.generated_tokens] for t in group]
        rep = compute_report(group, exact_match_grader("a"), gold, RewardSpec(), new)
        success_adv, action_adv, loss = oracle_report(group, "a", gold, new=new)
        assert rep.success_adv == pytest.approx(success_adv, abs=1e-12)
        assert rep.action_adv == pytest.approx(action_adv, abs=1e-12)
        assert abs(rep.loss - loss) <= 1e-12


def test_aggregations_differ_as_expected():
    terms = [[1.0, 1.0, 1.0, 1.0], [0.0]]
    assert aggregate(terms, "trajectory-mean") == 0.5
    assert aggregate(terms, "token-mean") == 0.8
    assert aggregate(terms, "sum") == 2.0


def test_mask_search_option():
    rng = random.Random(5)
    t = next(t for t in (random_trajectory(rng) for _ in range(100)) if any(s.kind == "tool_search" for s in t.steps))
    assert sum(action_mask(t, include_search=True)) > sum(action_mask(t))


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        surrogate_terms([0.0], [0.0, 0.0], [1.0], 0.2)


def test_reward_spec_validation():
    with pytest.raises(ValueError):
        RewardSpec(call_weight=-1)
    with pytest.raises(ValueError):
        RewardSpec(aggregation="median")


def test_fd_slope_unclipped():
    old, a = -1.0, 0.7
    for new in (-1.05, -1.0, -0.9):
        rho = math.exp(new - old)
        h = 1e-6
        up = surrogate_terms([new + h], [old], [a], 0.2)[1][0]
        down = surrogate_terms([new - h], [old], [a], 0.2)[1][0]
        slope = (up - down) / (2 * h)
        assert abs(slope - rho * a) <= 1e-4 * abs(rho * a)


def test_token_table_rows():
    rng = random.Random(2)
    group, gold = random_group(rng, 3)
    rep = compute_report(group, exact_match_grader("a"), gold)
    lines = rep.token_table().splitlines()
    assert len(lines) == 1 + sum(t.tokens_used for t in group)
