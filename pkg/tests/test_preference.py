import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imap.envs import Trajectory
from imap.preference import (
    LlmEndpoint,
    LlmLabeler,
    MissingStatistic,
    PreferenceBuffer,
    PreferencePair,
    TrajectorySummary,
    bt_win_rate_bounds,
    build_prompt,
    gumbel_preferences,
    llm_label,
    make_pairs_rule,
    parse_label,
    read_audit,
    rule_label,
)

from conftest import load_fixture
from make_fixtures import prompt_summaries


def traj(ret, **meta):
    stats = {"agent_best_action_hits": [0, 0], "joint_best_action_hits": 0, "total_payoff": ret}
    return Trajectory([], episodic_return=ret, metadata={"steps": 5, **stats, **meta})


def test_rule_label_orders_by_return():
    a, b = traj(3.0), traj(1.0)
    p = rule_label(a, b)
    assert p.winner is a and p.loser is b
    assert rule_label(b, a).winner is a


def test_tie_emits_nothing():
    assert rule_label(traj(2.0), traj(2.0)) is None


@given(st.lists(st.integers(0, 5), min_size=10, max_size=10), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_rule_pairs_consistent_with_returns(returns, seed):
    trajs = [traj(float(r)) for r in returns]
    pairs = make_pairs_rule(trajs, 20, np.random.default_rng(seed))
    assert len(pairs) <= 20
    for p in pairs:
        assert p.winner.episodic_return > p.loser.episodic_return
    keys = [frozenset((p.winner.uid, p.loser.uid)) for p in pairs]
    assert len(set(keys)) == len(keys)


def test_pair_validation():
    a = traj(1.0)
    with pytest.raises(ValueError):
        PreferencePair(a, a)
    with pytest.raises(ValueError):
        PreferencePair(traj(0.0), traj(1.0), "rule")


def test_buffer_fifo_capacity():
    buf = PreferenceBuffer(3)
    pairs = [PreferencePair(traj(float(k + 1)), traj(0.0)) for k in range(5)]
    buf.add(pairs)
    assert len(buf) == 3 and buf.inserted == 5
    assert [p.winner.episodic_return for p in buf] == [3.0, 4.0, 5.0]


def test_golden_prompt():
    s1, s2 = prompt_summaries()
    assert build_prompt(s1, s2, "coop_matrix") == load_fixture("prompt_coop_matrix.txt")


def test_prompt_structure():
    s1, s2 = prompt_summaries()
    text = build_prompt(s1, s2, "coop_matrix")
    markers = [
        "Scenario details:",
        "- Scenario :",
        "- Team Configuration :",
        "- Situation Description :",
        "- Objective :",
        "* Important Notice :",
        "[Trajectory 1]",
        "1. Final State Information",
        "2. Total Number of Steps :",
        "[Trajectory 2]",
        "#1",
        "#2",
        "#0",
    ]
    positions = [text.index(m) for m in markers]
    assert positions == sorted(positions)


def test_identical_summaries_still_well_formed():
    s1, _ = prompt_summaries()
    text = build_prompt(s1, s1, "coop_matrix")
    assert text.count("Total Team Payoff : 3.912") == 2


def test_unicode_scenario_name_preserved():
    s = TrajectorySummary({"score": 1}, 3)
    assert "- Scenario : Ωmega-竞技场" in build_prompt(s, s, "Ωmega-竞技场")


def test_missing_statistic():
    s1, _ = prompt_summaries()
    with pytest.raises(MissingStatistic):
        build_prompt(s1, TrajectorySummary({}, 5), "coop_matrix")


@pytest.mark.parametrize(
    "text,label",
    [("#1", 1), ("Answer: #0", 0), ("#2", 2), ("I pick # 2.", 2), ("2", 2), ("none", None), ("#12", None)],
)
def test_parse_label(text, label):
    assert parse_label(text) == label


def mock_client(replies):
    """Client whose chat endpoint returns ``replies`` in order (strings or status codes)."""
    seen = []
    it = iter(replies)

    def handler(request):
        seen.append(json.loads(request.content))
        r = next(it)
        if isinstance(r, int):
            return httpx.Response(r)
        return httpx.Response(200, json={"choices": [{"message": {"content": r}}]})

    return httpx.Client(transport=httpx.MockTransport(handler)), seen


def test_llm_label_reads_reply():
    client, seen = mock_client(["#1"])
    assert llm_label("prompt", LlmEndpoint(), client) == 1
    assert seen[0]["messages"][0]["content"] == "prompt"


def test_llm_pairs_and_fallback(tmp_path):
    a, b, c, d = traj(1.0), traj(2.0), traj(5.0), traj(0.0)
    client, _ = mock_client(["#1", "Answer: #0", "garbage", 500])
    ep = LlmEndpoint(max_concurrency=1, audit_path=str(tmp_path / "audit.jsonl"))
    labeler = LlmLabeler(ep, "coop_matrix", client)
    pairs = labeler.label_pairs([(a, b), (c, d), (b, d), (c, a)])
    # #1 keeps the LLM's (wrong) choice; #0 skips; the last two fall back to returns
    assert [(p.winner, p.loser, p.source) for p in pairs] == [(a, b, "llm"), (b, d, "rule"), (c, a, "rule")]
    assert labeler.fallbacks == 2 and labeler.skipped == 1
    audit = read_audit(tmp_path / "audit.jsonl")
    assert len(audit) == 4 and "error" in audit[3]


def test_llm_transport_failure_falls_back():
    def handler(request):
        raise httpx.ConnectError("refused")

    client = httpx.Client(transport=httpx.MockTransport(handler))
    labeler = LlmLabeler(LlmEndpoint(), "coop_matrix", client)
    pairs = labeler.label_pairs([(traj(1.0), traj(4.0))])
    assert pairs[0].winner.episodic_return == 4.0 and labeler.fallbacks == 1


def test_api_key_header(monkeypatch):
    monkeypatch.setenv("IMAP_LLM_API_KEY", "sekret")
    got = {}

    def handler(request):
        got["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "#2"}}]})

    llm_label("p", LlmEndpoint(), httpx.Client(transport=httpx.MockTransport(handler)))
    assert got["auth"] == "Bearer sekret"


def test_base_url_from_env(monkeypatch):
    monkeypatch.setenv("IMAP_LLM_BASE_URL", "http://judge:9/v1")
    assert LlmEndpoint.from_env().base_url == "http://judge:9/v1"


@pytest.mark.parametrize("delta", [0.0, math.log(3.0), -1.3, 2.2])
def test_gumbel_labels_are_logistic(delta):
    n = 100_000
    wins = gumbel_preferences(np.full(n, delta), np.zeros(n), np.random.default_rng(7))
    lo, hi = bt_win_rate_bounds(delta, n)
    assert lo <= wins.mean() <= hi
    if delta == math.log(3.0):
        assert 0.75 == pytest.approx(1 / (1 + math.exp(-delta)))
