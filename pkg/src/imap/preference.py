"""Preference pairs from episodic returns, an LLM judge, or simulated BT noise."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx
import numpy as np

from .envs import Trajectory

logger = logging.getLogger(__name__)

SOURCES = ("rule", "llm", "simulated", "tie-skipped")


@dataclass(frozen=True, eq=False)
class PreferencePair:
    """``winner`` is preferred over ``loser``."""

    winner: Trajectory
    loser: Trajectory
    source: str = "rule"
    confidence: float | None = None

    def __post_init__(self):
        if self.winner is self.loser:
            raise ValueError("a trajectory cannot be compared with itself")
        if self.source not in SOURCES:
            raise ValueError(f"unknown preference source {self.source!r}")
        if self.source == "rule" and not self.winner.episodic_return > self.loser.episodic_return:
            raise ValueError("rule pairs need a strictly higher winner return")


class PreferenceBuffer:
    """FIFO ring buffer of preference pairs."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[PreferencePair] = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, pairs: Iterable[PreferencePair]) -> None:
        for p in pairs:
            self._items.append(p)
            self.inserted += 1

    def sample(self, k: int, rng: np.random.Generator) -> list[PreferencePair]:
        if k >= len(self._items):
            return list(self._items)
        idx = rng.choice(len(self._items), size=k, replace=False)
        items = self._items
        return [items[i] for i in sorted(idx)]


def candidate_pairs(
    trajectories: Sequence[Trajectory], max_pairs: int, rng: np.random.Generator
) -> list[tuple[Trajectory, Trajectory]]:
    """Up to ``max_pairs`` distinct unordered pairs drawn without replacement."""
    n = len(trajectories)
    total = n * (n - 1) // 2
    if total == 0 or max_pairs <= 0:
        return []
    picks = np.sort(rng.choice(total, size=min(max_pairs, total), replace=False))
    # decode the k-th pair (i < j) in row-major order of the upper triangle
    row_start = np.array([i * n - i * (i + 1) // 2 for i in range(n)])
    out = []
    for k in picks:
        i = int(np.searchsorted(row_start, k, side="right") - 1)
        j = int(k - row_start[i] + i + 1)
        out.append((trajectories[i], trajectories[j]))
    return out


def rule_label(a: Trajectory, b: Trajectory) -> PreferencePair | None:
    if a.episodic_return > b.episodic_return:
        return PreferencePair(a, b, "rule")
    if b.episodic_return > a.episodic_return:
        return PreferencePair(b, a, "rule")
    return None


def make_pairs_rule(
    trajectories: Sequence[Trajectory], max_pairs: int, rng: np.random.Generator
) -> list[PreferencePair]:
    """Order sampled pairs by episodic return; ties carry no information and are dropped."""
    pairs = (rule_label(a, b) for a, b in candidate_pairs(trajectories, max_pairs, rng))
    return [p for p in pairs if p is not None]


# --- prompts ----------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    game: str = "a cooperative multi-agent game"
    team: str = "a team of cooperating agents"
    situation: str = "The agents act together and are scored only when the episode ends."
    objective: str = "Obtain the highest possible team outcome."
    notice: str = "Prefer the trajectory with the better team outcome; when outcomes are similar, prefer the shorter one."
    statistics: tuple[tuple[str, str], ...] = ()


SCENARIOS: dict[str, Scenario] = {
    "coop_matrix": Scenario(
        name="coop_matrix",
        game="the Cooperative Matrix Game",
        team="two agents with three actions each",
        situation="At every step both agents choose an action and the team earns a hidden payoff that depends on the joint choice.",
        objective="Coordinate on the highest-paying joint action at every step.",
        notice="Prefer the trajectory whose agents picked the best joint action more often and earned the larger total payoff.",
        statistics=(
            ("agent_best_action_hits", "Steps Each Agent Chose Its Part Of The Best Joint Action"),
            ("joint_best_action_hits", "Steps With The Best Joint Action"),
            ("total_payoff", "Total Team Payoff"),
        ),
    ),
    "grid_gather": Scenario(
        name="grid_gather",
        game="the Grid Gather game",
        team="agents moving on a small grid, each seeing only its immediate surroundings",
        situation="Items are scattered over the grid and an agent picks one up by stepping onto it.",
        objective="Collect every item as quickly as possible.",
        notice="Prefer the trajectory that collected more items; when both collected the same number, prefer the shorter one.",
        statistics=(
            ("items_collected_per_agent", "Items Collected By Each Agent"),
            ("items_remaining", "Items Left On The Grid"),
            ("total_items_collected", "Total Items Collected"),
        ),
    ),
}


class MissingStatistic(KeyError):
    pass


@dataclass(frozen=True)
class TrajectorySummary:
    stats: Mapping[str, Any]
    total_steps: int

    @classmethod
    def of(cls, traj: Trajectory) -> "TrajectorySummary":
        stats = {k: v for k, v in traj.metadata.items() if k != "steps"}
        return cls(stats, int(traj.metadata.get("steps", len(traj))))


def _fmt(value: Any) -> str:
    if isinstance(value, (list, tuple, np.ndarray)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.3f}"
    return str(value)


def _trajectory_block(k: int, summary: TrajectorySummary, stats) -> str:
    lines = [f"[Trajectory {k}]", "1. Final State Information"]
    for j, (key, label) in enumerate(stats, start=1):
        lines.append(f"    {j}) {label} : {_fmt(summary.stats[key])}")
    lines.append(f"2. Total Number of Steps : {summary.total_steps}")
    return "\n".join(lines)


def build_prompt(
    s1: TrajectorySummary, s2: TrajectorySummary, scenario: Scenario | str
) -> str:
    """Render the pairwise judging prompt for two trajectory summaries."""
    if isinstance(scenario, str):
        scenario = SCENARIOS.get(scenario) or Scenario(name=scenario)
    stats = scenario.statistics or tuple((k, k.replace("_", " ").title()) for k in s1.stats)
    missing = [
        f"trajectory {k}: {key}"
        for k, s in ((1, s1), (2, s2))
        for key, _ in stats
        if key not in s.stats
    ]
    if missing:
        raise MissingStatistic("missing statistics: " + "; ".join(missing))
    header = (
        f"You are a fair and careful judge of team play in {scenario.game}. "
        "Be as useful as you can and stay truthful.\n"
        "If you are not sure about something, do not invent information.\n"
        f"Please evaluate a scenario from {scenario.game}. Judge how much the actions "
        "taken by the agents contributed to the team's success.\n"
        "\n"
        "Scenario details:\n"
        "\n"
        f"- Scenario : {scenario.name}\n"
        f"- Team Configuration : {scenario.team}\n"
        f"- Situation Description : {scenario.situation}\n"
        f"- Objective : {scenario.objective}\n"
        f"* Important Notice : {scenario.notice}\n"
        "\n"
        "Two trajectories follow, each described by its final state and its length. "
        "Choose the better one from these outcomes."
    )
    footer = (
        "Which is better, [Trajectory 1] or [Trajectory 2], given the information above? "
        "Output #1 if [Trajectory 1] is better and #2 if [Trajectory 2] is better. "
        "If they are too close to call, output #0.\n"
        "\n"
        "Reply with the answer only, no explanation."
    )
    return "\n\n".join(
        [header, _trajectory_block(1, s1, stats), _trajectory_block(2, s2, stats), footer]
    )


_HASH_LABEL = re.compile(r"#\s*([012])(?!\d)")
_BARE_LABEL = re.compile(r"(?<![\w.#])([012])(?![\w.])")


def parse_label(text: str) -> int | None:
    """First ``#1``/``#2``/``#0`` in ``text``, else the first bare 0/1/2 token."""
    m = _HASH_LABEL.search(text) or _BARE_LABEL.search(text)
    return int(m.group(1)) if m else None


# --- LLM judge --------------------------------------------------------------


@dataclass
class LlmEndpoint:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = "IMAP_LLM_API_KEY"
    timeout: float = 30.0
    max_concurrency: int = 4
    audit_path: str | None = None

    @classmethod
    def from_env(cls, **overrides) -> "LlmEndpoint":
        base = os.environ.get("IMAP_LLM_BASE_URL")
        if base and "base_url" not in overrides:
            overrides["base_url"] = base
        return cls(**overrides)


class LlmResponseError(RuntimeError):
    pass


class LlmLabeler:
    """Ask a chat-completions endpoint which of two trajectories is better.

    Failures (transport errors, timeouts, unparseable replies) never abort
    labelling: the pair falls back to the return-based rule and
    ``fallbacks`` is incremented.
    """

    def __init__(
        self,
        endpoint: LlmEndpoint,
        scenario: Scenario | str,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.scenario = scenario
        self.client = client or httpx.Client(timeout=endpoint.timeout)
        self.fallbacks = 0
        self.skipped = 0
        self._lock = threading.Lock()

    def _audit(self, record: dict) -> None:
        if not self.endpoint.audit_path:
            return
        record = {"time": datetime.now(timezone.utc).isoformat(), **record}
        with self._lock, open(self.endpoint.audit_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def query(self, prompt: str) -> str:
        payload = {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {}
        key = os.environ.get(self.endpoint.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self.client.post(
                url, json=payload, headers=headers, timeout=self.endpoint.timeout
            )
            resp.raise_for_status()
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            self._audit({"request": payload, "error": f"{type(exc).__name__}: {exc}"})
            raise LlmResponseError(str(exc)) from exc
        self._audit({"request": payload, "response": body})
        return text

    def label(self, prompt: str) -> int:
        """Label in {1, 2, 0}; raises :class:`LlmResponseError` on failure."""
        text = self.query(prompt)
        label = parse_label(text)
        if label is None:
            raise LlmResponseError(f"no label found in reply {text[:80]!r}")
        return label

    def _judge(self, a: Trajectory, b: Trajectory) -> PreferencePair | None:
        prompt = build_prompt(TrajectorySummary.of(a), TrajectorySummary.of(b), self.scenario)
        try:
            label = self.label(prompt)
        except LlmResponseError as exc:
            logger.warning("LLM labelling failed (%s); using return-based rule", exc)
            with self._lock:
                self.fallbacks += 1
            return rule_label(a, b)
        if label == 0:
            with self._lock:
                self.skipped += 1
            return None
        return PreferencePair(a, b, "llm") if label == 1 else PreferencePair(b, a, "llm")

    def label_pairs(
        self, candidates: Sequence[tuple[Trajectory, Trajectory]]
    ) -> list[PreferencePair]:
        workers = max(1, self.endpoint.max_concurrency)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda ab: self._judge(*ab), candidates))
        return [p for p in results if p is not None]


def llm_label(prompt: str, endpoint: LlmEndpoint, client: httpx.Client | None = None) -> int:
    return LlmLabeler(endpoint, "", client).label(prompt)


# --- simulated Bradley-Terry labels -----------------------------------------


def gumbel_preferences(
    true_a: np.ndarray, true_b: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """True where ``a`` wins: ``R*(a) + e_a >= R*(b) + e_b`` with i.i.d. Gumbel noise."""
    true_a = np.asarray(true_a, dtype=np.float64)
    noise = rng.gumbel(size=(2,) + true_a.shape)
    return true_a + noise[0] >= np.asarray(true_b, dtype=np.float64) + noise[1]


def logistic(x) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def simulate_bt_labels(
    candidates: Sequence[tuple[Trajectory, Trajectory]],
    seed: int,
    true_return=None,
) -> list[PreferencePair]:
    """Label candidate pairs by comparing Gumbel-perturbed ground-truth returns."""
    true_return = true_return or (lambda tr: tr.episodic_return)
    rng = np.random.default_rng(seed)
    a = np.array([true_return(x) for x, _ in candidates])
    b = np.array([true_return(y) for _, y in candidates])
    wins = gumbel_preferences(a, b, rng)
    return [
        PreferencePair(x, y, "simulated") if w else PreferencePair(y, x, "simulated")
        for (x, y), w in zip(candidates, wins)
    ]


def bt_win_rate_bounds(delta: float, n: int, k_sigma: float = 3.0) -> tuple[float, float]:
    p = 1.0 / (1.0 + math.exp(-delta))
    half = k_sigma * math.sqrt(p * (1.0 - p) / n)
    return p - half, p + half


def read_audit(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]
