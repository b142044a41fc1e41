import json
from pathlib import Path

import numpy as np
import pytest

from imap.envs import CoopMatrixGame
from imap.policy import PolicyBundle, PpoConfig
from imap.reward_model import ImplicitRewardModel, LinearMixer
from imap.rollout import collect

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name: str):
    path = FIXTURES / name
    return json.loads(path.read_text()) if path.suffix == ".json" else path.read_text()


def small_setup(seed: int = 0, episodes: int = 6, hidden=(8, 8), standardize: bool = False):
    """Matrix-game bundle, reward model with a random mixer, and a collected batch."""
    rng = np.random.default_rng(seed)
    env = CoopMatrixGame()
    bundle = PolicyBundle(env.spec, PpoConfig(standardize=standardize), hidden, rng)
    model = ImplicitRewardModel(env.spec, hidden, rng=rng)
    model.mixer = LinearMixer.from_effective(rng.uniform(0.3, 2.0, size=2), float(rng.normal()))
    batch = collect(CoopMatrixGame, bundle.actors, episodes, seed)
    return env, bundle, model, batch


@pytest.fixture
def setup():
    return small_setup()


# acceptance verdict lines, filled by test_acceptance.py
AC_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if AC_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(AC_RESULTS, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
