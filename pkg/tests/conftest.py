import logging

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from amtft.agents import Artifacts
from amtft.artifacts import constant_policy
from amtft.envs.pd import PdParams, pd_game

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(autouse=True)
def _quiet_warnings():
    logging.getLogger("amtft").setLevel(logging.ERROR)
    yield


@pytest.fixture
def rpd():
    return pd_game(PdParams(w=2.0))


def pd_artifacts(game, coop=(1.0, 0.0), defect=(0.0, 1.0)):
    n = game.n_states
    return Artifacts(tuple(constant_policy(n, coop, "C", s) for s in (0, 1)),
                     tuple(constant_policy(n, defect, "D", s) for s in (0, 1)))


@pytest.fixture
def rpd_arts(rpd):
    return pd_artifacts(rpd)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
