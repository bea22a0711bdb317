import numpy as np
import pytest

from amtft.agents import PolicyAgent, ScriptedAgent
from amtft.envs.pd import C, CC, D, DC, DD, START
from amtft.game import (
    Agent,
    ContractError,
    JointAction,
    TerminationRule,
    Trajectory,
    discounted_return,
    run_episode,
    run_episodes,
    step,
)


def test_step_mutual_cooperation(rpd, rng):
    res = step(rpd, np.array([CC]), JointAction(C, C), rng)
    assert res.rewards == (1.0, 1.0)
    assert res.state[0] == CC
    assert res.terminal is False


@pytest.mark.parametrize("s", [START, CC, DC, DD])
def test_step_mutual_defection_pays_nothing(rpd, rng, s):
    assert step(rpd, np.array([s]), JointAction(D, D), rng).rewards == (0.0, 0.0)


def test_step_defect_on_cooperator(rpd, rng):
    res = step(rpd, np.array([CC]), JointAction(D, C), rng)
    assert res.rewards == (2.0, -3.0)
    assert res.state[0] == DC


def test_step_rejects_invalid_action(rpd, rng):
    with pytest.raises(ContractError):
        step(rpd, np.array([CC]), JointAction(2, 0), rng)


def test_termination_rule_validation():
    with pytest.raises(ContractError):
        TerminationRule.geometric(1.0)
    with pytest.raises(ContractError):
        TerminationRule.geometric(0.0)
    with pytest.raises(ContractError):
        TerminationRule.fixed(0)
    assert TerminationRule.geometric(0.998).mean_length == pytest.approx(500.0)


def test_alld_vs_alld_fixed_horizon(rpd, rpd_arts):
    traj = run_episode(rpd, PolicyAgent(rpd, rpd_arts.defect[0], 0), PolicyAgent(rpd, rpd_arts.defect[1], 1),
                       TerminationRule.fixed(10), seed=3)
    assert len(traj) == 10
    assert np.all(traj.actions == D)
    assert traj.rewards.sum(0).tolist() == [0.0, 0.0]


def test_same_seed_gives_identical_batches(rpd):
    mixed = pd_mixed(rpd)
    term = TerminationRule.geometric(0.9)
    a = run_episodes(rpd, *mixed(), term, 30, seed=11)
    b = run_episodes(rpd, *mixed(), term, 30, seed=11)
    assert np.array_equal(a.actions, b.actions)
    assert np.array_equal(a.rewards, b.rewards)
    assert np.array_equal(a.states, b.states)


def pd_mixed(game):
    from amtft.artifacts import constant_policy

    def make():
        return (PolicyAgent(game, constant_policy(5, [0.6, 0.4], player=0), 0),
                PolicyAgent(game, constant_policy(5, [0.3, 0.7], player=1), 1))
    return make


def test_replaying_a_trajectory_seed_reproduces_it(rpd):
    make = pd_mixed(rpd)
    term = TerminationRule.geometric(0.95)
    t1 = run_episode(rpd, *make(), term, seed=21)
    t2 = run_episode(rpd, *make(), term, seed=t1.seed)
    assert np.array_equal(t1.actions, t2.actions)
    assert np.array_equal(t1.states, t2.states)
    # consecutive states follow the recorded joint actions
    nxt = {(C, C): 1, (C, D): 2, (D, C): 3, (D, D): 4}
    for t in range(len(t1) - 1):
        assert t1.states[t + 1] == nxt[tuple(t1.actions[t])]


def test_geometric_mean_length_matches_continuation(rpd, rpd_arts):
    p = 0.9
    batch = run_episodes(rpd, PolicyAgent(rpd, rpd_arts.coop[0], 0), PolicyAgent(rpd, rpd_arts.coop[1], 1),
                         TerminationRule.geometric(p), 10_000, seed=5)
    lengths = batch.lengths()
    se = lengths.std(ddof=1) / np.sqrt(len(lengths))
    assert abs(lengths.mean() - 1 / (1 - p)) < 3 * se


def test_long_continuation_gives_mean_length_near_500(rpd, rpd_arts):
    batch = run_episodes(rpd, PolicyAgent(rpd, rpd_arts.coop[0], 0), PolicyAgent(rpd, rpd_arts.coop[1], 1),
                         TerminationRule.geometric(0.998), 2000, seed=6)
    lengths = batch.lengths()
    se = lengths.std(ddof=1) / np.sqrt(len(lengths))
    assert abs(lengths.mean() - 500) < 3 * se


class _Recorder(Agent):
    def __init__(self, seat, log):
        self.seat, self.log = seat, log

    def observe(self, prev_state, state, own_prev, partner_prev):
        self.log.append(("observe", self.seat, int(partner_prev[0])))

    def act(self, state):
        self.log.append(("act", self.seat))
        return np.array([self.seat])


def test_agents_observe_before_acting(rpd):
    log = []
    run_episodes(rpd, _Recorder(0, log), _Recorder(1, log), TerminationRule.fixed(3), 1, seed=0)
    assert log[:2] == [("act", 0), ("act", 1)]
    assert log[2:6] == [("observe", 0, 1), ("observe", 1, 0), ("act", 0), ("act", 1)]


def test_invalid_agent_action_aborts_with_diagnostic(rpd):
    bad = ScriptedAgent(lambda t, s, rng: np.full(len(s), 5 if t == 2 else 0), 0)
    ok = ScriptedAgent(lambda t, s, rng: np.zeros(len(s), int), 1)
    with pytest.raises(ContractError, match="t=2"):
        run_episodes(rpd, bad, ok, TerminationRule.fixed(5), 2, seed=9)


def test_seat_mismatch_is_rejected(rpd, rpd_arts):
    a = PolicyAgent(rpd, rpd_arts.coop[0], 0)
    with pytest.raises(ContractError):
        run_episodes(rpd, a, a, TerminationRule.fixed(2), 1, seed=0)


def _traj(rewards):
    r = np.asarray(rewards, float)
    return Trajectory(np.zeros(len(r), int), np.zeros((len(r), 2), int), r, "fixed", 0)


def test_discounted_return_truncated_geometric_series():
    # analytic infinite sum is 1 / (1 - 0.9) = 10; the 100-step tail is 0.9**100 * 10
    value = discounted_return(_traj(np.ones((100, 2))), 0.9, 0)
    assert abs(value - 10.0) < 3e-4


def test_discounted_return_trivial_cases():
    assert discounted_return(_traj(np.zeros((7, 2))), 0.5, 1) == 0.0
    assert discounted_return(_traj(np.ones((10, 2))), 1.0, 0) == 10.0
    with pytest.raises(ContractError):
        discounted_return(_traj(np.ones((3, 2))), 0.9, 2)


def test_reward_bound_is_respected(rpd):
    make = pd_mixed(rpd)
    batch = run_episodes(rpd, *make(), TerminationRule.geometric(0.95), 200, seed=4, check_rewards=True)
    assert np.abs(batch.rewards).max() <= rpd.reward_bound
