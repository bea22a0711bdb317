from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from amtft import nn
from amtft.agents import Artifacts, ScriptedAgent, make_agent
from amtft.amtft import (COINS_AMTFT, AmTftConfig, AmTftMemory, ContractError, EXACT, RPD_AMTFT, amtft_act,
                         ExactTables, compute_punishment_k, estimate_debit, punishment_losses)
from amtft.artifacts import PolicyArtifact, constant_policy, table_policy
from amtft.envs.coins import CoinsParams, coins_game
from amtft.envs.pd import CC, CD, DD, PdParams, pd_game
from amtft.envs.tabular import TabularGame
from amtft.game import TerminationRule, run_episodes
from tests.conftest import pd_artifacts

C, D = 0, 1
EXACT_CFG = replace(RPD_AMTFT, debit_source=EXACT)


def test_config_validation():
    with pytest.raises(ContractError):
        AmTftConfig(alpha=1.0)
    with pytest.raises(ContractError):
        AmTftConfig(threshold=-1)
    with pytest.raises(ContractError):
        AmTftConfig(debit_source="oracle")


def test_compliant_partner_action_has_exactly_zero_debit(rpd, rpd_arts, rng):
    d, se = estimate_debit(rpd, np.array([CC, CC]), np.array([C, C]), rpd_arts, RPD_AMTFT, rng)
    assert np.array_equal(d, [0.0, 0.0]) and np.array_equal(se, [0.0, 0.0])


def test_deviation_against_all_c_costs_one_unit(rpd, rpd_arts, rng):
    # temptation 2 against cooperation 1, continuation unchanged
    d, se = estimate_debit(rpd, np.array([CC]), np.array([D]), rpd_arts, replace(RPD_AMTFT, n_rollouts=10), rng)
    assert d[0] == pytest.approx(1.0)
    assert se[0] == 0.0


def test_empty_rollout_budget_is_rejected(rpd, rpd_arts, rng):
    with pytest.raises(ContractError):
        estimate_debit(rpd, np.array([CC]), np.array([D]), rpd_arts, replace(RPD_AMTFT, horizon=0), rng)


def test_debit_is_unbiased_under_a_stochastic_cooperative_policy(rpd, rng):
    arts = pd_artifacts(rpd, coop=(0.8, 0.2))
    cfg = replace(RPD_AMTFT, n_rollouts=2000, p_comply=0.5)
    d, se = estimate_debit(rpd, np.array([CC]), np.array([D]), arts, cfg, rng)
    exact = ExactTables(rpd, arts, replace(cfg, debit_source=EXACT)).gains[1][CC, D]
    assert se[0] > 0
    assert abs(d[0] - exact) < 4 * se[0]


def test_standard_error_shrinks_like_inverse_root_of_rollouts(rpd):
    arts = pd_artifacts(rpd, coop=(0.8, 0.2))
    ses = []
    for B in (50, 800):
        cfg = replace(RPD_AMTFT, n_rollouts=B, p_comply=0.5)
        _, se = estimate_debit(rpd, np.full(20, CC), np.full(20, D), arts, cfg, np.random.default_rng(B))
        ses.append(se.mean())
    assert ses[0] / ses[1] == pytest.approx(4.0, rel=0.25)


def test_punishment_length_examples(rpd, rpd_arts, rng):
    # each punishment turn costs the partner one unit of cooperation payoff
    undiscounted = replace(RPD_AMTFT, discount=1.0, n_rollouts=4)
    assert compute_punishment_k(rpd, np.array([CC]), [2.0], rpd_arts, undiscounted, rng)[0] == 2
    assert compute_punishment_k(rpd, np.array([CC]), [2.0], rpd_arts, replace(undiscounted, discount=0.98), rng)[0] == 3
    assert compute_punishment_k(rpd, np.array([DD]), [4.0], rpd_arts, replace(undiscounted, discount=0.98), rng)[0] == 5


def test_punishment_losses_match_closed_form(rpd, rpd_arts, rng):
    cfg = replace(RPD_AMTFT, n_rollouts=2, k_max=6)
    losses = punishment_losses(rpd, np.array([CC]), rpd_arts, cfg, rng)[0]
    expected = [sum(0.98 ** t for t in range(k)) for k in range(7)]
    assert np.allclose(losses, expected)


def test_punishment_rejects_bad_targets(rpd, rpd_arts, rng):
    with pytest.raises(ContractError):
        compute_punishment_k(rpd, np.array([CC]), [0.0], rpd_arts, RPD_AMTFT, rng)
    with pytest.raises(ContractError):
        compute_punishment_k(rpd, np.array([CC]), [1.0], Artifacts(rpd_arts.coop), RPD_AMTFT, rng)


def test_unreachable_target_falls_back_to_cap(rpd, rpd_arts, rng):
    cfg = replace(RPD_AMTFT, n_rollouts=2, k_max=4)
    assert compute_punishment_k(rpd, np.array([CC]), [100.0], rpd_arts, cfg, rng)[0] == 4


@given(st.floats(0.01, 30.0), st.floats(0.01, 30.0))
def test_punishment_length_is_monotone_in_target(t1, t2):
    game = pd_game(PdParams(w=2.0))
    arts = pd_artifacts(game)
    cfg = replace(RPD_AMTFT, n_rollouts=2, k_max=60)
    lo, hi = sorted((t1, t2))
    ks = compute_punishment_k(game, np.array([CC, CC]), [lo, hi], arts, cfg, np.random.default_rng(0))
    assert ks[0] <= ks[1]


def test_single_step_meta_policy(rpd, rpd_arts, rng):
    mem = AmTftMemory.zeros(1)
    a, mem = amtft_act(rpd, mem, np.array([CC]), None, rpd_arts, EXACT_CFG, rng)
    assert a == C and mem.b[0] == 0
    # partner defected at CC: debit 1, target 2, three discounted turns needed
    a, mem = amtft_act(rpd, mem, np.array([CD]), (np.array([CC]), C, D), rpd_arts, EXACT_CFG, rng)
    assert a == D
    assert mem.b[0] == 2 and mem.W[0] == 0.0
    a, mem = amtft_act(rpd, mem, np.array([DD]), (np.array([CD]), D, D), rpd_arts, EXACT_CFG, rng, judge=False)
    assert a == D and mem.b[0] == 1


def test_debits_accumulate_below_threshold(rpd, rpd_arts, rng):
    cfg = replace(EXACT_CFG, threshold=2.5)
    mem = AmTftMemory.zeros(1)
    for expected in (1.0, 2.0):
        a, mem = amtft_act(rpd, mem, np.array([CD]), (np.array([CC]), C, D), rpd_arts, cfg, rng)
        assert a == C and mem.W[0] == pytest.approx(expected)
    a, mem = amtft_act(rpd, mem, np.array([CD]), (np.array([CC]), C, D), rpd_arts, cfg, rng)
    assert a == D and mem.W[0] == 0.0


def _run(game, arts, kind1, kind2, cfg, n=20, length=60, seed=0):
    a1 = make_agent(kind1, game, arts, 0, cfg)
    a2 = make_agent(kind2, game, arts, 1, cfg)
    batch = run_episodes(game, a1, a2, TerminationRule.fixed(length), n, seed)
    return batch, a1, a2


def test_infinite_threshold_never_punishes(rpd, rpd_arts):
    cfg = replace(EXACT_CFG, threshold=float("inf"))
    batch, agent, _ = _run(rpd, rpd_arts, "amtft", "alld", cfg)
    assert np.all(batch.actions[:, 0] == C)
    assert agent.trigger_count == 0


def test_punishes_a_defector_and_keeps_punishing(rpd, rpd_arts):
    batch, agent, _ = _run(rpd, rpd_arts, "amtft", "alld", EXACT_CFG)
    # judged only outside its own punishment: one C step, then a 3-turn D phase
    lane0 = batch.actions[batch.episode == 0, 0]
    assert list(lane0[:9]) == [C, D, D, D, C, D, D, D, C]
    assert agent.trigger_count > 0
    # the number of triggers never decreases with episode length
    _, agent2, _ = _run(rpd, rpd_arts, "amtft", "alld", EXACT_CFG, length=120)
    assert agent2.trigger_count >= agent.trigger_count


def test_two_agents_never_trigger_without_deviations(rpd, rpd_arts):
    batch, a1, a2 = _run(rpd, rpd_arts, "amtft", "amtft", EXACT_CFG)
    assert a1.trigger_count == 0 and a2.trigger_count == 0
    assert np.all(batch.actions == C)


def _twin_action_game():
    """One-state game where action 2 is an exact copy of action 0."""
    base = np.array([[1.0, -3.0], [2.0, 0.0]])
    M = np.zeros((3, 3))
    M[:2, :2] = base
    M[2], M[:, 2] = M[0], M[:, 0]
    R = np.stack([M, M.T])[:, None]
    P = np.ones((1, 3, 3, 1))
    return TabularGame(P, R, [1.0])


def test_outcome_equivalent_partner_carries_no_debit():
    game = _twin_action_game()
    coop = tuple(constant_policy(1, [1.0, 0.0, 0.0], "C", s) for s in (0, 1))
    defect = tuple(constant_policy(1, [0.0, 1.0, 0.0], "D", s) for s in (0, 1))
    arts = Artifacts(coop, defect)
    cfg = replace(RPD_AMTFT, n_rollouts=5)
    d, _ = estimate_debit(game, np.zeros(3, np.int64), np.array([0, 2, 1]), arts, cfg, np.random.default_rng(0))
    assert d[0] == 0.0 and d[1] == pytest.approx(0.0, abs=1e-12)
    assert d[2] == pytest.approx(1.0)
    # an action-matching trigger would punish the twin action; the value test does not
    twin = (coop[0], table_policy(np.array([[0.0, 0.0, 1.0]]), "C", 1))
    _, amt, _ = _run(game, Artifacts(twin, defect), "amtft", "allc", cfg, n=4, length=30)
    assert amt.trigger_count == 0
    partner = make_agent("allc", game, Artifacts(twin, defect), 1)
    out = run_episodes(game, make_agent("grim-strict", game, arts, 0), partner, TerminationRule.fixed(10), 2, 0)
    assert np.all(out.actions[out.t > 0, 0] == D)


def test_exact_source_requires_tabular_game():
    game = coins_game(CoinsParams(k=3))
    spec = nn.ConvSpec(k=3, base_channels=2)
    model = nn.build_model(spec)
    art = PolicyArtifact(model.init_params(np.random.default_rng(0)), spec, model.init_buffers(), "C", 0, {})
    with pytest.raises(ContractError):
        make_agent("amtft", game, Artifacts((art, art), (art, art)), 0, EXACT_CFG)


def test_debit_drift_is_zero_for_a_partner_following_the_cooperative_policy(rpd):
    arts = pd_artifacts(rpd, coop=(0.8, 0.2))
    # no probability floor, so every action is judged by value
    cfg = replace(EXACT_CFG, threshold=float("inf"), p_comply=1.0, model_partner=False)
    agent = make_agent("amtft", rpd, arts, 0, cfg)
    seen = []
    debits = agent.debits
    agent.debits = lambda *a: seen.append(debits(*a)) or seen[-1]
    run_episodes(rpd, agent, make_agent("allc", rpd, arts, 1), TerminationRule.fixed(1000), 50, 5)
    per_lane = np.sum(seen, axis=0)      # W drift of each game
    assert abs(per_lane.mean()) < 3 * per_lane.std(ddof=1) / np.sqrt(len(per_lane))
    assert np.concatenate(seen).std() > 0


def test_punishment_phase_bookkeeping(rpd, rpd_arts):
    arts = pd_artifacts(rpd, coop=(0.9, 0.1), defect=(0.3, 0.7))
    cfg = replace(EXACT_CFG, p_comply=0.5)
    agent = make_agent("amtft", rpd, arts, 0, cfg)
    seen = []
    orig = agent.act

    def act(state):
        before = agent.mem.b.copy(), agent.mem.partner_b.copy()
        a = orig(state)
        seen.append((before, agent.mem.b.copy(), agent.mem.W.copy()))
        return a

    agent.act = act
    run_episodes(rpd, agent, make_agent("alld", rpd, arts, 1), TerminationRule.fixed(80), 10, 2)
    for (b0, pb0), b1, _ in seen:
        assert np.all(b1 >= 0)
        assert np.array_equal(b1, np.maximum(b0 - 1, 0))
    # W is zero on every lane that is currently punishing
    assert all(np.all(W[b1 > 0] == 0) for _, b1, W in seen)
    for lanes, in_d in agent.phase_log:
        assert len(lanes) == len(in_d)


@given(st.lists(st.booleans(), min_size=5, max_size=60), st.floats(0.0, 4.0), st.floats(0.0, 4.0))
def test_raising_the_threshold_never_adds_punishments(trace, t1, t2):
    game = pd_game(PdParams(w=2.0))
    arts = pd_artifacts(game)
    lo, hi = sorted((t1, t2))
    counts = []
    for thr in (lo, hi):
        cfg = replace(EXACT_CFG, threshold=thr, model_partner=False)
        agent = make_agent("amtft", game, arts, 0, cfg)
        partner = ScriptedAgent(lambda t, s, rng: np.full(len(s), D if trace[t] else C), 1)
        run_episodes(game, agent, partner, TerminationRule.fixed(len(trace)), 1, 0)
        counts.append(agent.trigger_count)
    assert counts[0] >= counts[1]


def test_coins_debit_matches_a_high_replica_rollout_oracle():
    game = coins_game(CoinsParams(k=3))
    spec = nn.ConvSpec(k=3, base_channels=4)
    model = nn.build_model(spec)
    coop = tuple(PolicyArtifact(model.init_params(np.random.default_rng(s)), spec, model.init_buffers(), "C", s, {})
                 for s in (0, 1))
    arts = Artifacts(coop, coop)
    from amtft.envs.coins import LEFT, CoinsState
    # the partner steps onto the agent's coin; a floor of 0.99 judges every action by value
    state = CoinsState(np.array([[[0, 0], [1, 2]]]), np.array([[1, 1]]), np.array([1]))
    cfg = replace(COINS_AMTFT, p_comply=0.99)
    d, se = estimate_debit(game, state, np.array([LEFT]), arts, replace(cfg, n_rollouts=300), np.random.default_rng(1))
    d_ref, se_ref = estimate_debit(game, state, np.array([LEFT]), arts, replace(cfg, n_rollouts=10_000),
                                   np.random.default_rng(2))
    assert d_ref[0] > 0
    assert abs(d[0] - d_ref[0]) < 3 * np.hypot(se[0], se_ref[0])
