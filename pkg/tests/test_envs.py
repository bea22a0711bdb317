import numpy as np
import pytest
from hypothesis import given, strategies as st

from amtft.agents import ScriptedAgent
from amtft.envs import make_game
from amtft.envs.coins import (
    DOWN,
    LEFT,
    MOVES,
    RIGHT,
    UP,
    CoinsParams,
    CoinsState,
    coins_game,
    decode_coins,
    encode_coins,
    mismatch_rate,
    pickup_counts,
)
from amtft.envs.pd import C, CC, CD, D, DC, DD, START, PdParams, encode_pd, payoff_matrix, pd_game
from amtft.game import ContractError, TerminationRule, run_episodes
from amtft.artifacts import constant_policy
from amtft.oracles import deviation_gains, exact_q


# ---------------------------------------------------------------- rPD


def test_pd_transition_from_dc_with_cd(rpd, rng):
    nxt, r = rpd.step(np.array([DC]), np.array([C]), np.array([D]), rng)
    assert nxt[0] == CD
    assert r[0].tolist() == [-3.0, 2.0]


def test_pd_mutual_cooperation_from_every_state(rpd, rng):
    s = np.arange(5)
    nxt, r = rpd.step(s, np.zeros(5, int), np.zeros(5, int), rng)
    assert np.all(nxt == CC) and np.all(r == 1.0)


def test_pd_reward_tensor_for_w3_matches_hand_enumeration():
    game = pd_game(PdParams(w=3.0))
    hand = {(C, C): (1.0, 1.0), (C, D): (-4.5, 3.0), (D, C): (3.0, -4.5), (D, D): (0.0, 0.0)}
    for s in range(5):
        for (a1, a2), (r1, r2) in hand.items():
            assert game.R[0, s, a1, a2] == r1
            assert game.R[1, s, a1, a2] == r2
    assert game.P.shape == (5, 2, 2, 5)
    assert np.all(game.P.sum(-1) == 1.0)


def test_pd_sucker_defaults_to_one_and_a_half_w():
    assert PdParams(w=2.0).sucker == 3.0
    assert PdParams(w=2.0, s=1.0).sucker == 1.0
    assert payoff_matrix(PdParams(w=0.5))[0, C, D] == -0.75


def test_pd_start_state_options():
    assert pd_game().initial_state(3, None).tolist() == [START] * 3
    assert pd_game(PdParams(start="CC")).initial_state(2, None).tolist() == [CC] * 2
    with pytest.raises(ValueError):
        PdParams(start="DD")


def test_pd_seat_one_sees_swapped_roles(rpd):
    assert rpd.observe(np.array([CD, DC, CC, DD, START]), 1).tolist() == [DC, CD, CC, DD, START]


def test_encode_pd_one_hot():
    assert encode_pd(START).tolist() == [1, 0, 0, 0, 0]
    assert encode_pd(CC).tolist() == [0, 1, 0, 0, 0]
    e = encode_pd(np.arange(5))
    assert np.array_equal(e @ e.T, np.eye(5))


@pytest.mark.parametrize("w", [1.5, 2.0, 3.0])
def test_pd_is_a_social_dilemma_for_w_above_one(w):
    game = pd_game(PdParams(w=w))
    allc = np.tile([1.0, 0.0], (5, 1))
    gains = deviation_gains(exact_q(game, allc, allc, 0.9), allc, 1)
    assert gains[:, D] == pytest.approx(np.full(5, w - 1))


def test_registry():
    assert make_game("rpd").n_states == 5
    assert make_game("coins", k=3).k == 3
    with pytest.raises(KeyError):
        make_game("pong")


# ---------------------------------------------------------------- Coins


def _board(p1, p2, coin=(0, 0), color=0):
    return CoinsState(np.array([[p1, p2]]), np.array([coin]), np.array([color]))


class _NoSpawn:
    """Generator stand-in whose uniforms always fail the spawn draw."""

    def random(self, shape):
        return np.full(shape, 0.999)


def test_coins_own_coin_pickup():
    game = coins_game(CoinsParams(k=5))
    s = _board((2, 2), (4, 4), coin=(2, 3), color=1)
    nxt, r = game.step(s, np.array([RIGHT]), np.array([UP]), _NoSpawn())
    assert r[0].tolist() == [1.0, 0.0]
    assert nxt.color[0] == 0


def test_coins_mismatched_pickup_penalises_owner():
    game = coins_game(CoinsParams(k=5))
    s = _board((2, 2), (4, 4), coin=(2, 3), color=2)
    _, r = game.step(s, np.array([RIGHT]), np.array([UP]), _NoSpawn())
    assert r[0].tolist() == [1.0, -2.0]


def test_coins_no_coin_and_failed_spawn_only_moves():
    game = coins_game(CoinsParams(k=5))
    s = _board((2, 2), (0, 0))
    nxt, r = game.step(s, np.array([DOWN]), np.array([LEFT]), _NoSpawn())
    assert r[0].tolist() == [0.0, 0.0]
    assert nxt.pos[0].tolist() == [[3, 2], [0, 0]]
    assert nxt.color[0] == 0


def test_coins_simultaneous_arrival_split_evenly(rng):
    game = coins_game(CoinsParams(k=3))
    n = 20_000
    s = CoinsState(np.tile([[[1, 0], [1, 2]]], (n, 1, 1)), np.tile([[1, 1]], (n, 1)), np.full(n, 1))
    _, r = game.step(s, np.full(n, RIGHT), np.full(n, LEFT), rng)
    first = (r[:, 0] == 1).mean()
    assert np.all((r[:, 0] == 1) ^ (r[:, 1] == 1))
    assert abs(first - 0.5) < 4 * np.sqrt(0.25 / n)


def test_coins_spawn_avoids_players_and_is_uniform(rng):
    game = coins_game(CoinsParams(k=3, q=0.5))
    n = 40_000
    s = CoinsState(np.tile([[[0, 0], [0, 1]]], (n, 1, 1)), np.zeros((n, 2), int), np.zeros(n, int))
    nxt, _ = game.step(s, np.full(n, UP), np.full(n, UP), rng)
    spawned = nxt.color > 0
    assert abs(spawned.mean() - 0.5) < 4 * np.sqrt(0.25 / n)
    cells = nxt.coin[spawned, 0] * 3 + nxt.coin[spawned, 1]
    assert not np.isin(cells, [0, 1]).any()
    freq = np.bincount(cells, minlength=9)[2:] / spawned.sum()
    assert np.all(np.abs(freq - 1 / 7) < 0.01)
    colors = nxt.color[spawned]
    assert abs((colors == 1).mean() - 0.5) < 0.01


def test_coins_params_validation():
    with pytest.raises(ContractError):
        CoinsParams(k=1)
    with pytest.raises(ContractError):
        CoinsParams(q=1.0)


def test_coins_observation_is_egocentric(rng):
    game = coins_game(CoinsParams(k=3))
    s = game.initial_state(5, rng)
    o0, o1 = game.observe(s, 0), game.observe(s, 1)
    assert np.array_equal(o0[:, [1, 0, 3, 2]], o1)


@st.composite
def coins_states(draw):
    k = draw(st.integers(2, 6))
    cells = st.tuples(st.integers(0, k - 1), st.integers(0, k - 1))
    p1, p2, coin = draw(cells), draw(cells), draw(cells)
    color = draw(st.integers(0, 2))
    return k, _board(p1, p2, coin if color else (0, 0), color)


@given(coins_states())
def test_encode_decode_round_trip(case):
    k, s = case
    obs = encode_coins(s, k)
    assert obs.shape == (1, 4, k, k)
    assert obs[0, 0].sum() == 1 and obs[0, 1].sum() == 1
    assert obs[0, 2:].sum() <= 1
    assert obs.sum() in (2, 3)
    assert decode_coins(obs) == s


def test_empty_board_has_blank_coin_channels():
    assert encode_coins(_board((0, 0), (1, 1)), 3)[0, 2:].sum() == 0


@given(st.integers(0, 2 ** 32 - 1))
def test_coins_invariants_along_random_play(seed):
    game = coins_game(CoinsParams(k=3, q=0.3))
    rng = np.random.default_rng(seed)
    s = game.initial_state(8, rng)
    spawns = pickups = 0
    for _ in range(40):
        had = s.color > 0
        nxt, r = game.step(s, rng.integers(4, size=8), rng.integers(4, size=8), rng)
        assert np.all((nxt.pos >= 0) & (nxt.pos < 3))
        obs = encode_coins(nxt, 3)
        assert np.all(obs[:, 2:].sum(axis=(1, 2, 3)) <= 1)
        got = (r == 1).any(1)
        assert np.all(had[got])
        pickups += got.sum()
        spawns += ((~had | got) & (nxt.color > 0)).sum()
        assert np.abs(r).max() <= game.reward_bound
        s = nxt
    assert pickups <= spawns + 8


def _toward(pos, target):
    d = target - pos
    return np.where(d[:, 0] < 0, UP, np.where(d[:, 0] > 0, DOWN, np.where(d[:, 1] < 0, LEFT, RIGHT)))


def _scripted(game, seat, greedy_for_all):
    def script(t, s, rng):
        me = s.pos[:, seat]
        wanted = (s.color > 0) & (greedy_for_all | (s.color == seat + 1))
        act = rng.integers(4, size=len(s))
        # never wander onto a coin we do not want
        for _ in range(8):
            land = np.clip(me + MOVES[act], 0, game.k - 1)
            bad = (s.color > 0) & ~wanted & np.all(land == s.coin, axis=1)
            if not bad.any():
                break
            act[bad] = rng.integers(4, size=int(bad.sum()))
        return np.where(wanted, _toward(me, s.coin), act)
    return ScriptedAgent(script, seat)


def test_own_colour_agents_beat_grabbers_on_joint_reward():
    game = coins_game(CoinsParams(k=3))
    term = TerminationRule.fixed(1000)
    polite = run_episodes(game, _scripted(game, 0, False), _scripted(game, 1, False), term, 4, seed=1)
    greedy = run_episodes(game, _scripted(game, 0, True), _scripted(game, 1, True), term, 4, seed=1)
    assert mismatch_rate(polite.rewards) == 0.0
    assert mismatch_rate(greedy.rewards) > 0.3
    assert polite.totals().sum(1).mean() > greedy.totals().sum(1).mean()


def test_pickup_counts_and_mismatch_rate():
    r = np.array([[1, 0], [1, -2], [0, 0], [-2, 1], [0, 1]], float)
    c = pickup_counts(r)
    assert c["own"].tolist() == [1, 1] and c["other"].tolist() == [1, 1]
    assert mismatch_rate(r) == 0.5
    assert mismatch_rate(r, 0) == 0.5
    assert mismatch_rate(np.zeros((3, 2))) == 0.0
