"""Batched Monte-Carlo rollouts of policy pairs from given start states."""

from __future__ import annotations

import numpy as np

from amtft.agents import pick


def _probs_for(game, state, seat, use_d, coop, defect):
    probs = coop[seat].probs(game, state, seat)
    if use_d is not None and use_d.any():
        idx = np.flatnonzero(use_d)
        probs[idx] = defect[seat].probs(game, game.take(state, idx), seat)
    return probs


def rollout_rewards(game, states, horizon, coop, defect=None, k_defect=None, forced=None, discount=1.0,
                    rng=None, offset=0):
    """Play ``horizon`` steps from every start state and return per-step
    discounted rewards, shape (n, horizon, 2).

    Both seats follow ``coop`` except during the first ``k_defect[i]`` steps
    of lane ``i``, where they follow ``defect``. ``forced`` is an optional
    (n, 2) array of first-step actions (-1 = sample from the policy).
    Rewards at step t are weighted by ``discount ** (t + offset)``.
    """
    n = game.size(states)
    out = np.zeros((n, horizon, 2))
    if n == 0 or horizon == 0:
        return out
    if k_defect is None:
        k_defect = np.zeros(n, np.int64)
    state = states
    weights = discount ** (np.arange(horizon) + offset)
    for t in range(horizon):
        use_d = k_defect > t
        actions = []
        for seat in (0, 1):
            a = pick(_probs_for(game, state, seat, use_d, coop, defect), rng, False)
            if t == 0 and forced is not None:
                f = forced[:, seat]
                a = np.where(f >= 0, f, a)
            actions.append(a)
        state, r = game.step(state, actions[0], actions[1], rng)
        out[:, t] = r * weights[t]
    return out


def rollout_states(game, states, steps, policies_by_seat, rng):
    """Play ``steps`` steps with the given per-seat policies, returning the
    visited states (list of length steps + 1) and discounted-free rewards."""
    seq = [states]
    rewards = []
    state = states
    for _ in range(steps):
        a = [pick(policies_by_seat[s].probs(game, state, s), rng, False) for s in (0, 1)]
        state, r = game.step(state, a[0], a[1], rng)
        seq.append(state)
        rewards.append(r)
    return seq, (np.stack(rewards, 1) if rewards else np.zeros((game.size(states), 0, 2)))
