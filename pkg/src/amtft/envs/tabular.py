"""Games given by explicit transition and reward tensors."""

from __future__ import annotations

import numpy as np

from amtft.game import ContractError, MarkovGame


class TabularGame(MarkovGame):
    """Finite game with ``P[s, a1, a2, s']`` and ``R[i, s, a1, a2]``.

    ``seat_perm[s]`` maps a canonical state to the state as seen by the
    player in seat 1 (identity for games without a natural relabelling).
    """

    tabular = True

    def __init__(self, P, R, init, seat_perm=None, name="tabular", state_names=None):
        P = np.asarray(P, float)
        R = np.asarray(R, float)
        init = np.asarray(init, float)
        S, A1, A2, S2 = P.shape
        if S != S2 or R.shape != (2, S, A1, A2) or init.shape != (S,):
            raise ContractError("inconsistent tabular game tensors")
        if not np.allclose(P.sum(-1), 1.0) or not np.isclose(init.sum(), 1.0):
            raise ContractError("transition rows and initial distribution must sum to 1")
        self.P, self.R, self.init = P, R, init
        self.n_states = S
        self.n_actions = (A1, A2)
        self.reward_bound = float(np.abs(R).max())
        self.seat_perm = np.arange(S) if seat_perm is None else np.asarray(seat_perm)
        self.name = name
        self.state_names = state_names or [str(i) for i in range(S)]
        self._cdf = np.cumsum(P, axis=-1)
        self._det = np.all((P == 0) | (P == 1))
        self._next = P.argmax(-1)

    def initial_state(self, n, rng):
        if np.count_nonzero(self.init) == 1:
            return np.full(n, int(np.argmax(self.init)), dtype=np.int64)
        return rng.choice(self.n_states, size=n, p=self.init)

    def step(self, state, a1, a2, rng):
        state = np.asarray(state)
        if self._det:
            nxt = self._next[state, a1, a2]
        else:
            cdf = self._cdf[state, a1, a2]
            u = rng.random(len(state))
            nxt = (u[:, None] >= cdf[:, :-1]).sum(axis=1)
        r = np.stack([self.R[0, state, a1, a2], self.R[1, state, a1, a2]], axis=1)
        return nxt.astype(np.int64), r

    def observe(self, state, seat):
        state = np.asarray(state)
        return state if seat == 0 else self.seat_perm[state]

    def all_states(self):
        return np.arange(self.n_states)


def random_game(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularGame:
    """Small random game with stochastic transitions (for oracle cross-checks)."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions, n_actions))
    R = rng.uniform(-1, 1, size=(2, n_states, n_actions, n_actions))
    init = np.zeros(n_states)
    init[0] = 1.0
    return TabularGame(P, R, init, name="random")
