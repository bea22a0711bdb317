"""One-memory repeated Prisoner's Dilemma.

The state is the previous joint action; ``START`` stands in for (C, C)
at t=0. Action 0 is C, action 1 is D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from amtft.envs.tabular import TabularGame

C, D = 0, 1
STATES = ("START", "CC", "CD", "DC", "DD")
START, CC, CD, DC, DD = range(5)
# next state after (a1, a2)
_NEXT = np.array([[CC, CD], [DC, DD]])


@dataclass(frozen=True)
class PdParams:
    """Temptation ``w``; sucker loss defaults to ``1.5 * w``.

    ``start="CC"`` begins play as if both had just cooperated instead of in
    the separate ``START`` state.
    """

    w: float = 2.0
    s: float | None = None
    start: str = "START"

    def __post_init__(self):
        if self.start not in ("START", "CC"):
            raise ValueError(f"start must be 'START' or 'CC', got {self.start!r}")

    @property
    def sucker(self) -> float:
        return 1.5 * self.w if self.s is None else self.s


def payoff_matrix(params: PdParams) -> np.ndarray:
    """Stage payoffs ``M[i, a1, a2]``."""
    w, s = params.w, params.sucker
    return np.array([
        [[1.0, -s], [w, 0.0]],
        [[1.0, w], [-s, 0.0]],
    ])


class PdGame(TabularGame):
    def __init__(self, params: PdParams = PdParams()):
        self.params = params
        P = np.zeros((5, 2, 2, 5))
        for a1 in (C, D):
            for a2 in (C, D):
                P[:, a1, a2, _NEXT[a1, a2]] = 1.0
        M = payoff_matrix(params)
        R = np.broadcast_to(M[:, None], (2, 5, 2, 2)).copy()
        init = np.eye(5)[START if params.start == "START" else CC]
        # seat 1 sees (own, partner) so CD and DC swap
        super().__init__(P, R, init, seat_perm=[START, CC, DC, CD, DD], name="rpd", state_names=list(STATES))


def pd_game(params: PdParams = PdParams()) -> PdGame:
    return PdGame(params)


def encode_pd(state) -> np.ndarray:
    """One-hot rows of length 5 for a state index or array of indices."""
    return np.eye(5)[np.asarray(state)]
