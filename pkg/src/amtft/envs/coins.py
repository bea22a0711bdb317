"""The Coins grid world.

Two players walk on a k x k board. At most one coin is present; whoever
steps on it gets +1, and if the coin has the other player's colour that
player loses 2. Moves are simultaneous and players may share a cell; a
coin reached by both at once goes to a uniformly random one of them.
When the board has no coin (checked after movement and collection) a new
one appears with probability ``q`` on a random cell not occupied by a
player, with a random colour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from amtft.game import ContractError, MarkovGame

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)
PICKUP_REWARD = 1.0
PARTNER_PENALTY = -2.0


@dataclass(frozen=True)
class CoinsParams:
    k: int = 5
    q: float = 0.1
    continuation: float = 0.998

    def __post_init__(self):
        if self.k < 2:
            raise ContractError(f"board side must be >= 2, got {self.k}")
        if not 0.0 < self.q < 1.0:
            raise ContractError(f"spawn probability must be in (0, 1), got {self.q}")


DESK = CoinsParams(k=3)


@dataclass
class CoinsState:
    """Batch of boards. ``pos[:, i]`` is player i's (row, col); ``color`` is 0
    when there is no coin, else the owner's index plus one."""

    pos: np.ndarray
    coin: np.ndarray
    color: np.ndarray

    def __len__(self) -> int:
        return len(self.color)

    def __getitem__(self, idx) -> "CoinsState":
        return CoinsState(self.pos[idx], self.coin[idx], self.color[idx])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CoinsState)
            and np.array_equal(self.pos, other.pos)
            and np.array_equal(self.color, other.color)
            and np.array_equal(self.coin[self.color > 0], other.coin[other.color > 0])
        )


class CoinsGame(MarkovGame):
    n_actions = (4, 4)
    reward_bound = 2.0
    name = "coins"

    def __init__(self, params: CoinsParams = CoinsParams()):
        self.params = params
        self.k = params.k

    def initial_state(self, n, rng):
        cells = self.k * self.k
        first = rng.integers(cells, size=n)
        second = (first + 1 + rng.integers(cells - 1, size=n)) % cells
        pos = np.stack([np.stack(divmod(first, self.k), 1), np.stack(divmod(second, self.k), 1)], 1)
        return CoinsState(pos.astype(np.int64), np.zeros((n, 2), np.int64), np.zeros(n, np.int64))

    def take(self, state, idx):
        return state[idx]

    def concat(self, states):
        return CoinsState(
            np.concatenate([s.pos for s in states]),
            np.concatenate([s.coin for s in states]),
            np.concatenate([s.color for s in states]),
        )

    def step(self, state, a1, a2, rng):
        n = len(state)
        k = self.k
        moves = np.stack([MOVES[a1], MOVES[a2]], axis=1)
        pos = np.clip(state.pos + moves, 0, k - 1)
        coin = state.coin.copy()
        color = state.color.copy()
        rewards = np.zeros((n, 2))

        # a fixed block of uniforms per lane (tie, spawn, cell, colour) keeps
        # lanes aligned across runs that share a generator state
        u = rng.random((n, 4))
        has = color > 0
        on = has[:, None] & np.all(pos == coin[:, None, :], axis=2)
        both = on[:, 0] & on[:, 1]
        collector = np.where(on[:, 0], 0, 1)
        collector[both] = (u[both, 0] < 0.5).astype(np.int64)
        got = on.any(axis=1)
        idx = np.flatnonzero(got)
        who = collector[idx]
        owner = color[idx] - 1
        rewards[idx, who] += PICKUP_REWARD
        mismatch = owner != who
        rewards[idx[mismatch], owner[mismatch]] += PARTNER_PENALTY
        color[idx] = 0

        spawn = np.flatnonzero((color == 0) & (u[:, 1] < self.params.q))
        if len(spawn):
            occupied = np.zeros((len(spawn), k * k), bool)
            flat = pos[spawn, :, 0] * k + pos[spawn, :, 1]
            occupied[np.arange(len(spawn)), flat[:, 0]] = True
            occupied[np.arange(len(spawn)), flat[:, 1]] = True
            free = ~occupied
            nfree = free.sum(1)
            pick = np.minimum((u[spawn, 2] * nfree).astype(np.int64), nfree - 1)
            cum = np.cumsum(free, axis=1)
            cell = (cum <= pick[:, None]).sum(1)
            coin[spawn] = np.stack(divmod(cell, k), 1)
            color[spawn] = 1 + (u[spawn, 3] < 0.5).astype(np.int64)
        return CoinsState(pos, coin, color), rewards

    def observe(self, state, seat):
        obs = encode_coins(state, self.k)
        if seat == 1:
            obs = obs[:, [1, 0, 3, 2]]
        return obs


def encode_coins(state: CoinsState, k: int) -> np.ndarray:
    """Binary (n, 4, k, k) tensor: player 1, player 2, colour-1 coin, colour-2 coin."""
    n = len(state)
    out = np.zeros((n, 4, k, k), np.float32)
    rows = np.arange(n)
    out[rows, 0, state.pos[:, 0, 0], state.pos[:, 0, 1]] = 1.0
    out[rows, 1, state.pos[:, 1, 0], state.pos[:, 1, 1]] = 1.0
    has = np.flatnonzero(state.color > 0)
    out[has, 1 + state.color[has], state.coin[has, 0], state.coin[has, 1]] = 1.0
    return out


def decode_coins(obs: np.ndarray) -> CoinsState:
    """Inverse of :func:`encode_coins`."""
    n, _, k, _ = obs.shape
    flat = obs.reshape(n, 4, k * k)
    p = flat[:, :2].argmax(-1)
    pos = np.stack(divmod(p, k), -1)
    coin_any = flat[:, 2:].max(-1)
    color = np.where(coin_any[:, 0] > 0, 1, np.where(coin_any[:, 1] > 0, 2, 0))
    cell = flat[:, 2:].sum(1).argmax(-1)
    coin = np.where(color[:, None] > 0, np.stack(divmod(cell, k), -1), 0)
    return CoinsState(pos.astype(np.int64), coin.astype(np.int64), color.astype(np.int64))


def coins_game(params: CoinsParams = CoinsParams()) -> CoinsGame:
    return CoinsGame(params)


def pickup_counts(rewards: np.ndarray) -> dict[str, np.ndarray]:
    """Classify pickups from raw reward pairs (a pickup is the only event
    producing a +1, and a mismatch is the only one producing -2)."""
    r = np.asarray(rewards)
    own = np.stack([(r[:, 0] == 1) & (r[:, 1] == 0), (r[:, 1] == 1) & (r[:, 0] == 0)], 1)
    other = np.stack([(r[:, 0] == 1) & (r[:, 1] == -2), (r[:, 1] == 1) & (r[:, 0] == -2)], 1)
    return {"own": own.sum(0), "other": other.sum(0)}


def mismatch_rate(rewards: np.ndarray, player: int | None = None) -> float:
    """Share of pickups that took the other player's coin (for one player or both)."""
    c = pickup_counts(rewards)
    if player is None:
        other, total = c["other"].sum(), c["own"].sum() + c["other"].sum()
    else:
        other, total = c["other"][player], c["own"][player] + c["other"][player]
    return float(other / total) if total else 0.0
