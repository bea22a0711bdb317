"""Two-player Markov games, the episode runner and return accounting.

Games are batch-native: a "state" is always a batch of ``n`` independent
game states and ``step`` advances all of them at once. Single-game use is a
batch of one. Rewards are recorded undiscounted; discounting is left to the
consumers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from amtft import rng as rngmod


class ContractError(ValueError):
    """A caller broke an operation's precondition (bad action index, shape...)."""


class MarkovGame:
    """Base class for a finite two-player Markov game.

    Subclasses implement the batched primitives; ``tabular`` games also
    expose full transition/reward tensors for the exact oracles.
    """

    name = "game"
    n_actions: tuple[int, int] = (2, 2)
    reward_bound: float = 1.0
    tabular = False

    def initial_state(self, n: int, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def step(self, state: Any, a1: np.ndarray, a2: np.ndarray, rng: np.random.Generator):
        """Advance every game in the batch; returns ``(next_state, rewards)``
        with ``rewards`` of shape (n, 2)."""
        raise NotImplementedError

    def observe(self, state: Any, seat: int) -> np.ndarray:
        """Egocentric observation of the batch for the player in ``seat``."""
        raise NotImplementedError

    def take(self, state: Any, idx: np.ndarray) -> Any:
        return state[idx]

    def concat(self, states: Sequence[Any]) -> Any:
        return np.concatenate(states)

    def size(self, state: Any) -> int:
        return len(state)

    def repeat(self, state: Any, reps: int) -> Any:
        return self.take(state, np.repeat(np.arange(self.size(state)), reps))

    def check_actions(self, a1: np.ndarray, a2: np.ndarray) -> None:
        for seat, (a, n) in enumerate(zip((a1, a2), self.n_actions)):
            a = np.asarray(a)
            if a.size and (a.min() < 0 or a.max() >= n):
                bad = a[(a < 0) | (a >= n)][0]
                raise ContractError(f"player {seat + 1} action {bad} outside 0..{n - 1} in {self.name}")


@dataclass(frozen=True)
class JointAction:
    a1: int
    a2: int


@dataclass(frozen=True)
class StepResult:
    state: Any
    rewards: tuple[float, float]
    terminal: bool = False


@dataclass(frozen=True)
class TerminationRule:
    """Either geometric continuation with probability ``p`` or a fixed horizon."""

    kind: str
    p: float = 0.0
    length: int = 0

    def __post_init__(self):
        if self.kind == "geometric":
            if not 0.0 < self.p < 1.0:
                raise ContractError(f"continuation probability must be in (0, 1), got {self.p}")
        elif self.kind == "fixed":
            if self.length < 1:
                raise ContractError(f"fixed horizon must be >= 1, got {self.length}")
        else:
            raise ContractError(f"unknown termination kind {self.kind!r}")

    @classmethod
    def geometric(cls, p: float) -> "TerminationRule":
        return cls("geometric", p=p)

    @classmethod
    def fixed(cls, length: int) -> "TerminationRule":
        return cls("fixed", length=length)

    @property
    def mean_length(self) -> float:
        return 1.0 / (1.0 - self.p) if self.kind == "geometric" else float(self.length)


def step(game: MarkovGame, s: Any, a: JointAction, rng: np.random.Generator) -> StepResult:
    """Single-game step. ``s`` is a batch of one state."""
    a1 = np.array([a.a1])
    a2 = np.array([a.a2])
    game.check_actions(a1, a2)
    nxt, r = game.step(s, a1, a2, rng)
    return StepResult(nxt, (float(r[0, 0]), float(r[0, 1])))


class Agent:
    """Stateful batched agent bound to one seat (0 or 1).

    Per step the runner calls ``observe`` with what happened on the previous
    step (skipped at t=0) and then ``act`` on the current state.
    """

    seat = 0

    def reset(self, n: int, rng: np.random.Generator) -> None:
        self.rng = rng

    def observe(self, prev_state: Any, state: Any, own_prev: np.ndarray, partner_prev: np.ndarray) -> None:
        pass

    def act(self, state: Any) -> np.ndarray:
        raise NotImplementedError

    def keep(self, idx: np.ndarray) -> None:
        """Drop every lane not in ``idx`` (used when episodes finish early)."""


@dataclass
class Trajectory:
    """One episode: ``states[t]`` is where ``actions[t]`` were taken and
    ``rewards[t]`` received."""

    states: Any
    actions: np.ndarray
    rewards: np.ndarray
    termination: str
    seed: int
    lane: int = 0

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeBatch:
    """Flat record of many episodes, ordered by episode then time."""

    game: MarkovGame
    states: Any
    actions: np.ndarray
    rewards: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    termination: str
    seed: int
    n_episodes: int
    info: dict = field(default_factory=dict)

    @property
    def last(self) -> np.ndarray:
        out = np.ones(len(self.episode), bool)
        out[:-1] = self.episode[1:] != self.episode[:-1]
        return out

    def lengths(self) -> np.ndarray:
        return np.bincount(self.episode, minlength=self.n_episodes)

    def totals(self) -> np.ndarray:
        """Undiscounted per-episode totals, shape (n_episodes, 2)."""
        out = np.zeros((self.n_episodes, 2))
        np.add.at(out, self.episode, self.rewards)
        return out

    def trajectories(self) -> list[Trajectory]:
        bounds = np.concatenate([[0], np.cumsum(self.lengths())])
        return [
            Trajectory(
                self.game.take(self.states, np.arange(bounds[i], bounds[i + 1])),
                self.actions[bounds[i]:bounds[i + 1]],
                self.rewards[bounds[i]:bounds[i + 1]],
                self.termination,
                self.seed,
                i,
            )
            for i in range(self.n_episodes)
        ]


def run_episodes(
    game: MarkovGame,
    agent1: Agent,
    agent2: Agent,
    term: TerminationRule,
    n: int,
    seed: int,
    check_rewards: bool = False,
) -> EpisodeBatch:
    """Play ``n`` episodes in lock-step. Deterministic given ``(seed, n)``.

    Finished lanes are compacted away, so the cost is proportional to the
    total number of steps actually played.
    """
    if agent1.seat != 0 or agent2.seat != 1:
        raise ContractError("agent1 must sit in seat 0 and agent2 in seat 1")
    env = rngmod.stream(seed, "env")
    agent1.reset(n, rngmod.stream(seed, "agent1"))
    agent2.reset(n, rngmod.stream(seed, "agent2"))
    state = game.initial_state(n, env)
    lanes = np.arange(n)
    rec_states, rec_act, rec_rew, rec_lane, rec_t = [], [], [], [], []
    prev = None
    t = 0
    while len(lanes):
        if prev is not None:
            prev_state, a1, a2 = prev
            agent1.observe(prev_state, state, a1, a2)
            agent2.observe(prev_state, state, a2, a1)
        a1 = np.asarray(agent1.act(state), dtype=np.int64)
        a2 = np.asarray(agent2.act(state), dtype=np.int64)
        try:
            game.check_actions(a1, a2)
        except ContractError as exc:
            raise ContractError(f"{exc} at t={t} (seed {seed})") from None
        nxt, r = game.step(state, a1, a2, env)
        if check_rewards and np.abs(r).max(initial=0.0) > game.reward_bound:
            raise ContractError(f"reward {np.abs(r).max()} exceeds bound {game.reward_bound}")
        rec_states.append(state)
        rec_act.append(np.stack([a1, a2], axis=1))
        rec_rew.append(r)
        rec_lane.append(lanes)
        rec_t.append(np.full(len(lanes), t))
        t += 1
        if term.kind == "fixed":
            alive = np.full(len(lanes), t < term.length)
        else:
            alive = env.random(len(lanes)) < term.p
        if alive.all():
            prev = (state, a1, a2)
            state = nxt
            continue
        keep = np.flatnonzero(alive)
        lanes = lanes[keep]
        agent1.keep(keep)
        agent2.keep(keep)
        prev = (game.take(state, keep), a1[keep], a2[keep])
        state = game.take(nxt, keep)

    lane = np.concatenate(rec_lane)
    tt = np.concatenate(rec_t)
    order = np.lexsort((tt, lane))
    return EpisodeBatch(
        game=game,
        states=game.take(game.concat(rec_states), order),
        actions=np.concatenate(rec_act)[order],
        rewards=np.concatenate(rec_rew)[order],
        episode=lane[order],
        t=tt[order],
        termination=term.kind,
        seed=seed,
        n_episodes=n,
    )


def run_episode(game: MarkovGame, agent1: Agent, agent2: Agent, term: TerminationRule, seed: int) -> Trajectory:
    """Play a single episode; replaying with the same seed reproduces it."""
    return run_episodes(game, agent1, agent2, term, 1, seed).trajectories()[0]


def discounted_return(traj: Trajectory, discount: float, player: int) -> float:
    """Sum over t of discount**t * r_t for ``player`` (0 or 1)."""
    if player not in (0, 1):
        raise ContractError(f"player index must be 0 or 1, got {player}")
    r = np.asarray(traj.rewards)[:, player]
    return float(np.sum(r * discount ** np.arange(len(r))))
