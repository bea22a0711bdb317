"""The uniform agent interface and the baseline strategies.

Strategy ids used in configs: ``allc``, ``alld``, ``grim``, ``grim-strict``,
``amtft`` and ``dkc:<k>`` (defect for k turns, then cooperate).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from amtft.artifacts import PolicyArtifact
from amtft.game import Agent
from amtft.rng import sample_categorical


class AgentKind(Enum):
    ALL_C = "allc"
    ALL_D = "alld"
    GRIM = "grim"
    AMTFT = "amtft"
    COMPOUND_DKC = "dkc"
    SCRIPTED = "scripted"


class MissingArtifact(KeyError):
    pass


def pick(probs: np.ndarray, rng: np.random.Generator, greedy: bool) -> np.ndarray:
    if greedy:
        return probs.argmax(axis=1)
    return sample_categorical(probs, rng)


def compliant(probs: np.ndarray, actions: np.ndarray, p_comply: float | None) -> np.ndarray:
    """Whether each action counts as following the policy ``probs``.

    ``p_comply=None`` is the strict reading: only the policy's modal action
    complies. Otherwise any action with probability >= ``p_comply`` does.
    """
    if p_comply is None:
        return actions == probs.argmax(axis=1)
    return probs[np.arange(len(actions)), actions] >= p_comply


class PolicyAgent(Agent):
    """Plays a fixed policy artifact (π̂^C for ALL_C, π̂^D for ALL_D)."""

    def __init__(self, game, policy: PolicyArtifact, seat: int, greedy: bool = False):
        self.game, self.policy, self.seat, self.greedy = game, policy, seat, greedy

    def act(self, state):
        return pick(self.policy.probs(self.game, state, self.seat), self.rng, self.greedy)


class CompoundAgent(Agent):
    """π^{D_k C}: the defect policy for exactly ``k`` steps, then the cooperative one."""

    def __init__(self, game, coop: PolicyArtifact, defect: PolicyArtifact, k: int, seat: int, greedy: bool = False):
        self.game, self.coop, self.defect, self.k, self.seat, self.greedy = game, coop, defect, k, seat, greedy

    def reset(self, n, rng):
        super().reset(n, rng)
        self.remaining = np.full(n, self.k, dtype=np.int64)

    def keep(self, idx):
        self.remaining = self.remaining[idx]

    def act(self, state):
        in_d = self.remaining > 0
        probs = self.coop.probs(self.game, state, self.seat)
        if in_d.any():
            probs[in_d] = self.defect.probs(self.game, self.game.take(state, np.flatnonzero(in_d)), self.seat)
        self.remaining = np.maximum(self.remaining - 1, 0)
        return pick(probs, self.rng, self.greedy)


class GrimAgent(Agent):
    """Cooperates until the partner's action ever fails the compliance test
    against the partner's cooperative policy, then defects for good."""

    def __init__(self, game, own_c, own_d, partner_c, seat: int, p_comply: float | None = 0.1, greedy: bool = False):
        self.game, self.own_c, self.own_d, self.partner_c = game, own_c, own_d, partner_c
        self.seat, self.p_comply, self.greedy = seat, p_comply, greedy

    def reset(self, n, rng):
        super().reset(n, rng)
        self.triggered = np.zeros(n, bool)

    def keep(self, idx):
        self.triggered = self.triggered[idx]

    def observe(self, prev_state, state, own_prev, partner_prev):
        pc = self.partner_c.probs(self.game, prev_state, 1 - self.seat)
        self.triggered |= ~compliant(pc, partner_prev, self.p_comply)

    def act(self, state):
        probs = self.own_c.probs(self.game, state, self.seat)
        if self.triggered.any():
            idx = np.flatnonzero(self.triggered)
            probs[idx] = self.own_d.probs(self.game, self.game.take(state, idx), self.seat)
        return pick(probs, self.rng, self.greedy)


class MixtureAgent(Agent):
    """Draws one component policy per episode and follows it throughout.

    ``None`` as a component means uniformly random actions.
    """

    def __init__(self, game, components, weights, seat: int):
        self.game, self.components, self.seat = game, list(components), seat
        self.weights = np.asarray(weights, float) / np.sum(weights)

    def reset(self, n, rng):
        super().reset(n, rng)
        self.choice = rng.choice(len(self.components), size=n, p=self.weights)

    def keep(self, idx):
        self.choice = self.choice[idx]

    def act(self, state):
        n = len(self.choice)
        probs = np.full((n, self.game.n_actions[self.seat]), 1.0 / self.game.n_actions[self.seat])
        for c, comp in enumerate(self.components):
            idx = np.flatnonzero(self.choice == c)
            if comp is not None and len(idx):
                probs[idx] = comp.probs(self.game, self.game.take(state, idx), self.seat)
        return pick(probs, self.rng, False)


class ScriptedAgent(Agent):
    """Plays ``script(t, state, rng) -> actions``; used for tests and injected deviations."""

    def __init__(self, script, seat: int):
        self.script, self.seat = script, seat

    def reset(self, n, rng):
        super().reset(n, rng)
        self.t = 0
        self.lanes = np.arange(n)

    def keep(self, idx):
        self.lanes = self.lanes[idx]

    def act(self, state):
        out = self.script(self.t, state, self.rng)
        self.t += 1
        return out


@dataclass
class Artifacts:
    """Everything strategies may need: per-seat cooperative and defect
    policies (index 0 and 1), optionally a Q-model for each seat."""

    coop: tuple[PolicyArtifact, PolicyArtifact]
    defect: tuple[PolicyArtifact, PolicyArtifact] | None = None
    qmodel: tuple | None = None
    extra: dict = field(default_factory=dict)


def make_agent(kind, game, artifacts: Artifacts, seat: int, amtft_cfg=None, p_comply: float | None = 0.1,
               k: int = 0, greedy: bool = False, debit_fn=None) -> Agent:
    """Build a fresh stateful agent for ``seat`` from a strategy id or :class:`AgentKind`."""
    if isinstance(kind, str):
        kind, k, p_comply = parse_strategy(kind, k, p_comply)
    partner = 1 - seat

    def need_defect():
        if artifacts.defect is None:
            raise MissingArtifact(f"{kind.value} needs the defect (selfish) policy pair")
        return artifacts.defect

    if kind is AgentKind.ALL_C:
        return PolicyAgent(game, artifacts.coop[seat], seat, greedy)
    if kind is AgentKind.ALL_D:
        return PolicyAgent(game, need_defect()[seat], seat, greedy)
    if kind is AgentKind.COMPOUND_DKC:
        if k == 0:
            return PolicyAgent(game, artifacts.coop[seat], seat, greedy)
        return CompoundAgent(game, artifacts.coop[seat], need_defect()[seat], k, seat, greedy)
    if kind is AgentKind.GRIM:
        return GrimAgent(game, artifacts.coop[seat], need_defect()[seat], artifacts.coop[partner], seat, p_comply, greedy)
    if kind is AgentKind.AMTFT:
        from amtft.amtft import AmTftAgent, AmTftConfig

        need_defect()
        return AmTftAgent(game, artifacts, seat, amtft_cfg or AmTftConfig(), greedy=greedy, debit_fn=debit_fn)
    raise ValueError(f"cannot build agent of kind {kind}")


def parse_strategy(sid: str, k: int = 0, p_comply: float | None = 0.1):
    """``"dkc:3"`` -> (COMPOUND_DKC, 3, p); ``"grim-strict"`` -> (GRIM, 0, None)."""
    sid = sid.strip().lower()
    if sid.startswith("dkc:"):
        return AgentKind.COMPOUND_DKC, int(sid[4:]), p_comply
    if sid == "grim-strict":
        return AgentKind.GRIM, k, None
    try:
        return AgentKind(sid), k, p_comply
    except ValueError:
        raise ValueError(f"unknown strategy id {sid!r}") from None
