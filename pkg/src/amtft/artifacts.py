"""Trained policies bundled with their network spec and provenance."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from amtft import nn
from amtft.game import MarkovGame


@dataclass
class PolicyArtifact:
    """A policy + value network for one seat.

    ``role`` is "C" (cooperative schedule), "D" (selfish schedule), "L"
    (a learner trained against a fixed teacher) or "Q" for a Q-model whose
    action head holds Q-values instead of logits.
    """

    params: nn.ParameterVector
    spec: object
    buffers: dict = field(default_factory=dict)
    role: str = "C"
    player: int = 0
    meta: dict = field(default_factory=dict)

    @cached_property
    def model(self):
        return nn.build_model(self.spec)

    def _compiled(self):
        # parameters are treated as immutable once wrapped; replacing the
        # parameter block or any buffer array invalidates the compiled form
        key = (id(self.params), id(self.params.data), self.params.version,
               tuple((k, id(b)) for k, b in sorted(self.buffers.items())))
        cached = self.__dict__.get("_infer")
        if cached is None or cached[0] != key:
            cached = (key, self.model.compile(self.params, self.buffers))
            self.__dict__["_infer"] = cached
        return cached[1]

    def outputs(self, game: MarkovGame, state, seat: int):
        return self._compiled()(game.observe(state, seat))

    def probs(self, game: MarkovGame, state, seat: int) -> np.ndarray:
        return nn.softmax(self.outputs(game, state, seat)[0].astype(np.float64))

    def values(self, game: MarkovGame, state, seat: int) -> np.ndarray:
        return self.outputs(game, state, seat)[1].astype(np.float64)

    def q_values(self, game: MarkovGame, state, seat: int) -> np.ndarray:
        return self.outputs(game, state, seat)[0].astype(np.float64)

    def save(self, path) -> None:
        meta = dict(self.meta, role=self.role, player=self.player)
        nn.save_checkpoint(path, self.params, self.spec, self.buffers, meta)

    @classmethod
    def load(cls, path) -> "PolicyArtifact":
        params, spec, buffers, meta = nn.load_checkpoint(path)
        meta = dict(meta)
        role = meta.pop("role", "C")
        player = meta.pop("player", 0)
        return cls(params, spec, buffers, role, player, meta)

    def invalidate(self) -> None:
        self.__dict__.pop("model", None)
        self.__dict__.pop("_infer", None)


def constant_policy(n_states: int, probs, role: str = "C", player: int = 0) -> PolicyArtifact:
    """Tabular policy playing the same action distribution in every state."""
    spec = nn.TabularSpec(n_states, len(probs))
    model = nn.TabularActorCritic(spec)
    pv = model.init_params()
    logits = np.log(np.maximum(np.asarray(probs, float), 1e-300))
    pv.views()["logits"][...] = np.maximum(logits, -1e4)
    return PolicyArtifact(pv, spec, {}, role, player, {"kind": "constant", "probs": list(map(float, probs))})


def table_policy(table, role: str = "C", player: int = 0) -> PolicyArtifact:
    """Tabular policy from an (egocentric) ``(n_states, n_actions)`` probability table."""
    table = np.asarray(table, float)
    spec = nn.TabularSpec(*table.shape)
    pv = nn.TabularActorCritic(spec).init_params()
    pv.views()["logits"][...] = np.maximum(np.log(np.maximum(table, 1e-300)), -1e4)
    return PolicyArtifact(pv, spec, {}, role, player, {"kind": "table"})


def policy_matrix(art: PolicyArtifact, game, seat: int) -> np.ndarray:
    """Canonical-state action distribution of a tabular game's policy."""
    return art.probs(game, game.all_states(), seat)
