"""Approximate Markov tit-for-tat.

The agent plays its cooperative policy while keeping a running debit W of
the partner's value gains from deviating. When W exceeds the threshold T it
plays its defect policy for k turns, where k is the shortest punishment that
costs the partner at least α·W, and then returns to cooperating.

Debits come from one of three sources:

* ``rollout``: 2B simulated continuations of M steps under the cooperative
  pair, B starting from the partner's actual action and B from an action
  drawn from its cooperative policy; the debit is the difference of the
  partner's mean discounted returns. The two sets of continuations share
  random numbers pairwise, which leaves each mean unbiased and shrinks the
  variance of the difference.
* ``qmodel``: a learned Q̂ for the partner, D = Q̂(s, a') - E_{π^C} Q̂(s, ·).
* ``exact``: the same difference computed from exact Q tables (tabular games).

Any partner action with probability >= ``p_comply`` under the partner's
cooperative policy counts as compliant and carries zero debit without
rollouts.

Timing: the partner's action at step t is seen at step t+1, before acting.
A trigger starts the punishment at that same step t+1, i.e. from the state
reached after the deviation. Only actions taken while both agents were
(as far as this agent knows) in a C phase are judged; with
``model_partner`` the agent also tracks the debit its partner would assign
to its *own* actions and, while it expects to be punished, plays its defect
policy without counting the partner's punishment against it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from amtft.agents import Artifacts, compliant, pick
from amtft.artifacts import policy_matrix
from amtft.game import Agent, ContractError
from amtft.oracles import compound_values, deviation_gains, exact_punishment_k, exact_q
from amtft.rollout import rollout_rewards

log = logging.getLogger(__name__)

ROLLOUT, QMODEL, EXACT = "rollout", "qmodel", "exact"


@dataclass(frozen=True)
class AmTftConfig:
    threshold: float = 0.0
    alpha: float = 2.0
    n_rollouts: int = 100
    horizon: int = 40
    k_max: int = 50
    discount: float = 0.98
    debit_source: str = ROLLOUT
    p_comply: float | None = 0.1
    model_partner: bool = True
    # use alpha*T instead of alpha*W as the punishment target (literal pseudo-code)
    faithful_k_target: bool = False

    def __post_init__(self):
        if self.alpha <= 1:
            raise ContractError(f"alpha must exceed 1, got {self.alpha}")
        if self.threshold < 0:
            raise ContractError("threshold must be non-negative")
        if self.k_max < 1:
            raise ContractError("k_max must be >= 1")
        if self.debit_source not in (ROLLOUT, QMODEL, EXACT):
            raise ContractError(f"unknown debit source {self.debit_source!r}")


RPD_AMTFT = AmTftConfig(horizon=40, n_rollouts=100, k_max=50)
COINS_AMTFT = AmTftConfig(threshold=0.5, alpha=2.0, horizon=20, n_rollouts=20, k_max=100)


@dataclass
class AmTftMemory:
    """Debit ``W`` and remaining punishment turns ``b`` (plus the mirrored
    pair for the partner's view of us) for a batch of games."""

    W: np.ndarray
    b: np.ndarray
    partner_W: np.ndarray
    partner_b: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AmTftMemory":
        return cls(np.zeros(n), np.zeros(n, np.int64), np.zeros(n), np.zeros(n, np.int64))

    def take(self, idx) -> "AmTftMemory":
        return AmTftMemory(self.W[idx], self.b[idx], self.partner_W[idx], self.partner_b[idx])

    def copy(self) -> "AmTftMemory":
        return self.take(slice(None))


# --------------------------------------------------------------------------
# debit estimation


def estimate_debit(game, states, a_partner, artifacts: Artifacts, cfg: AmTftConfig, rng, partner_seat: int = 1):
    """Rollout estimate of the partner's one-shot deviation gain.

    Returns ``(debit, standard_error)`` arrays over the batch of states.
    Compliant actions short-circuit to exactly 0 (with zero error).
    """
    if cfg.n_rollouts * cfg.horizon <= 0:
        raise ContractError("rollout budget B*M must be positive")
    a_partner = np.asarray(a_partner, np.int64)
    n = game.size(states)
    debit = np.zeros(n)
    se = np.zeros(n)
    pc = artifacts.coop[partner_seat].probs(game, states, partner_seat)
    idx = np.flatnonzero(~compliant(pc, a_partner, cfg.p_comply))
    if len(idx) == 0:
        return debit, se
    B = cfg.n_rollouts
    lanes = game.repeat(game.take(states, idx), B)
    forced = np.full((len(idx) * B, 2), -1, np.int64)
    forced[:, partner_seat] = np.repeat(a_partner[idx], B)
    # common random numbers: both paths replay the same generator state lane by lane
    sub = int(rng.integers(2 ** 63))
    true_r = rollout_rewards(game, lanes, cfg.horizon, artifacts.coop, forced=forced, discount=cfg.discount,
                             rng=_generator(sub))
    cf_r = rollout_rewards(game, lanes, cfg.horizon, artifacts.coop, discount=cfg.discount, rng=_generator(sub))
    diff = (true_r[:, :, partner_seat].sum(1) - cf_r[:, :, partner_seat].sum(1)).reshape(len(idx), B)
    debit[idx] = diff.mean(1)
    if B > 1:
        se[idx] = diff.std(1, ddof=1) / np.sqrt(B)
    return debit, se


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def debit_from_qmodel(game, qmodel, states, a_partner, coop_partner, partner_seat: int = 1, p_comply=None):
    """D = Q̂(s, a') - Σ_a π̂^C(a|s) Q̂(s, a), zero for compliant actions."""
    q = qmodel.q_values(game, states, partner_seat)
    pc = coop_partner.probs(game, states, partner_seat)
    a_partner = np.asarray(a_partner, np.int64)
    d = q[np.arange(len(a_partner)), a_partner] - (q * pc).sum(1)
    return np.where(compliant(pc, a_partner, p_comply), 0.0, d)


class ExactTables:
    """Exact Q and compound-policy values for a tabular game."""

    def __init__(self, game, artifacts: Artifacts, cfg: AmTftConfig):
        if not game.tabular:
            raise ContractError("exact debits require a tabular game")
        self.coop = [policy_matrix(artifacts.coop[s], game, s) for s in (0, 1)]
        self.defect = [policy_matrix(artifacts.defect[s], game, s) for s in (0, 1)] if artifacts.defect else None
        eq = exact_q(game, self.coop[0], self.coop[1], cfg.discount)
        self.gains = [deviation_gains(eq, self.coop[s], s) for s in (0, 1)]
        if self.defect is not None:
            comp = compound_values(game, self.coop, self.defect, cfg.k_max, cfg.discount)
            # losses[seat][k, s]: what `seat` loses from a k-turn punishment starting at s
            self.losses = [comp[0, s][None, :] - comp[:, s, :] for s in (0, 1)]


# --------------------------------------------------------------------------
# punishment length


def compute_punishment_k(game, states, targets, artifacts: Artifacts, cfg: AmTftConfig, rng,
                         punished_seat: int = 1, return_losses: bool = False):
    """Smallest k <= k_max whose estimated loss to ``punished_seat`` reaches
    ``targets`` (one per state). Loss(k) is the partner's discounted return
    over k+M steps under the cooperative pair minus that under π^{D_k C}."""
    targets = np.atleast_1d(np.asarray(targets, float))
    if np.any(targets <= 0):
        raise ContractError("punishment target must be positive")
    if artifacts.defect is None:
        raise ContractError("punishment needs the defect policy pair")
    losses = punishment_losses(game, states, artifacts, cfg, rng, punished_seat)
    ks = _smallest_k(losses, targets, cfg.k_max)
    return (ks, losses) if return_losses else ks


def _smallest_k(losses, targets, k_max):
    ok = losses[:, 1:] >= targets[:, None]
    found = ok.any(1)
    ks = np.where(found, ok.argmax(1) + 1, k_max)
    if not found.all():
        log.warning("no punishment up to k_max=%d reaches target for %d state(s); using k_max",
                    k_max, int((~found).sum()))
    return ks.astype(np.int64)


def punishment_losses(game, states, artifacts: Artifacts, cfg: AmTftConfig, rng, punished_seat: int = 1):
    """(n, k_max + 1) matrix of estimated losses, column k for π^{D_k C}.

    The k_max compound paths share a single defect prefix per replicate: B
    defect-pair rollouts run k_max steps, and from the state after each step
    k a cooperative continuation of M steps is forked.
    """
    B, M, K, disc = cfg.n_rollouts, cfg.horizon, cfg.k_max, cfg.discount
    n = game.size(states)
    start = game.repeat(states, B)
    coop_r = rollout_rewards(game, start, K + M, artifacts.coop, discount=disc, rng=rng)[:, :, punished_seat]
    coop_cum = np.cumsum(coop_r, axis=1)                      # value over first h+1 steps
    coop_val = coop_cum[:, M - 1:K + M].reshape(n, B, K + 1).mean(1)   # horizon k+M, k=0..K

    d_pol = artifacts.defect
    seq, d_r = [start], []
    state = start
    for t in range(K):
        a = [pick(d_pol[s].probs(game, state, s), rng, False) for s in (0, 1)]
        state, r = game.step(state, a[0], a[1], rng)
        seq.append(state)
        d_r.append(r[:, punished_seat] * disc ** t)
    prefix = np.concatenate([np.zeros((n * B, 1)), np.cumsum(np.stack(d_r, 1), axis=1)], axis=1)  # (nB, K+1)
    forks = game.concat(seq[1:])                              # k-major: (K * nB)
    cont = rollout_rewards(game, forks, M, artifacts.coop, discount=disc, rng=rng)[:, :, punished_seat].sum(1)
    cont = cont.reshape(K, n * B).T * disc ** np.arange(1, K + 1)[None, :]
    comp = prefix.copy()
    comp[:, 1:] += cont
    comp[:, 0] = coop_cum[:, M - 1]
    comp_val = comp.reshape(n, B, K + 1).mean(1)
    return coop_val - comp_val


# --------------------------------------------------------------------------
# the agent


class AmTftAgent(Agent):
    def __init__(self, game, artifacts: Artifacts, seat: int, cfg: AmTftConfig = AmTftConfig(),
                 greedy: bool = False, debit_fn=None):
        if artifacts.defect is None:
            raise ContractError("amTFT needs both cooperative and defect policy pairs")
        self.game, self.arts, self.seat, self.cfg, self.greedy = game, artifacts, seat, cfg, greedy
        self.partner = 1 - seat
        self.debit_fn = debit_fn
        self.exact = ExactTables(game, artifacts, cfg) if cfg.debit_source == EXACT else None
        if cfg.debit_source == QMODEL and not artifacts.qmodel:
            raise ContractError("debit source 'qmodel' needs a Q-model artifact")
        self.trigger_count = 0

    # memory ---------------------------------------------------------------
    def reset(self, n, rng):
        super().reset(n, rng)
        self.mem = AmTftMemory.zeros(n)
        self.judge = np.zeros(n, bool)
        # indexed by original lane, never compacted
        self.triggers = np.zeros(n, np.int64)
        self.partner_triggers = np.zeros(n, np.int64)
        self.lanes = np.arange(n)
        self.phase_log = []

    def keep(self, idx):
        self.mem = self.mem.take(idx)
        self.judge = self.judge[idx]
        self.lanes = self.lanes[idx]

    # estimators -------------------------------------------------------------
    def debits(self, states, actions, judged_seat):
        if self.debit_fn is not None:
            return self.debit_fn(states, actions, judged_seat)
        cfg = self.cfg
        src = cfg.debit_source
        if src == EXACT:
            pc = self.exact.coop[judged_seat][states]
            d = self.exact.gains[judged_seat][states, actions]
            return np.where(compliant(pc, actions, cfg.p_comply), 0.0, d)
        if src == QMODEL:
            return debit_from_qmodel(self.game, self.arts.qmodel[judged_seat], states, actions,
                                     self.arts.coop[judged_seat], judged_seat, cfg.p_comply)
        return estimate_debit(self.game, states, actions, self.arts, cfg, self.rng, judged_seat)[0]

    def punishment(self, states, targets, punished_seat):
        if self.exact is not None:
            losses = self.exact.losses[punished_seat]
            return np.array([exact_punishment_k(losses[:, s], t, self.cfg.k_max)[0]
                             for s, t in zip(states, targets)], np.int64)
        return compute_punishment_k(self.game, states, targets, self.arts, self.cfg, self.rng, punished_seat)

    # protocol -------------------------------------------------------------
    def observe(self, prev_state, state, own_prev, partner_prev):
        cfg, mem = self.cfg, self.mem
        idx = np.flatnonzero(self.judge)
        if len(idx) == 0:
            return
        prev = self.game.take(prev_state, idx)
        d = self.debits(prev, partner_prev[idx], self.partner)
        mem.W[idx] += d
        hit = idx[mem.W[idx] > cfg.threshold]
        if len(hit):
            target = cfg.alpha * (np.full(len(hit), cfg.threshold) if cfg.faithful_k_target else mem.W[hit])
            target = np.maximum(target, 1e-12)
            mem.b[hit] = self.punishment(self.game.take(state, hit), target, self.partner)
            mem.W[hit] = 0.0
            self.triggers[self.lanes[hit]] += 1
            self.trigger_count += len(hit)
        if cfg.model_partner:
            d_self = self.debits(prev, own_prev[idx], self.seat)
            mem.partner_W[idx] += d_self
            phit = idx[mem.partner_W[idx] > cfg.threshold]
            if len(phit):
                target = cfg.alpha * (np.full(len(phit), cfg.threshold) if cfg.faithful_k_target else mem.partner_W[phit])
                target = np.maximum(target, 1e-12)
                mem.partner_b[phit] = self.punishment(self.game.take(state, phit), target, self.seat)
                mem.partner_W[phit] = 0.0
                self.partner_triggers[self.lanes[phit]] += 1

    def act(self, state):
        mem = self.mem
        defect = mem.b > 0
        if self.cfg.model_partner:
            defect = defect | (mem.partner_b > 0)
            self.judge = (mem.b == 0) & (mem.partner_b == 0)
        else:
            self.judge = mem.b == 0
        probs = self.arts.coop[self.seat].probs(self.game, state, self.seat)
        if defect.any():
            idx = np.flatnonzero(defect)
            probs[idx] = self.arts.defect[self.seat].probs(self.game, self.game.take(state, idx), self.seat)
        self.phase_log.append((self.lanes.copy(), defect.copy()))
        mem.b = np.maximum(mem.b - 1, 0)
        mem.partner_b = np.maximum(mem.partner_b - 1, 0)
        return pick(probs, self.rng, self.greedy)


def amtft_act(game, mem: AmTftMemory, state, prev, artifacts: Artifacts, cfg: AmTftConfig, rng, seat: int = 0,
              judge: bool = True):
    """Single-game step of the meta-policy.

    ``prev`` is ``None`` at t=0, else ``(prev_state, own_prev_action,
    partner_prev_action)``. ``judge`` says whether the previous step was
    played with both agents in a C phase. Returns ``(action, new_memory)``.
    """
    agent = AmTftAgent(game, artifacts, seat, cfg)
    agent.reset(1, rng)
    agent.mem = mem.copy()
    agent.judge = np.array([judge])
    if prev is not None:
        prev_state, own, partner = prev
        agent.observe(prev_state, state, np.atleast_1d(own), np.atleast_1d(partner))
    a = agent.act(state)
    return int(a[0]), agent.mem
