"""Self-play training under the selfish and cooperative reward schedules.

The learner is batched episodic advantage actor-critic: play a batch of
episodes with the current policies, compute one-step TD advantages
A_t = r_t + δ V(s_{t+1}) - V(s_t), normalise them over the whole batch for
the policy term, and take one optimizer step per player.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from amtft import nn
from amtft.agents import PolicyAgent
from amtft.artifacts import PolicyArtifact
from amtft.game import Agent, EpisodeBatch, MarkovGame, TerminationRule, run_episodes
from amtft.rng import child_seed, stream

log = logging.getLogger(__name__)

SELFISH = "selfish"
COOPERATIVE = "cooperative"


class DivergenceError(FloatingPointError):
    def __init__(self, msg, curve):
        super().__init__(msg)
        self.curve = curve


@dataclass(frozen=True)
class TrainingConfig:
    schedule: str = SELFISH
    lr: float = 0.001
    discount: float = 0.98
    batch_size: int = 32
    total_games: int = 40_000
    continuation: float = 0.998
    seed: int = 0
    optimizer: str = "adam"
    value_coef: float = 1.0
    policy_coef: float = 1.0
    gae_lambda: float = 0.0
    normalize_advantage: bool = True
    base_channels: int = 13
    batch_norm: bool = True

    def __post_init__(self):
        if self.schedule not in (SELFISH, COOPERATIVE):
            raise ValueError(f"unknown reward schedule {self.schedule!r}")
        if not 0 < self.continuation < 1 or not 0 < self.discount <= 1:
            raise ValueError("continuation must be in (0,1) and discount in (0,1]")
        if self.batch_size < 1 or self.total_games < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, total_games >= 0 and lr > 0 required")

    @property
    def n_batches(self) -> int:
        return self.total_games // self.batch_size


COINS_FULL = TrainingConfig()
# desk-scale Coins preset (k=3 board); see README for the full-fidelity numbers
COINS_DESK = TrainingConfig(total_games=3200, batch_size=16, continuation=0.99, lr=0.003)
PD_DEFAULT = TrainingConfig(lr=0.05, discount=1.0, batch_size=32, total_games=6400, continuation=0.95)


def cooperative_reward(rewards: np.ndarray) -> np.ndarray:
    """Both players receive r1 + r2. Accepts a pair or an (n, 2) array."""
    r = np.asarray(rewards, dtype=float)
    total = r.sum(axis=-1, keepdims=True)
    return np.broadcast_to(total, r.shape).copy()


def schedule_rewards(rewards: np.ndarray, schedule: str) -> np.ndarray:
    if schedule == COOPERATIVE:
        out = cooperative_reward(rewards)
        assert np.array_equal(out[:, 0], out[:, 1])
        return out
    return np.asarray(rewards, float)


def normalize(a: np.ndarray) -> np.ndarray:
    """Zero mean, unit (population) std over the batch."""
    sd = a.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(a)
    return (a - a.mean()) / sd


def advantages(rewards, values, last, discount, lam=0.0):
    """One-step TD errors (λ=0) or their GAE(λ) accumulation within episodes.
    ``last`` marks the final step of each episode, whose successor is terminal."""
    next_v = np.zeros_like(values)
    next_v[:-1] = values[1:]
    next_v[last] = 0.0
    td = rewards + discount * next_v - values
    if lam == 0.0:
        return td
    out = np.empty_like(td)
    acc = 0.0
    for i in range(len(td) - 1, -1, -1):
        if last[i]:
            acc = 0.0
        acc = td[i] + discount * lam * acc
        out[i] = acc
    return out


def default_spec(game: MarkovGame, cfg: TrainingConfig):
    if game.tabular:
        return nn.TabularSpec(game.n_states, game.n_actions[0])
    return nn.ConvSpec(k=game.k, base_channels=cfg.base_channels, batch_norm=cfg.batch_norm)


class Learner:
    """One trainable seat: artifact + optimizer state."""

    def __init__(self, artifact: PolicyArtifact, cfg: TrainingConfig):
        self.art = artifact
        self.cfg = cfg
        self.opt = nn.OptimizerState(cfg.optimizer, cfg.lr)

    def update(self, game: MarkovGame, batch: EpisodeBatch, rewards: np.ndarray) -> dict:
        cfg, art = self.cfg, self.art
        model = art.model
        obs = game.observe(batch.states, art.player)
        logits, values, cache = model.forward(art.params, obs, train=True, buffers=art.buffers)
        values64 = values.astype(np.float64)
        adv = advantages(rewards, values64, batch.last, cfg.discount, cfg.gae_lambda)
        norm = normalize(adv) if cfg.normalize_advantage else adv
        n = len(adv)
        probs = nn.softmax(logits.astype(np.float64))
        onehot = np.eye(probs.shape[1])[batch.actions[:, art.player]]
        dlogits = cfg.policy_coef * norm[:, None] * (onehot - probs) / n
        dvalue = cfg.value_coef * adv / n
        grad = model.backward(art.params, cache, dlogits, dvalue)
        params, self.opt = nn.optimizer_step(self.opt, art.params, grad)
        self.art = replace(art, params=params)
        entropy = float(-(probs * np.log(np.maximum(probs, 1e-12))).sum(1).mean())
        return {"adv_mean": float(norm.mean()), "adv_std": float(norm.std()), "entropy": entropy}


def _fresh_artifact(game, cfg, seat, role, spec=None):
    spec = spec or default_spec(game, cfg)
    model = nn.build_model(spec)
    params = model.init_params(stream(cfg.seed, "init", seat))
    meta = {"schedule": cfg.schedule, "seed": cfg.seed, "config": asdict(cfg)}
    return PolicyArtifact(params, spec, model.init_buffers(), role, seat, meta)


def train_loop(game, learners: dict[int, Learner], agents: dict[int, Callable[[], Agent]], cfg: TrainingConfig,
               reward_fn=None, on_batch=None) -> list[dict]:
    """Generic batched self-play loop: seats in ``learners`` are updated, the
    others are played by fixed agents built from ``agents[seat]()``."""
    reward_fn = reward_fn or (lambda r: schedule_rewards(r, cfg.schedule))
    term = TerminationRule.geometric(cfg.continuation)
    curve = []
    for b in range(cfg.n_batches):
        players = []
        for seat in (0, 1):
            if seat in learners:
                players.append(PolicyAgent(game, learners[seat].art, seat))
            else:
                players.append(agents[seat]())
        batch = run_episodes(game, players[0], players[1], term, cfg.batch_size, child_seed(cfg.seed, "batch", b))
        shaped = reward_fn(batch.rewards)
        row = {"batch": b}
        totals = batch.totals()
        row.update(mean_r1=float(totals[:, 0].mean()), mean_r2=float(totals[:, 1].mean()),
                   mean_joint=float(totals.sum(1).mean()), mean_length=float(batch.lengths().mean()))
        for seat, learner in learners.items():
            stats = learner.update(game, batch, shaped[:, seat])
            row.update({f"{k}{seat + 1}": v for k, v in stats.items()})
            if not learner.art.params.is_finite():
                curve.append(row)
                raise DivergenceError(f"non-finite parameters for seat {seat} at batch {b}", curve)
        if on_batch:
            on_batch(row, batch)
        curve.append(row)
    return curve


def train_pair(game: MarkovGame, cfg: TrainingConfig, spec=None):
    """Self-play both seats under ``cfg.schedule``.

    Returns ``(artifact_seat0, artifact_seat1, curve)`` where ``curve`` holds
    one row per batch (mean undiscounted episode rewards and diagnostics).
    """
    role = "C" if cfg.schedule == COOPERATIVE else "D"
    learners = {s: Learner(_fresh_artifact(game, cfg, s, role, spec), cfg) for s in (0, 1)}
    curve = train_loop(game, learners, {}, cfg)
    arts = []
    for s in (0, 1):
        art = learners[s].art
        art.meta["curve_tail"] = _curve_summary(curve)
        arts.append(art)
    _check_monotone(curve, cfg)
    return arts[0], arts[1], curve


def _curve_summary(curve):
    if not curve:
        return {}
    tail = curve[-max(1, len(curve) // 10):]
    return {k: float(np.mean([r[k] for r in tail])) for k in ("mean_r1", "mean_r2", "mean_joint")}


def _check_monotone(curve, cfg, window=20):
    if cfg.schedule != COOPERATIVE or len(curve) < 2 * window:
        return
    joint = np.array([r["mean_joint"] for r in curve])
    smooth = np.convolve(joint, np.ones(window) / window, mode="valid")
    if smooth[-1] < smooth[0]:
        log.warning("cooperative joint reward fell over training (%.3f -> %.3f)", smooth[0], smooth[-1])


def write_curve_csv(path, curve, columns=("batch", "mean_r1", "mean_r2", "mean_joint")):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in curve:
            w.writerow([_fmt(row[c]) for c in columns])


def _fmt(x):
    if isinstance(x, float):
        return repr(round(x, 10))
    return str(x)


# --------------------------------------------------------------------------
# one-memory PD sweep

COOPERATE, DEFECT, OTHER = "COOPERATE", "DEFECT", "OTHER"
PD_SWEEP = TrainingConfig(lr=0.05, discount=1.0, batch_size=32, total_games=3200, continuation=0.95,
                          gae_lambda=1.0)


def classify_pd_play(game, art0, art1, steps: int = 50) -> str:
    """Greedy joint play from the initial state: all (C,C), all (D,D) or neither."""
    state = game.initial_state(1, None)
    joint = []
    for _ in range(steps):
        a0 = art0.probs(game, state, 0).argmax(1)
        a1 = art1.probs(game, state, 1).argmax(1)
        joint.append((int(a0[0]), int(a1[0])))
        state, _ = game.step(state, a0, a1, None)
    if all(j == (0, 0) for j in joint):
        return COOPERATE
    if all(j == (1, 1) for j in joint):
        return DEFECT
    return OTHER


def train_pd_sweep(w_values, seeds_per_w: int, cfg: TrainingConfig = PD_SWEEP, start: str = "CC"):
    """Selfish self-play of tabular one-memory policies for each temptation ``w``.

    With ``gae_lambda=1`` and ``discount=1`` the advantage is the Monte-Carlo
    return minus a learned baseline, i.e. REINFORCE with a critic baseline.
    Returns rows ``{"w", "cooperate", "defect", "other", "n"}`` with fractions.
    """
    from amtft.envs.pd import PdParams, pd_game

    rows = []
    for w in w_values:
        if w <= 0:
            raise ValueError("temptation w must be positive")
        game = pd_game(PdParams(w=float(w), start=start))
        counts = {COOPERATE: 0, DEFECT: 0, OTHER: 0}
        for i in range(seeds_per_w):
            run = replace(cfg, schedule=SELFISH, seed=child_seed(cfg.seed, "pd-sweep", repr(float(w)), i))
            a0, a1, _ = train_pair(game, run)
            counts[classify_pd_play(game, a0, a1)] += 1
        n = max(seeds_per_w, 1)
        rows.append({"w": float(w), "cooperate": counts[COOPERATE] / n, "defect": counts[DEFECT] / n,
                     "other": counts[OTHER] / n, "n": seeds_per_w})
    return rows


# --------------------------------------------------------------------------
# learned Q model for debits

Q_DEFAULT_MIXTURE = (1 / 3, 1 / 3, 1 / 3)


def train_q_offpolicy(game, coop, defect, cfg: TrainingConfig, seat: int = 1, mixture=Q_DEFAULT_MIXTURE, spec=None):
    """Fit Q̂_CC for ``seat`` off-policy.

    ``seat`` acts by a per-episode draw from (π̂^C, π̂^D, uniform random)
    with weights ``mixture`` while the other seat plays π̂^C. The action head
    regresses r + δ·E_{π̂^C}[Q̂(s', ·)] on the seat's own reward. Episode ends
    are truncations, so the final step of each episode has no target and is
    skipped. Returns ``(q_artifact, curve)``.
    """
    from amtft.agents import MixtureAgent

    other = 1 - seat
    art = _fresh_artifact(game, cfg, seat, "Q", spec)
    art.meta["q_mixture"] = list(map(float, mixture))
    opt = nn.OptimizerState(cfg.optimizer, cfg.lr)
    term = TerminationRule.geometric(cfg.continuation)
    curve = []
    for b in range(cfg.n_batches):
        players = [None, None]
        players[seat] = MixtureAgent(game, (coop[seat], defect[seat], None), mixture, seat)
        players[other] = PolicyAgent(game, coop[other], other)
        batch = run_episodes(game, players[0], players[1], term, cfg.batch_size, child_seed(cfg.seed, "q-batch", b))
        idx = np.flatnonzero(~batch.last)
        row = {"batch": b, "td_rmse": 0.0, "n": int(len(idx))}
        if len(idx):
            s_now = game.take(batch.states, idx)
            s_next = game.take(batch.states, idx + 1)
            q_next = art.q_values(game, s_next, seat)
            pc = coop[seat].probs(game, s_next, seat)
            target = batch.rewards[idx, seat] + cfg.discount * (q_next * pc).sum(1)
            model = art.model
            logits, _, cache = model.forward(art.params, game.observe(s_now, seat), train=True, buffers=art.buffers)
            a = batch.actions[idx, seat]
            err = target - logits.astype(np.float64)[np.arange(len(idx)), a]
            dlogits = np.zeros(logits.shape)
            dlogits[np.arange(len(idx)), a] = err / len(idx)
            grad = model.backward(art.params, cache, dlogits, np.zeros(len(idx)))
            params, opt = nn.optimizer_step(opt, art.params, grad)
            art = replace(art, params=params)
            if not art.params.is_finite():
                curve.append(row)
                raise DivergenceError(f"non-finite Q parameters at batch {b}", curve)
            row["td_rmse"] = float(np.sqrt(np.mean(err ** 2)))
        curve.append(row)
    return art, curve


Q_PD = TrainingConfig(lr=1.0, discount=0.98, batch_size=32, total_games=12_800, continuation=0.95)
