"""Tournaments, the three strategy metrics and teacher/learner retraining.

The exact tabular oracles live in :mod:`amtft.oracles` and are re-exported
here for convenience.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from amtft.agents import Artifacts, PolicyAgent, make_agent
from amtft.envs.coins import mismatch_rate
from amtft.game import TerminationRule, run_episodes
from amtft.oracles import (  # noqa: F401  (re-exports)
    ExactQ,
    TheoremReport,
    best_response_oracle,
    check_theorem,
    compound_values,
    exact_q,
)
from amtft.rng import child_seed
from amtft.training import Learner, SELFISH, TrainingConfig, _fresh_artifact, train_loop

CHUNK = 50


@dataclass
class MatchResult:
    strategies: tuple[str, str]
    n: int
    mean: np.ndarray        # (2,) undiscounted episode totals
    se: np.ndarray          # (2,)
    length: int
    totals: np.ndarray = field(repr=False, default=None)   # (n, 2)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a match needs at least one replicate")


def _standard_error(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return np.zeros(x.shape[1:])
    return x.std(axis=0, ddof=1) / math.sqrt(len(x))


def play_match(game, kind1: str, kind2: str, artifacts: Artifacts, length: int, n: int, seed: int,
               amtft_cfg=None, greedy: bool = False, workers: int = 1, chunk: int = CHUNK) -> MatchResult:
    """``n`` fixed-length episodes between ``kind1`` (seat 0) and ``kind2`` (seat 1).

    Replicates are split into chunks of ``chunk`` episodes, each seeded by its
    chunk index alone, so the result does not depend on ``workers`` or the
    order in which chunks run.
    """
    if n < 1:
        raise ValueError("a match needs at least one replicate")
    term = TerminationRule.fixed(length)
    sizes = [min(chunk, n - i) for i in range(0, n, chunk)]

    def run(c):
        a1 = make_agent(kind1, game, artifacts, 0, amtft_cfg, greedy=greedy)
        a2 = make_agent(kind2, game, artifacts, 1, amtft_cfg, greedy=greedy)
        batch = run_episodes(game, a1, a2, term, sizes[c], child_seed(seed, "match", kind1, kind2, c))
        trig = [int(getattr(a, "triggers", np.zeros(0)).astype(bool).sum()) for a in (a1, a2)]
        return batch.totals(), batch.rewards, trig

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(c) for c in range(len(sizes))]
    totals = np.concatenate([p[0] for p in parts])
    rewards = np.concatenate([p[1] for p in parts])
    info = {"episodes_with_trigger": [sum(p[2][s] for p in parts) for s in (0, 1)]}
    if getattr(game, "name", "") == "coins":
        info["mismatch_rate"] = [mismatch_rate(rewards, 0), mismatch_rate(rewards, 1)]
        info["mismatch_rate_pair"] = mismatch_rate(rewards)
    return MatchResult((kind1, kind2), n, totals.mean(0), _standard_error(totals), length, totals, info)


@dataclass
class MetricsTable:
    """Payoff matrix ``S[x, y, i]``: mean total of player ``i`` when ``x`` sits
    in seat 0 against ``y`` in seat 1."""

    strategies: list[str]
    S: np.ndarray
    se: np.ndarray
    seed: int = 0
    replicates: int = 0
    cooperative: str = "allc"
    defector: str = "alld"

    def _i(self, x):
        return self.strategies.index(x)

    def payoff(self, x, y, player):
        return float(self.S[self._i(x), self._i(y), player])

    def self_match(self, x):
        return self.payoff(x, x, 0)

    def safety(self, x):
        d = self.defector
        return self.payoff(x, d, 0) - self.payoff(d, d, 0)

    def incent_c(self, x):
        return self.payoff(x, self.cooperative, 1) - self.payoff(x, self.defector, 1)

    def metrics(self) -> dict[str, dict[str, float]]:
        out = {}
        for x in self.strategies:
            row = {"SelfMatch": self.self_match(x)}
            if self.defector in self.strategies:
                row["Safety"] = self.safety(x)
                if self.cooperative in self.strategies:
                    row["IncentC"] = self.incent_c(x)
            out[x] = row
        return out

    def write_csv(self, matrix_path, metrics_path) -> None:
        header = f"# seed={self.seed} replicates={self.replicates}"
        with open(matrix_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "payoff_row", "payoff_col", "se_row", "se_col"])
            for i, x in enumerate(self.strategies):
                for j, y in enumerate(self.strategies):
                    w.writerow([x, y, *(_num(v) for v in (self.S[i, j, 0], self.S[i, j, 1],
                                                          self.se[i, j, 0], self.se[i, j, 1]))])
        cols = ["SelfMatch", "Safety", "IncentC"]
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["strategy", *cols])
            for x, row in self.metrics().items():
                w.writerow([x, *(_num(row[c]) if c in row else "" for c in cols)])

    @classmethod
    def read_matrix_csv(cls, path) -> "MetricsTable":
        with open(path, encoding="utf-8") as fh:
            head = fh.readline()
            rows = list(csv.DictReader(fh))
        meta = dict(kv.split("=") for kv in head.lstrip("# ").split())
        names = list(dict.fromkeys(r["row"] for r in rows))
        S = np.zeros((len(names), len(names), 2))
        se = np.zeros_like(S)
        for r in rows:
            i, j = names.index(r["row"]), names.index(r["col"])
            S[i, j] = float(r["payoff_row"]), float(r["payoff_col"])
            se[i, j] = float(r["se_row"]), float(r["se_col"])
        return cls(names, S, se, int(meta["seed"]), int(meta["replicates"]))


def _num(x) -> str:
    return repr(round(float(x), 10))


def tournament(game, strategies, artifacts: Artifacts, length: int, n: int, seed: int, amtft_cfg=None,
               workers: int = 1, greedy: bool = False) -> tuple[MetricsTable, dict]:
    """Every ordered pair of ``strategies`` (including self-pairs)."""
    strategies = list(strategies)
    if not strategies:
        raise ValueError("tournament roster is empty")
    m = len(strategies)
    S, se = np.zeros((m, m, 2)), np.zeros((m, m, 2))
    results = {}
    for i, x in enumerate(strategies):
        for j, y in enumerate(strategies):
            res = play_match(game, x, y, artifacts, length, n, seed, amtft_cfg, greedy, workers)
            S[i, j], se[i, j] = res.mean, res.se
            results[(x, y)] = res
    return MetricsTable(strategies, S, se, seed, n), results


# --------------------------------------------------------------------------
# teacher / learner


@dataclass
class RetrainResult:
    teacher: str
    curve: list[dict]
    learner: object
    final: dict


TEACHERS = ("allc", "alld", "amtft")


def retrain_learner(game, teacher: str, artifacts: Artifacts, cfg: TrainingConfig, amtft_cfg=None,
                    learner_seat: int = 1, tail: float = 0.1, spec=None) -> RetrainResult:
    """Train a fresh selfish learner against a fixed teacher strategy.

    Curve rows carry ``batch, learner_reward, teacher_reward, mismatch_rate``
    (the learner's share of other-coloured pickups in that batch). ``final``
    averages the last ``tail`` fraction of batches.
    """
    if teacher not in TEACHERS:
        raise ValueError(f"teacher must be one of {TEACHERS}, got {teacher!r}")
    cfg = replace(cfg, schedule=SELFISH)
    tseat = 1 - learner_seat
    learner = Learner(_fresh_artifact(game, cfg, learner_seat, "L", spec), cfg)
    coins = getattr(game, "name", "") == "coins"

    def on_batch(row, batch):
        tot = batch.totals()
        row["learner_reward"] = float(tot[:, learner_seat].mean())
        row["teacher_reward"] = float(tot[:, tseat].mean())
        row["mismatch_rate"] = mismatch_rate(batch.rewards, learner_seat) if coins else float("nan")

    curve = train_loop(game, {learner_seat: learner},
                       {tseat: lambda: make_agent(teacher, game, artifacts, tseat, amtft_cfg)},
                       cfg, reward_fn=lambda r: np.asarray(r, float), on_batch=on_batch)
    if not curve:
        # no budget: one evaluation batch of the untrained learner
        agents = [None, None]
        agents[learner_seat] = PolicyAgent(game, learner.art, learner_seat)
        agents[tseat] = make_agent(teacher, game, artifacts, tseat, amtft_cfg)
        batch = run_episodes(game, agents[0], agents[1], TerminationRule.geometric(cfg.continuation),
                             cfg.batch_size, child_seed(cfg.seed, "batch", 0))
        row = {"batch": 0}
        on_batch(row, batch)
        curve.append(row)
    k = max(1, int(round(len(curve) * tail)))
    final = {c: float(np.mean([r[c] for r in curve[-k:]])) for c in ("learner_reward", "teacher_reward", "mismatch_rate")} \
        if curve else {}
    if final:
        final["joint_reward"] = final["learner_reward"] + final["teacher_reward"]
    return RetrainResult(teacher, curve, learner.art, final)


RETRAIN_COLUMNS = ("batch", "learner_reward", "teacher_reward", "mismatch_rate")
