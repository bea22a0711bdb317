"""JSON experiment configuration.

Schema (all keys except ``seed`` and ``game.id`` optional)::

    {
      "seed": 0,
      "fidelity": "desk" | "full",
      "output_dir": "runs/coins",
      "workers": 1,
      "game": {"id": "coins", "params": {"k": 3}},
      "training": {<TrainingConfig fields>, "schedules": ["cooperative", "selfish"]},
      "amtft": {<AmTftConfig fields>},
      "artifacts": {"coop": [p0, p1], "defect": [p0, p1], "qmodel": [p0, p1]} | "builtin",
      "tournament": {"roster": ["allc", "alld", "grim", "amtft"], "replicates": 100, "length": 500},
      "sweep": {"w": [0.5, 1.5, 2, 3], "seeds": 20},
      "qmodel": {<TrainingConfig fields>, "seat": 1, "mixture": [1, 1, 1]},
      "retrain": {"teacher": "amtft", <TrainingConfig fields>}
    }

Relative paths resolve against the config file's directory. The
environment variables ``AMTFT_OUTPUT_DIR`` and ``AMTFT_THREADS`` override
``output_dir`` and ``workers``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from amtft.amtft import AmTftConfig, COINS_AMTFT, RPD_AMTFT
from amtft.envs import GAMES
from amtft.game import ContractError
from amtft.training import COINS_DESK, COINS_FULL, PD_DEFAULT, PD_SWEEP, Q_PD, TrainingConfig

TOP_KEYS = {"seed", "fidelity", "output_dir", "workers", "game", "training", "amtft", "artifacts",
            "tournament", "sweep", "qmodel", "retrain"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ExperimentConfig:
    seed: int
    game_id: str
    game_params: dict
    fidelity: str = "desk"
    output_dir: Path = Path("runs")
    workers: int = 1
    training: dict = field(default_factory=dict)
    amtft: dict = field(default_factory=dict)
    artifacts: dict | str | None = None
    tournament: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    qmodel: dict = field(default_factory=dict)
    retrain: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def training_config(self, section: str = "training", schedule: str | None = None) -> TrainingConfig:
        if self.game_id == "rpd":
            base = Q_PD if section == "qmodel" else PD_DEFAULT
        else:
            base = COINS_FULL if self.fidelity == "full" else COINS_DESK
        opts = {k: v for k, v in getattr(self, section).items() if k not in ("schedules", "teacher", "seat", "mixture")}
        opts.setdefault("seed", self.seed)
        if schedule is not None:
            opts["schedule"] = schedule
        return _build(TrainingConfig, base, opts, section)

    def sweep_config(self) -> TrainingConfig:
        opts = {k: v for k, v in self.sweep.items() if k not in ("w", "seeds", "start")}
        opts.setdefault("seed", self.seed)
        return _build(TrainingConfig, PD_SWEEP, opts, "sweep")

    def amtft_config(self) -> AmTftConfig:
        base = RPD_AMTFT if self.game_id == "rpd" else COINS_AMTFT
        return _build(AmTftConfig, base, self.amtft, "amtft")


def _build(cls, base, opts, section):
    names = {f.name for f in fields(cls)}
    for k in opts:
        if k not in names:
            raise ConfigError(f"{section}.{k}: unknown field (allowed: {', '.join(sorted(names))})")
    values = {f.name: getattr(base, f.name) for f in fields(cls)}
    values.update(opts)
    if "threshold" in opts and opts["threshold"] in ("inf", "Infinity"):
        values["threshold"] = float("inf")
    try:
        return cls(**values)
    except (TypeError, ValueError, ContractError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def parse_config(data: dict, base_dir: Path = Path("."), env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for k in data:
        if k not in TOP_KEYS:
            raise ConfigError(f"{k}: unknown top-level field")
    if "seed" not in data:
        raise ConfigError("seed: required field missing")
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
        raise ConfigError("seed: must be a non-negative integer")
    game = data.get("game")
    if not isinstance(game, dict) or "id" not in game:
        raise ConfigError("game.id: required field missing")
    if game["id"] not in GAMES:
        raise ConfigError(f"game.id: unknown game {game['id']!r} (expected one of {sorted(GAMES)})")
    fidelity = data.get("fidelity", "desk")
    if fidelity not in ("desk", "full"):
        raise ConfigError("fidelity: must be 'desk' or 'full'")
    out = env.get("AMTFT_OUTPUT_DIR") or data.get("output_dir", "runs")
    workers = env.get("AMTFT_THREADS") or data.get("workers", 1)
    try:
        workers = int(workers)
        if workers < 1:
            raise ValueError
    except ValueError:
        raise ConfigError("workers: must be a positive integer") from None
    for sec in ("training", "amtft", "tournament", "sweep", "qmodel", "retrain"):
        if not isinstance(data.get(sec, {}), dict):
            raise ConfigError(f"{sec}: must be an object")
    out = Path(out)
    cfg = ExperimentConfig(
        seed=data["seed"], game_id=game["id"], game_params=dict(game.get("params", {})), fidelity=fidelity,
        output_dir=out if out.is_absolute() else base_dir / out, workers=workers,
        training=dict(data.get("training", {})), amtft=dict(data.get("amtft", {})),
        artifacts=data.get("artifacts"), tournament=dict(data.get("tournament", {})),
        sweep=dict(data.get("sweep", {})), qmodel=dict(data.get("qmodel", {})),
        retrain=dict(data.get("retrain", {})), raw=data, base_dir=base_dir,
    )
    # validate every section up front, whichever command runs
    cfg.amtft_config()
    for sec in ("training", "qmodel", "retrain"):
        cfg.training_config(sec)
    cfg.sweep_config()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]  # a run manifest
    return parse_config(data, path.parent.resolve())
