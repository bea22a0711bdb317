"""Command-line entry point: ``amtft <command> CONFIG.json``.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 unsupported
combination.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from amtft import __version__
from amtft.agents import Artifacts, MissingArtifact, parse_strategy
from amtft.artifacts import PolicyArtifact, constant_policy, policy_matrix
from amtft.config import ConfigError, ExperimentConfig, load_config
from amtft.envs import make_game
from amtft.evaluation import RETRAIN_COLUMNS, TEACHERS, retrain_learner, tournament
from amtft.game import ContractError
from amtft.oracles import OracleError, best_response_oracle, check_theorem, exact_q
from amtft.training import COOPERATIVE, SELFISH, train_pair, train_pd_sweep, train_q_offpolicy

log = logging.getLogger("amtft")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_UNSUPPORTED = 0, 2, 3, 4
ROLE_FILES = {COOPERATIVE: "coop", SELFISH: "defect"}


class Unsupported(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _game(cfg: ExperimentConfig):
    try:
        return make_game(cfg.game_id, **cfg.game_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"game.params: {exc}") from None


def _builtin_pd(game):
    n = game.n_states
    coop = tuple(constant_policy(n, [1.0, 0.0], "C", s) for s in (0, 1))
    defect = tuple(constant_policy(n, [0.0, 1.0], "D", s) for s in (0, 1))
    return Artifacts(coop, defect)


def _load_pair(cfg, paths, key):
    if not isinstance(paths, list) or len(paths) != 2:
        raise ConfigError(f"artifacts.{key}: expected a list of two checkpoint paths")
    out = []
    for p in paths:
        path = cfg.resolve(p)
        if not path.exists():
            raise MissingArtifact(f"missing checkpoint: {path}")
        out.append(PolicyArtifact.load(path))
    return tuple(out), [cfg.resolve(p) for p in paths]


def load_artifacts(cfg: ExperimentConfig, game, need_defect=True) -> tuple[Artifacts, list[Path]]:
    spec = cfg.artifacts
    if spec in (None, "builtin"):
        if cfg.game_id == "rpd":
            return _builtin_pd(game), []
        if spec == "builtin":
            raise ConfigError("artifacts: 'builtin' policies exist only for rpd")
        out = cfg.output_dir
        spec = {"coop": [str(out / "coop_p0.ckpt"), str(out / "coop_p1.ckpt")],
                "defect": [str(out / "defect_p0.ckpt"), str(out / "defect_p1.ckpt")]}
    if not isinstance(spec, dict) or "coop" not in spec:
        raise ConfigError("artifacts.coop: required when artifacts is an object")
    inputs = []
    coop, p = _load_pair(cfg, spec["coop"], "coop")
    inputs += p
    defect = qmodel = None
    if "defect" in spec:
        defect, p = _load_pair(cfg, spec["defect"], "defect")
        inputs += p
    elif need_defect:
        raise MissingArtifact("artifacts.defect: the selfish policy pair is required")
    if "qmodel" in spec:
        qmodel, p = _load_pair(cfg, spec["qmodel"], "qmodel")
        inputs += p
    return Artifacts(coop, defect, qmodel), inputs


def write_manifest(cfg: ExperimentConfig, command: str, outputs: list[Path], inputs: list[Path]) -> Path:
    snapshot = dict(cfg.raw)
    snapshot["output_dir"] = str(cfg.output_dir)
    snapshot["workers"] = cfg.workers
    if isinstance(cfg.artifacts, dict):
        snapshot["artifacts"] = {k: [str(cfg.resolve(p)) for p in v] for k, v in cfg.artifacts.items()}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": snapshot,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    path = cfg.output_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_rows(path: Path, seed: int, columns, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(round(float(x), 10))
    return str(x)


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig):
    game = _game(cfg)
    schedules = cfg.training.get("schedules", [COOPERATIVE, SELFISH])
    outputs = []
    for sched in schedules:
        if sched not in ROLE_FILES:
            raise ConfigError(f"training.schedules: unknown schedule {sched!r}")
        tcfg = cfg.training_config(schedule=sched)
        a0, a1, curve = train_pair(game, tcfg)
        stem = ROLE_FILES[sched]
        for seat, art in enumerate((a0, a1)):
            path = cfg.output_dir / f"{stem}_p{seat}.ckpt"
            art.save(path)
            outputs.append(path)
        outputs.append(_write_rows(cfg.output_dir / f"curve_{sched}.csv", tcfg.seed,
                                   ("batch", "mean_r1", "mean_r2", "mean_joint"), curve))
        log.info("%s: final joint reward %.3f", sched, curve[-1]["mean_joint"] if curve else float("nan"))
    if cfg.qmodel:
        arts = _trained_artifacts(cfg)
        qcfg = cfg.training_config("qmodel")
        mixture = cfg.qmodel.get("mixture", [1, 1, 1])
        qs = []
        for s in (0, 1):
            q, _ = train_q_offpolicy(game, arts.coop, arts.defect, qcfg, seat=s, mixture=mixture)
            qs.append(q)
        for s, q in enumerate(qs):
            path = cfg.output_dir / f"qmodel_p{s}.ckpt"
            q.save(path)
            outputs.append(path)
    return outputs, []


def _trained_artifacts(cfg):
    out = cfg.output_dir
    for s in (0, 1):
        for stem in ("coop", "defect"):
            if not (out / f"{stem}_p{s}.ckpt").exists():
                raise MissingArtifact(f"missing checkpoint: {out / f'{stem}_p{s}.ckpt'} (train both schedules first)")
    coop = tuple(PolicyArtifact.load(out / f"coop_p{s}.ckpt") for s in (0, 1))
    defect = tuple(PolicyArtifact.load(out / f"defect_p{s}.ckpt") for s in (0, 1))
    return Artifacts(coop, defect)


def cmd_tournament(cfg: ExperimentConfig):
    game = _game(cfg)
    t = cfg.tournament
    roster = t.get("roster", ["allc", "alld", "grim", "amtft"])
    for sid in roster:
        try:
            parse_strategy(sid)
        except ValueError as exc:
            raise ConfigError(f"tournament.roster: {exc}") from None
    arts, inputs = load_artifacts(cfg, game)
    amcfg = cfg.amtft_config()
    if amcfg.debit_source == "exact" and not game.tabular:
        raise Unsupported("oracle requires tabular game")
    table, results = tournament(game, roster, arts, int(t.get("length", 500 if cfg.game_id == "coins" else 200)),
                                int(t.get("replicates", 100)), cfg.seed, amcfg, workers=cfg.workers)
    mpath, xpath = cfg.output_dir / "matrix.csv", cfg.output_dir / "metrics.csv"
    table.write_csv(mpath, xpath)
    for x, row in table.metrics().items():
        log.info("%-12s %s", x, "  ".join(f"{k}={v:.3f}" for k, v in row.items()))
    return [mpath, xpath], inputs


def cmd_verify(cfg: ExperimentConfig):
    game = _game(cfg)
    if not game.tabular:
        raise Unsupported("oracle requires tabular game")
    arts, inputs = load_artifacts(cfg, game)
    amcfg = cfg.amtft_config()
    coop = [policy_matrix(arts.coop[s], game, s) for s in (0, 1)]
    defect = [policy_matrix(arts.defect[s], game, s) for s in (0, 1)]
    report = check_theorem(game, coop, defect, amcfg.discount)
    _, _, br, _ = best_response_oracle(game, coop, defect, replace(amcfg, debit_source="exact"))
    report.best_response = br
    eq = exact_q(game, coop[0], coop[1], amcfg.discount)
    summary = {"theorem": json.loads(report.to_json()), "exact_q_residual": eq.residual,
               "exact_q_iterations": eq.iterations}
    path = cfg.output_dir / "theorem.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    print(f"d*={report.d_star:.6g} gap={report.value_gap:.6g} discount={report.discount} "
          f"condition_holds={report.condition_holds} best_response_cooperates={br['cooperates_in_c_phase']}")
    return [path], inputs


def cmd_pd_sweep(cfg: ExperimentConfig):
    if cfg.game_id != "rpd":
        raise Unsupported("pd-sweep requires the rpd game")
    w = cfg.sweep.get("w", [0.5, 1.5, 2.0, 3.0])
    seeds = int(cfg.sweep.get("seeds", 20))
    if any(not isinstance(x, (int, float)) or x <= 0 for x in w):
        raise ConfigError("sweep.w: every temptation value must be a positive number")
    rows = train_pd_sweep(w, seeds, cfg.sweep_config(), start=cfg.sweep.get("start", "CC"))
    path = _write_rows(cfg.output_dir / "sweep.csv", cfg.seed, ("w", "cooperate", "defect", "other", "n"), rows)
    for r in rows:
        log.info("w=%g cooperate=%.2f defect=%.2f", r["w"], r["cooperate"], r["defect"])
    return [path], []


def cmd_retrain(cfg: ExperimentConfig):
    game = _game(cfg)
    teacher = cfg.retrain.get("teacher")
    if teacher not in TEACHERS:
        raise ConfigError(f"retrain.teacher: must be one of {list(TEACHERS)}, got {teacher!r}")
    arts, inputs = load_artifacts(cfg, game)
    amcfg = cfg.amtft_config()
    if amcfg.debit_source == "exact" and not game.tabular:
        raise Unsupported("oracle requires tabular game")
    tcfg = cfg.training_config("retrain")
    res = retrain_learner(game, teacher, arts, tcfg, amcfg)
    cpath = _write_rows(cfg.output_dir / f"retrain_{teacher}.csv", tcfg.seed, RETRAIN_COLUMNS, res.curve)
    lpath = cfg.output_dir / f"learner_{teacher}.ckpt"
    res.learner.save(lpath)
    log.info("teacher=%s final %s", teacher, res.final)
    return [cpath, lpath], inputs


COMMANDS = {"train": cmd_train, "tournament": cmd_tournament, "verify": cmd_verify,
            "pd-sweep": cmd_pd_sweep, "retrain": cmd_retrain}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amtft", description="Train and evaluate amTFT agents.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="JSON experiment config (or a run manifest)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        outputs, inputs = COMMANDS[args.command](cfg)
        write_manifest(cfg, args.command, outputs, inputs)
    except ConfigError as exc:
        print(f"amtft: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        print(f"amtft: {msg}", file=sys.stderr)
        return EXIT_MISSING
    except (Unsupported, OracleError) as exc:
        print(f"amtft: unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except ContractError as exc:
        print(f"amtft: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
