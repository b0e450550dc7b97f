"""Command-line entry point: gen-data, pretrain, train, eval, stats, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds
from .advantage import (AdvantageOracle, advantage_stats, behavior_advantages, precompute_thresholds)
from .config import ConfigError, RunConfig, load_config
from .envs.maze import CollectionError, collect_scripted_dataset, shortest_path_steps
from .pretrain import load_models, pretrain_all, save_models, transition_rmse
from .trainer import export_trajectories, evaluate, init_train_state, load_policy, save_policy, train
from .verify import certify_propositions

log = logging.getLogger("adac")

DATASET_FILE = "dataset.adac"
THRESHOLD_FILE = "thresholds.npy"


class MissingArtifact(RuntimeError):
    pass


def stage_rng(cfg: RunConfig, stage: str) -> np.random.Generator:
    tags = {"data": 1, "pretrain": 2, "train": 3, "eval": 4, "stats": 5, "verify": 6, "cache": 7}
    return np.random.default_rng(np.random.SeedSequence(cfg.run.seed, spawn_key=(tags[stage],)))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare(cfg: RunConfig, stage: str) -> Path:
    out = cfg.stage_dir(stage)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.render())
    return out


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; produce it with `adac {producer}` using the same config")
    return path


def load_dataset(cfg: RunConfig) -> ds.OfflineDataset:
    return ds.load(_need(cfg.stage_dir("data") / DATASET_FILE, "gen-data"))


def route_shares(trajectories) -> dict:
    names = [t.route for t in trajectories]
    return {r: names.count(r) / len(names) for r in sorted(set(names))} if names else {}


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _prepare(cfg, "data")
    spec = cfg.maze_spec()
    trajs = collect_scripted_dataset(spec, cfg.route_mix(), cfg.data.trajectory_count,
                                     stage_rng(cfg, "data"), cfg.collector)
    data = ds.OfflineDataset.from_trajectories(trajs)
    if cfg.data.normalize_states:
        data = ds.fit_normalization(data)
    ds.save(data, out / DATASET_FILE)
    if cfg.data.export_jsonl:
        ds.export_jsonl(data, out / "dataset.jsonl")
    shortest = shortest_path_steps(spec)
    thresholds = ds.scaled_thresholds(shortest)
    lengths = data.trajectory_lengths()
    report = {
        "tuples": len(data), "trajectories": len(trajs), "shortest_path_steps": shortest,
        "length_categories": ds.trajectory_stats(data, thresholds).as_dict(),
        "route_shares": route_shares(trajs),
        "success_rate": float(np.mean([t.success for t in trajs])) if trajs else 0.0,
        "min_length": int(lengths.min()) if len(lengths) else 0,
        "median_length": float(np.median(lengths)) if len(lengths) else 0.0,
    }
    _write_json(out / "stats.json", report)
    return report


def cmd_pretrain(cfg: RunConfig) -> dict:
    data = load_dataset(cfg)
    out = _prepare(cfg, "pretrain")
    result = pretrain_all(data, cfg.pretrain, stage_rng(cfg, "pretrain"), log_dir=out)
    save_models(result, out)
    rmse = transition_rmse(result.transition, data, np.arange(0, len(data), max(1, len(data) // 5000)))
    report = {"holdout": result.final_holdout(),
              "initial_holdout": {k: rows[0][2] for k, rows in result.logs.items()},
              "transition_rmse": rmse.tolist()}
    _write_json(out / "report.json", report)
    return report


def load_pretrained(cfg: RunConfig):
    try:
        return load_models(cfg.stage_dir("pretrain"), cfg.pretrain)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None


def build_oracle(cfg: RunConfig, data: ds.OfflineDataset, cache: bool = True,
                 models=None) -> AdvantageOracle:
    models = load_pretrained(cfg) if models is None else models
    oracle = AdvantageOracle(models.value, models.transition, models.behavior, cfg.advantage)
    if not cache:
        return oracle
    seed = int(stage_rng(cfg, "cache").integers(2**63))
    return precompute_thresholds(oracle, data.normalize(data.next_observations), seed)


def cmd_train(cfg: RunConfig, progress=None) -> dict:
    data = load_dataset(cfg)
    models = load_pretrained(cfg)
    oracle = None if cfg.ablate_advantage else build_oracle(cfg, data, models=models)
    out = _prepare(cfg, "train")
    if oracle is not None:
        np.save(out / THRESHOLD_FILE, oracle.threshold_cache)
    state = init_train_state(data, oracle, cfg.train, stage_rng(cfg, "train"), cfg.ablate_advantage,
                             behavior=models.behavior)
    rows = train(state, stage_rng(cfg, "train"), cfg.maze_spec(), out / "metrics.csv",
                 eval_rng_seed=cfg.run.seed, progress=progress)
    save_policy(state, out)
    report = {"final": rows[-1] if rows else None, "steps": state.step,
              "ablate_advantage": cfg.ablate_advantage}
    _write_json(out / "train_report.json", report)
    return report


def cmd_eval(cfg: RunConfig) -> dict:
    train_dir = cfg.stage_dir("train")
    try:
        actor, critics = load_policy(train_dir, cfg.train)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None
    data = load_dataset(cfg)
    res = evaluate(actor, critics, cfg.maze_spec(), cfg.eval.episodes, cfg.train,
                   stage_rng(cfg, "eval"), data.normalize)
    lengths = data.trajectory_lengths()
    report = {**res.as_dict(), "dataset_min_length": int(lengths.min()) if len(lengths) else None}
    _write_json(train_dir / "eval.json", report)
    if cfg.eval.export_trajectories:
        export_trajectories(res, train_dir / "eval_trajectories.jsonl")
    return report


def cmd_stats(cfg: RunConfig, what: str) -> dict:
    data = load_dataset(cfg)
    if what == "dataset":
        thresholds = ds.scaled_thresholds(shortest_path_steps(cfg.maze_spec()))
        lengths = data.trajectory_lengths()
        return {"tuples": len(data), "trajectories": len(lengths),
                "length_categories": ds.trajectory_stats(data, thresholds).as_dict(),
                "min_length": int(lengths.min()) if len(lengths) else 0}
    oracle = build_oracle(cfg, data, cache=False)
    rng = stage_rng(cfg, "stats")
    k = min(cfg.stats.advantage_states, len(data))
    idx = np.sort(rng.choice(len(data), size=k, replace=False))
    raw = behavior_advantages(oracle, data.normalize(data.observations[idx]), data.actions[idx],
                              int(rng.integers(2**63)), cfg.stats.kappas)
    report = {"states": k, "by_kappa": {repr(kk): advantage_stats(v).as_dict() for kk, v in raw.items()}}
    out = cfg.stage_dir("pretrain")
    _write_json(out / "advantage_stats.json", report)
    return report


def cmd_verify(cfg: RunConfig) -> dict:
    out = Path(cfg.run.out) / "verify"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = certify_propositions(cfg.verify.trial_count, stage_rng(cfg, "verify"))
    report.write(out)
    print(report.table())
    return {"passed": report.passed, "seconds": time.perf_counter() - t0, "out": str(out)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] out directory")
    common.add_argument("--ablate-advantage", action="store_true",
                        help="force the modulated advantage to zero")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="adac", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "train", "eval", "verify"):
        sub.add_parser(name, parents=[common])
    st = sub.add_parser("stats", parents=[common])
    st.add_argument("what", choices=("dataset", "advantage"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out,
                                                     True if args.ablate_advantage else None)
        if args.command == "gen-data":
            report = cmd_gen_data(cfg)
        elif args.command == "pretrain":
            report = cmd_pretrain(cfg)
        elif args.command == "train":
            report = cmd_train(cfg, progress=lambda row: log.info("%s", row))
        elif args.command == "eval":
            report = cmd_eval(cfg)
        elif args.command == "stats":
            report = cmd_stats(cfg, args.what)
        else:
            report = cmd_verify(cfg)
            print(json.dumps(report, indent=2))
            return 0 if report["passed"] else 1
    except (ConfigError, MissingArtifact, CollectionError, OSError, ds.DatasetFormatError) as exc:
        print(f"adac: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
