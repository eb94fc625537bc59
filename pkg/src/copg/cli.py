"""Command-line experiment runner: ``copg train | compare | diagnose | eval``.

Experiment files are TOML (or the JSON manifest a previous ``train`` wrote)::

    name = "pointnav-copg"
    seeds = [0, 1, 2, 3, 4]

    [train]
    algorithm = "copg"
    env = "pointnav"
    steps_per_batch = 2000

    [train.env_config]
    max_steps = 250

Exit codes: 0 success, 2 configuration or input error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import re
import sys
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .advantage import AdvantageConfig
from .constrained import ConstraintSpec
from .envs import ConfigurationError, env_config_dict, make_env
from .nn import AdamState, adam_step
from .objectives import (CLIPPED_HIGH, CLIPPED_LOW, DEAD, UNCLIPPED, ClipConfig, copg,
                         gradient_ratio_diagnostic)
from .trainer import (EnvPool, TrainConfig, _streams, build_batch, collect_rollout, greedy_rollouts,
                      load_run_checkpoint, read_metrics_csv, save_run_checkpoint, train,
                      write_metrics_csv)
from .trpo import TrustRegionConfig

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"
INCOMPLETE = "INCOMPLETE"
log = logging.getLogger("copg")

NESTED = {"clip": ClipConfig, "advantage": AdvantageConfig, "trust_region": TrustRegionConfig,
          "constrained": ConstraintSpec}
TOP_KEYS = {"name", "seeds", "out", "train"}


class ConfigError(Exception):
    """Invalid experiment file; ``str`` carries the field path and, when known, the line."""


@dataclasses.dataclass
class ExperimentSpec:
    name: str
    seeds: list
    out: Path | None
    train: TrainConfig


# -- config loading --------------------------------------------------------

def _key_line(text: str, path: tuple) -> int | None:
    """Line number of ``path`` in a TOML text: the key line, else its table header."""
    if not text:
        return None
    table: tuple = ()
    header_line = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.fullmatch(r"\[\s*([A-Za-z0-9_.\s]+?)\s*\]", line)
        if m:
            table = tuple(p.strip() for p in m.group(1).split("."))
            if table == path:
                header_line = no
            continue
        m = re.match(r"([A-Za-z0-9_]+)\s*=", line)
        if m and table + (m.group(1),) == path:
            return no
    return header_line


def _fail(text: str, path: tuple, msg: str):
    where = _key_line(text, path)
    dotted = ".".join(path)
    raise ConfigError(f"line {where}: {dotted}: {msg}" if where else f"{dotted}: {msg}")


def _build(cls, data, text: str, path: tuple, required=()):
    if not isinstance(data, dict):
        _fail(text, path, "expected a table")
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            _fail(text, path + (key,), f"unknown key (valid: {', '.join(sorted(fields))})")
    for key in required:
        if key not in data:
            _fail(text, path + (key,), "missing required field")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in data if k in str(exc)), None)
        _fail(text, path + ((bad,) if bad else ()), str(exc))


def build_train_config(data: dict, text: str = "", seed: int = 0) -> TrainConfig:
    if not isinstance(data, dict):
        _fail(text, ("train",), "expected a table")
    data = dict(data)
    for key, cls in NESTED.items():
        if key in data and data[key] is not None:
            required = ("cost_limit",) if key == "constrained" else ()
            data[key] = _build(cls, data[key], text, ("train", key), required)
    if "env_config" in data and not isinstance(data["env_config"], dict):
        _fail(text, ("train", "env_config"), "expected a table")
    data["seed"] = seed
    cfg = _build(TrainConfig, data, text, ("train",), required=("algorithm",))
    try:
        make_env(cfg.env, cfg.env_config)
    except (ConfigurationError, TypeError, ValueError) as exc:
        key = next((k for k in cfg.env_config if k in str(exc)), None)
        _fail(text, ("train", "env_config") + ((key,) if key else ()), str(exc))
    return cfg


def load_experiment(path: str | Path) -> ExperimentSpec:
    """Parse a TOML experiment file or a JSON manifest into an :class:`ExperimentSpec`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
        data = {k: data[k] for k in ("name", "seeds", "out", "train") if k in data}
        if isinstance(data.get("train"), dict):
            data["train"] = {k: v for k, v in data["train"].items() if k != "seed"}
        text = ""
    else:
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
    for key in data:
        if key not in TOP_KEYS:
            _fail(text, (key,), f"unknown key (valid: {', '.join(sorted(TOP_KEYS))})")
    for key in ("name", "train"):
        if key not in data:
            _fail(text, (key,), "missing required field")
    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        _fail(text, ("seeds",), "must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        _fail(text, ("seeds",), "seeds must be unique")
    if "hidden_sizes" in data["train"]:
        data["train"]["hidden_sizes"] = tuple(data["train"]["hidden_sizes"])
    cfg = build_train_config(data["train"], text, seeds[0])
    return ExperimentSpec(str(data["name"]), list(seeds), Path(data["out"]) if "out" in data else None, cfg)


def manifest(spec: ExperimentSpec) -> dict:
    cfg = spec.train.to_dict()
    cfg.pop("seed")
    cfg["env_config"] = env_config_dict(make_env(spec.train.env, spec.train.env_config))
    return {
        "name": spec.name, "seeds": spec.seeds, "train": cfg,
        "version": {"copg": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }


# -- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    spec = load_experiment(args.config)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out = Path(args.out) if args.out else spec.out or Path("runs") / spec.name
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps(manifest(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for seed in spec.seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(exist_ok=True)
        marker = run_dir / INCOMPLETE
        marker.write_text("training did not finish\n", encoding="utf-8")
        cfg = dataclasses.replace(spec.train, seed=seed)
        try:
            result = train(cfg)
        except RuntimeError as exc:
            log.error("seed %d: %s", seed, exc)
            return EXIT_RUNTIME
        write_metrics_csv(run_dir / "metrics.csv", result.metrics)
        save_run_checkpoint(run_dir / "checkpoint.copg", result.policy, result.value_net)
        marker.unlink()
        window = result.metrics[-10:]
        final = float(np.mean([m.mean_episode_return for m in window])) if window else float("nan")
        print(f"{spec.name} seed {seed}: {len(result.metrics)} batches, final-window return {final:.4f}")
    return EXIT_OK


def _runs_in(path: Path) -> tuple[str, list[Path]]:
    """Label and metric CSVs of a run directory, a seed directory or a single CSV."""
    if path.is_file():
        return "runs", [path]
    if (path / MANIFEST).is_file():
        label = json.loads((path / MANIFEST).read_text(encoding="utf-8"))["train"]["algorithm"]
        csvs = sorted(path.glob("seed_*/metrics.csv"))
        if not csvs:
            raise ConfigError(f"{path}: no seed_*/metrics.csv found")
        return label, csvs
    if (path / "metrics.csv").is_file():
        return "runs", [path / "metrics.csv"]
    raise ConfigError(f"{path}: not a metrics CSV or run directory")


def aggregate(groups: dict[str, list[Path]], metric: str):
    """Per-batch mean and population std across the CSVs of each group."""
    lengths = {}
    values = {}
    for label, paths in groups.items():
        rows = []
        for p in paths:
            table = read_metrics_csv(p)
            if metric not in table:
                raise ConfigError(f"{p}: no column {metric!r}")
            rows.append(table[metric])
            lengths[str(p)] = len(table[metric])
        values[label] = rows
    if len(set(lengths.values())) > 1:
        listing = ", ".join(f"{p} ({n} batches)" for p, n in lengths.items())
        raise ConfigError(f"misaligned batch counts: {listing}")
    return {label: (np.mean(rows, axis=0), np.std(rows, axis=0), np.array(rows))
            for label, rows in values.items()}


def cmd_compare(args) -> int:
    groups: dict[str, list[Path]] = {}
    for item in args.runs:
        label, _, raw = item.rpartition("=") if "=" in item else ("", "", item)
        found_label, csvs = _runs_in(Path(raw))
        groups.setdefault(label or found_label, []).extend(csvs)
    stats = aggregate(groups, args.metric)
    labels = list(stats)
    n = len(next(iter(stats.values()))[0])
    lines = ["batch," + ",".join(f"{lab}_mean,{lab}_std" for lab in labels)]
    for k in range(n):
        lines.append(f"{k}," + ",".join(f"{float(stats[lab][0][k])!r},{float(stats[lab][1][k])!r}" for lab in labels))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    w = min(args.window, n)
    print(f"{args.metric}: final-window mean over last {w} batches")
    for lab in labels:
        per_seed = stats[lab][2][:, n - w:].mean(axis=1) if w else np.array([np.nan])
        print(f"  {lab:>8s}  {per_seed.mean():.6g} +- {per_seed.std():.6g}  ({len(per_seed)} runs)")
    return EXIT_OK


def high_side_fractions(diag, eps: float) -> dict:
    """Share of samples whose ratio is past ``1 + eps``, split by advantage sign."""
    high = diag.prob_ratio > 1.0 + eps
    pos, neg = diag.advantages > 0, diag.advantages < 0
    return {"positive_advantage": float(high[pos].mean()) if pos.any() else float("nan"),
            "negative_advantage": float(high[neg].mean()) if neg.any() else float("nan")}


def run_diagnostic(policy, value_net, cfg: TrainConfig, steps: int):
    _, _, _, seqs = _streams(cfg)
    pool = EnvPool(cfg.env, cfg.env_config, seqs)
    rollout = collect_rollout(policy, pool, cfg.steps_per_batch)
    batch = build_batch(policy, value_net, rollout, cfg)
    adam = AdamState.fresh(policy.params, cfg.policy_lr)
    for _ in range(steps):
        params, adam = adam_step(adam, policy.params, copg(policy, batch, cfg.clip).grad)
        policy = policy.with_params(params)
    return gradient_ratio_diagnostic(policy, batch, cfg.clip)


def cmd_diagnose(args) -> int:
    spec = load_experiment(args.config)
    cfg = dataclasses.replace(spec.train, seed=args.seed if args.seed is not None else spec.seeds[0])
    policy, value_net = load_run_checkpoint(args.checkpoint)
    diag = run_diagnostic(policy, value_net, cfg, args.steps)
    eps = cfg.clip.epsilon
    print(f"gradient-ratio diagnostic after {args.steps} steps, epsilon {eps}")
    for label in (UNCLIPPED, CLIPPED_HIGH, CLIPPED_LOW, DEAD):
        sel = diag.labels == label
        print(f"  {label:>12s}: {int(sel.sum())} samples")
        if label != DEAD and sel.any():
            counts, edges = np.histogram(diag.ratios[sel], bins=args.bins)
            for c, lo, hi in zip(counts, edges, edges[1:]):
                print(f"      [{lo:.6f}, {hi:.6f}) {c}")
    frac = high_side_fractions(diag, eps)
    print(f"  ratio > 1+eps: {frac['positive_advantage']:.4f} of A>0 samples, "
          f"{frac['negative_advantage']:.4f} of A<0 samples")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = load_experiment(args.config)
    policy, _ = load_run_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else spec.seeds[0]
    ret, cost = greedy_rollouts(policy, spec.train.env, spec.train.env_config, args.episodes, seed)
    print(f"mean return {ret:.6f} mean cost {cost:.6f} over {args.episodes} episodes")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="copg", description="Clipped-objective policy gradient experiments")
    p.add_argument("--version", action="version", version=f"copg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of an experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="aggregate metric curves across seeds and algorithms")
    c.add_argument("runs", nargs="+", help="run directory or metrics CSV, optionally LABEL=PATH")
    c.add_argument("--metric", default="mean_episode_return")
    c.add_argument("--window", type=int, default=10)
    c.add_argument("--out", help="plot-data CSV to write")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("diagnose", help="per-sample gradient ratios after k first-order steps")
    d.add_argument("--config", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--steps", type=int, default=3)
    d.add_argument("--bins", type=int, default=10)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_diagnose)

    e = sub.add_parser("eval", help="greedy-policy rollouts from a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    level = os.environ.get("COPG_LOG_LEVEL", "error").lower()
    if level not in ("error", "info", "debug"):
        print(f"COPG_LOG_LEVEL must be error, info or debug, got {level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
