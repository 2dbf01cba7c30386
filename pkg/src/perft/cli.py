"""Command line entry point: ``perft {train,eval,count,analyze,sweep}``.

Exit codes: 0 success, 1 some sweep cells failed, 2 configuration error,
3 training diverged.

A checkpoint directory holds one ``.pmat`` file per parameter and a
``manifest.json``::

    {"format": "perft-checkpoint", "version": 1,
     "config": {...fully resolved experiment config...},
     "tensors": [{"name", "role", "layer", "file", "shape", "frozen"}, ...]}

A sweep config is ``{"base": <experiment config>, "grid": {"variant": [...],
"M": [...], "K_tilde": [...], "D_B": [...]}, "output_dir": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .analysis import bundle_pca, count_params, extract_vectors, routing_stats, write_pca_csv, write_vectors_csv
from .config import ExperimentConfig, load_config, parse_config
from .core import dump_matrix, load_matrix
from .moe import ConfigError
from .strategies import VARIANTS, PeftStrategyConfig, build_model
from .training import DivergedError, evaluate, generate_task, train, write_history_csv

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

MANIFEST_FORMAT = "perft-checkpoint"
FRONTIER_COLUMNS = ("variant", "M", "K_tilde", "D_B", "activated_params", "efficiency", "final_loss",
                    "accuracy", "status", "error")
GRID_KEYS = ("variant", "M", "K_tilde", "D_B")


def _dump_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- model construction and checkpoints ---------------------------------------------------

def model_from_config(cfg: ExperimentConfig):
    if cfg.counting_only:
        raise ConfigError(f"preset: {cfg.preset!r} is for counting only")
    classes = cfg.task.num_clusters if cfg.task.kind == "cluster_classification" else None
    return build_model(cfg.model.moe_config(), cfg.model.L, cfg.strategy, cfg.model.seed, classes,
                       cfg.model.pre_norm, cfg.model.causal)


def _role(name: str) -> tuple[str, int | None]:
    parts = name.split(".")
    if parts[0] == "readout":
        return "readout", None
    layer, kind = int(parts[1]), parts[2]
    if kind == "attn":
        return ("attn_lora" if "lora" in parts[3] else "attention"), layer
    if kind == "router":
        return ("router_lora" if parts[3] == "lora" else "router"), layer
    return {"experts": "expert", "peft": "adapter", "peft_router": "peft_router"}[kind], layer


def save_checkpoint(model, cfg: ExperimentConfig, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, p in model.named_parameters().items():
        file = name + ".pmat"
        dump_matrix(p, directory / file)
        role, layer = _role(name)
        tensors.append({"name": name, "role": role, "layer": layer, "file": file, "shape": list(p.shape),
                        "frozen": not p.requires_grad})
    _dump_json({"format": MANIFEST_FORMAT, "version": 1, "config": cfg.to_dict(), "tensors": tensors},
               directory / "manifest.json")


def load_checkpoint(directory):
    """(model, config) restored from a checkpoint directory."""
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"checkpoint: cannot read manifest in {directory}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"checkpoint: {directory} is not a {MANIFEST_FORMAT} directory")
    cfg = parse_config(manifest["config"])
    model = model_from_config(cfg)
    params = model.named_parameters()
    listed = {t["name"]: t for t in manifest["tensors"]}
    if set(listed) != set(params):
        missing = sorted(set(params) ^ set(listed))
        raise ConfigError(f"checkpoint: tensor set does not match the config (e.g. {missing[0]})")
    for name, p in params.items():
        try:
            m = load_matrix(directory / listed[name]["file"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"checkpoint: {listed[name]['file']}: {exc}") from None
        if m.shape != p.shape:
            raise ConfigError(f"checkpoint: {name} has shape {m.shape}, expected {p.shape}")
        p.data[...] = m.data
    return model, cfg


# -- commands -----------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Train one configuration and write history.csv, checkpoint/ and summary.json."""
    out_dir = Path(out_dir)
    model = model_from_config(cfg)
    data = generate_task(cfg.task)
    history = train(model, data, cfg.train)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_history_csv(history, out_dir / "history.csv")
    save_checkpoint(model, cfg, out_dir / "checkpoint")
    ev = evaluate(model, data)
    stats = {"moe": [asdict(s) for s in routing_stats(model, data, "moe")]}
    stats["peft"] = ([asdict(s) for s in routing_stats(model, data, "peft")]
                     if cfg.strategy.variant == "perft_r" else None)
    summary = {"final_task_loss": ev["loss"], "accuracy": ev["accuracy"],
               "param_report": asdict(count_params(model)), "routing_stats": stats}
    _dump_json(summary, out_dir / "summary.json")
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    if cfg.output_dir is None:
        raise ConfigError("output_dir: required (set it in the config or pass --out)")
    summary = run_experiment(cfg, cfg.output_dir)
    print(json.dumps({"final_task_loss": summary["final_task_loss"], "accuracy": summary["accuracy"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config, args.seed)
    elif args.seed is not None:
        cfg = replace(cfg, task=replace(cfg.task, seed=args.seed))
    ev = evaluate(model, generate_task(cfg.task))
    print(json.dumps({"loss": ev["loss"], "accuracy": ev["accuracy"], "moe_fractions": ev["moe_fractions"]},
                     sort_keys=True))
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = load_config(args.config)
    print(count_params(cfg.count_dims(), cfg.strategy.variant).to_json())
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if not 0 <= args.layer < len(model.layers):
        raise ConfigError(f"layer: must be in [0, {len(model.layers)}) (got {args.layer})")
    out = Path(args.out or Path(args.checkpoint).parent / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    bundle = extract_vectors(model, args.layer)
    write_vectors_csv(bundle, out / "vectors.csv")
    write_pca_csv(bundle, bundle_pca(bundle).coords, out / "pca.csv")
    print(str(out))
    return EXIT_OK


def normalize_cell(cell: dict, N: int, K: int) -> dict:
    """Pin fields the variant ignores so equivalent grid cells collapse to one."""
    v = cell["variant"]
    cell = dict(cell)
    if v == "perft_e":
        cell["M"], cell["K_tilde"] = N, K
    elif v == "perft_d":
        cell["K_tilde"] = cell["M"]
    elif v in ("perft_s", "baseline_qv", "baseline_gate"):
        cell["M"] = cell["K_tilde"] = 1
    elif v == "none":
        cell["M"] = cell["K_tilde"] = cell["D_B"] = 0
    return cell


def sweep_cells(base: ExperimentConfig, grid: dict) -> list[dict]:
    _unknown = sorted(set(grid) - set(GRID_KEYS))
    if _unknown:
        raise ConfigError(f"grid.{_unknown[0]}: unknown key")
    axes = {}
    for k in GRID_KEYS:
        default = getattr(base.strategy, k)
        vals = grid.get(k, [default])
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid.{k}: must be a non-empty list")
        axes[k] = vals
    cells, seen = [], set()
    for combo in itertools.product(*(axes[k] for k in GRID_KEYS)):
        cell = normalize_cell(dict(zip(GRID_KEYS, combo)), base.model.N, base.model.K)
        key = tuple(cell[k] for k in GRID_KEYS)
        if key not in seen:
            seen.add(key)
            cells.append(cell)
    return cells


def _cell_name(cell: dict) -> str:
    return f"{cell['variant']}_M{cell['M']}_K{cell['K_tilde']}_DB{cell['D_B']}"


def _cell_config(base: ExperimentConfig, cell: dict) -> ExperimentConfig:
    if cell["variant"] == "none":
        strategy = PeftStrategyConfig("none", arch=base.strategy.arch)
    else:
        try:
            strategy = replace(base.strategy, **cell)
        except ConfigError as exc:
            raise ConfigError(f"strategy.{exc}") from None
    return replace(base, strategy=strategy)


def _run_cell(base: ExperimentConfig, cell: dict, out_dir: Path) -> dict:
    row = dict(cell, activated_params="", efficiency="", final_loss="", accuracy="", status="ok", error="")
    try:
        cfg = _cell_config(base, cell)
        summary = run_experiment(cfg, out_dir / "cells" / _cell_name(cell))
        rep = summary["param_report"]
        row.update(activated_params=rep["trainable_activated_per_token"], efficiency=rep["activated_efficiency"],
                   final_loss=summary["final_task_loss"],
                   accuracy="" if summary["accuracy"] is None else summary["accuracy"])
    except (ConfigError, DivergedError) as exc:
        row.update(status="diverged" if isinstance(exc, DivergedError) else "config_error", error=str(exc))
    return row


def _threads() -> int:
    raw = os.environ.get("PERFT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PERFT_THREADS: must be a positive integer (got {raw!r})") from None
    if n < 1:
        raise ConfigError(f"PERFT_THREADS: must be a positive integer (got {raw!r})")
    return n


def run_sweep(raw: dict, seed: int | None = None, out: str | None = None) -> tuple[list[dict], Path]:
    if not isinstance(raw, dict):
        raise ConfigError("sweep: must be a JSON object")
    unknown = sorted(set(raw) - {"base", "grid", "output_dir"})
    if unknown:
        raise ConfigError(f"sweep.{unknown[0]}: unknown key")
    base = parse_config(raw.get("base", {}), seed)
    out_dir = out or raw.get("output_dir")
    if out_dir is None:
        raise ConfigError("output_dir: required (set it in the sweep config or pass --out)")
    if base.counting_only:
        raise ConfigError(f"base.preset: {base.preset!r} is for counting only")
    grid = raw.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("grid: must be a JSON object")
    for v in grid.get("variant", []):
        if v not in VARIANTS:
            raise ConfigError(f"grid.variant: must be one of {VARIANTS} (got {v!r})")
    cells = sweep_cells(base, grid)
    out_dir = Path(out_dir)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(lambda c: _run_cell(base, c, out_dir), cells))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "frontier.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, FRONTIER_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows, out_dir


def cmd_sweep(args) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
    rows, out_dir = run_sweep(raw, args.seed, args.out)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok; frontier at {out_dir / 'frontier.csv'}")
    for r in failed:
        print(f"  {_cell_name(r)}: {r['status']}: {r['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perft", description="Parameter-efficient routed fine-tuning on toy MoE models.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int, help="override model, task and train seeds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its task")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="evaluate on this config's task instead")
    e.add_argument("--seed", type=int, help="task seed override")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count", help="print the parameter report for a config")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_count)

    a = sub.add_parser("analyze", help="export key/expert vectors and their 2-D PCA")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--out", help="output directory (default: <checkpoint>/../analysis)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="train a grid of strategies and write frontier.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
