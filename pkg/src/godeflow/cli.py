"""Command line interface.

Commands: ``simulate``, ``train``, ``evaluate``, ``sweep`` and
``export-latents``.  Exit codes: 0 on success, 2 for usage or configuration
problems, 3 for runtime failures (divergence, bad checkpoints, broken
datasets).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from .config import RunConfig, config_hash, load_run_config
from .errors import ConfigError, GodeflowError, ParameterError
from .model import ModelParams
from .pipeline import (
    SWEEP_KINDS,
    build_graph,
    fit,
    parse_grid,
    score,
    simulate,
    sweep,
    write_sweep_csv,
)
from .simulator import InterventionSpec, load_dataset, save_dataset
from .training import evaluate_counterfactual, export_latents, write_loss_history

USAGE_EXIT = 2
RUNTIME_EXIT = 3


def _ensure_output_dir(path: str, force: bool) -> None:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(
            f"output directory {path} exists and is not empty (use --force to reuse it)"
        )
    os.makedirs(path, exist_ok=True)


def _ensure_output_file(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"output file {path} exists (use --force to overwrite)")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _hash_directory(path: str) -> str:
    digest = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        digest.update(name.encode())
        with open(full, "rb") as fh:
            digest.update(hashlib.sha256(fh.read()).digest())
    return digest.hexdigest()[:12]


def _write_run_manifest(directory: str, payload: dict) -> None:
    with open(os.path.join(directory, "run.json"), "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_simulate(args) -> int:
    config = load_run_config(args.config)
    _ensure_output_dir(args.out, args.force)
    graph = build_graph(config)
    dataset = simulate(config, graph)
    save_dataset(dataset, args.out)
    _write_run_manifest(
        args.out,
        {
            "command": "simulate",
            "config": config.to_dict(),
            "config_hash": config_hash(config),
        },
    )
    rate = float(dataset.treatments.mean())
    print(
        f"simulated {dataset.num_nodes} nodes x {dataset.horizon + 1} timestamps: "
        f"treatment_rate={rate:.4f} "
        f"mean_interference={float(dataset.interference.mean()):.4f} "
        f"mean_degree={float(dataset.graph.degrees.mean()):.3f} "
        f"clamp_events={dataset.clamp_count} -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    config = load_run_config(args.config)
    if args.variant is not None:
        data = config.to_dict()
        data["train"]["variant"] = args.variant
        data["train"].pop("alpha_treatment")
        data["train"].pop("alpha_interference")
        config = _reparse(data)
    if args.epochs is not None:
        data = config.to_dict()
        data["train"]["epochs"] = args.epochs
        config = _reparse(data)
    _ensure_output_dir(args.out, args.force)
    dataset = load_dataset(args.data)
    valid_dataset = load_dataset(args.valid_data) if args.valid_data else None
    params, history = fit(config, dataset, valid_dataset=valid_dataset)
    checkpoint_dir = os.path.join(args.out, "checkpoint")
    params.save(
        checkpoint_dir,
        extra_metadata={
            "variant": config.train.variant,
            "train_seed": config.train.seed,
            "config_hash": config_hash(config),
        },
    )
    write_loss_history(history, os.path.join(args.out, "loss_history.csv"))
    _write_run_manifest(
        args.out,
        {
            "command": "train",
            "config": config.to_dict(),
            "config_hash": config_hash(config),
            "data_hash": _hash_directory(args.data),
        },
    )
    final = history[-1]
    print(
        f"trained {config.train.epochs} iterations (variant={config.train.variant}): "
        f"final_outcome_loss={final.outcome:.6f} -> {checkpoint_dir}"
    )
    return 0


def _reparse(data: dict) -> RunConfig:
    from .config import parse_run_config

    return parse_run_config(data, env={})


def _cmd_evaluate(args) -> int:
    params, _ = ModelParams.load(args.checkpoint)
    dataset = load_dataset(args.data)
    start = args.start_time
    if start is None:
        start = dataset.horizon - args.horizon
    if start < 0:
        raise ParameterError(
            f"horizon {args.horizon} does not fit in {dataset.horizon} intervals"
        )
    spec = InterventionSpec(start_time=start, flip_ratio=args.flip_ratio, seed=args.seed)
    report = evaluate_counterfactual(
        params,
        dataset,
        spec,
        horizon=args.horizon,
        compute_balance=not args.no_balance,
        balance_seed=args.seed,
    )
    if args.report:
        _ensure_output_file(args.report, args.force)
        report.save(args.report)
    steps = " ".join(
        f"step{idx + 1}={mse:.6f}" for idx, mse in enumerate(report.per_step_mse)
    )
    print(f"counterfactual mse: overall={report.overall_mse:.6f} {steps}")
    if report.balance is not None:
        print(
            f"balance: treatment_accuracy={report.balance['treatment_accuracy']:.4f} "
            f"interference_r2={report.balance['interference_r2']:.4f}"
        )
    if args.report:
        print(f"report -> {args.report}")
    return 0


def _cmd_sweep(args) -> int:
    config = load_run_config(args.config)
    grid = parse_grid(args.kind, args.grid)
    _ensure_output_dir(args.out, args.force)
    rows = sweep(args.kind, grid, config, jobs=args.jobs)
    out_path = os.path.join(args.out, "sweep.csv")
    write_sweep_csv(rows, out_path)
    _write_run_manifest(
        args.out,
        {
            "command": "sweep",
            "kind": args.kind,
            "points": [row["point"] for row in rows],
            "config": config.to_dict(),
            "config_hash": config_hash(config),
        },
    )
    failed = sum(1 for row in rows if row["status"] != "ok")
    print(f"swept {len(rows)} points ({failed} failed) -> {out_path}")
    return 0 if failed == 0 else RUNTIME_EXIT


def _cmd_export_latents(args) -> int:
    params, _ = ModelParams.load(args.checkpoint)
    dataset = load_dataset(args.data)
    _ensure_output_file(args.out, args.force)
    count = export_latents(params, dataset, args.out)
    print(f"wrote {count} latent rows -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="godeflow",
        description="Counterfactual outcome estimation over graph trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--force", action="store_true")
    p_sim.set_defaults(func=_cmd_simulate)

    p_train = sub.add_parser("train", help="fit the model on a dataset directory")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--valid-data", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--variant", choices=["full", "N", "T", "I"], default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--force", action="store_true")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="score counterfactual predictions")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--flip-ratio", type=float, default=0.5)
    p_eval.add_argument("--horizon", type=int, default=5)
    p_eval.add_argument("--start-time", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--report", default=None)
    p_eval.add_argument("--no-balance", action="store_true")
    p_eval.add_argument("--force", action="store_true")
    p_eval.set_defaults(func=_cmd_evaluate)

    p_sweep = sub.add_parser("sweep", help="run an experiment per grid point")
    p_sweep.add_argument("--kind", required=True, choices=list(SWEEP_KINDS))
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_export = sub.add_parser("export-latents", help="dump latent trajectories to CSV")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--data", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--force", action="store_true")
    p_export.set_defaults(func=_cmd_export_latents)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except GodeflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
