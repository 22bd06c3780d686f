"""Single executable for the full pipeline.

Subcommands: simulate, build, train, sample, evaluate, table.  Configuration
precedence is built-in defaults < --config JSON file < explicit flags.
Relative paths resolve under $SFM_LAB_DATA_DIR when it is set.  Exit codes:
0 success, 2 configuration, 3 I/O, 4 numeric failure, 1 unexpected.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import arrayio, data, spectral
from .errors import ConfigError, IoError, NumericError
from .flows import (
    NetworkConfig,
    OptimizerSettings,
    SchemeConfig,
    TrainSettings,
    evaluate_run,
    run_is_complete,
    sample_run,
    train_run,
)

SCHEME_ORDER = ("cfm", "cdm", "regression", "corrdiff", "sfm")
TABLE_METRICS = ("rmse", "crps", "mae", "ssr")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _resolve_path(p: str | Path) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    root = os.environ.get("SFM_LAB_DATA_DIR")
    return (Path(root) / p) if root else p


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    payload = arrayio.read_manifest(_resolve_path(path))
    return payload


def _pick(args: argparse.Namespace, config: dict, key: str, default):
    """Flag > config file > default."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    taus = _pick(args, config, "tau", [3.0, 5.0, 10.0])
    n_traj = int(_pick(args, config, "trajectories", 8))
    n_snapshots = int(_pick(args, config, "snapshots", 280))
    grid_n = int(_pick(args, config, "grid-n", 64))
    dt = float(_pick(args, config, "dt", 1.0e-3))
    save_every = float(_pick(args, config, "save-every", 0.2))
    spinup = float(_pick(args, config, "spinup", 50.0))
    seed = int(_pick(args, config, "seed", 0))
    threads = max(1, int(_pick(args, config, "threads", 1)))
    out_root = _resolve_path(_pick(args, config, "out", "trajectories"))

    if n_snapshots < 1:
        raise ConfigError(f"snapshots must be >= 1, got {n_snapshots}")
    if n_traj < 1:
        raise ConfigError(f"trajectories must be >= 1, got {n_traj}")

    jobs = []
    for tau in taus:
        for k in range(n_traj):
            # same per-trajectory seed across tau values: identical initial
            # conditions, so the coupling strength alone drives misalignment
            cfg = spectral.SimConfig(
                grid_n=grid_n, dt=dt, save_every=save_every, tau=float(tau),
                spinup_time=spinup, seed=seed + k,
            ).resolved()
            out_dir = out_root / f"tau{tau:g}" / f"traj{k:03d}"
            jobs.append((cfg, out_dir))

    def run_one(job):
        cfg, out_dir = job
        manifest = out_dir / "manifest.json"
        if manifest.is_file() and not args.force:
            try:
                spectral.read_trajectory(manifest)
                return f"skip {out_dir} (complete)"
            except IoError:
                pass
        result = spectral.run_trajectory(cfg, n_snapshots)
        spectral.write_trajectory(out_dir, result)
        return f"wrote {out_dir}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            messages = list(pool.map(run_one, jobs))
    else:
        messages = [run_one(j) for j in jobs]
    for message in messages:
        print(message)

    arrayio.write_manifest(
        out_root / "manifest.json",
        {
            "kind": "simulation-set",
            "status": "complete",
            "taus": [float(t) for t in taus],
            "trajectories": n_traj,
            "snapshots": n_snapshots,
            "grid_n": grid_n,
            "seed": seed,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# build


def cmd_build(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    out_dir = _resolve_path(_pick(args, config, "out", "dataset"))
    n_train = int(_pick(args, config, "n-train", 2000))
    n_test = int(_pick(args, config, "n-test", 200))
    gap = int(_pick(args, config, "gap", data.DEFAULT_GAP))
    seed = int(_pick(args, config, "seed", 0))

    manifest_path = out_dir / "manifest.json"
    if manifest_path.is_file() and not args.force:
        print(f"skip {out_dir} (dataset exists)")
        return EXIT_OK

    manifests = []
    for entry in args.trajectories:
        p = _resolve_path(entry)
        if p.is_dir():
            found = sorted(p.glob("**/manifest.json"))
            manifests.extend(m for m in found if _is_trajectory(m))
        else:
            manifests.append(p)
    if not manifests:
        raise ConfigError("no trajectory manifests found under the given paths")

    path = data.build_dataset(manifests, out_dir, n_train, n_test, gap=gap, seed=seed)
    print(f"wrote {path}")
    return EXIT_OK


def _is_trajectory(manifest: Path) -> bool:
    try:
        return arrayio.read_manifest(manifest).get("kind") == "trajectory"
    except IoError:
        return False


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    run_dir = _resolve_path(_pick(args, config, "out", "run"))
    if run_is_complete(run_dir) and not args.force:
        print(f"skip {run_dir} (run complete)")
        return EXIT_OK

    scheme = _pick(args, config, "scheme", "sfm")
    overrides = {}
    for key, name in (
        ("lambda", "lambda_reg"),
        ("sigma-max", "sigma_max"),
        ("sigma-z-init", "sigma_z_init"),
        ("beta", "sigma_z_beta"),
        ("encoder", "encoder_kind"),
        ("sample-steps", "n_steps"),
    ):
        value = _pick(args, config, key, None)
        if value is not None:
            overrides[name] = value
    cond = _pick(args, config, "condition-on-y", "auto")
    if cond != "auto":
        overrides["condition_on_y"] = cond == "on"
    adaptive = _pick(args, config, "adaptive", "on")
    overrides["adaptive_sigma_z"] = adaptive == "on"
    scheme_cfg = SchemeConfig.for_scheme(scheme, **overrides)

    net_cfg = NetworkConfig(
        hidden_channels=int(_pick(args, config, "hidden", 48)),
        n_blocks=int(_pick(args, config, "n-blocks", 6)),
        kernel_size=int(_pick(args, config, "kernel", 3)),
        dropout=float(_pick(args, config, "dropout", 0.13)),
    )
    opt = OptimizerSettings(
        lr=float(_pick(args, config, "lr", OptimizerSettings.lr)),
        ema_rate=float(_pick(args, config, "ema-rate", OptimizerSettings.ema_rate)),
    )
    train_cfg = TrainSettings(
        total_steps=int(_pick(args, config, "steps", 5000)),
        batch_size=int(_pick(args, config, "batch-size", 2)),
        seed=int(_pick(args, config, "seed", 0)),
        val_every=int(_pick(args, config, "val-every", 500)),
    )
    dataset_manifest = _resolve_path(_pick(args, config, "dataset", "dataset/manifest.json"))

    train_run(run_dir, dataset_manifest, scheme_cfg, net_cfg, opt, train_cfg,
              force=args.force)
    print(f"trained {scheme} -> {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample / evaluate / table


def cmd_sample(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    run_dir = _resolve_path(_pick(args, config, "run", "run"))
    try:
        manifest = sample_run(
            run_dir,
            n_members=int(_pick(args, config, "members", 16)),
            n_cases=(lambda v: None if v is None else int(v))(_pick(args, config, "cases", None)),
            seed=int(_pick(args, config, "seed", 0)),
            n_steps=_pick(args, config, "sample-steps", None),
            threads=max(1, int(_pick(args, config, "threads", 1))),
            force=args.force,
        )
    except FileExistsError as exc:
        print(f"skip: {exc}")
        return EXIT_OK
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    run_dir = _resolve_path(_pick(args, config, "run", "run"))
    out = _pick(args, config, "out", None)
    report = evaluate_run(run_dir, _resolve_path(out) if out else None)
    for channel in report.channel_names:
        row = report.scores[channel]
        parts = ", ".join(
            f"{k}={v:.4g}" for k, v in row.items() if v is not None
        )
        print(f"{report.scheme} {channel}: {parts}")
    return EXIT_OK


def cmd_table(args: argparse.Namespace) -> int:
    reports = []
    for entry in args.runs:
        path = _resolve_path(entry)
        report_path = path if path.name == "report.json" else path / "report.json"
        payload = arrayio.read_manifest(report_path)
        if payload.get("kind") != "report":
            raise IoError(f"{report_path} is not an evaluation report")
        reports.append(payload)

    taus = sorted({float(r["metadata"].get("tau", "nan")) for r in reports})
    if any(np.isnan(t) for t in taus):
        raise ConfigError("reports missing tau metadata; re-run evaluate")
    by_key = {}
    for r in reports:
        key = (float(r["metadata"]["tau"]), r["scheme"])
        if key in by_key:
            raise ConfigError(f"duplicate report for tau={key[0]:g} scheme={key[1]}")
        by_key[key] = r

    schemes = [s for s in SCHEME_ORDER if any(k[1] == s for k in by_key)]
    variables = reports[0]["channel_names"]
    out_path = _resolve_path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["variable", "metric"]
        for tau in taus:
            for scheme in schemes:
                header.append(f"tau={tau:g}/{scheme}")
        writer.writerow(header)
        for variable in variables:
            for metric in TABLE_METRICS:
                row = [variable, metric]
                for tau in taus:
                    for scheme in schemes:
                        payload = by_key.get((tau, scheme))
                        value = payload["scores"][variable][metric] if payload else None
                        row.append("" if value is None else f"{value:.6g}")
                writer.writerow(row)
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfm-lab",
        description="Simulate coupled Kolmogorov flow, train generative downscalers, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with defaults for this command")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--threads", type=int, help="worker threads (1 = fully sequential)")
        p.add_argument("--force", action="store_true", help="redo completed outputs")

    p = sub.add_parser("simulate", help="run coupled-flow trajectories")
    common(p)
    p.add_argument("--out", help="output root directory")
    p.add_argument("--tau", type=float, action="append", help="coupling value (repeatable)")
    p.add_argument("--trajectories", type=int, help="independent trajectories per tau")
    p.add_argument("--snapshots", type=int, help="snapshots per trajectory")
    p.add_argument("--grid-n", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--save-every", type=float)
    p.add_argument("--spinup", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build", help="assemble a training/test dataset")
    common(p)
    p.add_argument("--trajectories", nargs="+", required=True,
                   help="trajectory manifests or directories to scan")
    p.add_argument("--out")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--gap", type=int)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train one scheme")
    common(p)
    p.add_argument("--dataset", help="dataset manifest path")
    p.add_argument("--out", help="run directory")
    p.add_argument("--scheme", choices=list(SCHEME_ORDER))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ema-rate", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--kernel", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--encoder", choices=["conv1x1", "convnet"])
    p.add_argument("--condition-on-y", choices=["auto", "on", "off"])
    p.add_argument("--adaptive", choices=["on", "off"])
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--sigma-z-init", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--sample-steps", type=int, help="default sampler steps stored in the run")
    p.add_argument("--val-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate ensembles for test cases")
    common(p)
    p.add_argument("--run", help="run directory")
    p.add_argument("--members", type=int)
    p.add_argument("--cases", type=int, help="evaluate only the first N test cases")
    p.add_argument("--sample-steps", type=int, help="integrator steps (default: scheme)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score sampled ensembles")
    common(p)
    p.add_argument("--run", help="run directory")
    p.add_argument("--out", help="report directory (default: run directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table", help="join run reports into a comparison table")
    common(p)
    p.add_argument("--runs", nargs="+", required=True,
                   help="run dirs or report.json paths")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_table)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "lambda_", None) is not None:
        setattr(args, "lambda", args.lambda_)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileExistsError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
