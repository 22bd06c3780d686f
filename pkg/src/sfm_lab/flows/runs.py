"""Run directories: training loops, checkpoints, ensembles and logs.

A run directory is self-describing:

    config.json         fully-resolved configuration, written before work starts
    train_log.csv       one TrainRecord row per step
    val_log.csv         periodic validation RMSE of the deterministic head
    checkpoints/        one checkpoint per model role (live + EMA weights)
    samples/            ensemble NPY [n_cases, m, C, H, W] + manifest
    report.csv/json     evaluation output
    manifest.json       status, sigma_z history, residual stats, dataset link

Reruns against a completed directory are no-ops unless forced; an aborted
run leaves status "incomplete" behind.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import arrayio, metrics
from ..data import Dataset, load_dataset, minibatches
from ..errors import ConfigError, IoError
from ..tensor.checkpoint import load_checkpoint, save_checkpoint
from .config import SchemeConfig, TrainRecord
from .models import NetworkConfig
from .schemes import OptimizerSettings, Scheme, compute_residual_std, make_scheme

__all__ = [
    "TrainSettings",
    "evaluate_run",
    "load_run",
    "run_is_complete",
    "sample_run",
    "train_run",
]

SIGMA_Z_LOG_EVERY = 10


@dataclass(frozen=True)
class TrainSettings:
    total_steps: int
    batch_size: int = 2
    seed: int = 0
    val_every: int = 500

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_payload(cls, payload: dict) -> "TrainSettings":
        return cls(**payload)


def run_is_complete(run_dir: str | Path) -> bool:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        return False
    try:
        return arrayio.read_manifest(path).get("status") == "complete"
    except IoError:
        return False


def train_run(
    run_dir: str | Path,
    dataset_manifest: str | Path,
    scheme_cfg: SchemeConfig,
    net_cfg: NetworkConfig,
    opt: OptimizerSettings,
    train_cfg: TrainSettings,
    force: bool = False,
) -> Scheme:
    """Train one scheme on one dataset, leaving a complete run directory."""
    run_dir = Path(run_dir)
    if run_is_complete(run_dir) and not force:
        raise FileExistsError(f"run {run_dir} is already complete (use force to redo)")
    if train_cfg.total_steps < 1:
        raise ConfigError("total_steps must be >= 1")

    dataset = load_dataset(dataset_manifest)
    data_channels = dataset.x_train.shape[1]
    cond_channels = dataset.y_train.shape[1]

    run_dir.mkdir(parents=True, exist_ok=True)
    config_payload = {
        "scheme": scheme_cfg.to_payload(),
        "network": net_cfg.to_payload(),
        "optimizer": opt.to_payload(),
        "training": train_cfg.to_payload(),
        "dataset_manifest": str(Path(dataset_manifest)),
        "data_channels": data_channels,
        "cond_channels": cond_channels,
    }
    arrayio.write_manifest(run_dir / "config.json", config_payload)
    _write_manifest(run_dir, scheme_cfg, dataset_manifest, status="incomplete",
                    sigma_z_history=[], scheme=None)

    scheme = make_scheme(
        scheme_cfg, net_cfg, data_channels, cond_channels,
        run_seed=train_cfg.seed, total_steps=train_cfg.total_steps, opt=opt,
    )

    sigma_z_history: list[tuple[int, float]] = []
    t_start = time.perf_counter()
    with open(run_dir / "train_log.csv", "w", newline="") as log_fh, open(
        run_dir / "val_log.csv", "w", newline=""
    ) as val_fh:
        log = csv.writer(log_fh, lineterminator="\n")
        log.writerow(["step", "denoise_loss", "reg_loss", "sigma_z", "grad_norm"])
        val = csv.writer(val_fh, lineterminator="\n")
        val.writerow(["step", "val_rmse"])

        step = 0
        epoch = 0
        while step < train_cfg.total_steps:
            for y_batch, x_batch in minibatches(dataset, train_cfg.batch_size,
                                                train_cfg.seed, epoch):
                if step >= train_cfg.total_steps:
                    break
                if scheme.needs_residual_stats(step):
                    compute_residual_std(
                        scheme.models,
                        dataset.normalize_y(dataset.y_train),
                        dataset.normalize_x(dataset.x_train),
                    )
                record = scheme.train_step(step, y_batch, x_batch)
                log.writerow(_format_record(record))
                if step % SIGMA_Z_LOG_EVERY == 0 or step == train_cfg.total_steps - 1:
                    sigma_z_history.append((step, scheme.noise.sigma_z))
                if train_cfg.val_every > 0 and (step + 1) % train_cfg.val_every == 0:
                    v = _validation_rmse(scheme, dataset)
                    if v is not None:
                        val.writerow([step, f"{v:.10g}"])
                step += 1
            epoch += 1

    _save_checkpoints(run_dir, scheme, train_cfg)
    _write_manifest(run_dir, scheme_cfg, dataset_manifest, status="complete",
                    sigma_z_history=sigma_z_history, scheme=scheme,
                    wall_seconds=time.perf_counter() - t_start)
    return scheme


def _format_record(r: TrainRecord) -> list:
    return [r.step, f"{r.denoise_loss:.10g}", f"{r.reg_loss:.10g}",
            f"{r.sigma_z:.10g}", f"{r.grad_norm:.10g}"]


def _validation_rmse(scheme: Scheme, dataset: Dataset) -> float | None:
    pred = scheme.deterministic_prediction(dataset.normalize_y(dataset.y_test))
    if pred is None:
        return None
    truth = dataset.normalize_x(dataset.x_test)
    return metrics.rmse(pred, truth)


def _save_checkpoints(run_dir: Path, scheme: Scheme, train_cfg: TrainSettings) -> None:
    ckpt_dir = run_dir / "checkpoints"
    rng_state = {"run_seed": train_cfg.seed, "next_step": train_cfg.total_steps}
    for role, pair in scheme.models.pairs():
        save_checkpoint(
            ckpt_dir / f"{role}.ckpt",
            {"role": role, "net": pair.spec.to_payload()},
            pair.params,
            pair.ema,
            rng_state,
        )


def _write_manifest(run_dir: Path, scheme_cfg: SchemeConfig, dataset_manifest,
                    status: str, sigma_z_history, scheme: Scheme | None,
                    wall_seconds: float | None = None) -> None:
    dataset_manifest = Path(dataset_manifest)
    normalization = None
    if dataset_manifest.is_file():
        normalization = arrayio.read_manifest(dataset_manifest).get("normalization")
    payload = {
        "kind": "run",
        "status": status,
        "scheme": scheme_cfg.scheme,
        "dataset_manifest": str(dataset_manifest),
        "dataset_sha256": arrayio.file_sha256(dataset_manifest)
        if dataset_manifest.is_file()
        else None,
        "normalization": normalization,
        "sigma_z_history": [[s, float(v)] for s, v in sigma_z_history],
        "sigma_z_final": float(scheme.noise.sigma_z) if scheme else None,
        "residual_std": scheme.models.residual_std.tolist()
        if scheme and scheme.models.residual_std is not None
        else None,
        "wall_seconds": wall_seconds,
    }
    arrayio.write_manifest(run_dir / "manifest.json", payload)


def load_run(run_dir: str | Path) -> tuple[Scheme, dict]:
    """Rebuild a trained Scheme (weights, sigma_z, residual stats) from disk."""
    run_dir = Path(run_dir)
    config = arrayio.read_manifest(run_dir / "config.json")
    manifest = arrayio.read_manifest(run_dir / "manifest.json")
    if manifest.get("status") != "complete":
        raise IoError(f"run {run_dir} is not complete")

    scheme_cfg = SchemeConfig.from_payload(config["scheme"])
    net_cfg = NetworkConfig.from_payload(config["network"])
    opt = OptimizerSettings.from_payload(config["optimizer"])
    train_cfg = TrainSettings.from_payload(config["training"])
    scheme = make_scheme(
        scheme_cfg, net_cfg, config["data_channels"], config["cond_channels"],
        run_seed=train_cfg.seed, total_steps=train_cfg.total_steps, opt=opt,
    )
    for role, pair in scheme.models.pairs():
        header, live, ema = load_checkpoint(run_dir / "checkpoints" / f"{role}.ckpt")
        pair.params.load_values(live)
        pair.ema.load_values(ema)
        pair.params.step_count = header["step_count"]
    if manifest.get("sigma_z_final"):
        scheme.noise.sigma_z = float(manifest["sigma_z_final"])
    if manifest.get("residual_std") is not None:
        scheme.models.residual_std = np.asarray(manifest["residual_std"], dtype=np.float32)
    return scheme, {"config": config, "manifest": manifest}


def sample_run(
    run_dir: str | Path,
    n_members: int,
    n_cases: int | None = None,
    seed: int = 0,
    n_steps: int | None = None,
    threads: int = 1,
    force: bool = False,
) -> Path:
    """Generate ensembles for test cases; returns the samples manifest path.

    Sampling happens on the normalized scale; stored members are mapped back
    to physical units.  Cases run in parallel when threads > 1; member noise
    is addressed per (seed, case, member), so parallelism cannot change it.
    """
    run_dir = Path(run_dir)
    scheme, info = load_run(run_dir)
    out_dir = run_dir / "samples"
    manifest_path = out_dir / "manifest.json"
    if manifest_path.is_file() and not force:
        existing = arrayio.read_manifest(manifest_path)
        if existing.get("status") == "complete":
            raise FileExistsError(f"samples already complete in {out_dir} (use force)")

    dataset = load_dataset(info["config"]["dataset_manifest"])
    total_cases = dataset.n_test
    n_cases = total_cases if n_cases is None else min(n_cases, total_cases)
    if n_cases < 1:
        raise ConfigError("need at least one test case")
    m = scheme.n_members_effective(n_members)

    y_norm = dataset.normalize_y(dataset.y_test[:n_cases])
    c_out = dataset.x_test.shape[1]
    h, w = dataset.x_test.shape[2:]
    members = np.empty((n_cases, m, c_out, h, w), dtype=np.float32)

    def one_case(i: int) -> None:
        fields = scheme.sample_ensemble(y_norm[i], m, case_index=i, seed=seed,
                                        n_steps=n_steps)
        members[i] = dataset.denormalize_x(fields)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one_case, range(n_cases)))
    else:
        for i in range(n_cases):
            one_case(i)

    out_dir.mkdir(parents=True, exist_ok=True)
    sha = arrayio.write_field_array(out_dir / "members.npy", members)
    arrayio.write_manifest(
        manifest_path,
        {
            "kind": "samples",
            "status": "complete",
            "scheme": scheme.name,
            "n_cases": n_cases,
            "n_members": m,
            "seed": seed,
            "n_steps": n_steps if n_steps is not None else scheme.cfg.n_steps,
            "case_indices": list(range(n_cases)),
            "file": "members.npy",
            "sha256": sha,
            "shape": list(members.shape),
        },
    )
    return manifest_path


def evaluate_run(run_dir: str | Path, out_dir: str | Path | None = None) -> metrics.SkillReport:
    """Score a sampled run against its dataset's test split."""
    run_dir = Path(run_dir)
    config = arrayio.read_manifest(run_dir / "config.json")
    samples_manifest = arrayio.read_manifest(run_dir / "samples" / "manifest.json")
    if samples_manifest.get("status") != "complete":
        raise IoError(f"samples in {run_dir} are incomplete")
    dataset = load_dataset(config["dataset_manifest"])

    members = arrayio.read_field_array(
        run_dir / "samples" / samples_manifest["file"], samples_manifest["sha256"]
    )
    case_indices = samples_manifest["case_indices"]
    missing = [i for i in case_indices if i >= dataset.n_test]
    if missing:
        raise ConfigError(f"sampled cases missing from the test split: {missing}")
    truths = dataset.x_test[case_indices]

    report = metrics.evaluate(
        members, truths, dataset.channel_names["x"], samples_manifest["scheme"]
    )
    report.metadata["tau"] = dataset.tau
    report.metadata["n_sample_steps"] = samples_manifest["n_steps"]
    metrics.write_report(report, out_dir if out_dir is not None else run_dir)
    return report
