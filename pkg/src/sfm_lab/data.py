"""Dataset assembly: trajectories -> normalized (y, x) splits with manifests.

Each trajectory is split chronologically: training snapshots from the start,
test snapshots from the end, and at least `gap` snapshots dropped between
them so adjacent-snapshot correlation cannot leak across the split.
Normalization statistics (per-channel mean/std) are computed on the training
split only and stored in the manifest; arrays on disk stay in physical units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import arrayio, spectral
from .errors import ConfigError
from .rng import stream

__all__ = [
    "Dataset",
    "build_dataset",
    "load_dataset",
    "minibatches",
]

DEFAULT_GAP = 5

Y_CHANNELS = ["zeta_l"]
X_CHANNELS = ["zeta_h"]


def _split_counts(n_traj: int, total: int) -> list[int]:
    base, extra = divmod(total, n_traj)
    return [base + (1 if i < extra else 0) for i in range(n_traj)]


def build_dataset(
    trajectory_manifests: list[str | Path],
    out_dir: str | Path,
    n_train: int,
    n_test: int,
    gap: int = DEFAULT_GAP,
    seed: int = 0,
) -> Path:
    """Assemble a (y, x) dataset from simulated trajectories.

    Returns the path of the dataset manifest.  Raises ConfigError when the
    trajectories cannot supply the requested counts with the decorrelation
    gap intact.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must both be >= 1")
    if gap < 0:
        raise ConfigError("gap must be >= 0")
    if not trajectory_manifests:
        raise ConfigError("no trajectory manifests supplied")

    trajectories = [spectral.read_trajectory(p) for p in trajectory_manifests]
    grid_n = trajectories[0].zeta_h.shape[-1]
    tau = trajectories[0].config.tau
    for traj, path in zip(trajectories, trajectory_manifests):
        if traj.zeta_h.shape[-1] != grid_n:
            raise ConfigError(f"grid size mismatch in {path}")
        if traj.config.tau != tau:
            raise ConfigError(f"coupling mismatch in {path}: {traj.config.tau} != {tau}")

    train_quota = _split_counts(len(trajectories), n_train)
    test_quota = _split_counts(len(trajectories), n_test)

    y_train, x_train, t_train = [], [], []
    y_test, x_test, t_test = [], [], []
    split_index = []
    for k, traj in enumerate(trajectories):
        n_snap = traj.zeta_h.shape[0]
        need = train_quota[k] + gap + test_quota[k]
        if n_snap < need:
            raise ConfigError(
                f"trajectory {k} holds {n_snap} snapshots; "
                f"{need} needed for {train_quota[k]} train + gap {gap} + {test_quota[k]} test"
            )
        tr = list(range(train_quota[k]))
        te = list(range(n_snap - test_quota[k], n_snap))
        split_index.append({"trajectory": k, "train": tr, "test": te})
        y_train.append(traj.zeta_l[tr])
        x_train.append(traj.zeta_h[tr])
        t_train.append(traj.times[tr])
        y_test.append(traj.zeta_l[te])
        x_test.append(traj.zeta_h[te])
        t_test.append(traj.times[te])

    def _stack(parts):  # [N, H, W] -> [N, 1, H, W]
        return np.concatenate(parts, axis=0)[:, None, :, :].astype(np.float32)

    arrays = {
        "y_train": _stack(y_train),
        "x_train": _stack(x_train),
        "y_test": _stack(y_test),
        "x_test": _stack(x_test),
    }

    def _stats(a: np.ndarray) -> dict:
        mean = np.mean(a, axis=(0, 2, 3), dtype=np.float64)
        std = np.std(a, axis=(0, 2, 3), dtype=np.float64)
        if np.any(std <= 0):
            raise ConfigError("degenerate training split: zero variance channel")
        return {"mean": mean.tolist(), "std": std.tolist()}

    normalization = {"y": _stats(arrays["y_train"]), "x": _stats(arrays["x_train"])}

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, a in arrays.items():
        fname = f"{name}.npy"
        sha = arrayio.write_field_array(out_dir / fname, a)
        files[name] = {"file": fname, "sha256": sha, "shape": list(a.shape)}

    manifest = {
        "format_version": arrayio.FORMAT_VERSION,
        "kind": "dataset",
        "tau": tau,
        "grid_n": int(grid_n),
        "n_train": int(n_train),
        "n_test": int(n_test),
        "gap": int(gap),
        "seed": int(seed),
        "channel_names": {"y": Y_CHANNELS, "x": X_CHANNELS},
        "normalization": normalization,
        "files": files,
        "split_index": split_index,
        "snapshot_times": {
            "train": np.concatenate(t_train).tolist(),
            "test": np.concatenate(t_test).tolist(),
        },
        "source_manifests": [str(Path(p)) for p in trajectory_manifests],
    }
    manifest_path = out_dir / "manifest.json"
    arrayio.write_manifest(manifest_path, manifest)
    return manifest_path


@dataclass
class Dataset:
    """In-memory dataset with normalization helpers.

    Arrays are raw (physical units); `normalize_*` maps to the zero-mean,
    unit-variance training scale and `denormalize_x` inverts it.
    """

    tau: float
    grid_n: int
    y_train: np.ndarray
    x_train: np.ndarray
    y_test: np.ndarray
    x_test: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    channel_names: dict
    manifest: dict

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.x_test.shape[0]

    def normalize_y(self, y: np.ndarray) -> np.ndarray:
        return ((y - self.y_mean) / self.y_std).astype(np.float32)

    def normalize_x(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.x_mean) / self.x_std).astype(np.float32)

    def denormalize_x(self, x: np.ndarray) -> np.ndarray:
        return (x * self.x_std + self.x_mean).astype(np.float32)


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset, verifying every file hash recorded in the manifest."""
    manifest_path = Path(manifest_path)
    manifest = arrayio.read_manifest(manifest_path)
    if manifest.get("kind") != "dataset":
        raise arrayio.IoError(f"{manifest_path} is not a dataset manifest")
    base = manifest_path.parent
    arrays = {}
    for name, entry in manifest["files"].items():
        arrays[name] = arrayio.read_field_array(base / entry["file"], entry["sha256"])
    norm = manifest["normalization"]

    def _vec(values):
        return np.asarray(values, dtype=np.float32).reshape(1, -1, 1, 1)

    return Dataset(
        tau=manifest["tau"],
        grid_n=manifest["grid_n"],
        y_train=arrays["y_train"],
        x_train=arrays["x_train"],
        y_test=arrays["y_test"],
        x_test=arrays["x_test"],
        y_mean=_vec(norm["y"]["mean"]),
        y_std=_vec(norm["y"]["std"]),
        x_mean=_vec(norm["x"]["mean"]),
        x_std=_vec(norm["x"]["std"]),
        channel_names=manifest["channel_names"],
        manifest=manifest,
    )


def minibatches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield normalized (y, x) batches in a deterministic per-epoch order.

    The shuffle depends only on (seed, epoch); the final short batch is
    included, so one epoch covers the training split exactly once.
    """
    n = dataset.n_train
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds training size {n}")
    order = stream(seed, "shuffle", epoch).permutation(n)
    y_all = dataset.normalize_y(dataset.y_train)
    x_all = dataset.normalize_x(dataset.x_train)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield y_all[idx], x_all[idx]
