"""Deterministic and probabilistic skill scores over generated ensembles.

Aggregation order is fixed and recorded in every report: scores are computed
per pixel, averaged over pixels, then over test cases, per channel.  All
accumulation happens in float64.

CRPS uses the empirical-CDF energy form

    CRPS = (1/m) sum_i |X_i - x|  -  (1/(2 m^2)) sum_ij |X_i - X_j|

(the biased estimator; an unbiased variant divides the second term by
m(m-1) instead and is available behind a flag).  The pairwise sum is
evaluated through the sorted-member identity, which is algebraically equal.

The spread-skill ratio divides the aggregate ensemble spread (unbiased m-1
variance per point) by the aggregate RMS error of individual members, so an
ensemble drawn from the true predictive distribution scores ~1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .errors import ConfigError
from .spectral import radial_power_spectrum

__all__ = [
    "EnsembleBatch",
    "SkillReport",
    "crps_ensemble",
    "evaluate",
    "mae",
    "rmse",
    "ssr",
    "write_report",
]


@dataclass
class EnsembleBatch:
    """m generated members and the matching truth for one case."""

    members: np.ndarray  # [m, C, H, W]
    truth: np.ndarray  # [C, H, W]
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.members.ndim != 4 or self.truth.ndim != 3:
            raise ConfigError("EnsembleBatch expects members [m,C,H,W], truth [C,H,W]")
        if self.members.shape[1:] != self.truth.shape:
            raise ConfigError(
                f"member/truth shapes disagree: {self.members.shape[1:]} vs {self.truth.shape}"
            )
        if self.members.shape[0] < 1:
            raise ConfigError("need at least one ensemble member")


def _as64(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def rmse(predictions: np.ndarray, truths: np.ndarray) -> float:
    """Root mean squared error over all pixels and cases."""
    predictions, truths = _as64(predictions), _as64(truths)
    if predictions.size == 0:
        raise ConfigError("rmse of empty input")
    if predictions.shape != truths.shape:
        raise ConfigError(f"shape mismatch: {predictions.shape} vs {truths.shape}")
    return float(np.sqrt(np.mean((predictions - truths) ** 2)))


def mae(predictions: np.ndarray, truths: np.ndarray) -> float:
    predictions, truths = _as64(predictions), _as64(truths)
    if predictions.size == 0:
        raise ConfigError("mae of empty input")
    if predictions.shape != truths.shape:
        raise ConfigError(f"shape mismatch: {predictions.shape} vs {truths.shape}")
    return float(np.mean(np.abs(predictions - truths)))


def crps_ensemble(members: np.ndarray, obs: np.ndarray, biased: bool = True) -> float:
    """Ensemble CRPS averaged over points; members [m, ...], obs [...].

    With one member the score reduces exactly to |X - x| (MAE).
    """
    members, obs = _as64(members), _as64(obs)
    if members.ndim != obs.ndim + 1 or members.shape[1:] != obs.shape:
        raise ConfigError(f"members {members.shape} do not stack over obs {obs.shape}")
    m = members.shape[0]
    if m < 1:
        raise ConfigError("need at least one member")

    term1 = np.mean(np.abs(members - obs[None]), axis=0)
    if m == 1:
        return float(np.mean(term1))
    # sum_ij |X_i - X_j| = 2 * sum_k (2k - m + 1) X_(k) over ascending sorted members
    srt = np.sort(members, axis=0)
    coeff = (2.0 * np.arange(m) - m + 1.0).reshape(m, *([1] * obs.ndim))
    pair_sum = 2.0 * np.sum(coeff * srt, axis=0)
    denom = m * m if biased else m * (m - 1)
    return float(np.mean(term1 - pair_sum / (2.0 * denom)))


def _ssr_components(members: np.ndarray, obs: np.ndarray) -> tuple[float, float]:
    """(mean per-point ddof-1 ensemble variance, mean squared member error)."""
    members, obs = _as64(members), _as64(obs)
    if members.ndim != obs.ndim + 1 or members.shape[1:] != obs.shape:
        raise ConfigError(f"members {members.shape} do not stack over obs {obs.shape}")
    if members.shape[0] < 2:
        raise ConfigError("ensemble spread is undefined for fewer than 2 members")
    spread_sq = float(np.mean(np.var(members, axis=0, ddof=1)))
    skill_sq = float(np.mean((members - obs[None]) ** 2))
    return spread_sq, skill_sq


def ssr(members: np.ndarray, truths: np.ndarray) -> float:
    """Spread-skill ratio: aggregate spread over aggregate member RMS error.

    spread^2 is the mean per-point ensemble variance (unbiased, m-1);
    skill^2 the mean squared error of individual members against the truth.
    Members drawn from the true predictive distribution give a ratio near 1.
    """
    spread_sq, skill_sq = _ssr_components(members, truths)
    if skill_sq == 0.0:
        return 0.0 if spread_sq == 0.0 else float("inf")
    return float(np.sqrt(spread_sq / skill_sq))


@dataclass
class SkillReport:
    scheme: str
    n_cases: int
    n_members: int
    channel_names: list[str]
    scores: dict  # channel -> {metric -> value or None}
    spectra: dict  # channel -> {"k_bin": [...], "power_truth": [...], "power_pred_mean": [...]}
    metadata: dict

    def validate(self) -> "SkillReport":
        for channel, row in self.scores.items():
            for metric, value in row.items():
                if value is None:
                    continue
                if not np.isfinite(value) or value < 0:
                    raise ConfigError(f"invalid {metric}={value} for channel {channel}")
        return self


def evaluate(
    samples: np.ndarray,
    truths: np.ndarray,
    channel_names: list[str],
    scheme: str,
    biased_crps: bool = True,
) -> SkillReport:
    """Score an ensemble run: samples [N, m, C, H, W] against truths [N, C, H, W]."""
    samples, truths = _as64(samples), _as64(truths)
    if samples.ndim != 5 or truths.ndim != 4:
        raise ConfigError("evaluate expects samples [N,m,C,H,W] and truths [N,C,H,W]")
    if samples.shape[0] != truths.shape[0] or samples.shape[2:] != truths.shape[1:]:
        raise ConfigError(
            f"samples {samples.shape} do not cover truths {truths.shape}"
        )
    n_cases, m = samples.shape[:2]
    if len(channel_names) != samples.shape[2]:
        raise ConfigError("channel_names length mismatch")

    scores: dict[str, dict] = {}
    spectra: dict[str, dict] = {}
    for c, name in enumerate(channel_names):
        member_fields = samples[:, :, c]  # [N, m, H, W]
        truth_fields = truths[:, c]  # [N, H, W]
        ens_mean = member_fields.mean(axis=1)
        crps_val = np.mean(
            [crps_ensemble(member_fields[i], truth_fields[i], biased_crps) for i in range(n_cases)]
        )
        if m >= 2:
            parts = [_ssr_components(member_fields[i], truth_fields[i]) for i in range(n_cases)]
            spread_sq = float(np.mean([p[0] for p in parts]))
            skill_sq = float(np.mean([p[1] for p in parts]))
            ssr_val = 0.0 if skill_sq == 0 else float(np.sqrt(spread_sq / skill_sq))
        else:
            ssr_val = None
        scores[name] = {
            "rmse": rmse(ens_mean, truth_fields),
            "mae": mae(ens_mean, truth_fields),
            "crps": float(crps_val),
            "ssr": ssr_val,
        }

        k_bins, truth_power = _mean_spectrum(truth_fields)
        _, pred_power = _mean_spectrum(member_fields.reshape(-1, *member_fields.shape[2:]))
        spectra[name] = {
            "k_bin": k_bins.tolist(),
            "power_truth": truth_power.tolist(),
            "power_pred_mean": pred_power.tolist(),
        }

    report = SkillReport(
        scheme=scheme,
        n_cases=int(n_cases),
        n_members=int(m),
        channel_names=list(channel_names),
        scores=scores,
        spectra=spectra,
        metadata={
            "crps_estimator": "biased" if biased_crps else "unbiased",
            "spread_normalization": "unbiased (m-1)",
            "mae_on": "ensemble mean",
            "ssr_skill": "rms error of individual members",
            "aggregation_order": "pixels -> cases -> channel",
        },
    )
    return report.validate()


def _mean_spectrum(fields: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k_bins, acc = radial_power_spectrum(fields[0])
    for f in fields[1:]:
        acc = acc + radial_power_spectrum(f)[1]
    return k_bins, acc / fields.shape[0]


def write_report(report: SkillReport, out_dir: str | Path) -> tuple[Path, Path, Path]:
    """Write report.csv (long form), report.json and spectra.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variable", "metric", "scheme", "value"])
        for channel in report.channel_names:
            for metric in ("rmse", "crps", "mae", "ssr"):
                value = report.scores[channel][metric]
                writer.writerow(
                    [channel, metric, report.scheme, "" if value is None else f"{value:.10g}"]
                )

    json_path = out_dir / "report.json"
    arrayio.write_manifest(
        json_path,
        {
            "kind": "report",
            "scheme": report.scheme,
            "n_cases": report.n_cases,
            "n_members": report.n_members,
            "channel_names": report.channel_names,
            "scores": report.scores,
            "spectra": report.spectra,
            "metadata": report.metadata,
        },
    )

    spectra_path = out_dir / "spectra.csv"
    with open(spectra_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k_bin", "power", "series"])
        for channel in report.channel_names:
            tab = report.spectra[channel]
            for series in ("power_truth", "power_pred_mean"):
                label = f"{channel}/{'truth' if series == 'power_truth' else report.scheme}"
                for k, p in zip(tab["k_bin"], tab[series]):
                    writer.writerow([k, f"{p:.10g}", label])

    return csv_path, json_path, spectra_path
