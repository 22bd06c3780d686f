"""Pseudo-spectral simulator for a coupled two-field Kolmogorov flow.

Two vorticity fields evolve on a doubly periodic square: a forced
fine-resolution field and an unforced coarse field nudged toward it with
strength 1/tau.  Larger tau means looser coupling, so the pair of fields
drifts further apart; that misalignment is exactly what the generative
schemes downstream are asked to bridge.

The evolution equations, with J(f, g) = f_x g_y - f_y g_x and psi the stream
function of each field (lap psi = zeta):

    d zeta_h / dt + J(psi_h, zeta_h) = F - zeta_h / tau_r - nu_h |k|^p zeta_h
    d zeta_l / dt + J(psi_l, zeta_l) = -(zeta_l - zeta_h)/tau
                                       - zeta_l / tau_r - nu_l |k|^p zeta_l

F = A cos(m x) forces only the fine field.  Hyperdissipation acts as the
spectral multiplier -nu |k|^p (p defaults to 7) and is integrated implicitly
(backward Euler) because it is stiff; everything else is explicit
Adams-Bashforth (third order after bootstrap).  A 2/3 dealiasing mask is
applied every step, and the k=0 mode is pinned to zero (both fields stay
mean-free).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import arrayio
from .errors import BlowUpError, ConfigError
from .rng import stream

__all__ = [
    "SimConfig",
    "SpectralWorkspace",
    "VorticityState",
    "TrajectoryResult",
    "adams_bashforth_step",
    "build_workspace",
    "initial_state",
    "jacobian",
    "laplacian",
    "poisson_solve",
    "radial_power_spectrum",
    "run_trajectory",
    "step",
    "write_trajectory",
    "read_trajectory",
]

BLOWUP_LIMIT = 1.0e6

# Adams-Bashforth weights for the multistep phase.
_AB2 = (1.5, -0.5)
_AB3 = (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0)


@dataclass(frozen=True)
class SimConfig:
    """Simulation parameters; `resolved()` fills derived viscosities."""

    grid_n: int = 64
    dt: float = 1.0e-3
    save_every: float = 0.2
    tau: float = 5.0
    tau_r: float = 100.0
    nu_h: float | None = None
    nu_l: float | None = None
    forcing_amplitude: float = 10.0
    forcing_wavenumber: int = 10
    seed: int = 0
    spinup_time: float = 50.0
    hyper_exponent: int = 7

    def resolved(self) -> "SimConfig":
        """Return a validated copy with nu_h / nu_l defaults filled in.

        Default viscosities are pinned to the grid: the fine field loses
        half its amplitude per time unit at the dealiasing cutoff k_c = n/3,
        the coarse field already at k_c/2, which keeps nu_l >> nu_h and makes
        the coarse field effectively low-resolution.
        """
        cfg = self
        if cfg.nu_h is None or cfg.nu_l is None:
            k_cut = cfg.grid_n / 3.0
            nu_h = math.log(2.0) / k_cut**cfg.hyper_exponent
            nu_l = math.log(2.0) / (k_cut / 2.0) ** cfg.hyper_exponent
            cfg = replace(cfg, nu_h=nu_h if cfg.nu_h is None else cfg.nu_h,
                          nu_l=nu_l if cfg.nu_l is None else cfg.nu_l)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        n = self.grid_n
        if n < 16 or (n & (n - 1)) != 0:
            raise ConfigError(f"grid_n must be a power of two >= 16, got {n}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        ratio = self.save_every / self.dt
        if self.save_every <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(
                f"save_every ({self.save_every}) must be an integer multiple of dt ({self.dt})"
            )
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.tau_r > 0:
            raise ConfigError(f"tau_r must be positive, got {self.tau_r}")
        nu_h, nu_l = self.nu_h, self.nu_l
        if nu_h is None or nu_l is None:
            raise ConfigError("nu_h / nu_l unset; call resolved() first")
        inviscid = nu_h == 0.0 and nu_l == 0.0
        if not inviscid and not (nu_l > nu_h > 0.0):
            raise ConfigError(
                f"need nu_l > nu_h > 0 (or both exactly 0 for inviscid runs), got {nu_l}, {nu_h}"
            )
        if self.spinup_time < 0:
            raise ConfigError("spinup_time must be non-negative")
        if self.hyper_exponent < 2:
            raise ConfigError("hyper_exponent must be >= 2")

    @property
    def steps_per_save(self) -> int:
        return int(round(self.save_every / self.dt))


@dataclass(frozen=True)
class SpectralWorkspace:
    """Precomputed per-mode operators for one grid size.

    Arrays live on the rfft2 grid [n, n//2 + 1]; the last axis is x.
    """

    grid_n: int
    kx: np.ndarray
    ky: np.ndarray
    k_sq: np.ndarray
    dealias_mask: np.ndarray
    inverse_laplacian: np.ndarray
    dissipation_factors: np.ndarray  # [2, n, n//2+1]: rows (low, high)
    forcing_hat: np.ndarray
    dt: float


def build_workspace(cfg: SimConfig) -> SpectralWorkspace:
    cfg = cfg.resolved()
    n = cfg.grid_n
    kx = np.fft.rfftfreq(n, d=1.0 / n)  # 0..n/2, integers
    ky = np.fft.fftfreq(n, d=1.0 / n)  # 0..n/2-1, -n/2..-1
    kxg, kyg = np.meshgrid(kx, ky)
    k_sq = kxg**2 + kyg**2

    cutoff = n / 3.0
    dealias_mask = (np.abs(kxg) <= cutoff) & (np.abs(kyg) <= cutoff)

    inv_lap = np.zeros_like(k_sq)
    nonzero = k_sq > 0
    inv_lap[nonzero] = -1.0 / k_sq[nonzero]  # psi_hat = -zeta_hat / k^2

    k_mag = np.sqrt(k_sq)
    hyper = k_mag**cfg.hyper_exponent
    diss = np.stack(
        [
            1.0 / (1.0 + cfg.dt * cfg.nu_l * hyper),
            1.0 / (1.0 + cfg.dt * cfg.nu_h * hyper),
        ]
    )

    x = 2.0 * np.pi * np.arange(n) / n
    forcing = cfg.forcing_amplitude * np.cos(cfg.forcing_wavenumber * x)
    forcing_hat = np.fft.rfft2(np.broadcast_to(forcing, (n, n)))
    forcing_hat[~dealias_mask] = 0.0

    return SpectralWorkspace(
        grid_n=n,
        kx=kxg,
        ky=kyg,
        k_sq=k_sq,
        dealias_mask=dealias_mask,
        inverse_laplacian=inv_lap,
        dissipation_factors=diss,
        forcing_hat=forcing_hat,
        dt=cfg.dt,
    )


@dataclass
class VorticityState:
    """Both vorticity fields plus the multistep tendency history.

    The spectral arrays (`*_hat`) are authoritative: the stepper never
    round-trips through physical space, so dealiased modes stay exactly
    zero.  The physical fields are synchronized views used for output and
    the blow-up check.
    """

    zeta_l: np.ndarray
    zeta_h: np.ndarray
    zeta_l_hat: np.ndarray
    zeta_h_hat: np.ndarray
    time: float
    ab_history: list = field(default_factory=list)

    @classmethod
    def from_physical(cls, zeta_l: np.ndarray, zeta_h: np.ndarray,
                      ws: SpectralWorkspace, time: float = 0.0) -> "VorticityState":
        zl = np.asarray(zeta_l, dtype=np.float64)
        zh = np.asarray(zeta_h, dtype=np.float64)
        if zl.shape != (ws.grid_n, ws.grid_n) or zh.shape != (ws.grid_n, ws.grid_n):
            raise ConfigError(
                f"fields must be [{ws.grid_n}, {ws.grid_n}], got {zl.shape} / {zh.shape}"
            )
        zl_hat = np.fft.rfft2(zl) * ws.dealias_mask
        zh_hat = np.fft.rfft2(zh) * ws.dealias_mask
        zl_hat[0, 0] = 0.0
        zh_hat[0, 0] = 0.0
        return cls(
            zeta_l=np.fft.irfft2(zl_hat, s=zl.shape),
            zeta_h=np.fft.irfft2(zh_hat, s=zh.shape),
            zeta_l_hat=zl_hat,
            zeta_h_hat=zh_hat,
            time=time,
        )

    @classmethod
    def from_spectral(cls, zl_hat: np.ndarray, zh_hat: np.ndarray,
                      ws: SpectralWorkspace, time: float,
                      ab_history: list | None = None) -> "VorticityState":
        n = ws.grid_n
        return cls(
            zeta_l=np.fft.irfft2(zl_hat, s=(n, n)),
            zeta_h=np.fft.irfft2(zh_hat, s=(n, n)),
            zeta_l_hat=zl_hat,
            zeta_h_hat=zh_hat,
            time=time,
            ab_history=ab_history if ab_history is not None else [],
        )


def _derivatives(f_hat: np.ndarray, ws: SpectralWorkspace) -> tuple[np.ndarray, np.ndarray]:
    n = ws.grid_n
    fx = np.fft.irfft2(1j * ws.kx * f_hat, s=(n, n))
    fy = np.fft.irfft2(1j * ws.ky * f_hat, s=(n, n))
    return fx, fy


def _jacobian_hat(f_hat: np.ndarray, g_hat: np.ndarray, ws: SpectralWorkspace) -> np.ndarray:
    """Dealiased spectrum of J(f, g) from the spectra of f and g."""
    fx, fy = _derivatives(f_hat, ws)
    gx, gy = _derivatives(g_hat, ws)
    jac = np.fft.rfft2(fx * gy - fy * gx)
    jac *= ws.dealias_mask
    return jac


def jacobian(f: np.ndarray, g: np.ndarray, ws: SpectralWorkspace) -> np.ndarray:
    """J(f, g) = f_x g_y - f_y g_x via spectral derivatives, dealiased."""
    shape = (ws.grid_n, ws.grid_n)
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != shape or g.shape != shape:
        raise ConfigError(f"jacobian inputs must be {shape}, got {f.shape} / {g.shape}")
    out_hat = _jacobian_hat(np.fft.rfft2(f), np.fft.rfft2(g), ws)
    return np.fft.irfft2(out_hat, s=shape)


def poisson_solve(zeta: np.ndarray, ws: SpectralWorkspace) -> np.ndarray:
    """Solve lap psi = zeta with zero-mean psi (k=0 gauge)."""
    shape = (ws.grid_n, ws.grid_n)
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.shape != shape:
        raise ConfigError(f"poisson_solve expects {shape}, got {zeta.shape}")
    return np.fft.irfft2(np.fft.rfft2(zeta) * ws.inverse_laplacian, s=shape)


def laplacian(f: np.ndarray, ws: SpectralWorkspace) -> np.ndarray:
    shape = (ws.grid_n, ws.grid_n)
    return np.fft.irfft2(np.fft.rfft2(np.asarray(f, dtype=np.float64)) * (-ws.k_sq), s=shape)


def adams_bashforth_step(
    state: np.ndarray,
    history: list,
    dt: float,
    tendency: Callable[[np.ndarray], np.ndarray],
) -> tuple[np.ndarray, list]:
    """One explicit multistep update of `state` under `tendency`.

    Bootstrap keeps the start consistent with third order: the first step is
    Heun (predictor-corrector), the second two-step Adams-Bashforth, then
    the three-step scheme.  `history` holds the last two tendency values and
    is returned updated.
    """
    t_now = tendency(state)
    if len(history) >= 2:
        inc = dt * (_AB3[0] * t_now + _AB3[1] * history[-1] + _AB3[2] * history[-2])
    elif len(history) == 1:
        inc = dt * (_AB2[0] * t_now + _AB2[1] * history[-1])
    else:
        predictor = state + dt * t_now
        inc = 0.5 * dt * (t_now + tendency(predictor))
    new_history = (history + [t_now])[-2:]
    return state + inc, new_history


def _explicit_tendency(stacked: np.ndarray, cfg: SimConfig, ws: SpectralWorkspace) -> np.ndarray:
    """Stacked tendencies [low, high] excluding hyperdissipation."""
    zl_hat, zh_hat = stacked[0], stacked[1]
    psi_l_hat = zl_hat * ws.inverse_laplacian
    psi_h_hat = zh_hat * ws.inverse_laplacian

    coupling = 0.0 if math.isinf(cfg.tau) else 1.0 / cfg.tau
    rayleigh = 0.0 if math.isinf(cfg.tau_r) else 1.0 / cfg.tau_r

    n_h = -_jacobian_hat(psi_h_hat, zh_hat, ws) + ws.forcing_hat - rayleigh * zh_hat
    n_l = -_jacobian_hat(psi_l_hat, zl_hat, ws) - coupling * (zl_hat - zh_hat) - rayleigh * zl_hat
    return np.stack([n_l, n_h])


def step(state: VorticityState, cfg: SimConfig, ws: SpectralWorkspace) -> VorticityState:
    """Advance both fields by one dt (explicit AB + implicit dissipation)."""
    stacked = np.stack([state.zeta_l_hat, state.zeta_h_hat])
    new_stacked, new_history = adams_bashforth_step(
        stacked, state.ab_history, cfg.dt, lambda s: _explicit_tendency(s, cfg, ws)
    )
    new_stacked *= ws.dissipation_factors
    new_stacked *= ws.dealias_mask
    new_stacked[:, 0, 0] = 0.0

    out = VorticityState.from_spectral(
        new_stacked[0], new_stacked[1], ws, state.time + cfg.dt, new_history
    )
    for name, fld in (("zeta_l", out.zeta_l), ("zeta_h", out.zeta_h)):
        if not np.all(np.isfinite(fld)) or np.max(np.abs(fld)) > BLOWUP_LIMIT:
            raise BlowUpError(f"{name} blew up at t={out.time:.6g}", time=out.time)
    return out


def initial_state(cfg: SimConfig, ws: SpectralWorkspace) -> VorticityState:
    """Random band-limited start, unit enstrophy, identical in both fields.

    Spectrum shape k^2 exp(-(k/6)^2); identical low/high fields at t=0 so
    that the coupling strength alone controls how far they drift apart.
    """
    n = cfg.grid_n
    rng = stream(cfg.seed, "sim-init")
    white = rng.standard_normal((n, n))
    shape_hat = np.fft.rfft2(white)
    k_mag = np.sqrt(ws.k_sq)
    amplitude = k_mag * np.exp(-0.5 * (k_mag / 6.0) ** 2)  # sqrt of k^2 exp(-(k/6)^2)
    zeta_hat = shape_hat * amplitude * ws.dealias_mask
    zeta_hat[0, 0] = 0.0
    zeta = np.fft.irfft2(zeta_hat, s=(n, n))
    rms = np.sqrt(np.mean(zeta**2))
    if rms > 0:
        zeta /= rms
    return VorticityState.from_physical(zeta, zeta.copy(), ws)


@dataclass
class TrajectoryResult:
    times: np.ndarray  # [n_snapshots]
    zeta_l: np.ndarray  # [n_snapshots, n, n] float32
    zeta_h: np.ndarray
    config: SimConfig


def run_trajectory(cfg: SimConfig, n_snapshots: int) -> TrajectoryResult:
    """Spin up, then record `n_snapshots` states every save_every time units."""
    cfg = cfg.resolved()
    if n_snapshots < 1:
        raise ConfigError(f"n_snapshots must be >= 1, got {n_snapshots}")
    ws = build_workspace(cfg)
    state = initial_state(cfg, ws)

    spinup_steps = int(round(cfg.spinup_time / cfg.dt))
    for _ in range(spinup_steps):
        state = step(state, cfg, ws)

    n = cfg.grid_n
    times = np.empty(n_snapshots, dtype=np.float64)
    zl = np.empty((n_snapshots, n, n), dtype=np.float32)
    zh = np.empty((n_snapshots, n, n), dtype=np.float32)
    for snap in range(n_snapshots):
        for _ in range(cfg.steps_per_save):
            state = step(state, cfg, ws)
        times[snap] = state.time
        zl[snap] = state.zeta_l.astype(np.float32)
        zh[snap] = state.zeta_h.astype(np.float32)
    return TrajectoryResult(times=times, zeta_l=zl, zeta_h=zh, config=cfg)


def radial_power_spectrum(fld: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic power spectrum: |fft|^2 averaged in integer-radius bins.

    Bins run 0..n/2; a mode with wavevector k lands in bin floor(|k|+0.5).
    Corner modes beyond n/2 are dropped.
    """
    fld = np.asarray(fld, dtype=np.float64)
    if fld.ndim != 2 or fld.shape[0] != fld.shape[1]:
        raise ConfigError(f"radial_power_spectrum expects a square field, got {fld.shape}")
    n = fld.shape[0]
    power = np.abs(np.fft.fft2(fld)) ** 2
    k1 = np.fft.fftfreq(n, d=1.0 / n)
    kxg, kyg = np.meshgrid(k1, k1)
    radius = np.floor(np.sqrt(kxg**2 + kyg**2) + 0.5).astype(np.int64)
    n_bins = n // 2 + 1
    keep = radius < n_bins
    sums = np.bincount(radius[keep], weights=power[keep], minlength=n_bins)
    counts = np.bincount(radius[keep], minlength=n_bins)
    return np.arange(n_bins), sums / counts


def enstrophy(fld: np.ndarray) -> float:
    return float(np.mean(np.asarray(fld, dtype=np.float64) ** 2))


def kinetic_energy(zeta: np.ndarray, ws: SpectralWorkspace) -> float:
    """0.5 <|grad psi|^2> for the field's stream function."""
    psi_hat = np.fft.rfft2(np.asarray(zeta, dtype=np.float64)) * ws.inverse_laplacian
    ux, uy = _derivatives(psi_hat, ws)
    return float(0.5 * np.mean(ux**2 + uy**2))


def write_trajectory(out_dir: str | Path, result: TrajectoryResult) -> Path:
    """One NPY per field plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    files = {}
    for name, values in (("zeta_l", result.zeta_l), ("zeta_h", result.zeta_h)):
        fname = f"{name}.npy"
        sha = arrayio.write_field_array(out_dir / fname, values)
        files[name] = {"file": fname, "sha256": sha, "shape": list(values.shape)}
    manifest = {
        "format_version": arrayio.FORMAT_VERSION,
        "kind": "trajectory",
        "config": _config_payload(cfg),
        "seed": cfg.seed,
        "derived_viscosity": {"nu_l": cfg.nu_l, "nu_h": cfg.nu_h},
        "snapshot_times": [float(t) for t in result.times],
        "fields": files,
    }
    path = out_dir / "manifest.json"
    arrayio.write_manifest(path, manifest)
    return path


def read_trajectory(manifest_path: str | Path) -> TrajectoryResult:
    manifest_path = Path(manifest_path)
    manifest = arrayio.read_manifest(manifest_path)
    if manifest.get("kind") != "trajectory":
        raise arrayio.IoError(f"{manifest_path} is not a trajectory manifest")
    base = manifest_path.parent
    fields = {}
    for name in ("zeta_l", "zeta_h"):
        entry = manifest["fields"][name]
        fields[name] = arrayio.read_field_array(base / entry["file"], entry["sha256"])
    cfg = SimConfig(**manifest["config"])
    return TrajectoryResult(
        times=np.asarray(manifest["snapshot_times"], dtype=np.float64),
        zeta_l=fields["zeta_l"],
        zeta_h=fields["zeta_h"],
        config=cfg,
    )


def _config_payload(cfg: SimConfig) -> dict:
    payload = {
        "grid_n": cfg.grid_n,
        "dt": cfg.dt,
        "save_every": cfg.save_every,
        "tau": cfg.tau,
        "tau_r": cfg.tau_r,
        "nu_h": cfg.nu_h,
        "nu_l": cfg.nu_l,
        "forcing_amplitude": cfg.forcing_amplitude,
        "forcing_wavenumber": cfg.forcing_wavenumber,
        "seed": cfg.seed,
        "spinup_time": cfg.spinup_time,
        "hyper_exponent": cfg.hyper_exponent,
    }
    return payload
