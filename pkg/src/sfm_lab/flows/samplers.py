"""Euler ODE integrators for sampling.

Two time parameterizations cover all schemes:

* `flow_euler`: flow time t runs 0 -> 1 on a uniform grid with noise level
  sigma(t) = (1 - t) * sigma_start.  The velocity toward the denoised
  estimate is (D(x, sigma) - x) / (1 - t); the final step returns D directly
  because the velocity expression degenerates at t = 1 (and on a locally
  linear path the Euler step to t = 1 lands exactly on D anyway).

* `edm_euler`: noise level runs down a rho-polynomial grid from sigma_max to
  sigma_min with a terminal 0, integrating dx/dsigma = (x - D(x, sigma)) / sigma.

Both check for non-finite states each step.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import SamplingError

__all__ = ["edm_euler", "edm_sigma_grid", "flow_euler"]

DenoiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
# signature: (x [B, C, H, W], sigma [B]) -> denoised x-estimate [B, C, H, W]


def _check_finite(x: np.ndarray, step: int, label: str) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite {label} state at integrator step {step}", step=step)


def flow_euler(denoise: DenoiseFn, z: np.ndarray, sigma_start: float, n_steps: int) -> np.ndarray:
    """Integrate from the latent z at t=0 to the sample at t=1."""
    if n_steps < 1:
        raise SamplingError("n_steps must be >= 1", step=0)
    x = np.asarray(z, dtype=np.float32).copy()
    batch = x.shape[0]
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = i * dt
        sigma = np.full(batch, (1.0 - t) * sigma_start, dtype=np.float64)
        d = denoise(x, sigma)
        if i == n_steps - 1:
            x = np.asarray(d, dtype=np.float32)
        else:
            x += (dt / (1.0 - t)) * (d - x)
        _check_finite(x, i, "flow")
    return x


def edm_sigma_grid(sigma_max: float, sigma_min: float, n_steps: int, rho: float) -> np.ndarray:
    """rho-polynomial noise levels sigma_max -> sigma_min, then a final 0."""
    i = np.arange(n_steps, dtype=np.float64)
    grid = (
        sigma_max ** (1.0 / rho)
        + i / (n_steps - 1) * (sigma_min ** (1.0 / rho) - sigma_max ** (1.0 / rho))
    ) ** rho if n_steps > 1 else np.array([sigma_max], dtype=np.float64)
    return np.concatenate([grid, [0.0]])


def edm_euler(
    denoise: DenoiseFn,
    noise: np.ndarray,
    sigma_max: float,
    sigma_min: float,
    n_steps: int,
    rho: float = 7.0,
) -> np.ndarray:
    """Variance-exploding sampling: start at sigma_max * noise, walk the grid to 0."""
    if n_steps < 1:
        raise SamplingError("n_steps must be >= 1", step=0)
    grid = edm_sigma_grid(sigma_max, sigma_min, n_steps, rho)
    x = (np.asarray(noise, dtype=np.float32) * grid[0]).astype(np.float32)
    batch = x.shape[0]
    for i in range(n_steps):
        s_cur, s_next = grid[i], grid[i + 1]
        sigma = np.full(batch, s_cur, dtype=np.float64)
        d = denoise(x, sigma)
        x += np.float32((s_next - s_cur) / s_cur) * (x - d)
        _check_finite(x, i, "diffusion")
    return x
