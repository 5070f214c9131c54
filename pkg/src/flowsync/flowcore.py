"""Linear noise path and time grid used by training and sampling.

Convention used everywhere in this package: tau = 0 is clean data, tau = 1 is
pure Gaussian noise. A frame at level tau is

    x_tau = (1 - tau) * clean + tau * eps,       eps ~ N(0, I)

and the regression target for the velocity model is the path derivative

    d x_tau / d tau = eps - clean

which is constant in tau because the path is linear. Sampling integrates the
learned field from high tau down to exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import Grid2D, RngStream, require_same_shape


def validate_tau(tau: float, name: str = "tau") -> float:
    tau = float(tau)
    if not 0.0 <= tau <= 1.0 or not np.isfinite(tau):
        raise ContractError(f"{name} must lie in [0, 1], got {tau}")
    return tau


def fm_add(clean: Grid2D, tau: float, rng: RngStream) -> tuple[Grid2D, Grid2D]:
    """Mix a clean frame with fresh unit Gaussian noise at level tau.

    Returns (noised, eps) so callers can form the velocity target without a
    second draw. At tau = 0 the output equals ``clean`` exactly and at
    tau = 1 it equals ``eps`` exactly.
    """
    tau = validate_tau(tau)
    eps_values = rng.normal(clean.values.size)
    noised = (1.0 - tau) * clean.values + tau * eps_values
    return clean.with_values(noised), clean.with_values(eps_values)


def velocity_target(clean: Grid2D, eps: Grid2D) -> Grid2D:
    """Path derivative eps - clean; independent of tau along the linear path."""
    require_same_shape(clean, eps, "clean and eps")
    return clean.with_values(eps.values - clean.values)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly descending noise levels ending exactly at 0."""

    taus: tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if len(taus) < 2:
            raise ContractError("time grid needs at least 2 nodes")
        for t in taus:
            validate_tau(t, "grid node")
        if any(a <= b for a, b in zip(taus, taus[1:])):
            raise ContractError("time grid must be strictly descending")
        if taus[-1] != 0.0:
            raise ContractError(f"time grid must end at 0, got {taus[-1]}")
        object.__setattr__(self, "taus", taus)

    @property
    def n_steps(self) -> int:
        return len(self.taus) - 1


def make_time_grid(tau_start: float, n_steps: int) -> TimeGrid:
    """Uniform descending grid with n_steps intervals from tau_start to 0.

    Grid parameters come from run configuration, so bad values raise
    ConfigError rather than ContractError.
    """
    tau_start = validate_tau(tau_start, "tau_start")
    if tau_start == 0.0:
        raise ConfigError("tau_start must be positive")
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    taus = np.linspace(tau_start, 0.0, n_steps + 1)
    return TimeGrid(tuple(float(t) for t in taus))


def tau_to_discrete(tau: float, scale: int = 1000) -> int:
    """Map a continuous level to the 0..scale integer convention."""
    tau = validate_tau(tau)
    if scale < 1:
        raise ContractError(f"scale must be >= 1, got {scale}")
    return int(round(tau * scale))
