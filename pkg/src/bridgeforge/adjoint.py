"""Reversed-dynamics (adjoint) systems and weighted path simulation.

For a base model with drift f and covariance Sigma, the adjoint system on
the horizon [t0, T] has drift ``alpha``, diffusion ``sigma_tilde`` and a
scalar correction rate ``c``, all evaluated at the reflected time
``T + t0 - s``:

    alpha_i = div_j Sigma_ij - f_i
    sigma_tilde = sigma
    c = 0.5 * sum_ij d^2 Sigma_ij / dx_i dx_j - div f

A weighted path batch carries ``log_weights`` accumulated in log space,
``logw <- logw + c * dt``, which is exact for constant c and never
overflows; the weight itself is ``exp(log_weight)``. Weighted terminal
averages of these paths estimate integrals of the form
``integral g(x) p(t, x; T, y) dx`` (reverse-argument transition densities).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .integrator import TimeGrid, TrajectoryBatch, _integrate
from .models import SdeModel


@dataclass(frozen=True)
class AdjointSystem:
    """Reversed-dynamics coefficients of a base model on [t0, T].

    The coefficient callables take the clock of the original process,
    s in [t0, T], and apply the time reflection internally.
    """

    base: SdeModel
    t0: float
    T: float
    alpha: Callable
    sigma_tilde: Callable
    c: Callable


def build_adjoint(model: SdeModel, t0: float, T: float) -> AdjointSystem:
    """Assemble the adjoint coefficients from a model's derivative fields."""
    t0 = float(t0)
    T = float(T)
    if not T > t0:
        raise ValueError(f"need T > t0, got t0={t0}, T={T}")

    def alpha(s, x):
        r = T + t0 - s
        return model.sigma_sq_div(r, x) - model.drift(r, x)

    def sigma_tilde(s, x):
        return model.diffusion(T + t0 - s, x)

    def c(s, x):
        r = T + t0 - s
        return 0.5 * model.sigma_sq_hess_trace(r, x) - model.drift_div(r, x)

    return AdjointSystem(base=model, t0=t0, T=T, alpha=alpha,
                         sigma_tilde=sigma_tilde, c=c)


def simulate_adjoint(adj: AdjointSystem, y, grid: TimeGrid, n_paths: int,
                     seed: int, *, workers: int = 1, zero_noise: bool = False,
                     path_offset: int = 0,
                     _force_generic: bool = False) -> TrajectoryBatch:
    """Weighted adjoint paths started at y.

    The grid runs on the adjoint clock [0, T - t0]; states[:, k] holds
    Y(k * dt) and log_weights the final accumulated log-weight.
    ``y`` may be a single point (dim,) or one start per path (n_paths, dim).
    """
    duration = adj.T - adj.t0
    if abs(grid.t0) > 1e-12 or abs(grid.T - duration) > 1e-9:
        raise ValueError(
            f"adjoint grid must span [0, {duration}], got "
            f"[{grid.t0}, {grid.T}]")

    model = adj.base
    kernel = None
    if model.kernel_id is not None and model.time_homogeneous:
        kernel = (model.kernel_id, model.kernel_params, True)

    return _integrate(
        drift=lambda s, x: adj.alpha(adj.t0 + s, x),
        diffusion=lambda s, x: adj.sigma_tilde(adj.t0 + s, x),
        corr=lambda s, x: adj.c(adj.t0 + s, x),
        score=None, sigma_sq=model.sigma_sq, x0=y, grid=grid,
        n_paths=n_paths, seed=seed, path_offset=path_offset, workers=workers,
        zero_noise=zero_noise, kernel=kernel, force_generic=_force_generic,
        dim=model.dim, noise_dim=model.noise_dim)


def adjoint_expectation(adj: AdjointSystem, y, grid: TimeGrid, g,
                        n_paths: int, seed: int, *, workers: int = 1
                        ) -> tuple[float, float]:
    """Weighted Monte Carlo estimate of ``integral g(x) p(t0, x; T, y) dx``.

    Returns the mean of ``g(Y(T)) * exp(log_weight)`` over paths and its
    Monte Carlo standard error. ``g`` is applied to the (n_paths, dim)
    terminal states; scalar-only callables are looped over.
    """
    batch = simulate_adjoint(adj, y, grid, n_paths, seed, workers=workers)
    terminal = batch.states[:, -1, :]
    try:
        vals = np.asarray(g(terminal), dtype=np.float64)
        if vals.shape != (batch.n_paths,):
            raise ValueError
    except Exception:
        vals = np.array([float(g(row)) for row in terminal])
    vals = vals * np.exp(batch.log_weights)
    estimate = float(vals.mean())
    if batch.n_paths > 1:
        std_error = float(vals.std(ddof=1) / np.sqrt(batch.n_paths))
    else:
        std_error = 0.0
    return estimate, std_error
