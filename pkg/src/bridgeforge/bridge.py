"""Conditioned (bridge) simulation and score-accuracy reporting.

A bridge is simulated by adding the drift offset ``Sigma . s(t, x)`` to the
base dynamics, where ``s`` is a score function: a trained network, or one
of the closed forms below for models whose transition density is Gaussian.
Scores may diverge as t approaches the horizon, so integration evaluates
them at grid nodes strictly before T only; the last step either runs free
on the score at t_{L-1} or pins the terminal state to the known endpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .integrator import (TimeGrid, TrajectoryBatch, CSV_FLOAT_FMT,
                         simulate_with_drift_offset)
from .models import SdeModel
from .scorenet import ScoreNetwork


def ou_exact_score(theta: float, sigma_const: float, t: float, x, T: float, y):
    """Closed-form bridge score of the mean-reverting model, componentwise.

    With tau = T - t: value = exp(-theta tau) / v(tau) * (y - x exp(-theta tau)),
    v(tau) = sigma^2 (1 - exp(-2 theta tau)) / (2 theta).
    """
    if not t < T:
        raise ValueError(f"score requires t < T, got t={t}, T={T}")
    tau = float(T) - float(t)
    a = np.exp(-theta * tau)
    v = sigma_const * sigma_const * (1.0 - np.exp(-2.0 * theta * tau)) / (2.0 * theta)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (a / v) * (y - x * a)


def brownian_exact_score(sigma_const: float, t: float, x, T: float, y):
    """Bridge score of driftless diffusion: (y - x) / (sigma^2 (T - t))."""
    if not t < T:
        raise ValueError(f"score requires t < T, got t={t}, T={T}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (y - x) / (sigma_const * sigma_const * (float(T) - float(t)))


@dataclass(frozen=True)
class ExactOuScore:
    """Exact score of the mean-reverting model toward endpoint y at time T."""

    theta: float
    sigma: float
    T: float
    y: np.ndarray

    def __call__(self, t, x):
        return ou_exact_score(self.theta, self.sigma, t, x, self.T, self.y)


@dataclass(frozen=True)
class ExactBrownianScore:
    """Exact score of the driftless model toward endpoint y at time T."""

    sigma: float
    T: float
    y: np.ndarray

    def __call__(self, t, x):
        return brownian_exact_score(self.sigma, t, x, self.T, self.y)


class NetworkScore:
    """Adapts a ScoreNetwork to the score-callable protocol.

    For endpoint-conditioned networks, ``y`` fixes the conditioning input;
    unconditioned networks take ``y=None``.
    """

    def __init__(self, net: ScoreNetwork, y=None):
        if net.conditioned and y is None:
            raise ValueError("conditioned network needs a fixed endpoint y")
        if not net.conditioned and y is not None:
            raise ValueError("unconditioned network takes no endpoint")
        self.net = net
        self.y = None if y is None else np.atleast_1d(np.asarray(y, dtype=np.float64))

    def __call__(self, t, x):
        return self.net.forward(t, x, self.y)


def sample_bridge(model: SdeModel, score, x0, grid: TimeGrid, n_paths: int,
                  seed: int, endpoint_handling: str = "free", *,
                  workers: int = 1, explosion_bound: float = 1e6,
                  path_offset: int = 0,
                  _force_generic: bool = False) -> TrajectoryBatch:
    """Simulate bridge paths driven by a score function.

    ``endpoint_handling``: "free" takes a plain Euler step over the last
    interval using the score at t_{L-1}; "pin" additionally overwrites the
    terminal state with the score's fixed endpoint (rejected when the score
    carries none, e.g. distribution-conditioned networks).
    """
    if endpoint_handling not in ("free", "pin"):
        raise ValueError(f"unknown endpoint_handling {endpoint_handling!r}")
    pin_y = None
    if endpoint_handling == "pin":
        pin_y = getattr(score, "y", None)
        if pin_y is None:
            raise ValueError("pin endpoint handling needs a score with a "
                             "fixed endpoint y")
        pin_y = np.atleast_1d(np.asarray(pin_y, dtype=np.float64))
    batch = simulate_with_drift_offset(
        model, score, x0, grid, n_paths, seed, workers=workers,
        explosion_bound=explosion_bound, path_offset=path_offset,
        _force_generic=_force_generic)
    if pin_y is not None:
        batch.states[:, -1, :] = pin_y
    return batch


@dataclass
class ScoreErrorReport:
    """Per-time and time-averaged squared score error on evaluation states."""

    times: np.ndarray
    mse: np.ndarray
    time_averaged_mse: float
    n_paths: int
    t_cutoff: float

    def summary(self) -> dict:
        return {"time_averaged_mse": self.time_averaged_mse,
                "n_paths": self.n_paths, "t_cutoff": self.t_cutoff}

    def to_csv(self, path) -> None:
        data = np.column_stack([self.times, self.mse])
        np.savetxt(path, data, fmt=CSV_FLOAT_FMT, delimiter=",",
                   header="t,mse", comments="")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")


def score_error_report(net_score, exact_score, eval_states: TrajectoryBatch,
                       t_cutoff: float) -> ScoreErrorReport:
    """Mean squared score error along evaluation trajectories.

    ``MSE(t_l)`` averages ``||net - exact||^2`` over paths at each grid node
    with ``t_l <= t_cutoff`` (the terminal node is always excluded); the
    time-averaged value is the mean of those per-node errors. Evaluation
    states should come from bridge trajectories so the comparison weights
    regions the conditioned process actually visits.
    """
    if eval_states.n_paths < 1:
        raise ValueError("eval_states must contain at least one path")
    nodes = eval_states.grid.nodes
    L = eval_states.grid.L
    idx = [l for l in range(L) if nodes[l] <= t_cutoff]
    if not idx:
        raise ValueError(f"no grid nodes at or below t_cutoff={t_cutoff}")
    times = np.array([nodes[l] for l in idx])
    mse = np.empty(len(idx))
    for k, l in enumerate(idx):
        X = eval_states.states[:, l, :]
        diff = (np.asarray(net_score(nodes[l], X), dtype=np.float64)
                - np.asarray(exact_score(nodes[l], X), dtype=np.float64))
        mse[k] = float((diff * diff).sum(axis=1).mean())
    return ScoreErrorReport(times=times, mse=mse,
                            time_averaged_mse=float(mse.mean()),
                            n_paths=eval_states.n_paths,
                            t_cutoff=float(t_cutoff))
