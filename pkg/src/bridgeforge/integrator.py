"""Uniform time grids and deterministic Euler-Maruyama simulation.

Paths are advanced in fixed-size blocks. Each path's noise stream is a pure
function of ``(seed, path_offset + path_index, step, component)`` (see
``rng``), so results are bit-identical regardless of worker count or block
scheduling. Built-in models without a drift offset run through the compiled
core when it is available; everything else goes through the pure-numpy loop,
which is also the import-time fallback when the extension is missing. Both
paths produce identical bits.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .models import SdeModel

try:
    from . import _core
except ImportError:  # pragma: no cover - exercised via BRIDGEFORGE_PURE_PYTHON
    _core = None

_FORCE_GENERIC = os.environ.get("BRIDGEFORGE_PURE_PYTHON", "0") not in ("", "0")

BACKEND = "python" if (_core is None or _FORCE_GENERIC) else "compiled"

# unit of work for noise generation and stepping; independent of --workers
BLOCK_SIZE = 1024

CSV_FLOAT_FMT = "%.17g"


class SimulationError(RuntimeError):
    """Non-finite state or exploding drift offset during integration."""

    def __init__(self, message: str, path_index: int | None = None,
                 step: int | None = None):
        super().__init__(message)
        self.path_index = path_index
        self.step = step


class TimeGrid:
    """Uniform grid t0 = t_0 < t_1 < ... < t_L = T with dt = (T - t0) / L."""

    def __init__(self, t0: float, T: float, L: int):
        t0 = float(t0)
        T = float(T)
        L = int(L)
        if L < 1:
            raise ValueError(f"L must be >= 1, got {L}")
        if not T > t0:
            raise ValueError(f"need T > t0, got t0={t0}, T={T}")
        self.t0 = t0
        self.T = T
        self.L = L
        self.dt = (T - t0) / L
        self.nodes = t0 + self.dt * np.arange(L + 1)

    def __repr__(self):
        return f"TimeGrid(t0={self.t0}, T={self.T}, L={self.L})"

    def __eq__(self, other):
        return (isinstance(other, TimeGrid) and self.t0 == other.t0
                and self.T == other.T and self.L == other.L)


@dataclass
class TrajectoryBatch:
    """Simulated paths on a grid plus one log-weight per path."""

    grid: TimeGrid
    states: np.ndarray       # (n_paths, L + 1, dim)
    log_weights: np.ndarray  # (n_paths,)
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def _broadcast_x0(x0, n_paths: int, dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if x0.ndim == 1:
        if x0.shape[0] != dim:
            raise ValueError(f"x0 has dimension {x0.shape[0]}, model needs {dim}")
        return np.broadcast_to(x0, (n_paths, dim)).copy()
    if x0.shape != (n_paths, dim):
        raise ValueError(f"per-path x0 must have shape ({n_paths}, {dim}), "
                         f"got {x0.shape}")
    return x0.copy()


def _first_bad(arr) -> tuple[int, ...]:
    return tuple(int(k) for k in np.argwhere(~np.isfinite(arr))[0])


def _python_block(states, logw, noise, nodes, dt, sqrt_dt, lo, drift,
                  diffusion, corr, score, sigma_sq, zero_noise,
                  explosion_bound):
    """Reference stepping loop; op order mirrored by the compiled core."""
    nb = states.shape[0]
    L = states.shape[1] - 1
    X = states[:, 0, :].copy()
    lw = np.zeros(nb) if corr is not None else None
    for l in range(L):
        t = nodes[l]
        f = drift(t, X)
        if score is not None:
            s = np.asarray(score(t, X), dtype=np.float64)
            sig2 = sigma_sq(t, X)
            off = np.einsum("bij,bj->bi", sig2, s)
            amax = np.abs(off).max()
            if not np.isfinite(amax) or amax > explosion_bound:
                bad = np.abs(off) > explosion_bound
                bad |= ~np.isfinite(off)
                n, _ = _first_bad(np.where(bad, np.nan, 0.0))
                raise SimulationError(
                    f"drift offset exceeded bound {explosion_bound:g} at "
                    f"path {lo + n}, step {l}", path_index=lo + n, step=l)
            f = f + off
        if corr is not None:
            lw = lw + corr(t, X) * dt
        if zero_noise:
            Xn = X + dt * f
        else:
            sig = diffusion(t, X)
            Sz = np.einsum("bim,bm->bi", sig, noise[:, l, :])
            Xn = X + dt * f + sqrt_dt * Sz
        if not np.isfinite(Xn).all():
            n, _ = _first_bad(Xn)
            raise SimulationError(
                f"non-finite state at path {lo + n}, step {l}",
                path_index=lo + n, step=l)
        if lw is not None and not np.isfinite(lw).all():
            n = int(np.argwhere(~np.isfinite(lw))[0][0])
            raise SimulationError(
                f"non-finite log-weight at path {lo + n}, step {l}",
                path_index=lo + n, step=l)
        states[:, l + 1, :] = Xn
        X = Xn
    if corr is not None:
        logw[:] = lw


def _integrate(*, drift, diffusion, corr, score, sigma_sq, x0, grid, n_paths,
               seed, path_offset=0, workers=1, zero_noise=False,
               explosion_bound=1e6, kernel=None, force_generic=False,
               dim, noise_dim):
    n_paths = int(n_paths)
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    L = grid.L
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    states = np.empty((n_paths, L + 1, dim), dtype=np.float64)
    states[:, 0, :] = _broadcast_x0(x0, n_paths, dim)
    logw = np.zeros(n_paths, dtype=np.float64)

    use_kernel = (kernel is not None and _core is not None
                  and score is None and not zero_noise
                  and not _FORCE_GENERIC and not force_generic)

    def run_block(lo: int, hi: int):
        nb = hi - lo
        if zero_noise:
            noise = None
        else:
            noise = rng.normal_block(seed, path_offset + lo, nb,
                                     L * noise_dim).reshape(nb, L, noise_dim)
        if use_kernel:
            model_id, params, adjoint = kernel
            status, n, l = _core.sim_block(model_id, tuple(params), adjoint,
                                           states[lo:hi], noise, logw[lo:hi],
                                           dt, sqrt_dt)
            if status:
                raise SimulationError(
                    f"non-finite state at path {lo + n}, step {l}",
                    path_index=lo + n, step=l)
        else:
            _python_block(states[lo:hi], logw[lo:hi], noise, grid.nodes, dt,
                          sqrt_dt, lo, drift, diffusion, corr, score,
                          sigma_sq, zero_noise, explosion_bound)

    blocks = [(lo, min(lo + BLOCK_SIZE, n_paths))
              for lo in range(0, n_paths, BLOCK_SIZE)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_block, lo, hi) for lo, hi in blocks]
            for fut in futures:
                fut.result()
    else:
        for lo, hi in blocks:
            run_block(lo, hi)
    return TrajectoryBatch(grid=grid, states=states, log_weights=logw,
                           seed=seed)


def _model_kernel(model: SdeModel):
    if model.kernel_id is None or not model.time_homogeneous:
        return None
    return (model.kernel_id, model.kernel_params, False)


def simulate(model: SdeModel, x0, grid: TimeGrid, n_paths: int, seed: int, *,
             workers: int = 1, zero_noise: bool = False, path_offset: int = 0,
             _force_generic: bool = False) -> TrajectoryBatch:
    """Euler-Maruyama paths of the model from x0 over the grid.

    ``zero_noise`` suppresses the diffusion term (deterministic-drift test
    hook). ``path_offset`` shifts the per-path noise streams, so disjoint
    offsets give independent batches under one seed.
    """
    return _integrate(drift=model.drift, diffusion=model.diffusion, corr=None,
                      score=None, sigma_sq=model.sigma_sq, x0=x0, grid=grid,
                      n_paths=n_paths, seed=seed, path_offset=path_offset,
                      workers=workers, zero_noise=zero_noise,
                      kernel=_model_kernel(model),
                      force_generic=_force_generic,
                      dim=model.dim, noise_dim=model.noise_dim)


def simulate_with_drift_offset(model: SdeModel, score, x0, grid: TimeGrid,
                               n_paths: int, seed: int, *,
                               explosion_bound: float = 1e6,
                               workers: int = 1, zero_noise: bool = False,
                               path_offset: int = 0,
                               _force_generic: bool = False
                               ) -> TrajectoryBatch:
    """Paths of the model with drift f + sigma_sq . score(t, x).

    ``score`` is called as ``score(t, x_batch)`` with ``x_batch`` of shape
    (B, dim) and must return the same shape. Offsets larger in magnitude
    than ``explosion_bound`` abort the run.
    """
    if score is None:
        return simulate(model, x0, grid, n_paths, seed, workers=workers,
                        zero_noise=zero_noise, path_offset=path_offset,
                        _force_generic=_force_generic)
    return _integrate(drift=model.drift, diffusion=model.diffusion, corr=None,
                      score=score, sigma_sq=model.sigma_sq, x0=x0, grid=grid,
                      n_paths=n_paths, seed=seed, path_offset=path_offset,
                      workers=workers, zero_noise=zero_noise,
                      explosion_bound=explosion_bound, kernel=None,
                      force_generic=_force_generic,
                      dim=model.dim, noise_dim=model.noise_dim)


def write_csv(batch: TrajectoryBatch, path) -> None:
    """Write rows ``path,step,t,x_0..x_{d-1},log_weight``."""
    n, steps, d = batch.states.shape
    path_col = np.repeat(np.arange(n), steps)
    step_col = np.tile(np.arange(steps), n)
    t_col = np.tile(batch.grid.nodes, n)
    lw_col = np.repeat(batch.log_weights, steps)
    data = np.column_stack([path_col, step_col, t_col,
                            batch.states.reshape(n * steps, d), lw_col])
    header = "path,step,t," + ",".join(f"x_{i}" for i in range(d)) + ",log_weight"
    fmt = ["%d", "%d"] + [CSV_FLOAT_FMT] * (d + 2)
    np.savetxt(path, data, fmt=fmt, delimiter=",", header=header, comments="")


def read_csv(path) -> TrajectoryBatch:
    """Read a trajectory CSV written by :func:`write_csv`."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] - 4
    steps = int(data[:, 1].max()) + 1
    n = data.shape[0] // steps
    t = data[:steps, 2]
    grid = TimeGrid(t[0], t[-1], steps - 1)
    states = data[:, 3:3 + d].reshape(n, steps, d)
    logw = data[::steps, -1].copy()
    return TrajectoryBatch(grid=grid, states=states, log_weights=logw, seed=-1)
