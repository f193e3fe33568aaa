"""Score-matching training on reversed-dynamics trajectories.

Each iteration simulates a fresh batch of weighted adjoint paths started at
the conditioning endpoint(s), reindexes them to the forward clock
(``Z_l = Y(T - t_l)``), regresses the network on one-step transition scores

    g(t, x, t', x') = (1 / dt) * Sigma(t, x)^{-1} (x' - x - dt * f(t, x)),

and takes one adaptive-moment step on the weighted squared error

    loss = (dt / N) * sum_paths sum_{l < L} w_path * ||s(t_l, Z_l[, y]) - g_l||^2.

``w_path`` is the accumulated path weight exp(log_weight), optionally
normalized by its batch mean (a no-op for constant correction rates, a
variance reduction otherwise; the minimizer is unchanged either way).
Endpoints are a fixed point, draws from a distribution, or uniform draws
from a box with the network conditioned on the drawn endpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .adjoint import build_adjoint, simulate_adjoint
from .integrator import TimeGrid, TrajectoryBatch
from .models import SdeModel
from .scorenet import AdamState, ScoreNetwork


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class EndpointSpec:
    """Endpoint conditioning: fixed point, distribution, or uniform box."""

    mode: str                     # "fixed" | "distribution" | "multi_fixed"
    dim: int
    y: np.ndarray | None = None
    sampler: Callable | None = None            # (generator, n) -> (n, dim)
    low: np.ndarray | None = None
    high: np.ndarray | None = None
    radius: float | None = None
    name: str = ""

    @staticmethod
    def fixed(y) -> "EndpointSpec":
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        return EndpointSpec(mode="fixed", dim=y.shape[0], y=y, name="fixed")

    @staticmethod
    def distribution(sampler, dim: int, name: str = "custom") -> "EndpointSpec":
        return EndpointSpec(mode="distribution", dim=int(dim), sampler=sampler,
                            name=name)

    @staticmethod
    def circle(radius: float = 3.0) -> "EndpointSpec":
        """Uniform angle on a circle of the given radius (dimension 2)."""
        radius = float(radius)
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")

        def sampler(gen, n):
            ang = gen.uniform(0.0, 2.0 * np.pi, n)
            return radius * np.column_stack([np.cos(ang), np.sin(ang)])

        return EndpointSpec(mode="distribution", dim=2, sampler=sampler,
                            radius=radius, name="circle")

    @staticmethod
    def multi_fixed(low, high) -> "EndpointSpec":
        low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(high, dtype=np.float64))
        if low.shape != high.shape:
            raise ValueError("low and high must have the same shape")
        if not np.all(high > low):
            raise ValueError("need high > low componentwise")
        return EndpointSpec(mode="multi_fixed", dim=low.shape[0], low=low,
                            high=high, name="multi_fixed")

    @property
    def conditioned(self) -> bool:
        return self.mode == "multi_fixed"

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        if self.mode == "fixed":
            return np.broadcast_to(self.y, (n, self.dim)).copy()
        if self.mode == "distribution":
            ys = np.asarray(self.sampler(gen, n), dtype=np.float64)
            if ys.shape != (n, self.dim):
                raise ValueError(f"sampler returned shape {ys.shape}, "
                                 f"expected ({n}, {self.dim})")
            return ys
        if self.mode == "multi_fixed":
            return gen.uniform(self.low, self.high, (n, self.dim))
        raise ValueError(f"unknown endpoint mode {self.mode!r}")


@dataclass
class TrainConfig:
    """All hyperparameters of a training run."""

    model: SdeModel
    T: float
    L: int
    n_paths: int
    iterations: int
    endpoint: EndpointSpec
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (32, 32, 32, 32)
    time_features: int = 8
    weight_mode: str = "normalized"      # "raw" | "normalized"
    metric_weighting: str = "plain"      # "plain" | "sigma_sq"
    # fraction of final iterations whose parameter iterates are averaged
    # into the returned network; reduces optimizer noise on hard targets
    average_tail: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.weight_mode not in ("raw", "normalized"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.metric_weighting not in ("plain", "sigma_sq"):
            raise ValueError(f"unknown metric_weighting {self.metric_weighting!r}")
        if not 0.0 <= self.average_tail <= 1.0:
            raise ValueError(f"average_tail must be in [0, 1], "
                             f"got {self.average_tail}")
        if self.endpoint.dim != self.model.dim:
            raise ValueError(
                f"endpoint dimension {self.endpoint.dim} does not match "
                f"model dimension {self.model.dim}")


def em_transition_score(model: SdeModel, t: float, x, t2: float, x2) -> np.ndarray:
    """One-step Euler transition score between (t, x) and (t2, x2).

    Accepts single states (dim,) or batches (B, dim); linear in the
    residual x2 - x - dt * f(t, x).
    """
    dt = float(t2) - float(t)
    if dt <= 0:
        raise ValueError(f"need t2 > t, got t={t}, t2={t2}")
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    residual = x2 - x - dt * np.asarray(model.drift(t, x), dtype=np.float64)
    sig2 = np.asarray(model.sigma_sq(t, x), dtype=np.float64)
    try:
        w = np.linalg.solve(sig2, residual[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise ValueError(
            f"singular diffusion covariance at t={t}, x={np.atleast_1d(x)[:4]}"
        ) from None
    return w / dt


def batch_loss(net: ScoreNetwork, model: SdeModel, batch: TrajectoryBatch,
               endpoints, cfg: TrainConfig, work=None):
    """Discretized score-matching loss and its network gradients.

    ``batch`` holds adjoint paths on [0, T]; ``endpoints`` is the (N, dim)
    array of per-path conditioning values (used as network input only when
    the network is conditioned). Gradients flow through the network alone.
    ``work`` optionally reuses forward/backward buffers across iterations.
    """
    states = batch.states
    N = states.shape[0]
    L = batch.grid.L
    d = states.shape[2]
    dt = batch.grid.dt
    nodes = batch.grid.nodes

    # forward-clock reindexing: Z_l = Y(T - t_l)
    Z = states[:, ::-1, :]

    w = np.exp(batch.log_weights)
    if cfg.weight_mode == "normalized":
        w = w / w.mean()

    if model.time_homogeneous:
        # one batched evaluation over all (path, step) nodes
        dtv = (nodes[1:] - nodes[:L])[None, :, None]
        f = np.asarray(model.drift(nodes[0], Z[:, :L]), dtype=np.float64)
        residual = Z[:, 1:] - Z[:, :L] - dtv * f
        try:
            if model.sigma_sq_const is not None:
                sol = np.linalg.solve(model.sigma_sq_const,
                                      residual.reshape(-1, d).T)
                g = sol.T.reshape(N, L, d) / dtv
            else:
                sig2 = np.asarray(model.sigma_sq(nodes[0], Z[:, :L]),
                                  dtype=np.float64)
                g = np.linalg.solve(sig2, residual[..., None])[..., 0] / dtv
        except np.linalg.LinAlgError:
            raise TrainingError("singular diffusion covariance in batch") from None
    else:
        g = np.empty((N, L, d))
        for l in range(L):
            g[:, l] = em_transition_score(model, nodes[l], Z[:, l],
                                          nodes[l + 1], Z[:, l + 1])

    emb = np.tile(net.time_embedding(nodes[:L]), (N, 1))
    x_flat = Z[:, :L, :].reshape(N * L, d)
    y_flat = None
    if net.conditioned:
        if endpoints is None:
            raise ValueError("conditioned network needs per-path endpoints")
        y_flat = np.repeat(np.asarray(endpoints, dtype=np.float64), L, axis=0)
    inputs = net.assemble_embedded(emb, x_flat, y_flat)
    out, acts = net.apply_cached(inputs, work=work)
    v = out.reshape(N, L, d) - g

    if cfg.metric_weighting == "plain":
        Mv = v
    else:
        Mv = np.empty_like(v)
        for l in range(L):
            sig2 = np.asarray(model.sigma_sq(nodes[l], Z[:, l]), dtype=np.float64)
            Mv[:, l] = np.einsum("bij,bj->bi", sig2, v[:, l])
    sq = (v * Mv).sum(axis=2)

    weighted = w[:, None] * sq
    loss = float(dt / N * weighted.sum())
    if not np.isfinite(loss):
        n, l = (int(k) for k in np.argwhere(~np.isfinite(weighted))[0])
        raise TrainingError(f"non-finite loss term at path {n}, step {l}")

    upstream = ((2.0 * dt / N) * w[:, None, None] * Mv).reshape(N * L, d)
    grads = net.backward(inputs, upstream, acts=acts, work=work)
    return loss, grads


def train(cfg: TrainConfig):
    """Run the training loop; returns the network and the per-iteration log.

    The log is a list of ``(iteration, loss, wall_time_ms)`` tuples. The
    whole run is reproducible bit for bit from the config: network init,
    endpoint draws, and simulation noise all derive from ``cfg.seed``.
    """
    model = cfg.model
    grid = TimeGrid(0.0, cfg.T, cfg.L)
    adj = build_adjoint(model, 0.0, cfg.T)
    net = ScoreNetwork(dim=model.dim, hidden=cfg.hidden,
                       time_features=cfg.time_features, horizon=cfg.T,
                       conditioned=cfg.endpoint.conditioned,
                       seed=rng.derive_seed(cfg.seed, "net-init"))
    opt = AdamState(net, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.eps)
    ep_gen = np.random.default_rng(rng.derive_seed(cfg.seed, "endpoints"))
    sim_seed = rng.derive_seed(cfg.seed, "adjoint-sim")
    work = net.make_workspace(cfg.n_paths * cfg.L)
    avg_from = (cfg.iterations - int(round(cfg.average_tail * cfg.iterations))
                if cfg.average_tail > 0.0 else cfg.iterations)
    avg_sum = None
    avg_count = 0

    history: list[tuple[int, float, float]] = []
    for it in range(cfg.iterations):
        started = time.perf_counter()
        try:
            ys = cfg.endpoint.sample(cfg.n_paths, ep_gen)
            batch = simulate_adjoint(adj, ys, grid, cfg.n_paths, sim_seed,
                                     path_offset=it * cfg.n_paths,
                                     workers=cfg.workers)
            loss, grads = batch_loss(net, model, batch, ys, cfg, work=work)
            opt.step(net, grads)
        except (TrainingError, FloatingPointError, RuntimeError) as exc:
            raise TrainingError(f"iteration {it}: {exc}") from exc
        if it >= avg_from:
            params = net.flat_params()
            avg_sum = params if avg_sum is None else avg_sum + params
            avg_count += 1
        history.append((it, loss, (time.perf_counter() - started) * 1e3))
    if avg_count > 0:
        net.set_flat_params(avg_sum / avg_count)
    return net, history


def write_training_log(history, path) -> None:
    """CSV log with one ``iteration,loss,wall_time_ms`` row per iteration."""
    with open(path, "w") as fh:
        fh.write("iteration,loss,wall_time_ms\n")
        for it, loss, ms in history:
            fh.write(f"{it},{loss:.17g},{ms:.3f}\n")
