"""SDE model definitions with the derivative data the reversed dynamics need.

A model carries, besides drift and diffusion, the divergence-type derivative
fields used to assemble reversed-dynamics coefficients: the column divergence
of the diffusion covariance, its double-divergence (Hessian trace), and the
drift divergence. All derivatives are coded analytically per model and
cross-checked against finite differences in the test suite.

Coefficient callables accept ``x`` of shape ``(d,)`` or batched ``(B, d)``
and broadcast accordingly; ``t`` is a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# ids used by the compiled simulation core
KERNEL_BROWNIAN = 0
KERNEL_OU = 1
KERNEL_CELL = 2

_CELL_C4 = 2.0 ** -4


class UnknownModelError(KeyError):
    """Raised when a registry lookup names no registered model."""


@dataclass(frozen=True)
class SdeModel:
    """Drift, diffusion, and analytic derivative fields of a diffusion.

    ``sigma_sq`` is the covariance ``diffusion @ diffusion.T``;
    ``sigma_sq_div`` its column divergence (entry i sums d(Sigma_ij)/dx_j);
    ``sigma_sq_hess_trace`` the scalar sum of d^2(Sigma_ij)/dx_i dx_j;
    ``drift_div`` the scalar sum of d(f_i)/dx_i.
    """

    name: str
    dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    sigma_sq: Callable
    sigma_sq_div: Callable
    sigma_sq_hess_trace: Callable
    drift_div: Callable
    time_homogeneous: bool = True
    kernel_id: int | None = None
    kernel_params: tuple = field(default=())
    params: dict = field(default_factory=dict)
    # (d, d) covariance when it is state- and time-independent, else None;
    # lets batched code solve one system instead of one per node
    sigma_sq_const: np.ndarray | None = None


def _const_matrix_fn(mat: np.ndarray) -> Callable:
    mat = np.asarray(mat, dtype=np.float64)

    def fn(t, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return mat.copy()
        return np.broadcast_to(mat, x.shape[:-1] + mat.shape)

    return fn


def _const_vector_fn(vec: np.ndarray) -> Callable:
    vec = np.asarray(vec, dtype=np.float64)

    def fn(t, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return vec.copy()
        return np.broadcast_to(vec, x.shape[:-1] + vec.shape)

    return fn


def _const_scalar_fn(value: float) -> Callable:
    value = float(value)

    def fn(t, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return value
        return np.full(x.shape[:-1], value)

    return fn


def make_ou(theta: float = 1.0, sigma: float = 1.0, dim: int = 1) -> SdeModel:
    """Mean-reverting model with drift ``-theta * x`` and diffusion ``sigma * I``."""
    theta = float(theta)
    sigma = float(sigma)
    if theta <= 0.0:
        raise ValueError(f"theta must be positive, got {theta}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")

    def drift(t, x):
        return -theta * np.asarray(x, dtype=np.float64)

    return SdeModel(
        name="ou",
        dim=dim,
        noise_dim=dim,
        drift=drift,
        diffusion=_const_matrix_fn(sigma * np.eye(dim)),
        sigma_sq=_const_matrix_fn(sigma * sigma * np.eye(dim)),
        sigma_sq_div=_const_vector_fn(np.zeros(dim)),
        sigma_sq_hess_trace=_const_scalar_fn(0.0),
        drift_div=_const_scalar_fn(-theta * dim),
        kernel_id=KERNEL_OU,
        kernel_params=(theta, sigma),
        params={"theta": theta, "sigma": sigma, "dim": dim},
        sigma_sq_const=sigma * sigma * np.eye(dim),
    )


def make_brownian(sigma: float = 1.0, dim: int = 1) -> SdeModel:
    """Driftless model with diffusion ``sigma * I``."""
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")

    def drift(t, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    return SdeModel(
        name="brownian",
        dim=dim,
        noise_dim=dim,
        drift=drift,
        diffusion=_const_matrix_fn(sigma * np.eye(dim)),
        sigma_sq=_const_matrix_fn(sigma * sigma * np.eye(dim)),
        sigma_sq_div=_const_vector_fn(np.zeros(dim)),
        sigma_sq_hess_trace=_const_scalar_fn(0.0),
        drift_div=_const_scalar_fn(0.0),
        kernel_id=KERNEL_BROWNIAN,
        kernel_params=(sigma,),
        params={"sigma": sigma, "dim": dim},
        sigma_sq_const=sigma * sigma * np.eye(dim),
    )


def _cell_drift(t, x):
    x = np.asarray(x, dtype=np.float64)
    x1 = x[..., 0]
    x2 = x[..., 1]
    x1_2 = x1 * x1
    x2_2 = x2 * x2
    x1_4 = x1_2 * x1_2
    x2_4 = x2_2 * x2_2
    q1 = _CELL_C4 + x1_4
    q2 = _CELL_C4 + x2_4
    f1 = x1_4 / q1 + _CELL_C4 / q2 - x1
    f2 = x2_4 / q2 + _CELL_C4 / q1 - x2
    return np.stack([f1, f2], axis=-1)


def _cell_drift_div(t, x):
    x = np.asarray(x, dtype=np.float64)
    x1 = x[..., 0]
    x2 = x[..., 1]
    x1_2 = x1 * x1
    x2_2 = x2 * x2
    x1_3 = x1_2 * x1
    x2_3 = x2_2 * x2
    q1 = _CELL_C4 + x1_2 * x1_2
    q2 = _CELL_C4 + x2_2 * x2_2
    dd1 = 4.0 * x1_3 * _CELL_C4 / (q1 * q1) - 1.0
    dd2 = 4.0 * x2_3 * _CELL_C4 / (q2 * q2) - 1.0
    return dd1 + dd2


def make_cell_model(sigma: float = 0.1) -> SdeModel:
    """Two-state switch model for cell differentiation between attractors.

    Each coordinate self-activates through a quartic Hill term, is repressed
    by the other coordinate, and decays linearly. The two noise channels are
    taken to be independent (diagonal diffusion ``sigma * I``), i.e. each
    state equation is driven by its own Wiener component.
    """
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    def drift_div(t, x):
        val = _cell_drift_div(t, x)
        if np.asarray(x).ndim == 1:
            return float(val)
        return val

    return SdeModel(
        name="cell",
        dim=2,
        noise_dim=2,
        drift=_cell_drift,
        diffusion=_const_matrix_fn(sigma * np.eye(2)),
        sigma_sq=_const_matrix_fn(sigma * sigma * np.eye(2)),
        sigma_sq_div=_const_vector_fn(np.zeros(2)),
        sigma_sq_hess_trace=_const_scalar_fn(0.0),
        drift_div=drift_div,
        kernel_id=KERNEL_CELL,
        kernel_params=(sigma,),
        params={"sigma": sigma},
        sigma_sq_const=sigma * sigma * np.eye(2),
    )


REGISTRY: dict[str, Callable[..., SdeModel]] = {
    "ou": make_ou,
    "brownian": make_brownian,
    "cell": make_cell_model,
}


def make_model(name: str, **params) -> SdeModel:
    """Build a registered model by name; unknown names raise UnknownModelError."""
    try:
        ctor = REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(REGISTRY))
        raise UnknownModelError(
            f"unknown model {name!r}; registered models: {known}") from None
    return ctor(**params)
