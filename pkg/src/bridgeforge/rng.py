"""Counter-based random numbers for reproducible path simulation.

Every normal draw is a pure function of ``(seed, path_index, draw_index)``:
a SplitMix64-style keyed hash produces a uniform in (0, 1), which is mapped
to a standard normal through the Wichura (AS 241) inverse normal CDF. There
is no generator state, so any partition of paths across blocks, threads, or
processes reproduces the same stream bit for bit.

The compiled simulation core consumes noise produced here rather than
re-deriving it in C; that keeps the compiled and pure-numpy backends
bitwise interchangeable.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_SEED_SALT = 0xD6E8FEB86659FD93

_U_GOLDEN = np.uint64(_GOLDEN)
_U_MIX_A = np.uint64(_MIX_A)
_U_MIX_B = np.uint64(_MIX_B)

# AS 241 PPND16 rational-approximation coefficients (Wichura 1988).
_A = (3.3871328727963666080, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4, 5.2264952788528545610e3)
_C = (1.42343711074968357734, 4.63033784615654529590, 5.76949722146069140550,
      3.64784832476320460504, 1.27045825245236838258, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187, 1.67638483018380384940,
      6.89767334985100004550e-1, 1.48103976427480074590e-1,
      1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720, 5.46378491116411436990, 1.78482653991729133580,
      2.96560571828504891230e-1, 2.65321895265761230930e-2,
      1.24266094738807843860e-3, 2.71155556874348757815e-5,
      2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4,
      1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a plain Python int (64-bit wrapping)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _U_MIX_A
    z = (z ^ (z >> np.uint64(27))) * _U_MIX_B
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, tag: str) -> int:
    """Derive an independent 64-bit sub-seed for a named purpose."""
    h = _mix64_int((seed & _MASK) + _SEED_SALT)
    for byte in tag.encode("utf-8"):
        h = _mix64_int(h ^ byte)
    return h


def path_keys(seed: int, path_offset: int, n_paths: int) -> np.ndarray:
    """Per-path stream keys; key ``i`` depends only on (seed, path_offset+i)."""
    root = _mix64_int((seed & _MASK) * 0x9E3779B97F4A7C15 + _SEED_SALT)
    paths = (np.uint64(path_offset) + np.arange(n_paths, dtype=np.uint64) +
             np.uint64(1)) * _U_GOLDEN
    return _mix64(np.uint64(root) ^ paths)


def _horner(r: np.ndarray, coeffs) -> np.ndarray:
    out = np.full_like(r, coeffs[7])
    for k in range(6, -1, -1):
        out *= r
        out += coeffs[k]
    return out


def _ndtri(p: np.ndarray) -> np.ndarray:
    """Inverse standard-normal CDF, AS 241 double-precision variant.

    The central rational approximation is evaluated branchless over the
    whole array (it covers |p - 0.5| <= 0.425, about 85% of uniform draws);
    tail entries are then recomputed on their subset and scattered back.
    """
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    r = 0.180625 - q * q
    tail = r < 0.0  # exactly |q| > 0.425
    np.maximum(r, 0.0, out=r)  # keep tail slots finite; overwritten below
    out = q * _horner(r, _A)
    out /= _horner(r, _B)

    if np.any(tail):
        qt = q[tail]
        pt = p[tail]
        rt = np.where(qt < 0.0, pt, 1.0 - pt)
        rt = np.sqrt(-np.log(rt))
        near = rt <= 5.0
        x = np.empty_like(rt)

        rn = rt[near] - 1.6
        x[near] = _horner(rn, _C) / _horner(rn, _D)

        far = ~near
        if np.any(far):
            rf = rt[far] - 5.0
            x[far] = _horner(rf, _E) / _horner(rf, _F)

        out[tail] = np.where(qt < 0.0, -x, x)
    return out


def uniform_block(seed: int, path_offset: int, n_paths: int,
                  n_draws: int) -> np.ndarray:
    """(n_paths, n_draws) uniforms in the open interval (0, 1)."""
    keys = path_keys(seed, path_offset, n_paths)[:, None]
    counters = (np.arange(n_draws, dtype=np.uint64) + np.uint64(1)) * _U_GOLDEN
    bits = _mix64(keys + counters[None, :])
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normal_block(seed: int, path_offset: int, n_paths: int,
                 n_draws: int) -> np.ndarray:
    """(n_paths, n_draws) standard normals, pure in (seed, path, draw)."""
    return _ndtri(uniform_block(seed, path_offset, n_paths, n_draws))
