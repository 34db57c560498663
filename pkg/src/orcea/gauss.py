"""Weighted multivariate Gaussian densities and their exact algebra.

Every density carries a natural-log scale factor (``log_weight``) so that
long chains of products never underflow. ``log_weight == 0`` means a
normalized density.

The batched kernels (``*_arrays``) operate on stacked means/covariances with
numpy broadcasting; the scalar operations on :class:`Gaussian` are thin
wrappers around them, so there is a single code path for the algebra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ContractViolation, NotPositiveDefinite

LOG_2PI = math.log(2.0 * math.pi)
SYMMETRY_RTOL = 1e-10


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Batched Cholesky factor; raises :class:`NotPositiveDefinite`."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def logdet_from_chol(chol: np.ndarray) -> np.ndarray:
    return 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def log_normal_arrays(diff: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(diff | 0, cov) over broadcast batches.

    ``diff`` has shape (..., d) and ``cov`` shape (..., d, d).
    """
    chol = cholesky(cov)
    d = diff.shape[-1]
    z = np.linalg.solve(chol, diff[..., None])[..., 0]
    maha = np.einsum("...i,...i->...", z, z)
    return -0.5 * (d * LOG_2PI + logdet_from_chol(chol) + maha)


def product_arrays(m1, c1, m2, c2):
    """Moments and log gain of N(m1, c1) * N(m2, c2), batched.

    Uses the covariance form ``C = C1 (C1 + C2)^-1 C2`` which avoids inverting
    either factor; the gain is the convolution constant N(m1 - m2 | 0, C1 + C2).
    Returns ``(mean, cov, log_gain)``.
    """
    s = c1 + c2
    chol = cholesky(s)
    d = m1.shape[-1]
    delta = m1 - m2
    shape = np.broadcast_shapes(c1.shape, c2.shape)
    rhs = np.concatenate(
        [np.broadcast_to(c2, shape), np.broadcast_to(m2[..., None], shape[:-1] + (1,)),
         np.broadcast_to(delta[..., None], shape[:-1] + (1,))],
        axis=-1,
    )
    sol = np.linalg.solve(s, rhs)
    s_inv_c2 = sol[..., :d]
    s_inv_m2 = sol[..., d]
    s_inv_delta = sol[..., d + 1]
    cov = symmetrize(c1 @ s_inv_c2)
    # C2 S^-1 m1 + C1 S^-1 m2, with C2 S^-1 = (S^-1 C2)^T
    mean = (
        np.einsum("...ji,...j->...i", s_inv_c2, m1)
        + np.einsum("...ij,...j->...i", c1, s_inv_m2)
    )
    maha = np.einsum("...i,...i->...", delta, s_inv_delta)
    log_gain = -0.5 * (d * LOG_2PI + logdet_from_chol(chol) + maha)
    return mean, cov, log_gain


def quotient_arrays(m1, c1, m2, c2):
    """Moments and log scale of N(m1, c1) / N(m2, c2), batched.

    The result exists only when ``c2 - c1`` is positive definite (equivalently
    ``c1^-1 - c2^-1`` is). Returns ``(mean, cov, log_scale)`` where
    ``log_scale`` makes the pointwise identity exact for unit-weight inputs.
    """
    diff = symmetrize(c2 - c1)
    chol_d = cholesky(diff)
    chol_2 = cholesky(c2)
    d = m1.shape[-1]
    delta = m1 - m2
    shape = np.broadcast_shapes(c1.shape, c2.shape)
    rhs = np.concatenate(
        [np.broadcast_to(c2, shape), np.broadcast_to(m2[..., None], shape[:-1] + (1,)),
         np.broadcast_to(delta[..., None], shape[:-1] + (1,))],
        axis=-1,
    )
    sol = np.linalg.solve(diff, rhs)
    d_inv_c2 = sol[..., :d]
    d_inv_m2 = sol[..., d]
    d_inv_delta = sol[..., d + 1]
    cov = symmetrize(c1 @ d_inv_c2)
    # C2 D^-1 m1 - C1 D^-1 m2
    mean = (
        np.einsum("...ji,...j->...i", d_inv_c2, m1)
        - np.einsum("...ij,...j->...i", c1, d_inv_m2)
    )
    maha = np.einsum("...i,...i->...", delta, d_inv_delta)
    # log N(mean - m2 | 0, cov + c2) in closed form:
    # cov + c2 = C2 D^-1 C2 and mean - m2 = C2 D^-1 delta
    log_norm = -0.5 * (
        d * LOG_2PI + 2.0 * logdet_from_chol(chol_2) - logdet_from_chol(chol_d) + maha
    )
    return mean, cov, -log_norm


def bhattacharyya_arrays(m1, c1, m2, c2) -> np.ndarray:
    cbar = 0.5 * (c1 + c2)
    chol = cholesky(cbar)
    delta = m1 - m2
    z = np.linalg.solve(chol, delta[..., None])[..., 0]
    maha = np.einsum("...i,...i->...", z, z)
    ld1 = logdet_from_chol(cholesky(c1))
    ld2 = logdet_from_chol(cholesky(c2))
    dist = 0.125 * maha + 0.5 * (logdet_from_chol(chol) - 0.5 * (ld1 + ld2))
    return np.maximum(dist, 0.0)


@dataclass(frozen=True, eq=False)
class Gaussian:
    """One weighted multivariate normal component.

    The density it represents is ``exp(log_weight) * N(x | mean, cov)``.
    """

    mean: np.ndarray
    cov: np.ndarray
    log_weight: float = 0.0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or mean.size == 0:
            raise ContractViolation("mean must be a nonempty vector")
        d = mean.size
        if cov.shape != (d, d):
            raise ContractViolation(f"cov shape {cov.shape} does not match dim {d}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ContractViolation("mean and cov must be finite")
        scale = max(np.max(np.abs(cov)), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
            raise ContractViolation("cov is not symmetric")
        cov = symmetrize(cov)
        chol = cholesky(cov)
        lw = float(self.log_weight)
        if math.isnan(lw) or lw == math.inf:
            raise ContractViolation("log_weight must be finite or -inf")
        object.__setattr__(self, "mean", _as_readonly(mean))
        object.__setattr__(self, "cov", _as_readonly(cov))
        object.__setattr__(self, "log_weight", lw)
        object.__setattr__(self, "_chol", _as_readonly(chol))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def logdet(self) -> float:
        return float(logdet_from_chol(self._chol))

    def with_log_weight(self, log_weight: float) -> Gaussian:
        return Gaussian(self.mean, self.cov, log_weight)

    def normalized(self) -> Gaussian:
        return self.with_log_weight(0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T

    def __eq__(self, other):
        if not isinstance(other, Gaussian):
            return NotImplemented
        return (
            self.log_weight == other.log_weight
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.cov, other.cov)
        )

    __hash__ = None


def _check_same_dim(g1: Gaussian, g2: Gaussian):
    if g1.dim != g2.dim:
        raise ContractViolation(f"dimension mismatch: {g1.dim} vs {g2.dim}")


def log_density(g: Gaussian, x) -> float:
    """``log_weight + log N(x | mean, cov)``; vectorized over leading axes of x."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (g.dim,):
        raise ContractViolation(f"point of shape {x.shape} does not match dim {g.dim}")
    diff = x - g.mean
    z = np.linalg.solve(g._chol, diff.reshape(-1, g.dim).T).T
    maha = np.einsum("ni,ni->n", z, z)
    out = g.log_weight - 0.5 * (g.dim * LOG_2PI + g.logdet + maha)
    if x.ndim == 1:
        return float(out[0])
    return out.reshape(x.shape[:-1])


def product(g1: Gaussian, g2: Gaussian) -> Gaussian:
    """Pointwise product; an unnormalized Gaussian whose log-density is the sum."""
    _check_same_dim(g1, g2)
    mean, cov, log_gain = product_arrays(g1.mean, g1.cov, g2.mean, g2.cov)
    return Gaussian(mean, cov, g1.log_weight + g2.log_weight + float(log_gain))


def quotient(num: Gaussian, den: Gaussian) -> Gaussian:
    """Pointwise quotient ``num / den``.

    Raises :class:`NotPositiveDefinite` when ``num.cov^-1 - den.cov^-1`` is not
    positive definite, i.e. the denominator is narrower in some direction.
    """
    _check_same_dim(num, den)
    mean, cov, log_scale = quotient_arrays(num.mean, num.cov, den.mean, den.cov)
    return Gaussian(mean, cov, num.log_weight - den.log_weight + float(log_scale))


def bhattacharyya(g1: Gaussian, g2: Gaussian) -> float:
    """Bhattacharyya distance between the normalized shapes (weights ignored)."""
    _check_same_dim(g1, g2)
    if np.array_equal(g1.mean, g2.mean) and np.array_equal(g1.cov, g2.cov):
        return 0.0
    lo, hi = (g1, g2) if _order_key(g1) <= _order_key(g2) else (g2, g1)
    return float(bhattacharyya_arrays(lo.mean, lo.cov, hi.mean, hi.cov))


def _order_key(g: Gaussian):
    # canonical argument order makes the float result exactly symmetric
    return (tuple(g.mean), tuple(g.cov.ravel()))


def _index_set(dims: Sequence[int], dim: int, what: str) -> np.ndarray:
    idx = np.asarray(list(dims), dtype=int)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractViolation(f"{what} must be a nonempty index set")
    if np.any(idx < 0) or np.any(idx >= dim) or len(set(idx.tolist())) != idx.size:
        raise ContractViolation(f"{what} {idx.tolist()} invalid for dim {dim}")
    return idx


def marginal(g: Gaussian, keep_dims: Sequence[int]) -> Gaussian:
    idx = _index_set(keep_dims, g.dim, "keep_dims")
    return Gaussian(g.mean[idx], g.cov[np.ix_(idx, idx)], g.log_weight)


def condition_arrays(mean, cov, obs_idx, free_idx, values):
    """Batched Schur-complement conditioning.

    ``mean`` (..., d), ``cov`` (..., d, d). Returns
    ``(cond_mean, cond_cov, log_marginal)`` where ``log_marginal`` is the
    unit-weight log density of the observed block at ``values``.
    """
    m_o = mean[..., obs_idx]
    m_f = mean[..., free_idx]
    c_oo = cov[..., obs_idx[:, None], obs_idx[None, :]]
    c_fo = cov[..., free_idx[:, None], obs_idx[None, :]]
    c_ff = cov[..., free_idx[:, None], free_idx[None, :]]
    chol = cholesky(c_oo)
    diff = values - m_o
    k = obs_idx.size
    rhs = np.concatenate([np.swapaxes(c_fo, -1, -2), diff[..., None]], axis=-1)
    sol = np.linalg.solve(c_oo, rhs)
    gain_t = sol[..., :-1]  # C_oo^-1 C_of
    alpha = sol[..., -1]  # C_oo^-1 (v - m_o)
    cond_mean = m_f + np.einsum("...ij,...j->...i", c_fo, alpha)
    cond_cov = symmetrize(c_ff - c_fo @ gain_t)
    maha = np.einsum("...i,...i->...", diff, alpha)
    log_marg = -0.5 * (k * LOG_2PI + logdet_from_chol(chol) + maha)
    return cond_mean, cond_cov, log_marg


def condition(joint: Gaussian, observed_dims: Sequence[int], values) -> tuple[Gaussian, float]:
    """Condition on ``x[observed_dims] = values``.

    Returns the unit-weight conditional over the remaining dims (in index
    order) and the log marginal density of the observed block, including the
    joint's own ``log_weight``.
    """
    obs = _index_set(observed_dims, joint.dim, "observed_dims")
    free = np.setdiff1d(np.arange(joint.dim), obs)
    if free.size == 0:
        raise ContractViolation("cannot condition on every dimension")
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != obs.size:
        raise ContractViolation("values length does not match observed_dims")
    try:
        cm, cc, lm = condition_arrays(joint.mean, joint.cov, obs, free, values)
    except NotPositiveDefinite as exc:
        raise ContractViolation(f"observed block is singular: {exc}") from None
    return Gaussian(cm, cc), float(lm) + joint.log_weight
