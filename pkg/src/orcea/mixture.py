"""Gaussian mixtures: containers, EM fitting, conditioning, merging, reduction."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import gauss
from .errors import ContractViolation, InsufficientData, NotPositiveDefinite
from .gauss import Gaussian

DEFAULT_MERGE_DIST = 0.1
DEFAULT_MAX_K = 256


class Mixture:
    """Weighted sum of Gaussians over a named parameter space.

    Stored as stacked arrays (``means`` (k, d), ``covs`` (k, d, d),
    ``log_weights`` (k,)); :attr:`components` materializes
    :class:`~orcea.gauss.Gaussian` objects on demand. Log weights need not
    normalize. Instances are treated as immutable.
    """

    def __init__(self, space_label: str, components: Iterable[Gaussian] = ()):
        comps = list(components)
        if not comps:
            raise ContractViolation("a mixture needs at least one component")
        dims = {g.dim for g in comps}
        if len(dims) != 1:
            raise ContractViolation(f"components disagree on dimension: {sorted(dims)}")
        self._init_arrays(
            space_label,
            np.array([g.mean for g in comps]),
            np.array([g.cov for g in comps]),
            np.array([g.log_weight for g in comps]),
        )
        self.__dict__["components"] = tuple(comps)

    @classmethod
    def from_arrays(cls, space_label, means, covs, log_weights, *, validate=True) -> Mixture:
        self = cls.__new__(cls)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        log_weights = np.asarray(log_weights, dtype=float).reshape(-1)
        if means.ndim != 2 or means.shape[0] == 0:
            raise ContractViolation("means must be a nonempty (k, d) array")
        k, d = means.shape
        if covs.shape != (k, d, d) or log_weights.shape != (k,):
            raise ContractViolation("inconsistent mixture array shapes")
        if validate:
            gauss.cholesky(gauss.symmetrize(covs))
        self._init_arrays(space_label, means, gauss.symmetrize(covs), log_weights)
        return self

    def _init_arrays(self, space_label, means, covs, log_weights):
        for a in (means, covs, log_weights):
            a.setflags(write=False)
        self.space_label = str(space_label)
        self.means = means
        self.covs = covs
        self.log_weights = log_weights
        total = logsumexp(log_weights)
        if not np.isfinite(total):
            raise ContractViolation("mixture total mass must be finite and positive")

    @cached_property
    def components(self) -> tuple[Gaussian, ...]:
        return tuple(
            Gaussian(m, c, lw) for m, c, lw in zip(self.means, self.covs, self.log_weights)
        )

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def log_mass(self) -> float:
        return float(logsumexp(self.log_weights))

    @property
    def weights(self) -> np.ndarray:
        """Normalized linear weights."""
        return np.exp(self.log_weights - self.log_mass)

    def normalized(self) -> Mixture:
        return Mixture.from_arrays(
            self.space_label, self.means, self.covs, self.log_weights - self.log_mass,
            validate=False,
        )

    @cached_property
    def chols(self) -> np.ndarray:
        return gauss.cholesky(self.covs)

    def component_log_densities(self, x) -> np.ndarray:
        """Weighted log density of each component at points x: shape (n, k)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ContractViolation(f"points of dim {x.shape[1]} vs mixture dim {self.dim}")
        logdets = gauss.logdet_from_chol(self.chols)
        out = np.empty((x.shape[0], len(self)))
        for i in range(len(self)):
            z = solve_triangular(self.chols[i], (x - self.means[i]).T, lower=True)
            out[:, i] = self.log_weights[i] - 0.5 * (
                self.dim * gauss.LOG_2PI + logdets[i] + np.einsum("ij,ij->j", z, z)
            )
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        counts = rng.multinomial(n, self.weights)
        out = np.empty((n, self.dim))
        pos = 0
        for i, c in enumerate(counts):
            if c:
                z = rng.standard_normal((c, self.dim))
                out[pos:pos + c] = self.means[i] + z @ self.chols[i].T
                pos += c
        return out

    def marginal(self, keep_dims: Sequence[int], space_label: str | None = None) -> Mixture:
        idx = gauss._index_set(keep_dims, self.dim, "keep_dims")
        return Mixture.from_arrays(
            space_label or self.space_label,
            self.means[:, idx],
            self.covs[:, idx[:, None], idx[None, :]],
            self.log_weights,
            validate=False,
        )

    def __repr__(self) -> str:
        return f"Mixture({self.space_label!r}, k={len(self)}, dim={self.dim})"


def log_density_mix(mix: Mixture, x) -> float | np.ndarray:
    """logsumexp of component log densities; vectorized over rows of x."""
    x = np.asarray(x, dtype=float)
    vals = logsumexp(mix.component_log_densities(x), axis=1)
    return float(vals[0]) if x.ndim == 1 else vals


@dataclass(frozen=True)
class EmConfig:
    k: int
    max_iters: int = 200
    tol: float = 1e-6
    restarts: int = 2
    # scalar, or one fraction per dimension
    cov_floor_frac: float | tuple[float, ...] = 1e-4
    seed: int = 0
    # When > 0, the trailing ``regressor_dims`` dimensions are floored as a
    # marginal block and the leading ones as a residual given them; see
    # _floor_regression.
    regressor_dims: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ContractViolation("k must be >= 1")
        if not isinstance(self.cov_floor_frac, (int, float)):
            object.__setattr__(self, "cov_floor_frac", tuple(float(f) for f in self.cov_floor_frac))
        if np.any(np.asarray(self.cov_floor_frac) <= 0):
            raise ContractViolation("cov_floor_frac must be positive")
        if self.restarts < 1 or self.max_iters < 1:
            raise ContractViolation("restarts and max_iters must be >= 1")
        if self.regressor_dims < 0:
            raise ContractViolation("regressor_dims must be >= 0")


def _floor_cov(cov: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Clamp covariances from below at ``diag(floor)`` in the Loewner order.

    Eigenvalues are clamped in coordinates scaled by ``sqrt(floor)``, so a
    degenerate cluster comes out exactly as ``diag(floor)`` and every diagonal
    entry ends up >= its floor. Clamping only the diagonal would leave
    off-axis null directions on gridded data.
    """
    cov = gauss.symmetrize(cov)
    s = np.sqrt(floor)
    scaled = cov / (s[:, None] * s[None, :])
    vals, vecs = np.linalg.eigh(scaled)
    low = vals < 1.0
    if np.any(low):
        vals = np.maximum(vals, 1.0)
        fixed = np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs) * (s[:, None] * s[None, :])
        rows = np.any(low, axis=-1)
        cov = cov.copy()
        cov[rows] = gauss.symmetrize(fixed[rows])
    return cov


def _floor_regression(cov: np.ndarray, floor: np.ndarray, n_reg: int) -> np.ndarray:
    """Floor a joint (response, regressor) covariance without blurring the
    linear relation between the blocks.

    The joint is factored into the regressor marginal and the linear-Gaussian
    response given the regressors. Each factor is clamped at its own floor,
    then the joint is reassembled with the same regression coefficients. A
    component whose regressors barely vary (e.g. fitted to one training
    instance) thus gets a wide regressor marginal, while sharp relations such
    as "this feature equals that parameter" stay sharp.
    """
    d = cov.shape[-1]
    e, r = slice(0, d - n_reg), slice(d - n_reg, d)
    c_rr = cov[:, r, r]
    c_er = cov[:, e, r]
    f_r = floor[r]
    # tiny ridge: only matters when the regressors are (nearly) constant
    coef = np.linalg.solve(c_rr + np.diag(1e-3 * f_r), np.swapaxes(c_er, 1, 2))
    coef = np.swapaxes(coef, 1, 2)
    resid = cov[:, e, e] - coef @ np.swapaxes(c_er, 1, 2) - c_er @ np.swapaxes(coef, 1, 2) \
        + coef @ c_rr @ np.swapaxes(coef, 1, 2)
    resid = _floor_cov(resid, floor[e])
    c_rr = _floor_cov(c_rr, f_r)
    out = np.empty_like(cov)
    out[:, r, r] = c_rr
    out[:, e, r] = coef @ c_rr
    out[:, r, e] = np.swapaxes(out[:, e, r], 1, 2)
    out[:, e, e] = resid + coef @ c_rr @ np.swapaxes(coef, 1, 2)
    return gauss.symmetrize(out)


def _farthest_point_centers(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    idx = [int(rng.integers(n))]
    dist = np.sum((z - z[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.sum((z - z[nxt]) ** 2, axis=1))
    return np.array(idx)


def _outer(x):
    """Row-wise outer products flattened to (n, d*d)."""
    return (x[:, :, None] * x[:, None, :]).reshape(x.shape[0], -1)


def _e_step(x, xx, means, covs, log_w):
    """Responsibilities (n, k) and total log-likelihood.

    Mahalanobis terms come from one matrix product against the flattened
    precisions; ``x`` is centered by the caller so the expansion stays
    accurate.
    """
    n, d = x.shape
    chols = np.linalg.cholesky(covs)
    logdets = gauss.logdet_from_chol(chols)
    prec = np.linalg.inv(covs)
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    pm = np.einsum("kij,kj->ki", prec, means)
    maha = xx @ prec.reshape(len(means), -1).T - 2.0 * x @ pm.T + np.einsum("ki,ki->k", means, pm)
    logp = log_w - 0.5 * (d * gauss.LOG_2PI + logdets + np.maximum(maha, 0.0))
    top = logp.max(axis=1, keepdims=True)
    logp -= top
    resp = np.exp(logp)
    total = resp.sum(axis=1, keepdims=True)
    resp /= total
    return resp, float((top + np.log(total)).sum())


def _m_step(x, xx, resp, floor, n_reg=0):
    n, d = x.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ x) / nk[:, None]
    second = (resp.T @ xx).reshape(-1, d, d) / nk[:, None, None]
    covs = second - means[:, :, None] * means[:, None, :]
    covs = _floor_regression(covs, floor, n_reg) if n_reg else _floor_cov(covs, floor)
    return np.log(nk / n), means, covs


def _em_single(x, cfg: EmConfig, floor, rng, history):
    n, d = x.shape
    std = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    centers = _farthest_point_centers(z, cfg.k, rng)
    d2 = ((z[:, None, :] - z[centers][None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, cfg.k))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    xx = _outer(x)
    log_w, means, covs = _m_step(x, xx, resp, floor, cfg.regressor_dims)
    prev = -np.inf
    trace = []
    for _ in range(cfg.max_iters):
        resp, ll = _e_step(x, xx, means, covs, log_w)
        trace.append(ll)
        log_w, means, covs = _m_step(x, xx, resp, floor, cfg.regressor_dims)
        if np.isfinite(prev) and (ll - prev) <= cfg.tol * abs(prev):
            break
        prev = ll
    _, ll = _e_step(x, xx, means, covs, log_w)
    trace.append(ll)
    if history is not None:
        history.append(trace)
    return ll, log_w, means, covs


def fit_em(samples, cfg: EmConfig, *, space_label: str = "joint", history: list | None = None) -> Mixture:
    """Fit a k-component full-covariance mixture by EM.

    Runs ``cfg.restarts`` seeded restarts (farthest-point initialization) and
    keeps the one with the highest final log-likelihood. Every covariance
    is kept above ``diag(cov_floor_frac * data variance)``, so in particular
    each diagonal entry is at least that floor. If ``history`` is given, one
    log-likelihood trace per restart is appended to it.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ContractViolation("samples must be a (n, d) array with d >= 1")
    if x.shape[0] < cfg.k:
        raise InsufficientData(f"{x.shape[0]} samples for k={cfg.k}")
    var = x.var(axis=0)
    frac = np.asarray(cfg.cov_floor_frac, dtype=float)
    if frac.ndim and frac.shape != (x.shape[1],):
        raise ContractViolation(f"cov_floor_frac has {frac.size} entries for {x.shape[1]} dims")
    if not 0 <= cfg.regressor_dims < x.shape[1]:
        raise ContractViolation("regressor_dims must leave at least one response dimension")
    floor = frac * np.where(var > 0, var, 1.0)
    center = x.mean(axis=0)
    xc = x - center
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        result = _em_single(xc, cfg, floor, rng, history)
        if best is None or result[0] > best[0]:
            best = result
    _, log_w, means, covs = best
    return Mixture.from_arrays(space_label, means + center, covs, log_w - logsumexp(log_w))


def conditional(joint: Mixture, observed_dims: Sequence[int], values, space_label: str | None = None) -> tuple[Mixture, float]:
    """Condition every component on ``x[observed_dims] = values``.

    Returns the renormalized conditional mixture over the remaining dims and
    the log density of ``values`` under the joint's observed-block marginal.
    """
    obs = gauss._index_set(observed_dims, joint.dim, "observed_dims")
    free = np.setdiff1d(np.arange(joint.dim), obs)
    if free.size == 0:
        raise ContractViolation("cannot condition on every dimension")
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != obs.size:
        raise ContractViolation("values length does not match observed_dims")
    try:
        cm, cc, lm = gauss.condition_arrays(joint.means, joint.covs, obs, free, values)
    except NotPositiveDefinite as exc:
        raise ContractViolation(f"observed block is singular: {exc}") from None
    lw = joint.log_weights + lm
    log_ev = float(logsumexp(lw))
    return Mixture.from_arrays(space_label or joint.space_label, cm, cc, lw - log_ev), log_ev


def merge_arrays(log_weights, means, covs):
    """Moment-preserving merge of stacked components; -inf weights are excluded."""
    keep = np.isfinite(log_weights)
    if not np.any(keep):
        raise ContractViolation("nothing to merge: all weights are zero")
    lw, mu, cv = log_weights[keep], means[keep], covs[keep]
    top = lw.max()
    w = np.exp(lw - top)
    s = w.sum()
    w /= s
    mean = w @ mu
    diff = mu - mean
    cov = np.tensordot(w, cv, axes=1) + (w[:, None] * diff).T @ diff
    return float(top + np.log(s)), mean, gauss.symmetrize(cov)


def moment_merge(components: Sequence[Gaussian]) -> Gaussian:
    """Single Gaussian with the same mass, mean and covariance as the inputs."""
    comps = list(components)
    if not comps:
        raise ContractViolation("moment_merge needs at least one component")
    if len({g.dim for g in comps}) != 1:
        raise ContractViolation("components disagree on dimension")
    lw, mean, cov = merge_arrays(
        np.array([g.log_weight for g in comps]),
        np.array([g.mean for g in comps]),
        np.array([g.cov for g in comps]),
    )
    return Gaussian(mean, cov, lw)


def _pair_distances(means, covs, rows, cols):
    """Bhattacharyya distances between components ``rows`` and ``cols`` (grid)."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    m1 = means[rows][:, None, :]
    m2 = means[cols][None, :, :]
    c1 = covs[rows][:, None]
    c2 = covs[cols][None, :]
    return gauss.bhattacharyya_arrays(m1, c1, m2, c2)


def reduce(mix: Mixture, max_k: int = DEFAULT_MAX_K, merge_dist: float = DEFAULT_MERGE_DIST,
           prune: str = "absorb") -> Mixture:
    """Bound the component count of a mixture.

    First, greedily merge the closest pair (Bhattacharyya distance) while it is
    closer than ``merge_dist``. Then, while more than ``max_k`` components
    remain, the lowest-weight one is either merged into its nearest neighbour
    (``prune="absorb"``, mass preserving) or dropped (``prune="delete"``).
    """
    if max_k < 1:
        raise ContractViolation("max_k must be >= 1")
    if prune not in ("absorb", "delete"):
        raise ContractViolation(f"unknown prune mode {prune!r}")
    lw = mix.log_weights.copy()
    means = mix.means.copy()
    covs = mix.covs.copy()
    alive = np.ones(len(mix), dtype=bool)

    _merge_close(lw, means, covs, alive, merge_dist)
    pruned = False
    while alive.sum() > max_k:
        pruned = True
        idx = np.flatnonzero(alive)
        low = idx[np.argmin(lw[idx])]
        alive[low] = False
        if prune == "delete":
            continue
        others = np.flatnonzero(alive)
        near = others[np.argmin(_pair_distances(means, covs, [low], others)[0])]
        lw[near], means[near], covs[near] = merge_arrays(
            lw[[near, low]], means[[near, low]], covs[[near, low]]
        )
    if pruned:
        # absorption moves components; merge again so the result is a fixed point
        _merge_close(lw, means, covs, alive, merge_dist)

    idx = np.flatnonzero(alive)
    return Mixture.from_arrays(mix.space_label, means[idx], covs[idx], lw[idx], validate=False)


def _merge_close(lw, means, covs, alive, merge_dist):
    """Greedy closest-pair merging in place, restricted to ``alive`` entries."""
    n = lw.size
    idx = np.flatnonzero(alive)
    if idx.size < 2:
        return
    dist = np.full((n, n), np.inf)
    dist[np.ix_(idx, idx)] = _pair_distances(means, covs, idx, idx)
    np.fill_diagonal(dist, np.inf)
    while alive.sum() > 1:
        flat = int(np.argmin(dist))
        i, j = divmod(flat, n)
        if not dist[i, j] < merge_dist:
            break
        i, j = min(i, j), max(i, j)
        lw[i], means[i], covs[i] = merge_arrays(lw[[i, j]], means[[i, j]], covs[[i, j]])
        alive[j] = False
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        others = np.flatnonzero(alive & (np.arange(n) != i))
        if others.size:
            row = _pair_distances(means, covs, [i], others)[0]
            dist[i, others] = row
            dist[others, i] = row
