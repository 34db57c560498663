"""Detection-phase accumulation of evidence into a hypothesis set.

Each hypothesis is one unnormalized Gaussian over the model space plus the
number of evidence items it explains as noise. Pushing an evidence splits
every hypothesis into a noise branch and one branch per signal component of
the evidence term; the sum of all hypotheses is the posterior up to scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
from scipy.special import logsumexp

from . import gauss, mixture
from .errors import ContractViolation
from .gauss import Gaussian
from .mixture import Mixture
from .study import StudiedModel, evidence_term

# Branches whose weight falls this far below the best one are discarded in
# reduced mode. exp(-32) ~ 1e-14: far below anything the queries can resolve.
DEFAULT_PRUNE_LOG_RATIO = 32.0


@dataclass(frozen=True)
class ReduceConfig:
    max_k: int = mixture.DEFAULT_MAX_K
    merge_dist: float = mixture.DEFAULT_MERGE_DIST
    exact: bool = False
    prune_log_ratio: float = DEFAULT_PRUNE_LOG_RATIO

    def __post_init__(self):
        if self.max_k < 1:
            raise ContractViolation("max_k must be >= 1")
        if self.merge_dist < 0 or self.prune_log_ratio <= 0:
            raise ContractViolation("merge_dist must be >= 0 and prune_log_ratio > 0")


@dataclass(frozen=True, eq=False)
class Hypothesis:
    gaussian: Gaussian
    noise_count: int


@dataclass(eq=False)
class AccumulatorState:
    """Array-backed hypothesis set.

    ``means`` (k, d), ``covs`` (k, d, d), ``log_weights`` (k,) and
    ``noise_counts`` (k,) describe the hypotheses in a stable order.
    """

    studied: StudiedModel
    means: np.ndarray
    covs: np.ndarray
    log_weights: np.ndarray
    noise_counts: np.ndarray
    evidence_count: int = 0
    reduce_cfg: ReduceConfig = field(default_factory=ReduceConfig)
    noise_count_mean: float | None = None
    trace: TextIO | None = None

    def __len__(self) -> int:
        return self.log_weights.size

    @property
    def hypotheses(self) -> list[Hypothesis]:
        return [
            Hypothesis(Gaussian(m, c, lw), int(n))
            for m, c, lw, n in zip(self.means, self.covs, self.log_weights, self.noise_counts)
        ]

    def _replace(self, **kw) -> AccumulatorState:
        fields = dict(
            studied=self.studied, means=self.means, covs=self.covs,
            log_weights=self.log_weights, noise_counts=self.noise_counts,
            evidence_count=self.evidence_count, reduce_cfg=self.reduce_cfg,
            noise_count_mean=self.noise_count_mean, trace=self.trace,
        )
        fields.update(kw)
        return AccumulatorState(**fields)


def init(sm: StudiedModel, reduce_cfg: ReduceConfig = ReduceConfig(), *,
         noise_count_mean: float | None = None, trace: TextIO | None = None) -> AccumulatorState:
    """Start from the prior: one hypothesis, no evidence.

    ``noise_count_mean`` overrides the studied noise level when computing
    signal/noise shares (useful when the expected clutter is known to differ).
    """
    p = sm.prior
    return AccumulatorState(
        sm, p.mean[None, :].copy(), p.cov[None].copy(), np.zeros(1), np.zeros(1, dtype=np.int64),
        0, reduce_cfg, noise_count_mean, trace,
    )


def _branch(state: AccumulatorState, term) -> tuple[np.ndarray, ...]:
    """All noise and signal branches, parent-major with the noise branch first."""
    k, d = state.means.shape
    sig = term.signal
    j = len(sig)
    mean, cov, gain = gauss.product_arrays(
        state.means[:, None, :], state.covs[:, None], sig.means[None], sig.covs[None]
    )
    lw = np.empty((k, j + 1))
    lw[:, 0] = state.log_weights + term.noise_log_density
    lw[:, 1:] = state.log_weights[:, None] + sig.log_weights[None, :] + gain
    means = np.empty((k, j + 1, d))
    means[:, 0] = state.means
    means[:, 1:] = mean
    covs = np.empty((k, j + 1, d, d))
    covs[:, 0] = state.covs
    covs[:, 1:] = cov
    counts = np.repeat(state.noise_counts[:, None], j + 1, axis=1)
    counts[:, 0] += 1
    return (lw.reshape(-1), means.reshape(-1, d), covs.reshape(-1, d, d), counts.reshape(-1))


def _absorb_excess(lw, means, covs, counts, keep, excess):
    """Fold each excess hypothesis into the Mahalanobis-nearest kept one with
    the same noise count; drop it when its group has no keeper."""
    for n in np.unique(counts[excess]):
        ex = excess[counts[excess] == n]
        kp = keep[counts[keep] == n]
        if kp.size == 0:
            continue
        prec = np.linalg.inv(covs[ex])
        diff = means[kp][None, :, :] - means[ex][:, None, :]
        dist = np.einsum("eki,eij,ekj->ek", diff, prec, diff)
        target = kp[np.argmin(dist, axis=1)]
        for t in np.unique(target):
            src = np.concatenate([[t], ex[target == t]])
            lw[t], means[t], covs[t] = mixture.merge_arrays(lw[src], means[src], covs[src])


def _merge_group(lw, means, covs, logdets, idx, merge_dist):
    """Leader clustering among ``idx``: the heaviest remaining hypothesis
    absorbs every other one within ``merge_dist`` (Bhattacharyya) in a single
    moment-preserving merge. Returns the surviving indices.

    Bhattacharyya distance is at least |dm|^2 / (8 max eig) with the largest
    eigenvalue bounded by the mean of both traces, so far-apart pairs are
    skipped without computing the exact distance.
    """
    if idx.size < 2 or merge_dist <= 0:
        return idx
    order = idx[np.argsort(-lw[idx], kind="stable")]
    tr = np.trace(covs[order], axis1=1, axis2=2)
    pending = np.ones(order.size, dtype=bool)
    keep = []
    for pos in range(order.size):
        if not pending[pos]:
            continue
        pending[pos] = False
        lead = order[pos]
        keep.append(lead)
        rest = np.flatnonzero(pending)
        if rest.size == 0:
            break
        sq = ((means[order[rest]] - means[lead]) ** 2).sum(-1)
        rest = rest[sq < 4.0 * merge_dist * (tr[rest] + tr[pos])]
        if rest.size == 0:
            continue
        cand = order[rest]
        cbar = 0.5 * (covs[cand] + covs[lead])
        chol = gauss.cholesky(cbar)
        z = np.linalg.solve(chol, (means[cand] - means[lead])[..., None])[..., 0]
        dist = 0.125 * (z * z).sum(-1) + 0.5 * (
            gauss.logdet_from_chol(chol) - 0.5 * (logdets[cand] + logdets[lead])
        )
        close = rest[dist < merge_dist]
        if close.size == 0:
            continue
        pending[close] = False
        src = np.concatenate([[lead], order[close]])
        lw[lead], means[lead], covs[lead] = mixture.merge_arrays(lw[src], means[src], covs[src])
    return np.sort(np.array(keep))


def _reduce(lw, means, covs, counts, cfg: ReduceConfig):
    order = np.argsort(-lw, kind="stable")
    top = lw[order[0]]
    order = order[lw[order] > top - cfg.prune_log_ratio]
    keep = np.sort(order[: cfg.max_k])
    excess = np.sort(order[cfg.max_k:])
    lw = lw.copy()
    if excess.size:
        _absorb_excess(lw, means, covs, counts, keep, excess)
    logdets = np.zeros(lw.size)
    logdets[keep] = gauss.logdet_from_chol(gauss.cholesky(covs[keep]))
    survivors = []
    for n in np.unique(counts[keep]):
        survivors.append(
            _merge_group(lw, means, covs, logdets, keep[counts[keep] == n], cfg.merge_dist)
        )
    keep = np.sort(np.concatenate(survivors))
    return lw[keep], means[keep], covs[keep], counts[keep]


def push(state: AccumulatorState, e) -> AccumulatorState:
    """Multiply the hypothesis set by (p_c(e) Gamma(e) + p_u(e))."""
    term = evidence_term(state.studied, e, state.noise_count_mean)
    lw, means, covs, counts = _branch(state, term)
    n_before = lw.size
    cfg = state.reduce_cfg
    if not cfg.exact:
        lw, means, covs, counts = _reduce(lw, means, covs, counts, cfg)
        lw = lw - lw.max()
    new = state._replace(means=means, covs=covs, log_weights=lw, noise_counts=counts,
                         evidence_count=state.evidence_count + 1)
    if state.trace is not None:
        _write_trace(state.trace, new, e, n_before)
    return new


def push_all(state: AccumulatorState, evidence: Iterable) -> AccumulatorState:
    for e in evidence:
        state = push(state, e)
    return state


def posterior(state: AccumulatorState) -> tuple[Mixture, list[int]]:
    """The normalized posterior mixture and the parallel noise-count list."""
    lw = state.log_weights - logsumexp(state.log_weights)
    mix = Mixture.from_arrays("model", state.means, state.covs, lw, validate=False)
    return mix, [int(n) for n in state.noise_counts]


def noise_ratio_at(state: AccumulatorState, m) -> float:
    """Noise ratio of the state at ``m``; zero before any evidence."""
    if state.evidence_count == 0:
        return 0.0
    from .query import noise_ratio

    mix, counts = posterior(state)
    return noise_ratio(mix, counts, state.evidence_count, m)


TRACE_HEADER = "# push type features n_before n_after top_log_weight top_noise_count top_mean"


def _write_trace(out: TextIO, state: AccumulatorState, e, n_before: int):
    if state.evidence_count == 1:
        out.write(TRACE_HEADER + "\n")
    top = int(np.argmax(state.log_weights))
    feats = ",".join(repr(float(v)) for v in e.features)
    mean = ",".join(repr(float(v)) for v in state.means[top])
    out.write(
        f"{state.evidence_count}\t{e.type_key}\t{feats}\t{n_before}\t{len(state)}\t"
        f"{float(state.log_weights[top])!r}\t{int(state.noise_counts[top])}\t{mean}\n"
    )


def read_trace(text: str) -> list[dict]:
    rows = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        p = line.split("\t")
        rows.append({
            "push": int(p[0]), "type": p[1],
            "features": np.array([float(v) for v in p[2].split(",")]),
            "n_before": int(p[3]), "n_after": int(p[4]),
            "top_log_weight": float(p[5]), "top_noise_count": int(p[6]),
            "top_mean": np.array([float(v) for v in p[7].split(",")]),
        })
    return rows
