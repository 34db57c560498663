"""Reading detections off a posterior: modes, box masses, noise ratios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from . import gauss, scene
from .errors import ContractViolation
from .mixture import Mixture, log_density_mix
from .scene import ModelKind

DEFAULT_MODE_TOL = 1e-8
DEFAULT_MODE_ITERS = 500
DEFAULT_SAMPLE_BUDGET = 20_000
DEDUPE_MAHALANOBIS = 0.5

# Tolerances by parameter role. Sizes are relative to the value they are
# measured at; every other role is absolute (pixels, radians, unitless).
DEFAULT_TOLERANCES = {"position": 5.0, "size": 0.05, "angle": 0.05, "exponent": 0.1}
DEFAULT_MIN_MASS = 0.5


class Mode(NamedTuple):
    location: np.ndarray
    log_density: float
    converged: bool


def _precisions(mix: Mixture):
    chol = mix.chols
    prec = np.linalg.inv(mix.covs)
    log_norm = mix.log_weights - 0.5 * (mix.dim * gauss.LOG_2PI + gauss.logdet_from_chol(chol))
    return prec, log_norm


def _resp(x, mix, prec, log_norm):
    diff = x[:, None, :] - mix.means[None]
    maha = np.einsum("ski,kij,skj->sk", diff, prec, diff)
    lc = log_norm[None] - 0.5 * maha
    return lc, np.exp(lc - lc.max(axis=1, keepdims=True))


def modes(posterior: Mixture, tol: float = DEFAULT_MODE_TOL,
          max_iters: int = DEFAULT_MODE_ITERS) -> list[Mode]:
    """Local maxima by fixed-point mean shift from every component mean.

    Each step solves (sum_i r_i P_i) x = sum_i r_i P_i mu_i, the stationarity
    condition with responsibilities frozen. Converged points closer than
    Mahalanobis 0.5 (under the component dominating the kept point) collapse
    into one mode.
    """
    prec, log_norm = _precisions(posterior)
    pm = np.einsum("kij,kj->ki", prec, posterior.means)
    x = posterior.means.copy()
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iters):
        if not active.any():
            break
        xa = x[active]
        _, r = _resp(xa, posterior, prec, log_norm)
        a = np.einsum("sk,kij->sij", r, prec)
        b = r @ pm
        new = np.linalg.solve(a, b[..., None])[..., 0]
        step = np.abs(new - xa).max(axis=1)
        x[active] = new
        scale = 1.0 + np.abs(new).max(axis=1)
        idx = np.flatnonzero(active)
        active[idx[step <= tol * scale]] = False
    converged = ~active
    lc, _ = _resp(x, posterior, prec, log_norm)
    dens = logsumexp(lc, axis=1)
    dominant = np.argmax(lc, axis=1)
    order = np.lexsort((np.arange(len(x)), -dens))
    kept: list[int] = []
    for i in order:
        dup = False
        for j in kept:
            d = x[i] - x[j]
            if d @ prec[dominant[j]] @ d < DEDUPE_MAHALANOBIS ** 2:
                dup = True
                break
        if not dup:
            kept.append(int(i))
    return [Mode(x[i].copy(), float(log_density_mix(posterior, x[i])), bool(converged[i]))
            for i in kept]


def box_mass(posterior: Mixture, center, half_widths, sample_budget: int = DEFAULT_SAMPLE_BUDGET,
             seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mass inside ``center +- half_widths`` and its binomial
    standard error."""
    center = np.asarray(center, dtype=float)
    hw = np.broadcast_to(np.asarray(half_widths, dtype=float), center.shape)
    if np.any(hw <= 0):
        raise ContractViolation("half_widths must be > 0")
    if sample_budget < 1:
        raise ContractViolation("sample_budget must be >= 1")
    pts = posterior.sample(np.random.default_rng(seed), sample_budget)
    inside = np.all(np.abs(pts - center) <= hw, axis=1)
    p = float(inside.mean())
    return p, float(np.sqrt(p * (1.0 - p) / sample_budget))


def noise_ratio(posterior: Mixture, noise_counts: Sequence[int], evidence_count: int, m) -> float:
    """Density-weighted average of the per-hypothesis noise fractions at m."""
    if evidence_count < 1:
        raise ContractViolation("noise ratio needs at least one evidence")
    counts = np.asarray(noise_counts, dtype=float)
    if counts.shape != (len(posterior),):
        raise ContractViolation("noise_counts must align with the components")
    lc = posterior.component_log_densities(np.asarray(m, dtype=float))[0]
    w = np.exp(lc - lc.max())
    ratio = float(w @ counts / w.sum() / evidence_count)
    return min(max(ratio, 0.0), 1.0)


@dataclass(frozen=True)
class Criteria:
    """Box half-widths D_M by parameter role, and the mass a mode needs."""

    roles: tuple[str, ...]
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    min_mass: float = DEFAULT_MIN_MASS

    def __post_init__(self):
        unknown = set(self.roles) - set(self.tolerances)
        if unknown:
            raise ContractViolation(f"no tolerance for roles {sorted(unknown)}")
        if any(v <= 0 for v in self.tolerances.values()):
            raise ContractViolation("tolerances must be > 0")
        if not 0.0 <= self.min_mass <= 1.0:
            raise ContractViolation("min_mass must lie in [0, 1]")

    @classmethod
    def for_kind(cls, kind: ModelKind | str, **kw) -> Criteria:
        return cls(scene.PARAM_ROLE[ModelKind(kind)], **kw)

    def half_widths(self, at) -> np.ndarray:
        """D_M evaluated at a parameter vector (relative roles scale by |at|)."""
        at = np.asarray(at, dtype=float)
        tol = np.array([self.tolerances[r] for r in self.roles])
        rel = np.array([r == "size" for r in self.roles])
        hw = np.where(rel, tol * np.abs(at), tol)
        return np.maximum(hw, 1e-12)

    def within(self, m, truth) -> bool:
        """Every parameter of m within tolerance of the truth."""
        return bool(np.all(np.abs(np.asarray(m) - np.asarray(truth)) <= self.half_widths(truth)))


@dataclass(frozen=True)
class ModeRecord:
    m: np.ndarray
    log_density: float
    box_mass: float
    box_mass_se: float
    noise_ratio: float


@dataclass(frozen=True)
class MatchReport:
    modes: tuple[ModeRecord, ...]
    decisive: bool
    criteria: Criteria

    @property
    def best(self) -> ModeRecord | None:
        return self.modes[0] if self.modes else None

    def to_text(self, param_names: Sequence[str] | None = None) -> str:
        names = list(param_names or [f"p{i}" for i in range(len(self.criteria.roles))])
        lines = [f"decisive: {'yes' if self.decisive else 'no'}",
                 f"min_mass: {self.criteria.min_mass:g}",
                 f"modes: {len(self.modes)}"]
        for i, r in enumerate(self.modes):
            params = " ".join(f"{n}={v:.4f}" for n, v in zip(names, r.m))
            lines.append(f"[{i}] {params} mass={r.box_mass:.4f}+-{r.box_mass_se:.4f} "
                         f"noise_ratio={r.noise_ratio:.4f} log_density={r.log_density:.4f}")
        return "\n".join(lines) + "\n"

    def to_row(self, sep: str = "\t") -> str:
        """One delimited row for the best mode (empty fields when there is none)."""
        b = self.best
        n = len(self.criteria.roles)
        vals = [repr(float(v)) for v in b.m] if b else [""] * n
        tail = [repr(b.box_mass), repr(b.noise_ratio)] if b else ["", ""]
        return sep.join(vals + tail + [str(int(self.decisive))])


def match_report(posterior: Mixture, noise_counts: Sequence[int], evidence_count: int,
                 criteria: Criteria, *, sample_budget: int = DEFAULT_SAMPLE_BUDGET,
                 seed: int = 0) -> MatchReport:
    """Modes scored by box mass and noise ratio, heaviest first.

    A mode lying inside the box of a heavier one is dropped: the two boxes
    overlap and would count the same mass twice.
    """
    found = modes(posterior)
    recs = []
    for k, md in enumerate(found):
        mass, se = box_mass(posterior, md.location, criteria.half_widths(md.location),
                            sample_budget, seed + k)
        nr = noise_ratio(posterior, noise_counts, evidence_count, md.location) if evidence_count else 0.0
        recs.append(ModeRecord(md.location, md.log_density, mass, se, nr))
    recs.sort(key=lambda r: -r.box_mass)
    kept: list[ModeRecord] = []
    for r in recs:
        if any(np.all(np.abs(r.m - q.m) <= criteria.half_widths(q.m)) for q in kept):
            continue
        kept.append(r)
    decisive = sum(r.box_mass >= criteria.min_mass for r in kept) == 1
    return MatchReport(tuple(kept), decisive, criteria)


def is_success(report: MatchReport, truth, criteria: Criteria | None = None) -> bool:
    """Decisive report whose heaviest mode lies within tolerance of the truth."""
    criteria = criteria or report.criteria
    return bool(report.decisive and report.best is not None and criteria.within(report.best.m, truth))
