"""Study phase: from supervised (evidence, instance) observations to a model
that maps any single evidence onto a Gaussian-mixture factor over the model
parameter space.

For each evidence type a joint mixture over (evidence features, model params)
is fitted by EM. Conditioning it on an evidence gives p(m | e); dividing by a
broad Gaussian prior gives the multiplicative update factor used during
detection. AE color classes are separate types (``AE0``, ``AE1``, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from . import gauss, mixture, scene
from .errors import (
    ConfigError,
    ContractViolation,
    InsufficientData,
    ModelFileError,
    NotPositiveDefinite,
    PriorTooNarrow,
    UnsupportedVersion,
)
from .gauss import Gaussian
from .mixture import EmConfig, Mixture
from .scene import FeatureBox, Label, ModelKind, ModelSpec, Quality
from .seeds import sub_seed

FORMAT_VERSION = 1
FORMAT_MAGIC = "orcea-studied-model"
DEFAULT_PRIOR_WIDTH_FACTOR = 2.0
DEFAULT_STUDY_RANGE_FACTOR = 1.25
MIN_OBS_PER_COMPONENT = 10
DEFAULT_PARAM_FLOOR_FRAC = 10.0
DEFAULT_ANGLE_FLOOR_FRAC = 1e-3


@dataclass
class ObservationSet:
    """Observations of one evidence type: rows pair features with params."""

    features: np.ndarray
    params: np.ndarray
    instance_ids: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def vectors(self) -> np.ndarray:
        """Concatenated observation vectors, evidence features first."""
        return np.hstack([self.features, self.params])


@dataclass
class Observations:
    spec: ModelSpec
    n_instances: int
    quality: Quality
    box: FeatureBox
    by_type: dict[str, ObservationSet] = field(default_factory=dict)

    def signal_rate(self, key: str) -> float:
        return len(self.by_type[key]) / self.n_instances if key in self.by_type else 0.0


def collect(spec: ModelSpec, n_instances: int, q: Quality, seed: int, *,
            ee_spacing: float = scene.DEFAULT_EE_SPACING,
            ae_spacing: float = scene.DEFAULT_AE_SPACING,
            box: FeatureBox | None = None,
            kinds=("EE", "AE")) -> Observations:
    """Sample instances, synthesize and degrade their evidence, keep the
    correlated items paired with the generating parameters."""
    if n_instances < 1:
        raise ContractViolation("n_instances must be >= 1")
    box = box or FeatureBox.for_spec(spec)
    rows: dict[str, tuple[list, list, list]] = {}
    for i in range(n_instances):
        inst = scene.sample_instance(spec, sub_seed(seed, 0, i))
        ideal = scene.ideal_evidence(inst, ee_spacing, ae_spacing, box=box, kinds=kinds)
        es = scene.degrade(ideal, q, sub_seed(seed, 1, i))
        for e, lab in zip(es.items, es.labels):
            if lab is not Label.CORRELATED:
                continue
            f, p, ids = rows.setdefault(e.type_key, ([], [], []))
            f.append(e.features)
            p.append(inst.vector)
            ids.append(i)
    obs = Observations(spec, n_instances, q, box)
    for key in sorted(rows):
        f, p, ids = rows[key]
        obs.by_type[key] = ObservationSet(np.array(f), np.array(p), np.array(ids))
    return obs


@dataclass(frozen=True)
class StudyConfig:
    k_ee: int = 64
    k_ae: int = 32
    max_iters: int = 200
    tol: float = 1e-6
    restarts: int = 2
    cov_floor_frac: float = 1e-4
    # Floors for the model-parameter block of every component, as fractions
    # of each parameter's variance. The fit keeps the regression of features
    # on parameters intact, so a component is a sharp p(e | m) over a broad
    # p(m). With a narrow floor, components pin themselves to clusters of
    # training instances and every evidence term carries that lumpy parameter
    # distribution; the lump is multiplied in once per evidence and swamps
    # the geometry after a few hundred items. The floor should also not be
    # moderate: the joint's parameter marginal then becomes a bump narrower
    # than the prior, and the ratio of the two pulls every estimate toward
    # the middle of the range. Ten times the variance keeps that pull weak
    # while staying inside the prior. Angles are read almost directly off
    # the evidence orientation and keep a narrow floor. A tuple sets every
    # parameter explicitly for every type.
    ee_param_floor_frac: float = DEFAULT_PARAM_FLOOR_FRAC
    ae_param_floor_frac: float = DEFAULT_PARAM_FLOOR_FRAC
    angle_floor_frac: float = DEFAULT_ANGLE_FLOOR_FRAC
    param_floor_frac: tuple[float, ...] | None = None
    seed: int = 0
    prior_width_factor: float = DEFAULT_PRIOR_WIDTH_FACTOR

    def param_floors(self, spec: ModelSpec, key: str = "EE") -> tuple[float, ...]:
        if self.param_floor_frac is not None:
            pf = tuple(float(v) for v in self.param_floor_frac)
            if len(pf) != spec.dim:
                raise ConfigError(f"param_floor_frac needs {spec.dim} entries, got {len(pf)}")
            return pf
        base = self.ee_param_floor_frac if key == "EE" else self.ae_param_floor_frac
        return tuple(self.angle_floor_frac if r == "angle" else float(base)
                     for r in scene.PARAM_ROLE[spec.kind])

    def em_config(self, key: str, spec: ModelSpec) -> EmConfig:
        k = self.k_ee if key == "EE" else self.k_ae
        n_feat = len(scene.feature_names(key))
        floor = (self.cov_floor_frac,) * n_feat + self.param_floors(spec, key)
        return EmConfig(k, self.max_iters, self.tol, self.restarts, floor,
                        sub_seed(self.seed, sum(map(ord, key))), regressor_dims=spec.dim)


@dataclass(frozen=True, eq=False)
class TypeModel:
    """Everything learned about one evidence type."""

    key: str
    joint: Mixture
    noise_log_density: float
    signal_rate: float

    @property
    def n_features(self) -> int:
        return len(scene.feature_names(self.key))


@dataclass(frozen=True, eq=False)
class StudiedModel:
    spec: ModelSpec
    prior: Gaussian
    types: Mapping[str, TypeModel]
    box: FeatureBox
    noise_count_mean: float
    format_version: int = FORMAT_VERSION

    @property
    def signal_total(self) -> float:
        return sum(t.signal_rate for t in self.types.values())

    def noise_rate(self, key: str, noise_count_mean: float | None = None) -> float:
        """Expected noise count of one type, given a total noise mean.

        Noise kinds follow the correlated EE/AE proportion; AE noise classes
        are uniform.
        """
        n = self.noise_count_mean if noise_count_mean is None else noise_count_mean
        ae = sum(t.signal_rate for k, t in self.types.items() if k != "EE")
        total = self.signal_total
        if key == "EE":
            frac = 1.0 - ae / total
        else:
            frac = ae / total / self.box.n_classes
        return n * frac

    def log_shares(self, key: str, noise_count_mean: float | None = None) -> tuple[float, float]:
        """(log signal share, log noise share) for one evidence type.

        Shares are expected counts of that type over the expected total count,
        so that p_c(e) and p_u(e) are on a commensurate scale.
        """
        n = self.noise_count_mean if noise_count_mean is None else noise_count_mean
        total = self.signal_total + n
        s = self.types[key].signal_rate
        u = self.noise_rate(key, n)
        return (math.log(s / total) if s > 0 else -math.inf,
                math.log(u / total) if u > 0 else -math.inf)

    def __eq__(self, other):
        if not isinstance(other, StudiedModel):
            return NotImplemented
        return dumps(self) == dumps(other)

    __hash__ = None


def make_prior(spec: ModelSpec, width_factor: float = DEFAULT_PRIOR_WIDTH_FACTOR) -> Gaussian:
    return Gaussian(spec.centers, np.diag((spec.widths * width_factor) ** 2))


def _type_layout(key: str, spec: ModelSpec):
    d_e = len(scene.feature_names(key))
    return np.arange(d_e), np.arange(d_e, d_e + spec.dim)


def _check_quotients(key: str, joint: Mixture, spec: ModelSpec, prior: Gaussian):
    """Conditional covariances do not depend on the observed values, so one
    pass over the components proves every future quotient succeeds."""
    obs, free = _type_layout(key, spec)
    values = joint.means[0, obs]
    _, ccov, _ = gauss.condition_arrays(joint.means, joint.covs, obs, free, values)
    for i, c in enumerate(ccov):
        try:
            gauss.cholesky(gauss.symmetrize(prior.cov - c))
        except NotPositiveDefinite:
            raise PriorTooNarrow(f"{key} component {i}: conditional exceeds prior") from None


def build(observations: Observations, cfg: StudyConfig = StudyConfig(), *,
          spec: ModelSpec | None = None, box: FeatureBox | None = None,
          history: dict | None = None) -> StudiedModel:
    """Fit joint mixtures per type and assemble a validated studied model."""
    spec = spec or observations.spec
    box = box or observations.box
    prior = make_prior(spec, cfg.prior_width_factor)
    types = {}
    for key, obs in sorted(observations.by_type.items()):
        em = cfg.em_config(key, spec)
        if len(obs) < MIN_OBS_PER_COMPONENT * em.k:
            raise InsufficientData(f"{key}: {len(obs)} observations for k={em.k}")
        hist = [] if history is not None else None
        joint = mixture.fit_em(obs.vectors, em, space_label=f"joint:{key}", history=hist)
        if history is not None:
            history[key] = hist
        _check_quotients(key, joint, spec, prior)
        types[key] = TypeModel(key, joint, -box.log_volume(key), observations.signal_rate(key))
    if not types:
        raise InsufficientData("no observations")
    return StudiedModel(spec, prior, types, box, observations.quality.noise_count_mean)


# ------------------------------------------------------------ evidence terms


@dataclass(frozen=True, eq=False)
class EvidenceTerm:
    """Signal and noise factors one evidence contributes to the update.

    ``signal`` carries p_c(e) * Gamma(e) as an unnormalized mixture over the
    model space; ``noise_log_density`` is log p_u(e). ``log_evidence`` is the
    log density of the features under the type's joint marginal.
    """

    signal: Mixture
    noise_log_density: float
    log_evidence: float
    log_pc: float


class _TypeCache:
    """Value-independent pieces of conditioning and the prior quotient."""

    def __init__(self, key: str, tm: TypeModel, spec: ModelSpec, prior: Gaussian):
        obs, free = _type_layout(key, spec)
        self.obs, self.free = obs, free
        j = tm.joint
        c_oo = j.covs[:, obs[:, None], obs[None, :]]
        c_fo = j.covs[:, free[:, None], obs[None, :]]
        c_ff = j.covs[:, free[:, None], free[None, :]]
        self.m_o = j.means[:, obs]
        self.m_f = j.means[:, free]
        chol = gauss.cholesky(c_oo)
        self.prec_oo = np.linalg.inv(c_oo)
        self.gain = c_fo @ self.prec_oo
        self.cond_cov = gauss.symmetrize(c_ff - self.gain @ np.swapaxes(c_fo, 1, 2))
        self.log_norm_o = j.log_weights - 0.5 * (obs.size * gauss.LOG_2PI + gauss.logdet_from_chol(chol))


_CACHE: dict[int, dict[str, _TypeCache]] = {}


def _cache(sm: StudiedModel, key: str) -> _TypeCache:
    per = _CACHE.setdefault(id(sm), {})
    if key not in per:
        per[key] = _TypeCache(key, sm.types[key], sm.spec, sm.prior)
    return per[key]


def evidence_term(sm: StudiedModel, e, noise_count_mean: float | None = None) -> EvidenceTerm:
    """Condition the joint on ``e``, divide by the prior, scale by p_c(e)."""
    key = e.type_key
    if key not in sm.types:
        raise ContractViolation(f"evidence type {key!r} was not studied")
    c = _cache(sm, key)
    v = e.features
    diff = v - c.m_o
    maha = np.einsum("ki,kij,kj->k", diff, c.prec_oo, diff)
    lw = c.log_norm_o - 0.5 * maha
    log_ev = float(logsumexp(lw))
    cond_means = c.m_f + np.einsum("kij,kj->ki", c.gain, diff)
    try:
        q_mean, q_cov, q_scale = gauss.quotient_arrays(
            cond_means, c.cond_cov, sm.prior.mean, sm.prior.cov
        )
    except NotPositiveDefinite as exc:
        raise PriorTooNarrow(str(exc)) from None
    log_s, log_u = sm.log_shares(key, noise_count_mean)
    log_pc = log_ev + log_s
    signal = Mixture.from_arrays(
        "model", q_mean, q_cov, (lw - log_ev) + q_scale - sm.prior.log_weight + log_pc,
        validate=False,
    )
    return EvidenceTerm(signal, sm.types[key].noise_log_density + log_u, log_ev, log_pc)


# ------------------------------------------------------------- persistence


def _f(v: float) -> str:
    return repr(float(v))


def _row(values) -> str:
    return " ".join(_f(v) for v in np.ravel(values))


def dumps(sm: StudiedModel) -> str:
    spec = sm.spec
    b = sm.box
    lines = [
        f"{FORMAT_MAGIC} {sm.format_version}",
        f"kind {spec.kind.value}",
        "params " + " ".join(spec.param_names),
    ]
    for name, (lo, hi) in zip(spec.param_names, spec.ranges):
        lines.append(f"range {name} {_f(lo)} {_f(hi)}")
    lines += [
        f"edge_width_range {_row(spec.edge_width_range)}",
        f"ae_size_range {_row(spec.ae_size_range)}",
        f"box {_row(b.domain)} {_row(b.edge_width)} {_row(b.ae_size)} {b.n_classes}",
        f"noise_count_mean {_f(sm.noise_count_mean)}",
        f"prior {_f(sm.prior.log_weight)}; {_row(sm.prior.mean)}; {_row(sm.prior.cov)}",
    ]
    for key, tm in sm.types.items():
        j = tm.joint
        lines.append(
            f"type {key} k {len(j)} dim {j.dim} noise_log_density {_f(tm.noise_log_density)} "
            f"signal_rate {_f(tm.signal_rate)}"
        )
        for lw, m, c in zip(j.log_weights, j.means, j.covs):
            lines.append(f"{_f(lw)}; {_row(m)}; {_row(c)}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def _component(line: str, dim: int, where: str) -> Gaussian:
    try:
        lw_s, m_s, c_s = line.split(";")
        lw = float(lw_s)
        m = np.array([float(t) for t in m_s.split()])
        c = np.array([float(t) for t in c_s.split()]).reshape(dim, dim)
    except ValueError:
        raise ModelFileError(f"{where}: malformed component record") from None
    if m.size != dim:
        raise ModelFileError(f"{where}: mean has {m.size} entries, expected {dim}")
    try:
        return Gaussian(m, c, lw)
    except (NotPositiveDefinite, ContractViolation) as exc:
        raise ModelFileError(f"{where}: invalid covariance ({exc})") from None


def loads(text: str) -> StudiedModel:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise ModelFileError("empty studied-model file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_MAGIC:
        raise ModelFileError("not a studied-model file")
    try:
        version = int(head[1])
    except ValueError:
        raise ModelFileError("bad format version") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {version}; this build reads {FORMAT_VERSION}")
    it = iter(lines[1:])
    try:
        kind = ModelKind(next(it).split()[1])
        names = next(it).split()[1:]
        ranges = []
        for name in names:
            parts = next(it).split()
            if parts[:2] != ["range", name]:
                raise ModelFileError(f"expected range for {name}")
            ranges.append((float(parts[2]), float(parts[3])))
        ew = tuple(map(float, next(it).split()[1:]))
        ae = tuple(map(float, next(it).split()[1:]))
        bx = next(it).split()[1:]
        box = FeatureBox(tuple(map(float, bx[:4])), tuple(map(float, bx[4:6])),
                         tuple(map(float, bx[6:8])), int(bx[8]))
        noise_mean = float(next(it).split()[1])
        spec = ModelSpec(kind, tuple(ranges), ew, ae)
        prior = _component(next(it)[len("prior "):], spec.dim, "prior")
        types = {}
        for line in it:
            if line == "end":
                break
            p = line.split()
            if p[0] != "type":
                raise ModelFileError(f"unexpected record {p[0]!r}")
            key, k, dim = p[1], int(p[3]), int(p[5])
            nld, rate = float(p[7]), float(p[9])
            comps = [_component(next(it), dim, f"{key} component {i}") for i in range(k)]
            joint = Mixture(f"joint:{key}", comps)
            if abs(joint.log_mass) > 1e-9:
                raise ModelFileError(f"{key}: joint mixture mass is not 1")
            types[key] = TypeModel(key, joint, nld, rate)
        else:
            raise ModelFileError("missing end record")
    except StopIteration:
        raise ModelFileError("truncated studied-model file") from None
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"malformed record: {exc}") from None
    sm = StudiedModel(spec, prior, types, box, noise_mean, version)
    for key, tm in types.items():
        try:
            _check_quotients(key, tm.joint, spec, prior)
        except PriorTooNarrow as exc:
            raise ModelFileError(str(exc)) from None
    return sm


def save(sm: StudiedModel, path) -> None:
    Path(path).write_text(dumps(sm))


def load(path) -> StudiedModel:
    return loads(Path(path).read_text())
