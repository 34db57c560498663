"""Benchmark protocol: repeated synthetic detections scored against truth.

Every run draws its randomness from seeds derived from (base seed, instance,
repetition), so results do not depend on execution order or on how many
worker processes share the load.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import accumulate as acc
from . import query, scene, study
from .errors import ConfigError, ContractViolation
from .query import Criteria
from .scene import ModelKind, ModelSpec
from .seeds import rng_for, sub_seed

RESULTS_FILE = "results.tsv"
SUMMARY_FILE = "summary.tsv"
TIMINGS_FILE = "timings.tsv"
SWEEPS = {
    "max_k": (64, 128, 256),
    "study_range_factor": (1.0, 1.25, 1.5),
}

# Seed streams; the numbers only need to differ from each other.
_S_STUDY, _S_STUDY_FIT, _S_INSTANCE, _S_DEGRADE, _S_ORDER, _S_MASS = 1, 2, 10, 11, 12, 13


@dataclass(frozen=True)
class BenchConfig:
    kind: str = ModelKind.UPRIGHT_RECT.value
    ranges: tuple | None = None
    quality: str = "high"
    quality_overrides: dict = field(default_factory=dict)
    n_instances: int = 10
    reps: int = 5
    seed: int = 0
    max_k: int = 256
    merge_dist: float = 0.1
    exact: bool = False
    study_path: str | None = None
    study_instances: int = 200
    study_range_factor: float = study.DEFAULT_STUDY_RANGE_FACTOR
    k_ee: int = 64
    k_ae: int = 32
    tolerances: dict = field(default_factory=lambda: dict(query.DEFAULT_TOLERANCES))
    min_mass: float = query.DEFAULT_MIN_MASS
    sample_budget: int = query.DEFAULT_SAMPLE_BUDGET
    out_dir: str | None = None
    workers: int = 1
    timings: bool = False

    def __post_init__(self):
        try:
            kind = ModelKind(self.kind)
        except ValueError:
            raise ConfigError(f"kind: unknown model {self.kind!r}") from None
        object.__setattr__(self, "kind", kind.value)
        if self.ranges is not None:
            object.__setattr__(self, "ranges", tuple(tuple(map(float, r)) for r in self.ranges))
        for name in ("n_instances", "reps", "max_k", "study_instances", "k_ee", "k_ae",
                     "sample_budget", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.study_range_factor < 1.0:
            raise ConfigError("study_range_factor: must be >= 1")
        if self.merge_dist < 0:
            raise ConfigError("merge_dist: must be >= 0")
        if self.quality not in scene.QUALITY_PRESETS:
            raise ConfigError(f"quality: unknown preset {self.quality!r}")
        try:
            self.quality_obj
            self.spec
            self.criteria
        except (ContractViolation, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> BenchConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> BenchConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["ranges"] is not None:
            d["ranges"] = [list(r) for r in d["ranges"]]
        return d

    @property
    def spec(self) -> ModelSpec:
        base = scene.default_spec(self.kind)
        return base if self.ranges is None else replace(base, ranges=self.ranges)

    @property
    def quality_obj(self) -> scene.Quality:
        return scene.quality_preset(self.quality, **self.quality_overrides)

    @property
    def criteria(self) -> Criteria:
        return Criteria.for_kind(self.kind, tolerances=dict(self.tolerances), min_mass=self.min_mass)

    @property
    def reduce_cfg(self) -> acc.ReduceConfig:
        return acc.ReduceConfig(max_k=self.max_k, merge_dist=self.merge_dist, exact=self.exact)

    @property
    def study_cfg(self) -> study.StudyConfig:
        return study.StudyConfig(k_ee=self.k_ee, k_ae=self.k_ae, seed=sub_seed(self.seed, _S_STUDY_FIT))


def build_studied(cfg: BenchConfig) -> study.StudiedModel:
    """Study the model over the widened ranges the config asks for."""
    spec = cfg.spec
    wide = spec.widened(cfg.study_range_factor)
    box = scene.FeatureBox.for_spec(spec)
    obs = study.collect(wide, cfg.study_instances, cfg.quality_obj, sub_seed(cfg.seed, _S_STUDY), box=box)
    return study.build(obs, cfg.study_cfg, spec=wide, box=box)


def studied_for(cfg: BenchConfig) -> study.StudiedModel:
    if cfg.study_path:
        sm = study.load(cfg.study_path)
        if sm.spec.kind.value != cfg.kind:
            raise ConfigError(f"study_path: model is {sm.spec.kind.value}, config wants {cfg.kind}")
        return sm
    return build_studied(cfg)


@dataclass(frozen=True)
class RunRow:
    instance: int
    rep: int
    success: bool
    decisive: bool
    n_modes: int
    n_evidence: int
    n_noise: int
    k_final: int
    k_max: int
    box_mass: float
    noise_ratio: float
    truth: tuple[float, ...]
    mode: tuple[float, ...]
    seconds: float = field(default=0.0, compare=False)

    @property
    def error(self) -> np.ndarray:
        return np.array(self.mode) - np.array(self.truth)


@dataclass(frozen=True)
class BenchResult:
    kind: str
    param_names: tuple[str, ...]
    rows: tuple[RunRow, ...]

    @property
    def runs(self) -> int:
        return len(self.rows)

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.rows)

    @property
    def errors(self) -> int:
        return self.runs - self.successes

    @property
    def detection_rate(self) -> float:
        return self.successes / self.runs if self.rows else 0.0

    def error_quantiles(self, qs=(0.5, 0.9)) -> np.ndarray:
        """Quantiles of |mode - truth| per parameter, shape (len(qs), dim)."""
        err = np.abs(np.array([r.error for r in self.rows]))
        return np.quantile(err, qs, axis=0)


def run_one(sm: study.StudiedModel, cfg: BenchConfig, instance: int, rep: int) -> RunRow:
    """One detection: fresh instance evidence, accumulation, report, score."""
    inst = scene.sample_instance(cfg.spec, sub_seed(cfg.seed, _S_INSTANCE, instance))
    ideal = scene.ideal_evidence(inst, box=sm.box)
    es = scene.degrade(ideal, cfg.quality_obj, sub_seed(cfg.seed, _S_DEGRADE, instance, rep))
    es = es.permuted(rng_for(cfg.seed, _S_ORDER, instance, rep))
    t0 = time.perf_counter()
    state = acc.init(sm, cfg.reduce_cfg)
    k_max = 1
    for e in es.items:
        state = acc.push(state, e)
        k_max = max(k_max, len(state))
    mix, counts = acc.posterior(state)
    crit = cfg.criteria
    rep_ = query.match_report(mix, counts, state.evidence_count, crit,
                              sample_budget=cfg.sample_budget,
                              seed=sub_seed(cfg.seed, _S_MASS, instance, rep) % (2**32))
    best = rep_.best
    return RunRow(
        instance, rep, query.is_success(rep_, inst.vector, crit), rep_.decisive, len(rep_.modes),
        len(es), es.count(scene.Label.NOISE), len(state), k_max, best.box_mass, best.noise_ratio,
        tuple(float(v) for v in inst.vector), tuple(float(v) for v in best.m),
        time.perf_counter() - t0,
    )


def _run_task(args):
    sm, cfg, i, r = args
    return run_one(sm, cfg, i, r)


def run_bench(cfg: BenchConfig, sm: study.StudiedModel | None = None) -> BenchResult:
    """Every instance x repetition, in a fixed order regardless of workers."""
    sm = sm or studied_for(cfg)
    tasks = [(sm, cfg, i, r) for i in range(cfg.n_instances) for r in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            rows = list(ex.map(_run_task, tasks))
    else:
        rows = [_run_task(t) for t in tasks]
    res = BenchResult(cfg.kind, cfg.spec.param_names, tuple(rows))
    if cfg.out_dir:
        write_results(res, cfg, cfg.out_dir)
    return res


# ------------------------------------------------------------------- files


def _results_header(names) -> list[str]:
    return (["instance", "rep", "success", "decisive", "n_modes", "n_evidence", "n_noise",
             "k_final", "k_max", "box_mass", "noise_ratio"]
            + [f"truth_{n}" for n in names] + [f"mode_{n}" for n in names])


def dumps_results(res: BenchResult) -> str:
    lines = ["\t".join(_results_header(res.param_names))]
    for r in res.rows:
        vals = [r.instance, r.rep, int(r.success), int(r.decisive), r.n_modes, r.n_evidence,
                r.n_noise, r.k_final, r.k_max]
        cells = [str(v) for v in vals] + [repr(float(r.box_mass)), repr(float(r.noise_ratio))]
        cells += [repr(v) for v in r.truth] + [repr(v) for v in r.mode]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def loads_results(text: str, kind: str) -> BenchResult:
    lines = text.rstrip("\n").split("\n")
    head = lines[0].split("\t")
    names = tuple(h[len("truth_"):] for h in head if h.startswith("truth_"))
    if head != _results_header(names):
        raise ConfigError("results file has an unexpected header")
    d = len(names)
    rows = []
    for line in lines[1:]:
        c = line.split("\t")
        ints = [int(v) for v in c[:9]]
        rows.append(RunRow(
            ints[0], ints[1], bool(ints[2]), bool(ints[3]), ints[4], ints[5], ints[6], ints[7],
            ints[8], float(c[9]), float(c[10]),
            tuple(float(v) for v in c[11:11 + d]), tuple(float(v) for v in c[11 + d:11 + 2 * d]),
        ))
    return BenchResult(ModelKind(kind).value, names, tuple(rows))


def dumps_summary(res: BenchResult, cfg: BenchConfig) -> str:
    crit = cfg.criteria
    tol = ", ".join(f"{role} {crit.tolerances[role]:g}{' (relative)' if role == 'size' else ''}"
                    for role in dict.fromkeys(crit.roles))
    rows = [
        ("kind", cfg.kind),
        ("quality", cfg.quality),
        ("seed", str(cfg.seed)),
        ("max_k", str(cfg.max_k)),
        ("exact", str(int(cfg.exact))),
        ("study_range_factor", repr(float(cfg.study_range_factor))),
        ("runs", str(res.runs)),
        ("successes", str(res.successes)),
        ("detection_rate", repr(res.detection_rate)),
        ("success_rule", f"decisive report (one mode with box mass >= {crit.min_mass:g}) "
                         f"and every parameter within tolerance: {tol}"),
        ("mean_noise_ratio", repr(float(np.mean([r.noise_ratio for r in res.rows])))),
    ]
    q = res.error_quantiles()
    for name, med, p90 in zip(res.param_names, q[0], q[1]):
        rows.append((f"abs_err_median_{name}", repr(float(med))))
        rows.append((f"abs_err_p90_{name}", repr(float(p90))))
    return "key\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows)


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines()[1:]:
        k, v = line.split("\t", 1)
        out[k] = v
    return out


def write_results(res: BenchResult, cfg: BenchConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESULTS_FILE).write_text(dumps_results(res))
    (out / SUMMARY_FILE).write_text(dumps_summary(res, cfg))
    if cfg.timings:
        lines = ["instance\trep\tseconds"] + [f"{r.instance}\t{r.rep}\t{r.seconds:.3f}" for r in res.rows]
        (out / TIMINGS_FILE).write_text("\n".join(lines) + "\n")
    return out


def read_results(out_dir, kind: str | None = None) -> BenchResult:
    out = Path(out_dir)
    if kind is None:
        kind = parse_summary((out / SUMMARY_FILE).read_text())["kind"]
    return loads_results((out / RESULTS_FILE).read_text(), kind)


# ------------------------------------------------------------------ sweeps


def run_sweep(cfg: BenchConfig, param: str, values=None) -> list[tuple[float, BenchResult]]:
    """The bench repeated over values of one parameter.

    Sweeping ``max_k`` reuses one studied model; sweeping the study range
    rebuilds it for every value.
    """
    if param not in SWEEPS:
        raise ConfigError(f"sweep: unknown parameter {param!r} (choose from {', '.join(SWEEPS)})")
    values = tuple(values or SWEEPS[param])
    base_out = Path(cfg.out_dir) if cfg.out_dir else None
    shared = studied_for(cfg) if param == "max_k" else None
    results = []
    for v in values:
        v = int(v) if param == "max_k" else float(v)
        sub_out = str(base_out / f"{param}_{v}") if base_out else None
        c = replace(cfg, **{param: v, "out_dir": sub_out})
        results.append((v, run_bench(c, shared)))
    if base_out:
        lines = [f"{param}\truns\tsuccesses\terrors\tdetection_rate"]
        lines += [f"{v}\t{r.runs}\t{r.successes}\t{r.errors}\t{r.detection_rate!r}" for v, r in results]
        base_out.mkdir(parents=True, exist_ok=True)
        (base_out / f"sweep_{param}.tsv").write_text("\n".join(lines) + "\n")
    return results
