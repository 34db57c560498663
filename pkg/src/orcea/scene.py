"""Generative shape models and programmatic evidence synthesis.

Three object models are supported: an upright rectangle drawn with a border,
a rotated 4x4 checkerboard grid, and a logarithmic-spiral sector. Evidence is
created directly from the model parameters (no images): edge elements (EE)
along every contour and area elements (AE) tiling the filled regions, then
degraded by missing coverage, scatter, class flips and uniform noise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ContractViolation

DEFAULT_EE_SPACING = 4.0
DEFAULT_AE_SPACING = 10.0
DEFAULT_DOMAIN = (-256.0, -256.0, 256.0, 256.0)
EE_AMPLITUDE_RANGE = (0.0, 1.5)
SPIRAL_EDGE_WIDTH = 6.0


class ModelKind(enum.Enum):
    UPRIGHT_RECT = "UprightRect"
    GRID4X4 = "Grid4x4"
    SPIRAL_SECTOR = "SpiralSector"


PARAM_NAMES = {
    ModelKind.UPRIGHT_RECT: ("x", "y", "w", "h", "b"),
    ModelKind.GRID4X4: ("x", "y", "w", "theta", "b"),
    ModelKind.SPIRAL_SECTOR: ("x", "y", "theta0", "R0", "span", "b"),
}

# Hard lower bounds used when widening ranges; keeps sizes strictly positive.
_POSITIVE = {"w", "h", "b", "R0", "span"}

# Per-parameter kind, used for success tolerances.
PARAM_ROLE = {
    ModelKind.UPRIGHT_RECT: ("position", "position", "size", "size", "size"),
    ModelKind.GRID4X4: ("position", "position", "size", "angle", "size"),
    ModelKind.SPIRAL_SECTOR: ("position", "position", "angle", "size", "angle", "exponent"),
}


@dataclass(frozen=True)
class ModelSpec:
    """A model family and the closed parameter ranges instances are drawn from.

    ``edge_width_range`` and ``ae_size_range`` describe the feature box used for
    uniform noise; they do not change when parameter ranges are widened.
    """

    kind: ModelKind
    ranges: tuple[tuple[float, float], ...]
    edge_width_range: tuple[float, float] = (2.0, 20.0)
    ae_size_range: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        if len(ranges) != len(PARAM_NAMES[kind]):
            raise ContractViolation(f"{kind.value} needs {len(PARAM_NAMES[kind])} ranges")
        for name, (lo, hi) in zip(PARAM_NAMES[kind], ranges):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ContractViolation(f"bad range for {name}: [{lo}, {hi}]")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "edge_width_range", tuple(map(float, self.edge_width_range)))
        object.__setattr__(self, "ae_size_range", tuple(map(float, self.ae_size_range)))

    @property
    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES[self.kind]

    @property
    def dim(self) -> int:
        return len(self.ranges)

    @property
    def n_classes(self) -> int:
        return 2 if self.kind is ModelKind.GRID4X4 else 1

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.ranges])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.ranges])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def widened(self, factor: float) -> ModelSpec:
        """Ranges scaled by ``factor`` about their centers.

        Strictly positive parameters keep a lower bound of half their
        original lower bound.
        """
        if factor <= 0:
            raise ContractViolation("widening factor must be positive")
        out = []
        for name, (lo, hi) in zip(self.param_names, self.ranges):
            c, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * factor
            new_lo = c - half
            if name in _POSITIVE:
                new_lo = max(new_lo, 0.5 * lo)
            out.append((new_lo, c + half))
        return replace(self, ranges=tuple(out))


def default_spec(kind: ModelKind | str) -> ModelSpec:
    """Benchmark sampling ranges for each model (pixels / radians)."""
    kind = ModelKind(kind)
    if kind is ModelKind.UPRIGHT_RECT:
        ranges = ((-120, 120), (-120, 120), (80, 200), (80, 200), (2, 20))
    elif kind is ModelKind.GRID4X4:
        ranges = ((-100, 100), (-100, 100), (120, 240), (0.2, 1.2), (2, 12))
        return ModelSpec(kind, ranges, edge_width_range=(2.0, 12.0))
    else:
        ranges = ((-60, 60), (-60, 60), (0.3, 2.8), (40, 90), (0.5 * math.pi, math.pi), (0.1, 0.3))
    return ModelSpec(kind, ranges)


@dataclass(frozen=True)
class Instance:
    spec_kind: ModelKind
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "spec_kind", ModelKind(self.spec_kind))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __getitem__(self, name: str) -> float:
        return self.params[PARAM_NAMES[self.spec_kind].index(name)]

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.params)


def sample_instance(spec: ModelSpec, seed: int) -> Instance:
    rng = np.random.default_rng(seed)
    return Instance(spec.kind, tuple(rng.uniform(spec.lower, spec.upper)))


# ---------------------------------------------------------------- evidence


class Label(enum.Enum):
    CORRELATED = "C"
    NOISE = "U"


@dataclass(frozen=True)
class EE:
    """Edge element: center, orientation in [0, pi), edge width, amplitude."""

    x: float
    y: float
    theta: float
    w: float
    a: float

    kind = "EE"

    @property
    def features(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.w, self.a])

    @property
    def type_key(self) -> str:
        return "EE"


@dataclass(frozen=True)
class AE:
    """Area element: patch center, patch size and color class."""

    x: float
    y: float
    w: float
    c: int

    kind = "AE"

    @property
    def features(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w])

    @property
    def type_key(self) -> str:
        return f"AE{self.c}"


Evidence = Union[EE, AE]
EE_FEATURES = ("x", "y", "theta", "w", "a")
AE_FEATURES = ("x", "y", "w")


def feature_names(type_key: str) -> tuple[str, ...]:
    return EE_FEATURES if type_key == "EE" else AE_FEATURES


def wrap_angle(theta):
    """Orientation modulo pi, in [0, pi)."""
    out = np.mod(theta, math.pi)
    return np.where(out >= math.pi, 0.0, out)


@dataclass(frozen=True)
class FeatureBox:
    """Scene bounds and the feature ranges uniform noise is drawn from."""

    domain: tuple[float, float, float, float] = DEFAULT_DOMAIN
    edge_width: tuple[float, float] = (2.0, 20.0)
    ae_size: tuple[float, float] = (5.0, 15.0)
    n_classes: int = 1

    @classmethod
    def for_spec(cls, spec: ModelSpec, domain=DEFAULT_DOMAIN) -> FeatureBox:
        return cls(tuple(map(float, domain)), spec.edge_width_range, spec.ae_size_range, spec.n_classes)

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.domain
        return (x1 - x0) * (y1 - y0)

    def log_volume(self, type_key: str) -> float:
        """Log volume of the continuous feature box for one evidence type."""
        if type_key == "EE":
            lo, hi = self.edge_width
            a_lo, a_hi = EE_AMPLITUDE_RANGE
            return math.log(self.area * math.pi * (hi - lo) * (a_hi - a_lo))
        lo, hi = self.ae_size
        return math.log(self.area * (hi - lo))


@dataclass(frozen=True)
class EvidenceSet:
    items: tuple
    labels: tuple[Label, ...] | None = None
    box: FeatureBox = field(default_factory=FeatureBox)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.labels is not None:
            labels = tuple(Label(l) for l in self.labels)
            if len(labels) != len(self.items):
                raise ContractViolation("labels and items differ in length")
            object.__setattr__(self, "labels", labels)

    @property
    def domain(self):
        return self.box.domain

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def count(self, label: Label) -> int:
        return 0 if self.labels is None else sum(l is label for l in self.labels)

    def permuted(self, rng: np.random.Generator) -> EvidenceSet:
        order = rng.permutation(len(self.items))
        labels = None if self.labels is None else tuple(self.labels[i] for i in order)
        return EvidenceSet(tuple(self.items[i] for i in order), labels, self.box)


# ------------------------------------------------------------ ideal evidence


def _segment_ees(p0, p1, spacing, width):
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    length = float(np.hypot(*(p1 - p0)))
    n = max(1, int(round(length / spacing)))
    theta = float(wrap_angle(math.atan2(p1[1] - p0[1], p1[0] - p0[0])))
    t = (np.arange(n) + 0.5) / n
    pts = p0 + t[:, None] * (p1 - p0)
    return [EE(float(px), float(py), theta, width, 1.0) for px, py in pts]


def _tile_offsets(extent: float, spacing: float) -> np.ndarray:
    """Centers of whole tiles of size ``spacing`` fitting in a centered span."""
    n = int(math.floor(extent / spacing + 1e-9))
    return (np.arange(n) - 0.5 * (n - 1)) * spacing


def _rect_evidence(p, ee_spacing, ae_spacing):
    x, y, w, h, b = p
    if w <= 0 or h <= 0 or b <= 0:
        raise ContractViolation("rectangle needs w, h, b > 0")
    x0, x1, y0, y1 = x - w / 2, x + w / 2, y - h / 2, y + h / 2
    ees = []
    for a, c in (((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))):
        ees += _segment_ees(a, c, ee_spacing, b)
    aes = [
        AE(x + dx, y + dy, ae_spacing, 0)
        for dy in _tile_offsets(h - b, ae_spacing)
        for dx in _tile_offsets(w - b, ae_spacing)
    ]
    return ees, aes


def _grid_evidence(p, ee_spacing, ae_spacing):
    x, y, w, theta, b = p
    if w <= 0 or b <= 0:
        raise ContractViolation("grid needs w, b > 0")
    c = np.array([x, y])
    u = np.array([math.cos(theta), math.sin(theta)])
    n = np.array([-math.sin(theta), math.cos(theta)])
    ees = []
    for k in range(5):
        off = (k - 2) * w / 4
        ees += _segment_ees(c + off * n - w / 2 * u, c + off * n + w / 2 * u, ee_spacing, b)
    for k in range(5):
        off = (k - 2) * w / 4
        ees += _segment_ees(c + off * u - w / 2 * n, c + off * u + w / 2 * n, ee_spacing, b)
    aes = []
    cell = w / 4
    offs = _tile_offsets(cell - b, ae_spacing)
    for row in range(4):
        for col in range(4):
            cu, cn = (col - 1.5) * cell, (row - 1.5) * cell
            for dn in offs:
                for du in offs:
                    px, py = c + (cu + du) * u + (cn + dn) * n
                    aes.append(AE(float(px), float(py), ae_spacing, (row + col) % 2))
    return ees, aes


def spiral_radius(p, alpha):
    """Radius of the spiral sector contour at polar angle ``alpha``."""
    _, _, theta0, r0, _, b = p
    return r0 * np.exp(b * (np.asarray(alpha) - theta0))


def spiral_arc_length(p) -> float:
    _, _, _, r0, span, b = p
    return r0 * math.sqrt(1 + b * b) / b * (math.exp(b * span) - 1)


def _spiral_evidence(p, ee_spacing, ae_spacing):
    x, y, theta0, r0, span, b = p
    if r0 <= 0 or span <= 0 or b <= 0:
        raise ContractViolation("spiral needs R0, span, b > 0")
    c = np.array([x, y])
    k = math.sqrt(1 + b * b)
    length = spiral_arc_length(p)
    n = max(1, int(round(length / ee_spacing)))
    s = (np.arange(n) + 0.5) / n * length
    alpha = theta0 + np.log1p(b * s / (r0 * k)) / b
    r = spiral_radius(p, alpha)
    px = x + r * np.cos(alpha)
    py = y + r * np.sin(alpha)
    tang = np.arctan2(b * np.sin(alpha) + np.cos(alpha), b * np.cos(alpha) - np.sin(alpha))
    ees = [
        EE(float(a), float(bb), float(t), SPIRAL_EDGE_WIDTH, 1.0)
        for a, bb, t in zip(px, py, wrap_angle(tang))
    ]
    for ang in (theta0, theta0 + span):
        end = c + float(spiral_radius(p, ang)) * np.array([math.cos(ang), math.sin(ang)])
        ees += _segment_ees(c, end, ee_spacing, SPIRAL_EDGE_WIDTH)

    rmax = float(spiral_radius(p, theta0 + span))
    offs = np.arange(-math.ceil(rmax / ae_spacing), math.ceil(rmax / ae_spacing) + 1) * ae_spacing
    gx, gy = np.meshgrid(offs, offs)
    gx, gy = gx.ravel(), gy.ravel()
    rr = np.hypot(gx, gy)
    rel = np.mod(np.arctan2(gy, gx) - theta0, 2 * math.pi)
    margin = 0.5 * ae_spacing * math.sqrt(2) + 0.5 * SPIRAL_EDGE_WIDTH
    inside = (rel <= span) & (rr + margin <= spiral_radius(p, theta0 + rel)) & (rr > margin)
    # angular margin from the two radial edges
    dist_start = rr * np.sin(np.minimum(rel, math.pi / 2))
    dist_end = rr * np.sin(np.minimum(span - rel, math.pi / 2))
    inside &= (dist_start >= margin) & (dist_end >= margin)
    aes = [AE(float(x + a), float(y + bb), ae_spacing, 0) for a, bb in zip(gx[inside], gy[inside])]
    return ees, aes


_GENERATORS = {
    ModelKind.UPRIGHT_RECT: _rect_evidence,
    ModelKind.GRID4X4: _grid_evidence,
    ModelKind.SPIRAL_SECTOR: _spiral_evidence,
}


def ideal_evidence(inst: Instance, ee_spacing: float = DEFAULT_EE_SPACING,
                   ae_spacing: float = DEFAULT_AE_SPACING, *, box: FeatureBox | None = None,
                   kinds: Sequence[str] = ("EE", "AE")) -> EvidenceSet:
    """Undegraded evidence for an instance; every item labeled correlated."""
    if ee_spacing <= 0 or ae_spacing <= 0:
        raise ContractViolation("spacings must be positive")
    ees, aes = _GENERATORS[inst.spec_kind](inst.params, ee_spacing, ae_spacing)
    items = (ees if "EE" in kinds else []) + (aes if "AE" in kinds else [])
    if box is None:
        box = FeatureBox(n_classes=2 if inst.spec_kind is ModelKind.GRID4X4 else 1)
    return EvidenceSet(tuple(items), (Label.CORRELATED,) * len(items), box)


# ----------------------------------------------------------------- degrading


@dataclass(frozen=True)
class Quality:
    scatter_sigma: float = 0.0
    scatter_theta: float = 0.0
    scatter_prop: float = 0.0
    coverage: float = 1.0
    noise_count_mean: float = 0.0
    class_flip_prob: float = 0.0

    def __post_init__(self):
        for name in ("scatter_sigma", "scatter_theta", "scatter_prop", "noise_count_mean"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        for name in ("coverage", "class_flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractViolation(f"{name} must lie in [0, 1]")


QUALITY_PRESETS = {
    "ideal": Quality(),
    "high": Quality(0.5, 0.02, 0.03, 0.9, 10.0, 0.02),
    "medium": Quality(1.5, 0.05, 0.08, 0.7, 30.0, 0.08),
    "poor": Quality(3.0, 0.10, 0.15, 0.5, 60.0, 0.15),
}


def quality_preset(name: str, **overrides) -> Quality:
    try:
        q = QUALITY_PRESETS[name]
    except KeyError:
        raise ContractViolation(f"unknown quality preset {name!r}") from None
    return replace(q, **overrides)


def noise_items(box: FeatureBox, count: int, rng: np.random.Generator,
                ae_fraction: float = 0.0) -> list:
    """``count`` uniform noise items; each is an AE with probability ``ae_fraction``."""
    x0, y0, x1, y1 = box.domain
    out = []
    for _ in range(count):
        is_ae = rng.random() < ae_fraction
        px, py = rng.uniform(x0, x1), rng.uniform(y0, y1)
        if is_ae:
            w = rng.uniform(*box.ae_size)
            out.append(AE(float(px), float(py), float(w), int(rng.integers(box.n_classes))))
        else:
            theta = rng.uniform(0.0, math.pi)
            w = rng.uniform(*box.edge_width)
            a = EE_AMPLITUDE_RANGE[1] - rng.uniform(0.0, EE_AMPLITUDE_RANGE[1] - EE_AMPLITUDE_RANGE[0])
            out.append(EE(float(px), float(py), float(theta), float(w), float(a)))
    return out


def _ae_fraction(items) -> float:
    if not items:
        return 0.0
    return sum(isinstance(e, AE) for e in items) / len(items)


def inject_noise(es: EvidenceSet, count: int, seed) -> EvidenceSet:
    """Append exactly ``count`` noise items, kinds in proportion to the set's items."""
    rng = np.random.default_rng(seed)
    new = noise_items(es.box, count, rng, _ae_fraction(es.items))
    labels = None if es.labels is None else es.labels + (Label.NOISE,) * count
    return EvidenceSet(es.items + tuple(new), labels, es.box)


def _perturb(e, q: Quality, rng: np.random.Generator, n_classes: int):
    dx, dy = rng.normal(0.0, q.scatter_sigma, 2) if q.scatter_sigma > 0 else (0.0, 0.0)
    fw = 1.0 + (rng.normal(0.0, q.scatter_prop) if q.scatter_prop > 0 else 0.0)
    if isinstance(e, EE):
        dt = rng.normal(0.0, q.scatter_theta) if q.scatter_theta > 0 else 0.0
        fa = 1.0 + (rng.normal(0.0, q.scatter_prop) if q.scatter_prop > 0 else 0.0)
        return EE(e.x + dx, e.y + dy, float(wrap_angle(e.theta + dt)),
                  max(e.w * fw, 1e-6), max(e.a * fa, 1e-6))
    c = e.c
    if n_classes > 1 and q.class_flip_prob > 0 and rng.random() < q.class_flip_prob:
        c = (c + 1 + int(rng.integers(n_classes - 1))) % n_classes
    return AE(e.x + dx, e.y + dy, max(e.w * fw, 1e-6), c)


def degrade(es: EvidenceSet, q: Quality, seed) -> EvidenceSet:
    """Apply missing coverage, scatter, class flips and Poisson uniform noise.

    Only correlated items are dropped or perturbed; noise is appended at the
    end with the noise label.
    """
    if es.labels is None:
        raise ContractViolation("degrade needs ground-truth labels")
    rng = np.random.default_rng(seed)
    items, labels = [], []
    for e, lab in zip(es.items, es.labels):
        if lab is not Label.CORRELATED:
            items.append(e)
            labels.append(lab)
            continue
        if rng.random() >= q.coverage:
            continue
        items.append(_perturb(e, q, rng, es.box.n_classes))
        labels.append(lab)
    n_noise = int(rng.poisson(q.noise_count_mean)) if q.noise_count_mean > 0 else 0
    correlated = [e for e, lab in zip(es.items, es.labels) if lab is Label.CORRELATED]
    items += noise_items(es.box, n_noise, rng, _ae_fraction(correlated))
    labels += [Label.NOISE] * n_noise
    return EvidenceSet(tuple(items), tuple(labels), es.box)


# ------------------------------------------------------------- text format


def _fmt(v: float) -> str:
    return repr(float(v))


def dumps_evidence(es: EvidenceSet) -> str:
    b = es.box
    lines = [
        "# orcea evidence set",
        "# box " + " ".join(_fmt(v) for v in (*b.domain, *b.edge_width, *b.ae_size)) + f" {b.n_classes}",
    ]
    labels = es.labels or (None,) * len(es.items)
    for e, lab in zip(es.items, labels):
        tag = "-" if lab is None else lab.value
        if isinstance(e, EE):
            lines.append(f"EE {_fmt(e.x)} {_fmt(e.y)} {_fmt(e.theta)} {_fmt(e.w)} {_fmt(e.a)} {tag}")
        else:
            lines.append(f"AE {_fmt(e.x)} {_fmt(e.y)} {_fmt(e.w)} {e.c} {tag}")
    return "\n".join(lines) + "\n"


def loads_evidence(text: str) -> EvidenceSet:
    items, labels = [], []
    box = FeatureBox()
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) == 11 and parts[1] == "box":
                v = [float(p) for p in parts[2:10]]
                box = FeatureBox(tuple(v[:4]), tuple(v[4:6]), tuple(v[6:8]), int(parts[10]))
            continue
        try:
            if parts[0] == "EE" and len(parts) == 7:
                items.append(EE(*map(float, parts[1:6])))
            elif parts[0] == "AE" and len(parts) == 6:
                items.append(AE(float(parts[1]), float(parts[2]), float(parts[3]), int(parts[4])))
            else:
                raise ValueError(parts[0])
        except ValueError:
            raise ContractViolation(f"line {lineno}: malformed evidence record") from None
        labels.append(None if parts[-1] == "-" else Label(parts[-1]))
    if any(l is None for l in labels):
        labels = None
    return EvidenceSet(tuple(items), None if labels is None else tuple(labels), box)


def save_evidence(es: EvidenceSet, path) -> None:
    Path(path).write_text(dumps_evidence(es))


def load_evidence(path) -> EvidenceSet:
    return loads_evidence(Path(path).read_text())
