"""Synthetic ICU cohort with irregularly sampled time series.

Three sampling regimes are generated: laboratory tests about once a day, nurse
observations roughly every two hours and automatically logged vital signs every hour
(with occasional monitoring gaps). A latent per-stay severity drives the length of
stay, the flat features, the diagnoses and the time series, so there is signal to learn.

Time-series signals come in four kinds:

``trend``   drifts towards a normal value as discharge approaches (slope encodes LoS)
``level``   stay-constant offset proportional to severity, buried in noise
``pair_a``/``pair_b``
            two vitals driven by shared hourly fluctuations; their correlation tracks
            severity and recovery, so only their per-hour product is informative
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy import optimize, stats

MIN_LOS_DAYS = 5.0 / 24
MAX_HOURS = 14 * 24
PRE_ADMISSION_HOURS = 24
TARGET_MEDIAN = 1.70
TARGET_MEAN = 3.50
N_DIAGNOSIS_NODES = 4436

# LoS = exp(mu + sigma * (RHO * u + sqrt(1 - RHO^2) * eps)); u is observable through features
RHO = 0.85

FLAT_FEATURES = (
    # name, type
    ("gender", "binary"),
    ("age", "discrete"),
    ("hour_of_admission", "discrete"),
    ("height", "continuous"),
    ("weight", "continuous"),
    ("ethnicity", "categorical"),
    ("unit_type", "categorical"),
    ("unit_admit_source", "categorical"),
    ("unit_visit_number", "categorical"),
    ("unit_stay_type", "categorical"),
    ("num_beds_category", "categorical"),
    ("region", "categorical"),
    ("teaching_status", "binary"),
    ("physician_speciality", "categorical"),
    ("age_gt_89", "binary"),
    ("null_height", "binary"),
    ("null_weight", "binary"),
)
_CATEGORY_COUNTS = {
    "ethnicity": 5, "unit_type": 6, "unit_admit_source": 5, "unit_visit_number": 3,
    "unit_stay_type": 3, "num_beds_category": 4, "region": 4, "physician_speciality": 8,
}


class RawEvent(NamedTuple):
    stay_id: int
    feature_id: str
    timestamp: float   # hours relative to ICU admission
    value: float


@dataclass
class FeatureSpec:
    feature_id: str
    cls: str           # lab | nurse | vital
    kind: str          # trend | level | pair_a | pair_b
    offset: float
    scale: float
    noise: float
    direction: float = 1.0
    presence: float = 1.0   # probability the feature is measured at all in a stay


@dataclass
class PatientStay:
    stay_id: int
    patient_id: int
    event_feature: np.ndarray   # int indices into the cohort feature list
    event_time: np.ndarray      # hours, >= -24
    event_value: np.ndarray
    flat: dict                  # 17 raw flat features
    diagnoses: list[tuple[float, str]]   # (timestamp hours, hierarchical path)
    los_total: float            # days
    died: bool = False
    severity: float = field(default=0.0, repr=False)

    def events(self, feature_ids: list[str]) -> Iterator[RawEvent]:
        for f, t, v in zip(self.event_feature, self.event_time, self.event_value):
            yield RawEvent(self.stay_id, feature_ids[int(f)], float(t), float(v))

    @property
    def n_events(self) -> int:
        return int(self.event_time.size)


@dataclass
class Cohort:
    features: list[FeatureSpec]
    stays: list[PatientStay]
    diagnosis_tree: list[str] = field(default_factory=list, repr=False)

    @property
    def feature_ids(self) -> list[str]:
        return [f.feature_id for f in self.features]

    def __len__(self) -> int:
        return len(self.stays)


# ---------------------------------------------------------------------------
# length of stay distribution
# ---------------------------------------------------------------------------

def lognormal_params(median: float, mean: float) -> tuple[float, float]:
    """(mu, sigma) of the log-normal with the given median and mean."""
    if mean <= median:
        raise ValueError("log-normal mean must exceed its median")
    return math.log(median), math.sqrt(2.0 * math.log(mean / median))


def truncated_lognormal_moments(mu: float, sigma: float, lower: float) -> tuple[float, float]:
    """Median and mean of a log-normal conditioned on exceeding ``lower``."""
    alpha = (math.log(lower) - mu) / sigma
    surv = stats.norm.sf(alpha)
    median = math.exp(mu + sigma * stats.norm.isf(surv / 2))
    mean = math.exp(mu + sigma**2 / 2) * stats.norm.sf(alpha - sigma) / surv
    return median, mean


def calibrated_los_params(median: float = TARGET_MEDIAN, mean: float = TARGET_MEAN,
                          lower: float = MIN_LOS_DAYS) -> tuple[float, float]:
    """Parameters whose truncation at ``lower`` still has the requested median and mean."""
    x0 = np.array(lognormal_params(median, mean))

    def residual(p):
        m, s = truncated_lognormal_moments(p[0], abs(p[1]), lower)
        return [math.log(m / median), math.log(s / mean)]

    sol = optimize.fsolve(residual, x0, xtol=1e-12)
    return float(sol[0]), float(abs(sol[1]))


# ---------------------------------------------------------------------------
# diagnosis hierarchy
# ---------------------------------------------------------------------------

def build_diagnosis_tree(rng: np.random.Generator, n_nodes: int = N_DIAGNOSIS_NODES,
                         n_roots: int = 12, max_depth: int = 5) -> list[str]:
    """Random hierarchy with exactly ``n_nodes`` nodes, returned as paths ``a|b|c``."""
    paths = [f"sys{r:02d}" for r in range(n_roots)]
    depth = {p: 1 for p in paths}
    n_children: dict[str, int] = {p: 0 for p in paths}
    while len(paths) < n_nodes:
        # shallow nodes branch more often
        parent = paths[int(rng.integers(len(paths)))]
        if depth[parent] >= max_depth or rng.random() < 0.25 * (depth[parent] - 1):
            continue
        child = f"{parent}|{'abcdefghijklmnopqrstuvwxyz'[depth[parent] - 1]}{n_children[parent]:03d}"
        n_children[parent] += 1
        paths.append(child)
        depth[child] = depth[parent] + 1
        n_children[child] = 0
    return paths


def ancestors(path: str) -> list[str]:
    """``a|b|c`` -> [``a``, ``a|b``, ``a|b|c``]."""
    parts = path.split("|")
    return ["|".join(parts[:i]) for i in range(1, len(parts) + 1)]


# ---------------------------------------------------------------------------
# feature catalogue
# ---------------------------------------------------------------------------

def make_feature_specs(rng: np.random.Generator, n_lab: int, n_nurse: int, n_vital: int) -> list[FeatureSpec]:
    specs: list[FeatureSpec] = []

    def add(cls, i, kind, noise, presence=1.0):
        specs.append(FeatureSpec(
            feature_id=f"{cls}_{i:02d}", cls=cls, kind=kind,
            offset=float(rng.uniform(5, 120)), scale=float(rng.uniform(0.5, 25)),
            noise=noise, direction=float(rng.choice([-1.0, 1.0])), presence=presence))

    for i in range(n_lab):
        add("lab", i, "trend" if i % 2 == 0 else "level", noise=0.15, presence=0.85)
    for i in range(n_nurse):
        add("nurse", i, ("trend", "level")[i % 2], noise=0.6)
    kinds = []
    for i in range(n_vital):
        if n_vital - i >= 2 and i % 4 in (0, 1):
            kinds.append("pair_a" if i % 4 == 0 else "pair_b")
        else:
            kinds.append("trend")
    for i, kind in enumerate(kinds):
        add("vital", i, kind, noise=1.0)
    return specs


def _sample_times(rng, cls: str, start: float, end: float) -> np.ndarray:
    if end <= start:
        return np.empty(0)
    if cls == "vital":
        t = np.arange(math.ceil(start), end, 1.0) + rng.uniform(0, 0.9)
        t = t[t < end]
        # monitoring gaps
        for _ in range(rng.poisson(0.02 * (end - start) / 24 * 6)):
            g0 = rng.uniform(start, end)
            t = t[(t < g0) | (t > g0 + rng.uniform(2, 12))]
        return t
    if cls == "nurse":
        n = int((end - start) / 2.0) + 2
        steps = rng.gamma(16.0, 2.0 / 16.0, size=n)
        t = start + rng.uniform(0, 2.0) + np.concatenate([[0.0], np.cumsum(steps[:-1])])
        t = t[t < end]
        return t[rng.random(t.size) > 0.1]
    n = int((end - start) / 24.0) + 2
    steps = rng.normal(24.0, 4.0, size=n).clip(8.0, 40.0)
    t = start + rng.uniform(0, 12.0) + np.concatenate([[0.0], np.cumsum(steps[:-1])])
    return t[t < end]


def _stay_series(rng, specs: list[FeatureSpec], u: float, los_hours: float) -> tuple[np.ndarray, ...]:
    end = min(los_hours, MAX_HOURS)
    feats, times, vals = [], [], []
    # shared hourly fluctuation for the coupled vitals
    grid0 = -PRE_ADMISSION_HOURS
    n_grid = int(math.ceil(end - grid0)) + 1
    common = rng.standard_normal(n_grid)
    for idx, spec in enumerate(specs):
        if rng.random() > spec.presence:
            continue
        start = -PRE_ADMISSION_HOURS if spec.cls != "vital" else -rng.uniform(0, 4)
        if spec.cls == "lab" and rng.random() < 0.5:
            start = rng.uniform(-PRE_ADMISSION_HOURS, 2)
        t = _sample_times(rng, spec.cls, start, end)
        if t.size == 0:
            continue
        remaining = np.clip(1.0 - t / los_hours, 0.0, 1.0)
        eps = rng.standard_normal(t.size)
        if spec.kind == "trend":
            signal = (1.2 + 0.6 * u) * remaining + spec.noise * eps
        elif spec.kind == "level":
            signal = 1.0 * u + spec.noise * eps
        else:
            x = common[np.clip((np.floor(t) - grid0).astype(int), 0, n_grid - 1)]
            if spec.kind == "pair_a":
                signal = x
            else:
                c = 0.9 * np.tanh(0.9 * u + 2.0 * remaining - 1.0)
                signal = c * x + np.sqrt(1 - c * c) * eps
        feats.append(np.full(t.size, idx))
        times.append(t)
        vals.append(spec.offset + spec.scale * spec.direction * signal)
    if not times:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0)
    f = np.concatenate(feats).astype(np.int64)
    t = np.concatenate(times)
    v = np.concatenate(vals)
    order = np.lexsort((f, t))
    return f[order], t[order], v[order]


def _flat_features(rng, u: float, visit: int) -> dict:
    age_raw = float(np.clip(np.round(64 + 14 * (0.35 * u + 0.94 * rng.standard_normal())), 18, 99))
    height = float(rng.normal(170, 10))
    weight = float(rng.normal(82 + 4 * u, 18))
    null_h, null_w = rng.random() < 0.05, rng.random() < 0.03

    def cat(name, shift=0.0):
        k = _CATEGORY_COUNTS[name]
        logits = np.linspace(-1, 1, k) * shift + rng.normal(0, 0.1, k)
        p = np.exp(logits) / np.exp(logits).sum()
        return int(rng.choice(k, p=p))

    return {
        "gender": int(rng.random() < 0.46),
        "age": min(age_raw, 89.0),
        "hour_of_admission": int(rng.integers(24)),
        "height": float("nan") if null_h else round(height, 1),
        "weight": float("nan") if null_w else round(weight, 1),
        "ethnicity": cat("ethnicity"),
        "unit_type": cat("unit_type", shift=0.8 * u),
        "unit_admit_source": cat("unit_admit_source", shift=0.4 * u),
        "unit_visit_number": min(visit, 2),
        "unit_stay_type": cat("unit_stay_type"),
        "num_beds_category": cat("num_beds_category"),
        "region": cat("region"),
        "teaching_status": int(rng.random() < 0.3),
        "physician_speciality": cat("physician_speciality", shift=0.3 * u),
        "age_gt_89": int(age_raw > 89),
        "null_height": int(null_h),
        "null_weight": int(null_w),
    }


def _diagnoses(rng, tree: list[str], weights_base: np.ndarray, severe: np.ndarray, u: float,
               los_hours: float) -> list[tuple[float, str]]:
    w = weights_base * np.exp(np.where(severe, 0.9 * u, -0.3 * u))
    w = w / w.sum()
    n = 1 + rng.poisson(3)
    codes = rng.choice(len(tree), size=n, replace=False, p=w)
    out = []
    for c in codes:
        if rng.random() < 0.8:
            ts = rng.uniform(-12, 5)
        else:
            ts = rng.uniform(5, max(los_hours, 5.5))
        out.append((round(float(ts), 3), tree[int(c)]))
    return sorted(out)


def generate_cohort(seed: int, n_patients: int, n_lab: int = 4, n_nurse: int = 4, n_vital: int = 4,
                    multi_stay: bool = True) -> Cohort:
    """Generate ``n_patients`` patients (about 1.25 stays each when ``multi_stay``)."""
    if min(n_patients, n_lab, n_nurse, n_vital) < 1:
        raise ValueError("patient and feature counts must be at least 1")
    rng = np.random.default_rng(seed)
    specs = make_feature_specs(np.random.default_rng([seed, 1]), n_lab, n_nurse, n_vital)
    tree_rng = np.random.default_rng([seed, 2])
    tree = build_diagnosis_tree(tree_rng)
    ranks = tree_rng.permutation(len(tree)) + 1
    weights_base = 1.0 / ranks**1.1
    severe = np.array([p.split("|")[0] in ("sys00", "sys01", "sys02") for p in tree])
    mu, sigma = calibrated_los_params()

    stays: list[PatientStay] = []
    stay_id = 0
    for pid in range(n_patients):
        n_stays = 1
        if multi_stay:
            r = rng.random()
            n_stays = 1 if r < 0.8 else (2 if r < 0.95 else 3)
        s = rng.standard_normal()
        for visit in range(n_stays):
            while True:
                u = 0.6 * s + 0.8 * rng.standard_normal()
                z = RHO * u + math.sqrt(1 - RHO**2) * rng.standard_normal()
                los = math.exp(mu + sigma * z)
                if los >= MIN_LOS_DAYS:
                    break
                s = rng.standard_normal() if n_stays == 1 else s
            los_hours = los * 24
            f, t, v = _stay_series(rng, specs, u, los_hours)
            if t.size == 0:
                # guarantee at least one observation
                f = np.array([len(specs) - 1]); t = np.array([0.5]); v = np.array([specs[-1].offset])
            stays.append(PatientStay(
                stay_id=stay_id, patient_id=pid, event_feature=f, event_time=t, event_value=v,
                flat=_flat_features(rng, u, visit),
                diagnoses=_diagnoses(rng, tree, weights_base, severe, u, los_hours),
                los_total=los, died=bool(rng.random() < 1 / (1 + math.exp(2.5 - 0.8 * u))),
                severity=u))
            stay_id += 1
    return Cohort(features=specs, stays=stays, diagnosis_tree=tree)


def generate_stays(seed: int, n_stays: int, **kwargs) -> Cohort:
    """Cohort with exactly ``n_stays`` stays (trailing patients trimmed)."""
    if n_stays < 1:
        raise ValueError("n_stays must be at least 1")
    cohort = generate_cohort(seed, int(math.ceil(n_stays / 1.2)) + 10, **kwargs)
    while len(cohort.stays) < n_stays:   # pragma: no cover - margin makes this rare
        cohort = generate_cohort(seed, 2 * len({s.patient_id for s in cohort.stays}), **kwargs)
    cohort.stays = cohort.stays[:n_stays]
    return cohort
