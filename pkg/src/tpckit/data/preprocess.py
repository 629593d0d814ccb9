"""Turn raw stays into hourly model inputs.

Pipeline per stay: hourly binning (latest observation in a bin wins), forward fill
including pre-admission history, drop hours before admission, decay indicators,
percentile scaling, flat-feature encoding, hierarchical diagnosis encoding and
remaining-LoS labels. All statistics are fitted on the training split only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import FLAT_FEATURES, MAX_HOURS, PRE_ADMISSION_HOURS, PatientStay, ancestors

DECAY_BASE = 0.75
LABEL_START_HOUR = 5
CLAMP = 4.0
TIME_FEATURES = ("time_in_icu", "time_of_day")


def grid_length(los_total: float) -> int:
    """Hours on the model grid: the stay, truncated at 14 days."""
    return int(min(math.ceil(los_total * 24 - 1e-9), MAX_HOURS))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample_and_fill(stay: PatientStay, n_features: int, length: int | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Hourly grid ``[F, T]`` of forward-filled raw values and decay indicators.

    Unfillable cells are NaN with decay 0.
    """
    T = grid_length(stay.los_total) if length is None else length
    H = PRE_ADMISSION_HOURS + T
    grid = np.full((n_features, H), np.nan)
    observed = np.zeros((n_features, H), dtype=bool)
    bins = np.floor(stay.event_time).astype(np.int64) + PRE_ADMISSION_HOURS
    keep = (bins >= 0) & (bins < H)
    order = np.argsort(stay.event_time[keep], kind="stable")
    f = stay.event_feature[keep][order]
    b = bins[keep][order]
    grid[f, b] = stay.event_value[keep][order]   # later assignments win
    observed[f, b] = True

    hours = np.arange(H)
    last = np.where(observed, hours[None, :], -1)
    last = np.maximum.accumulate(last, axis=1)
    seen = last >= 0
    filled = np.where(seen, np.take_along_axis(grid, np.maximum(last, 0), axis=1), np.nan)
    decay = np.where(seen, DECAY_BASE ** (hours[None, :] - last), 0.0)
    return filled[:, PRE_ADMISSION_HOURS:], decay[:, PRE_ADMISSION_HOURS:]


def time_features(stay: PatientStay, T: int) -> np.ndarray:
    """[2, T]: hours since admission, and time of day as a fraction of 24 hours."""
    t = np.arange(T, dtype=np.float64)
    hour0 = float(stay.flat.get("hour_of_admission", 0))
    return np.stack([t, ((hour0 + t) % 24) / 24.0])


def make_labels(stay: PatientStay, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Remaining LoS in days per grid hour and the validity mask (hour 5 to min(end, 14 days))."""
    T = grid_length(stay.los_total) if length is None else length
    t = np.arange(T, dtype=np.float64)
    labels = stay.los_total - t / 24.0
    end = min(math.ceil(stay.los_total * 24 - 1e-9), MAX_HOURS)
    valid = (t >= LABEL_START_HOUR) & (t < end)
    return labels, valid


# ---------------------------------------------------------------------------
# percentile scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalerStats:
    names: list[str]
    p5: np.ndarray
    p95: np.ndarray
    degenerate: np.ndarray

    def to_json(self) -> dict:
        return {"names": self.names, "p5": self.p5.tolist(), "p95": self.p95.tolist(),
                "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> ScalerStats:
        return cls(list(d["names"]), np.array(d["p5"], dtype=float), np.array(d["p95"], dtype=float),
                   np.array(d["degenerate"], dtype=bool))


def fit_scaler(columns: list[np.ndarray], names: list[str]) -> ScalerStats:
    """5th/95th percentiles per feature from training values (NaNs ignored)."""
    p5 = np.zeros(len(columns))
    p95 = np.zeros(len(columns))
    degenerate = np.zeros(len(columns), dtype=bool)
    for i, col in enumerate(columns):
        col = np.asarray(col, dtype=float)
        col = col[np.isfinite(col)]
        if col.size == 0:
            degenerate[i] = True
            continue
        p5[i], p95[i] = np.percentile(col, [5, 95])
        degenerate[i] = p95[i] <= p5[i]
    return ScalerStats(list(names), p5, p95, degenerate)


def apply_scaler(values: np.ndarray, stats: ScalerStats, axis: int = 0) -> np.ndarray:
    """Map p5 to -1 and p95 to +1 along ``axis``, clamp to [-4, 4]; NaN and degenerate -> 0."""
    values = np.asarray(values, dtype=float)
    shape = [1] * values.ndim
    shape[axis] = -1
    lo = stats.p5.reshape(shape)
    width = np.where(stats.degenerate, 1.0, stats.p95 - stats.p5).reshape(shape)
    with np.errstate(over="ignore", invalid="ignore"):  # inf is clipped below
        out = 2.0 * (values - lo) / width - 1.0
    out = np.where(stats.degenerate.reshape(shape), 0.0, out)
    out = np.clip(out, -CLAMP, CLAMP)
    return np.where(np.isfinite(out), out, 0.0)


# ---------------------------------------------------------------------------
# flat features
# ---------------------------------------------------------------------------

@dataclass
class FlatEncoder:
    """Scales discrete/continuous features, keeps binaries, one-hot encodes categoricals."""

    numeric: list[str]
    binary: list[str]
    categories: dict[str, list[int]]
    scaler: ScalerStats
    impute: dict[str, float]

    @classmethod
    def fit(cls, stays: list[PatientStay]) -> FlatEncoder:
        numeric = [n for n, t in FLAT_FEATURES if t in ("discrete", "continuous")]
        binary = [n for n, t in FLAT_FEATURES if t == "binary"]
        categorical = [n for n, t in FLAT_FEATURES if t == "categorical"]
        cols = {n: np.array([float(s.flat[n]) for s in stays]) for n in numeric}
        impute = {n: float(np.nanmean(c)) if np.isfinite(c).any() else 0.0 for n, c in cols.items()}
        scaler = fit_scaler([np.where(np.isfinite(c), c, impute[n]) for n, c in cols.items()], numeric)
        categories = {n: sorted({int(s.flat[n]) for s in stays}) for n in categorical}
        return cls(numeric, binary, categories, scaler, impute)

    @property
    def names(self) -> list[str]:
        out = list(self.numeric) + list(self.binary)
        for n, cats in self.categories.items():
            out += [f"{n}={c}" for c in cats]
        return out

    def transform(self, stay: PatientStay) -> np.ndarray:
        num = np.array([float(stay.flat[n]) for n in self.numeric])
        num = np.where(np.isfinite(num), num, [self.impute[n] for n in self.numeric])
        parts = [apply_scaler(num, self.scaler), np.array([float(stay.flat[n]) for n in self.binary])]
        for n, cats in self.categories.items():
            onehot = np.zeros(len(cats))
            v = int(stay.flat[n])
            if v in cats:
                onehot[cats.index(v)] = 1.0
            parts.append(onehot)
        return np.concatenate(parts)

    def to_json(self) -> dict:
        return {"numeric": self.numeric, "binary": self.binary, "categories": self.categories,
                "scaler": self.scaler.to_json(), "impute": self.impute}

    @classmethod
    def from_json(cls, d: dict) -> FlatEncoder:
        return cls(d["numeric"], d["binary"], {k: list(v) for k, v in d["categories"].items()},
                   ScalerStats.from_json(d["scaler"]), d["impute"])


# ---------------------------------------------------------------------------
# diagnoses
# ---------------------------------------------------------------------------

def early_codes(stay: PatientStay, before_hour: float = LABEL_START_HOUR) -> list[str]:
    return [path for ts, path in stay.diagnoses if ts < before_hour]


def expand_nodes(codes: list[str]) -> set[str]:
    nodes: set[str] = set()
    for code in codes:
        nodes.update(ancestors(code))
    return nodes


@dataclass
class DiagnosisVocabulary:
    nodes: list[str]
    threshold: float
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    def encode(self, codes: list[str]) -> np.ndarray:
        """Binary vector with every retained ancestor-or-self node of each code set."""
        vec = np.zeros(len(self.nodes))
        for node in expand_nodes(codes):
            i = self.index.get(node)
            if i is not None:
                vec[i] = 1.0
        return vec


def fit_diagnosis_vocabulary(code_sets: list[list[str]], threshold: float = 0.01) -> DiagnosisVocabulary:
    """Keep hierarchy nodes present in at least ``threshold`` of the training stays."""
    counts: dict[str, int] = {}
    for codes in code_sets:
        for node in expand_nodes(codes):
            counts[node] = counts.get(node, 0) + 1
    n = max(len(code_sets), 1)
    kept = sorted(node for node, c in counts.items() if c / n >= threshold)
    return DiagnosisVocabulary(kept, threshold)


def encode_diagnoses(stays: list[PatientStay], threshold: float = 0.01,
                     vocabulary: DiagnosisVocabulary | None = None
                     ) -> tuple[DiagnosisVocabulary, np.ndarray]:
    """Fit (unless given) the vocabulary on ``stays`` and return their binary vectors."""
    code_sets = [early_codes(s) for s in stays]
    vocab = vocabulary or fit_diagnosis_vocabulary(code_sets, threshold)
    if not code_sets:
        return vocab, np.zeros((0, len(vocab)))
    return vocab, np.stack([vocab.encode(c) for c in code_sets])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_patients(stays: list[PatientStay], seed: int, fractions=(0.70, 0.15, 0.15)
                   ) -> dict[str, list[PatientStay]]:
    """Split by patient so that no patient's stays straddle two splits."""
    patients = np.array(sorted({s.patient_id for s in stays}))
    perm = np.random.default_rng(seed).permutation(patients)
    n = len(perm)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    assign = {}
    for i, pid in enumerate(perm):
        assign[int(pid)] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    out: dict[str, list[PatientStay]] = {"train": [], "val": [], "test": []}
    for s in stays:
        out[assign[s.patient_id]].append(s)
    return out


# ---------------------------------------------------------------------------
# processed stays
# ---------------------------------------------------------------------------

@dataclass
class ProcessedStay:
    stay_id: int
    patient_id: int
    values: np.ndarray    # [F, T] scaled to [-4, 4]
    decay: np.ndarray     # [F, T]
    flat: np.ndarray      # [f]
    diag: np.ndarray      # [n_diag]
    labels: np.ndarray    # [T] remaining LoS, days
    valid: np.ndarray     # [T] bool
    los_total: float
    scaled: bool = True

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


class Preprocessor:
    """Fits every statistic on the training split and transforms any stay with it."""

    def __init__(self, feature_ids: list[str], diag_threshold: float = 0.01):
        self.feature_ids = list(feature_ids)
        self.diag_threshold = diag_threshold
        self.ts_scaler: ScalerStats | None = None
        self.flat_encoder: FlatEncoder | None = None
        self.vocabulary: DiagnosisVocabulary | None = None
        self.fit_count = 0

    @property
    def n_raw(self) -> int:
        return len(self.feature_ids)

    @property
    def feature_names(self) -> list[str]:
        return self.feature_ids + list(TIME_FEATURES)

    def _raw_grid(self, stay: PatientStay) -> tuple[np.ndarray, np.ndarray]:
        values, decay = resample_and_fill(stay, self.n_raw)
        T = values.shape[1]
        values = np.concatenate([values, time_features(stay, T)])
        decay = np.concatenate([decay, np.ones((len(TIME_FEATURES), T))])
        return values, decay

    def fit(self, train: list[PatientStay]) -> Preprocessor:
        if self.fit_count:
            raise RuntimeError("preprocessor statistics are already fitted")
        grids = [self._raw_grid(s)[0] for s in train]
        columns = [np.concatenate([g[i] for g in grids]) for i in range(len(self.feature_names))]
        self.ts_scaler = fit_scaler(columns, self.feature_names)
        self.flat_encoder = FlatEncoder.fit(train)
        self.vocabulary, _ = encode_diagnoses(train, self.diag_threshold)
        self.fit_count += 1
        return self

    def transform(self, stay: PatientStay) -> ProcessedStay:
        if self.ts_scaler is None:
            raise RuntimeError("fit the preprocessor on the training split first")
        values, decay = self._raw_grid(stay)
        labels, valid = make_labels(stay, values.shape[1])
        return ProcessedStay(
            stay_id=stay.stay_id, patient_id=stay.patient_id,
            values=apply_scaler(values, self.ts_scaler, axis=0), decay=decay,
            flat=self.flat_encoder.transform(stay),
            diag=self.vocabulary.encode(early_codes(stay)),
            labels=labels, valid=valid, los_total=stay.los_total)

    def to_json(self) -> dict:
        return {"feature_ids": self.feature_ids, "feature_names": self.feature_names,
                "diag_threshold": self.diag_threshold, "ts_scaler": self.ts_scaler.to_json(),
                "flat_encoder": self.flat_encoder.to_json(), "vocabulary": self.vocabulary.nodes}

    @classmethod
    def from_json(cls, d: dict) -> Preprocessor:
        p = cls(d["feature_ids"], d["diag_threshold"])
        p.ts_scaler = ScalerStats.from_json(d["ts_scaler"])
        p.flat_encoder = FlatEncoder.from_json(d["flat_encoder"])
        p.vocabulary = DiagnosisVocabulary(list(d["vocabulary"]), d["diag_threshold"])
        p.fit_count = 1
        return p
