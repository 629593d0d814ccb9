"""Evaluation metrics, aggregation over repeated runs, and significance tests."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .training import msle_loss

MAPE_FLOOR = 4.0 / 24
KAPPA_EDGES = (0, 1, 2, 3, 4, 5, 6, 7, 8, 14, math.inf)
METRIC_NAMES = ("mad", "mape", "mse", "msle", "r2", "kappa")


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} truths vs {p.size} predictions")
    if t.size == 0:
        raise ValueError("metrics need at least one point")
    return t, p


def mape_divisor(y_true) -> np.ndarray:
    return np.maximum(np.asarray(y_true, dtype=np.float64), MAPE_FLOOR)


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error with the divisor floored at 4 hours."""
    t, p = _pair(y_true, y_pred)
    return float(np.mean(np.abs(t - p) / mape_divisor(t)) * 100)


def mad(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.mean(np.abs(t - p)))


def mse(y_true, y_pred) -> float:
    t, p = _pair(y_true, y_pred)
    return float(np.mean((t - p) ** 2))


def msle(y_true, y_pred) -> float:
    """Same definition as the training loss (label floor 1/48)."""
    t, p = _pair(y_true, y_pred)
    return float(msle_loss(p, t).item())


def r2(y_true, y_pred) -> tuple[float, bool]:
    """Coefficient of determination; returns (value, defined). NaN when truths are constant."""
    t, p = _pair(y_true, y_pred)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan"), False
    return 1.0 - float(np.sum((t - p) ** 2)) / ss_tot, True


def standard_metrics(y_true, y_pred) -> dict:
    value, defined = r2(y_true, y_pred)
    return {"mad": mad(y_true, y_pred), "mse": mse(y_true, y_pred), "msle": msle(y_true, y_pred),
            "r2": value, "r2_defined": defined}


def los_bins(days, edges: Sequence[float] = KAPPA_EDGES) -> np.ndarray:
    """Bin index per value: [0,1) -> 0, ..., [8,14) -> 8, [14, inf) -> 9."""
    return np.digitize(np.asarray(days, dtype=np.float64), np.asarray(edges[1:-1], dtype=np.float64))


def cohen_kappa_linear(y_true, y_pred, edges: Sequence[float] = KAPPA_EDGES) -> float:
    """Linearly weighted Cohen's kappa over LoS bins."""
    t, p = _pair(y_true, y_pred)
    K = len(edges) - 1
    observed = np.zeros((K, K))
    np.add.at(observed, (los_bins(t, edges), los_bins(p, edges)), 1.0)
    # integer counts keep the constant-prediction case exact: observed == expected
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / t.size
    idx = np.arange(K)
    weights = np.abs(idx[:, None] - idx[None, :]) / (K - 1)
    denom = float((weights * expected).sum())
    if denom == 0.0:
        # both series sit in one bin: agreement is perfect iff it is the same bin
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


@dataclass
class MetricReport:
    mad: float
    mape: float
    mse: float
    msle: float
    r2: float
    kappa: float
    n_points: int
    r2_defined: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        if not self.r2_defined:
            d["r2"] = None
        return d

    @classmethod
    def from_json(cls, d: dict) -> MetricReport:
        d = dict(d)
        if d.get("r2") is None:
            d["r2"] = float("nan")
        return cls(**d)

    def save(self, path: str | Path) -> Path:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> MetricReport:
        return cls.from_json(json.loads(Path(path).read_text()))


def evaluate(y_true, y_pred) -> MetricReport:
    t, p = _pair(y_true, y_pred)
    std = standard_metrics(t, p)
    return MetricReport(mad=std["mad"], mape=mape(t, p), mse=std["mse"], msle=std["msle"], r2=std["r2"],
                        kappa=cohen_kappa_linear(t, p), n_points=int(t.size), r2_defined=std["r2_defined"])


# ---------------------------------------------------------------------------
# aggregation and significance
# ---------------------------------------------------------------------------

def t_interval(values: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """Sample mean and two-sided t half-width with n - 1 degrees of freedom."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("a confidence interval needs at least 2 runs")
    sem = x.std(ddof=1) / math.sqrt(x.size)
    return float(x.mean()), float(stats.t.ppf(0.5 + level / 2, x.size - 1) * sem)


@dataclass
class RunAggregate:
    mean: dict[str, float]
    ci: dict[str, float]
    n_runs: int
    values: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def aggregate_runs(reports: Sequence[MetricReport]) -> RunAggregate:
    if len(reports) < 2:
        raise ValueError("aggregating runs needs at least 2 reports")
    mean, ci, values = {}, {}, {}
    for name in METRIC_NAMES:
        vals = sorted(float(getattr(r, name)) for r in reports)   # order-independent summation
        values[name] = [float(getattr(r, name)) for r in reports]
        mean[name], ci[name] = t_interval(vals)
    return RunAggregate(mean, ci, len(reports), values)


def stars(p: float) -> str:
    return "**" if p < 0.001 else "*" if p < 0.05 else ""


def t_test(a: Sequence[float], b: Sequence[float], welch: bool = True) -> tuple[float, str]:
    """Two-sided two-sample t-test (Welch by default). Returns (p-value, stars)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size < 2 or y.size < 2:
        raise ValueError("t-test needs at least 2 runs per group")
    if x.var(ddof=1) == 0 and y.var(ddof=1) == 0:
        p = 1.0 if x.mean() == y.mean() else 0.0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)   # near-identical samples
            p = float(stats.ttest_ind(x, y, equal_var=not welch).pvalue)
    return p, stars(p)


def paired_t_test(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> float:
    """Paired t-test p-value for matched runs (same seeds)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of at least 2 runs")
    d = x - y
    if np.all(d == d[0]):
        if d[0] == 0:
            return 1.0
        wrong_way = {"greater": d[0] < 0, "less": d[0] > 0}.get(alternative, False)
        return 1.0 if wrong_way else 0.0
    return float(stats.ttest_rel(x, y, alternative=alternative).pvalue)


def comparison_table(aggregates: dict[str, RunAggregate], reference: str | None = None,
                     welch: bool = True) -> str:
    """Aligned text table: one row per model, mean ± CI per metric, stars versus ``reference``."""
    names = list(aggregates)
    header = ["Model"] + [m.upper() if m != "kappa" else "Kappa" for m in METRIC_NAMES]
    rows = [header]
    for name in names:
        agg = aggregates[name]
        row = [name]
        for m in METRIC_NAMES:
            cell = f"{agg.mean[m]:.2f}±{agg.ci[m]:.2f}"
            if reference is not None and name != reference and m in agg.values:
                _, s = t_test(agg.values[m], aggregates[reference].values[m], welch)
                cell += s
            row.append(cell)
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
