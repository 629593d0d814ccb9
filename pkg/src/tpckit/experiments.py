"""Repeated-seed experiment arms: loss study and architecture ablations.

An arm is a (model description, loss, training overrides) triple trained once per seed on
one processed dataset. Results are per-seed metric reports on the test split.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MetricReport, evaluate, paired_t_test
from .training import TrainConfig, train

ABLATION_VARIANTS = ("full", "temp_only", "point_only", "temp_only_weight_shared", "no_skip")

# reduced widths so a 2,000-stay study fits a single laptop core
DESK_TPC = {"kind": "tpc", "n_layers": 4, "temp_channels": 8, "point_channels": 8}
DESK_TRAIN = {"tpc": {"epochs": 15, "batch_size": 32}, "lstm": {"epochs": 8, "batch_size": 64}}


@dataclass
class Arm:
    name: str
    model: dict
    loss: str = "msle"
    train: dict = field(default_factory=dict)


@dataclass
class ArmResult:
    arm: Arm
    seeds: list[int]
    reports: list[MetricReport]

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.reports])

    def mean(self, name: str) -> float:
        return float(self.metric(name).mean())


def desk_arms() -> dict[str, Arm]:
    """Arms for the directional loss and ablation studies."""
    arms = {}
    for v in ABLATION_VARIANTS:
        arms[f"tpc_{v}"] = Arm(f"tpc_{v}", {**DESK_TPC, "variant": v}, "msle", dict(DESK_TRAIN["tpc"]))
    arms["tpc_full_mse"] = Arm("tpc_full_mse", {**DESK_TPC, "variant": "full"}, "mse", dict(DESK_TRAIN["tpc"]))
    arms["lstm"] = Arm("lstm", {"kind": "lstm"}, "msle", dict(DESK_TRAIN["lstm"]))
    return arms


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TPCKIT_THREADS", "1")))
    except ValueError:
        raise ValueError("TPCKIT_THREADS must be an integer") from None


def _run_one(dataset, arm: Arm, seed: int, out_dir: str | None, dataset_hash: str | None) -> MetricReport:
    cfg = TrainConfig(arm.model, loss=arm.loss, seed=seed, **arm.train)
    run_dir = None if out_dir is None else Path(out_dir) / arm.name / f"seed{seed}"
    result = train(dataset, cfg, out_dir=run_dir, dataset_hash=dataset_hash)
    report = evaluate(result.predictions.y_true, result.predictions.y_pred)
    if run_dir is not None:
        report.save(run_dir / "metrics.json")
    return report


def run_arm(dataset, arm: Arm, seeds: Sequence[int], out_dir: str | Path | None = None,
            dataset_hash: str | None = None, workers: int | None = None) -> ArmResult:
    workers = worker_count() if workers is None else workers
    out = None if out_dir is None else str(out_dir)
    if workers <= 1 or len(seeds) == 1:
        reports = [_run_one(dataset, arm, s, out, dataset_hash) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [pool.submit(_run_one, dataset, arm, s, out, dataset_hash) for s in seeds]
            reports = [f.result() for f in futures]
    return ArmResult(arm, list(seeds), reports)


def ordering_holds(better: ArmResult, worse: ArmResult, metric: str = "msle", alpha: float = 0.05) -> tuple[bool, str]:
    """Directional check: mean(better) < mean(worse), or an inversion that is within noise.

    An inversion is tolerated when a paired one-sided t-test cannot conclude, at ``alpha``,
    that ``better`` is in fact worse.
    """
    a, b = better.metric(metric), worse.metric(metric)
    if a.mean() < b.mean():
        return True, f"{better.arm.name} {a.mean():.4f} < {worse.arm.name} {b.mean():.4f}"
    p = paired_t_test(a, b, alternative="greater")
    ok = p >= alpha
    return ok, (f"inversion {better.arm.name} {a.mean():.4f} >= {worse.arm.name} {b.mean():.4f}, "
                f"one-sided paired p = {p:.3f} ({'within noise' if ok else 'significant'})")
