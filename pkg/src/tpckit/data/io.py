"""Raw cohort CSV files and the processed dataset directory."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import load_arrays, save_arrays
from .cohort import FLAT_FEATURES, Cohort, FeatureSpec, PatientStay
from .preprocess import Preprocessor, ProcessedStay, split_patients

EVENTS = "events.csv"
FLAT = "flat.csv"
DIAGNOSES = "diagnoses.csv"
OUTCOMES = "outcomes.csv"
FEATURES = "features.csv"
RAW_FILES = (EVENTS, FLAT, DIAGNOSES, OUTCOMES, FEATURES)
SPLITS = ("train", "val", "test")


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(x)


def write_cohort(cohort: Cohort, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = cohort.feature_ids
    with open(out / FEATURES, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_id", "class", "kind", "offset", "scale", "noise", "direction", "presence"])
        for f in cohort.features:
            w.writerow([f.feature_id, f.cls, f.kind, f.offset, f.scale, f.noise, f.direction, f.presence])
    with open(out / EVENTS, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "patient_id", "feature_id", "timestamp_h", "value"])
        for s in cohort.stays:
            for fi, t, v in zip(s.event_feature, s.event_time, s.event_value):
                w.writerow([s.stay_id, s.patient_id, ids[int(fi)], repr(float(t)), repr(float(v))])
    with open(out / FLAT, "w", newline="") as fh:
        w = csv.writer(fh)
        names = [n for n, _ in FLAT_FEATURES]
        w.writerow(["stay_id", "patient_id"] + names)
        for s in cohort.stays:
            w.writerow([s.stay_id, s.patient_id] + [_fmt(s.flat[n]) for n in names])
    with open(out / DIAGNOSES, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "timestamp_h", "path"])
        for s in cohort.stays:
            for ts, path in s.diagnoses:
                w.writerow([s.stay_id, f"{ts:.3f}", path])
    with open(out / OUTCOMES, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "patient_id", "los_total_days", "died"])
        for s in cohort.stays:
            w.writerow([s.stay_id, s.patient_id, repr(s.los_total), int(s.died)])
    return out


def read_cohort(in_dir: str | Path) -> Cohort:
    src = Path(in_dir)
    missing = [f for f in RAW_FILES if not (src / f).exists()]
    if missing:
        raise FileNotFoundError(f"{src}: missing raw cohort files {missing}")
    with open(src / FEATURES) as fh:
        features = [FeatureSpec(r["feature_id"], r["class"], r["kind"], float(r["offset"]),
                                float(r["scale"]), float(r["noise"]), float(r["direction"]),
                                float(r["presence"]))
                    for r in csv.DictReader(fh)]
    fidx = {f.feature_id: i for i, f in enumerate(features)}
    stays: dict[int, PatientStay] = {}
    with open(src / OUTCOMES) as fh:
        for r in csv.DictReader(fh):
            sid = int(r["stay_id"])
            stays[sid] = PatientStay(sid, int(r["patient_id"]), np.empty(0, np.int64), np.empty(0),
                                     np.empty(0), {}, [], float(r["los_total_days"]), bool(int(r["died"])))
    with open(src / FLAT) as fh:
        for r in csv.DictReader(fh):
            flat = {}
            for name, kind in FLAT_FEATURES:
                raw = r[name]
                if kind == "continuous" or name == "age":
                    flat[name] = float(raw) if raw else float("nan")
                else:
                    flat[name] = int(float(raw))
            stays[int(r["stay_id"])].flat = flat
    with open(src / DIAGNOSES) as fh:
        for r in csv.DictReader(fh):
            stays[int(r["stay_id"])].diagnoses.append((float(r["timestamp_h"]), r["path"]))
    ev: dict[int, list] = {sid: [[], [], []] for sid in stays}
    with open(src / EVENTS) as fh:
        reader = csv.reader(fh)
        next(reader)
        for sid, _pid, feat, t, v in reader:
            lst = ev[int(sid)]
            lst[0].append(fidx[feat])
            lst[1].append(float(t))
            lst[2].append(float(v))
    for sid, (f, t, v) in ev.items():
        s = stays[sid]
        s.event_feature = np.array(f, dtype=np.int64)
        s.event_time = np.array(t, dtype=float)
        s.event_value = np.array(v, dtype=float)
        s.diagnoses.sort()
    return Cohort(features=features, stays=[stays[k] for k in sorted(stays)])


# ---------------------------------------------------------------------------
# processed dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    splits: dict[str, list[ProcessedStay]]
    preprocessor: Preprocessor
    assignment: dict[str, list[int]]    # split -> patient ids
    seed: int = 0

    @property
    def n_features(self) -> int:
        return len(self.preprocessor.feature_names)

    @property
    def n_flat(self) -> int:
        return len(self.preprocessor.flat_encoder.names)

    @property
    def n_diagnoses(self) -> int:
        return len(self.preprocessor.vocabulary)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "feature_order": self.preprocessor.feature_names,
            "preprocessor": self.preprocessor.to_json(),
            "split_patients": self.assignment,
            "patient_counts": {k: len(v) for k, v in self.assignment.items()},
            "stay_counts": {k: len(v) for k, v in self.splits.items()},
            "fit_count": self.preprocessor.fit_count,
        }

    def hash(self) -> str:
        """Content hash of the manifest and every stay's arrays."""
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for name in SPLITS:
            for s in self.splits[name]:
                for arr in (s.values, s.decay, s.flat, s.diag, s.labels):
                    h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def build_dataset(cohort: Cohort, seed: int = 0, diag_threshold: float = 0.01) -> Dataset:
    """Split by patient, fit statistics on train, transform every split."""
    parts = split_patients(cohort.stays, seed)
    pre = Preprocessor(cohort.feature_ids, diag_threshold).fit(parts["train"])
    splits = {k: [pre.transform(s) for s in v] for k, v in parts.items()}
    assignment = {k: sorted({s.patient_id for s in v}) for k, v in parts.items()}
    return Dataset(splits, pre, assignment, seed)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = ds.manifest()
    manifest["dataset_hash"] = ds.hash()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for name in SPLITS:
        stays = ds.splits[name]
        lengths = np.array([s.length for s in stays], dtype=np.int64)
        cat = (lambda attr: np.concatenate([getattr(s, attr) for s in stays], axis=-1)
               if stays else np.zeros((ds.n_features, 0)))
        arrays = {
            "stay_id": np.array([s.stay_id for s in stays], dtype=np.int64),
            "patient_id": np.array([s.patient_id for s in stays], dtype=np.int64),
            "length": lengths,
            "los_total": np.array([s.los_total for s in stays]),
            "values": cat("values"),
            "decay": cat("decay"),
            "labels": np.concatenate([s.labels for s in stays]) if stays else np.zeros(0),
            "valid": np.concatenate([s.valid for s in stays]) if stays else np.zeros(0, bool),
            "flat": np.stack([s.flat for s in stays]) if stays else np.zeros((0, ds.n_flat)),
            "diag": np.stack([s.diag for s in stays]) if stays else np.zeros((0, ds.n_diagnoses)),
        }
        save_arrays(out / f"{name}.ckpt", arrays, {"split": name})
    return out


def load_dataset(in_dir: str | Path) -> Dataset:
    src = Path(in_dir)
    if not (src / "manifest.json").exists():
        raise FileNotFoundError(f"{src}: no processed dataset manifest")
    manifest = json.loads((src / "manifest.json").read_text())
    pre = Preprocessor.from_json(manifest["preprocessor"])
    splits = {}
    for name in SPLITS:
        a, _ = load_arrays(src / f"{name}.ckpt")
        bounds = np.concatenate([[0], np.cumsum(a["length"])])
        stays = []
        for i in range(a["stay_id"].size):
            lo, hi = int(bounds[i]), int(bounds[i + 1])
            stays.append(ProcessedStay(
                stay_id=int(a["stay_id"][i]), patient_id=int(a["patient_id"][i]),
                values=a["values"][:, lo:hi].copy(), decay=a["decay"][:, lo:hi].copy(),
                flat=a["flat"][i].copy(), diag=a["diag"][i].copy(),
                labels=a["labels"][lo:hi].copy(), valid=a["valid"][lo:hi].astype(bool),
                los_total=float(a["los_total"][i])))
        splits[name] = stays
    assignment = {k: list(v) for k, v in manifest["split_patients"].items()}
    return Dataset(splits, pre, assignment, manifest["seed"])


def dataset_hash(in_dir: str | Path) -> str:
    return json.loads((Path(in_dir) / "manifest.json").read_text())["dataset_hash"]


__all__ = ["Dataset", "build_dataset", "save_dataset", "load_dataset", "write_cohort", "read_cohort",
           "dataset_hash", "split_patients"]
