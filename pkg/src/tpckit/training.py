"""Losses, Adam, the masked training loop, checkpoints and prediction export."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor, as_tensor, log, no_grad, sum_
from .checkpoint import load_arrays, save_arrays
from .data.batching import batch_stays, collate
from .data.preprocess import ProcessedStay
from .models import build_model, config_hash, resolve_spec
from .nn import Module
from .tpc import MIN_DAYS

LABEL_FLOOR = MIN_DAYS
DEFAULT_EPOCHS = {"lstm": 8, "cw_lstm": 30, "transformer": 15, "tpc": 15, "mean": 0, "median": 0}
DEFAULT_LR = {"lstm": 0.00129, "cw_lstm": 0.00129, "transformer": 0.00017, "tpc": 0.00226}
DEFAULT_BATCH = {"lstm": 512, "cw_lstm": 512, "transformer": 32, "tpc": 32, "mean": 512, "median": 512}


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _masked_mean(sq: Tensor, mask: np.ndarray, reduction: str) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if sq.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match predictions {sq.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    total = sum_(sq * mask.astype(np.float64))
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total * (1.0 / n)


def msle_loss(pred, true, mask=None, reduction: str = "mean", label_floor: float = LABEL_FLOOR) -> Tensor:
    """Masked mean of (ln pred - ln max(true, floor))^2."""
    pred = as_tensor(pred)
    true = np.asarray(true, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    # padding positions are swapped for a harmless 1.0 so log never sees junk
    safe = Tensor(np.where(mask, 0.0, 1.0)) + pred * mask.astype(np.float64)
    diff = log(safe) - np.log(np.where(mask, np.maximum(true, label_floor), 1.0))
    return _masked_mean(diff * diff, mask, reduction)


def mse_loss(pred, true, mask=None, reduction: str = "mean") -> Tensor:
    pred = as_tensor(pred)
    true = np.asarray(true, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    diff = pred - np.where(mask, true, 0.0)
    return _masked_mean(diff * diff, mask, reduction)


LOSSES = {"msle": msle_loss, "mse": mse_loss}


def get_loss(kind: str):
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}; expected one of {tuple(LOSSES)}")
    return LOSSES[kind]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on ``params``; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        data = {k: p.data for k, p in self.params.items()}
        adam_step(data, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: dict
    loss: str = "msle"
    lr: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 64
    pack: bool = True     # pack several stays per row when the model supports it

    def __post_init__(self):
        self.model = resolve_spec(self.model)
        kind = self.model["kind"]
        get_loss(self.loss)
        if self.lr is None:
            self.lr = DEFAULT_LR.get(kind, 0.0)
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[kind]
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[kind]
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def kind(self) -> str:
        return self.model["kind"]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PredictionTable:
    stay_id: np.ndarray
    hour: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray

    def __len__(self) -> int:
        return int(self.stay_id.size)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stay_id", "hour", "y_true", "y_pred"])
            for row in zip(self.stay_id.tolist(), self.hour.tolist(), self.y_true.tolist(), self.y_pred.tolist()):
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> PredictionTable:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        return cls(np.array([int(r["stay_id"]) for r in rows], dtype=np.int64),
                   np.array([int(r["hour"]) for r in rows], dtype=np.int64),
                   np.array([float(r["y_true"]) for r in rows]),
                   np.array([float(r["y_pred"]) for r in rows]))


@dataclass
class RunResult:
    seed: int
    config: TrainConfig
    train_loss: list[float]
    val_loss: list[float]
    val_msle: list[float]
    best_epoch: int
    predictions: PredictionTable
    model: Module
    checkpoint: Path | None = None
    wall_clock: float = 0.0
    config_hash: str = ""

    def manifest(self) -> dict:
        return {
            "seed": self.seed, "config": self.config.to_json(), "config_hash": self.config_hash,
            "train_loss": self.train_loss, "val_loss": self.val_loss, "val_msle": self.val_msle,
            "best_epoch": self.best_epoch,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "wall_clock_s": self.wall_clock,
        }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(model: Module, path: str | Path, extra: dict | None = None) -> Path:
    meta = {"model": model.spec, "dims": model.dims, "config_hash": config_hash(model.spec, model.dims)}
    meta.update(extra or {})
    save_arrays(path, model.state_dict(), meta)
    return Path(path)


def load_model(path: str | Path, expected_hash: str | None = None) -> Module:
    arrays, meta = load_arrays(path)
    stored = meta.get("config_hash")
    if stored != config_hash(meta["model"], meta["dims"]):
        raise ValueError(f"{path}: checkpoint metadata is inconsistent with its config hash")
    if expected_hash is not None and stored != expected_hash:
        raise ValueError(f"{path}: config hash {stored} does not match expected {expected_hash}")
    model = build_model(meta["model"], seed=0, **meta["dims"])
    model.load_state_dict(arrays)
    return model.eval()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _valid_stays(stays: Sequence[ProcessedStay]) -> list[ProcessedStay]:
    return [s for s in stays if s.n_valid > 0]


def predict(model: Module | str | Path, stays: Sequence[ProcessedStay], batch_size: int = 64,
            expected_hash: str | None = None) -> PredictionTable:
    """One row per valid (stay, hour), in stay order then hour order."""
    if not isinstance(model, Module):
        model = load_model(model, expected_hash)
    elif expected_hash is not None and config_hash(model.spec, model.dims) != expected_hash:
        raise ValueError("model config hash does not match expected hash")
    was_training = model.training
    model.eval()
    stays = _valid_stays(stays)
    # eval mode uses running statistics, so grouping by length only saves padding
    order = sorted(range(len(stays)), key=lambda i: stays[i].length)
    per_stay: list[np.ndarray | None] = [None] * len(stays)
    with no_grad():
        for start in range(0, len(order), batch_size):
            ids = order[start:start + batch_size]
            batch = collate([stays[i] for i in ids])
            out = model(batch).data
            for row, i in enumerate(ids):
                per_stay[i] = out[row, :stays[i].length]
    model.train(was_training)
    sid, hour, yt, yp = [], [], [], []
    for s, out in zip(stays, per_stay):
        t = np.nonzero(s.valid)[0]
        sid.append(np.full(t.size, s.stay_id, dtype=np.int64))
        hour.append(t)
        yt.append(s.labels[t])
        yp.append(out[t])
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return PredictionTable(cat(sid, np.int64), cat(hour, np.int64), cat(yt, float), cat(yp, float))


def evaluate_loss(model: Module, stays: Sequence[ProcessedStay], loss: str, batch_size: int = 64) -> float:
    """Loss over all valid positions of ``stays`` (pooled, not averaged per batch)."""
    table = predict(model, stays, batch_size)
    if len(table) == 0:
        return float("nan")
    return float(get_loss(loss)(table.y_pred, table.y_true).item())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _fit_constant(model, train: Sequence[ProcessedStay]) -> None:
    labels = np.concatenate([s.labels[s.valid] for s in train]) if train else np.zeros(0)
    model.fit(labels)


def train(dataset, cfg: TrainConfig, out_dir: str | Path | None = None, verbose: bool = False,
          dataset_hash: str | None = None) -> RunResult:
    """Train ``cfg.model`` on ``dataset`` (a processed Dataset or a dict of split lists).

    Deterministic for a fixed ``cfg.seed``. The parameters of the epoch with the lowest
    validation MSLE are restored before predicting on the test split.
    """
    splits = dataset.splits if hasattr(dataset, "splits") else dataset
    train_s, val_s, test_s = splits["train"], splits.get("val", []), splits.get("test", [])
    first = train_s[0]
    dims = {"n_features": first.values.shape[0], "n_flat": first.flat.shape[0], "n_diagnoses": first.diag.shape[0]}
    model = build_model(cfg.model, seed=cfg.seed, **dims)
    start = time.perf_counter()
    loss_fn = get_loss(cfg.loss)
    train_curve, val_curve, val_msle = [], [], []
    best_epoch = -1

    if cfg.kind in ("mean", "median"):
        _fit_constant(model, train_s)
    else:
        opt = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        best_score, best_state = np.inf, None
        gap = getattr(model, "pack_gap", None) if cfg.pack else None
        for epoch in range(cfg.epochs):
            model.train()
            losses = []
            for bi, batch in enumerate(batch_stays(train_s, cfg.batch_size, cfg.seed, epoch, pack_gap=gap)):
                opt.zero_grad()
                loss = loss_fn(model(batch), batch.labels, batch.mask)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite {cfg.loss} loss at epoch {epoch} batch {bi}")
                loss.backward()
                try:
                    opt.step()
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"{exc} at epoch {epoch} batch {bi}") from None
                losses.append(float(loss.data))
            train_curve.append(float(np.mean(losses)) if losses else float("nan"))
            if val_s:
                table = predict(model, val_s, cfg.eval_batch_size)
                val_curve.append(float(loss_fn(table.y_pred, table.y_true).item()))
                val_msle.append(float(msle_loss(table.y_pred, table.y_true).item()))
                score = val_msle[-1]
            else:
                score = train_curve[-1]
            if score < best_score:
                best_score, best_epoch = score, epoch
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if verbose:
                print(f"epoch {epoch + 1}/{cfg.epochs} train {train_curve[-1]:.4f}"
                      + (f" val {val_curve[-1]:.4f}" if val_s else ""), flush=True)
        if best_state is not None:
            model.load_state_dict(best_state)
    model.eval()

    predictions = predict(model, test_s, cfg.eval_batch_size)
    result = RunResult(cfg.seed, cfg, train_curve, val_curve, val_msle, best_epoch, predictions, model,
                       wall_clock=time.perf_counter() - start, config_hash=config_hash(model.spec, model.dims))
    if out_dir is not None:
        write_run(result, out_dir, dataset_hash)
    return result


def write_run(result: RunResult, out_dir: str | Path, dataset_hash: str | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint = save_model(result.model, out / "model.ckpt", {"seed": result.seed})
    result.predictions.to_csv(out / "predictions.csv")
    manifest = result.manifest()
    if dataset_hash is not None:
        manifest["dataset_hash"] = dataset_hash
    (out / "run.json").write_text(json.dumps(manifest, indent=1))
    return out
