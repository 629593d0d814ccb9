"""Experiment configuration files.

A config is a JSON object; any key left out takes its default below. Command-line flags
override file values, which override defaults.

Keys
----
raw_dir, processed_dir, out     directories for raw CSVs, the processed dataset, and runs
n_patients, n_lab, n_nurse, n_vital, multi_stay
                                synthetic cohort size and feature counts
data_seed                       seed for cohort generation and the patient split
diag_threshold                  minimum training prevalence for a diagnosis node
model                           model description; "kind" picks the architecture
loss                            "msle" or "mse"
lr, batch_size, epochs          null means the per-model default
seeds                           list of training seeds, one run each
variants                        TPC ablation variants run by ``ablate``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .experiments import ABLATION_VARIANTS
from .models import model_defaults, resolve_spec
from .training import DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_LR, get_loss

# random-search ranges (lower, upper, scale); documentation and template only
SEARCH_SPACE = {
    "batch_size": [4, 512, "log2"],
    "dropout": [0.0, 0.5, "linear"],
    "lr": [0.0001, 0.01, "log10"],
    "batch_norm": [True, False, "choice"],
    "positional_encoding": [True, False, "choice"],
    "diag_embedding_size": [16, 64, "log2"],
    "final_fc_size": [16, 64, "log2"],
    "cw_lstm_hidden": [4, 16, "log2"],
    "point_channels": [4, 16, "log2"],
    "temp_channels": [4, 16, "log2"],
    "shared_temp_channels": [16, 64, "log2"],
    "lstm_hidden": [16, 256, "log2"],
    "d_model": [16, 256, "log2"],
    "feedforward": [16, 256, "log2"],
    "heads": [2, 16, "log2"],
    "tpc_layers": [1, 12, "linear"],
    "lstm_layers": [1, 4, "linear"],
    "transformer_layers": [1, 10, "linear"],
    "kernel_size": [2, 5, "linear"],
}


@dataclass
class ExperimentConfig:
    raw_dir: str = "raw"
    processed_dir: str = "processed"
    out: str = "runs"
    n_patients: int = 8000
    n_lab: int = 4
    n_nurse: int = 4
    n_vital: int = 4
    multi_stay: bool = True
    data_seed: int = 0
    diag_threshold: float = 0.01
    model: dict = field(default_factory=lambda: model_defaults("tpc"))
    loss: str = "msle"
    lr: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(default_factory=lambda: list(ABLATION_VARIANTS))

    def __post_init__(self):
        self.model = resolve_spec(self.model)
        get_loss(self.loss)
        if not self.seeds:
            raise ValueError("seed list must not be empty")
        bad = [v for v in self.variants if v not in ABLATION_VARIANTS]
        if bad:
            raise ValueError(f"unknown ablation variants {bad}")
        if self.n_patients < 1:
            raise ValueError("n_patients must be at least 1")

    @property
    def kind(self) -> str:
        return self.model["kind"]

    def train_kwargs(self) -> dict:
        """Hyperparameters with per-model defaults resolved."""
        return {
            "lr": DEFAULT_LR.get(self.kind, 0.0) if self.lr is None else self.lr,
            "batch_size": DEFAULT_BATCH[self.kind] if self.batch_size is None else self.batch_size,
            "epochs": DEFAULT_EPOCHS[self.kind] if self.epochs is None else self.epochs,
        }

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))
        return Path(path)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    model = dict(data.get("model", {}))
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "model":
            model = dict(value)
        elif key.startswith("model."):
            model[key[len("model."):]] = value
        elif key in known:
            data[key] = value
        else:
            raise ValueError(f"unknown override {key!r}")
    if model:
        kind = model.get("kind", "tpc")
        base = data.get("model", {})
        merged = {**(base if base.get("kind", "tpc") == kind else {}), **model, "kind": kind}
        data["model"] = merged
    return ExperimentConfig(**data)
