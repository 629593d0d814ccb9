"""Model factory keyed on a JSON-friendly model description.

A model description is a dict with ``"kind"`` in {tpc, mean, median, lstm, cw_lstm,
transformer}; remaining keys are hyperparameters. Data dimensions are supplied separately
so the same description can be applied to any processed dataset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields

from .baselines import BASELINE_KINDS, BaselineConfig, build_baseline
from .nn import Module
from .tpc import NetworkConfig, TPCNetwork, default_layers, make_variant

MODEL_KINDS = ("tpc",) + BASELINE_KINDS

TPC_DEFAULTS = {
    "kind": "tpc", "variant": "full", "n_layers": 9, "temp_channels": 12, "point_channels": 13,
    "kernel_size": 4, "temp_dropout": 0.05, "main_dropout": 0.45, "diag_embedding_size": 64,
    "final_fc_size": 17, "batch_norm": True, "shared_temp_channels": 32,
}
BASELINE_DEFAULTS = {
    "mean": {"kind": "mean"},
    "median": {"kind": "median"},
    "lstm": {"kind": "lstm", "hidden": 128, "layers": 2, "dropout": 0.2},
    "cw_lstm": {"kind": "cw_lstm", "hidden": 8, "layers": 2, "dropout": 0.2},
    "transformer": {"kind": "transformer", "d_model": 16, "layers": 6, "heads": 2,
                    "feedforward": 256, "dropout": 0.0},
}
_HEAD_DEFAULTS = {"diag_embedding_size": 64, "final_fc_size": 17, "main_dropout": 0.45, "batch_norm": True}


def model_defaults(kind: str) -> dict:
    if kind == "tpc":
        return dict(TPC_DEFAULTS)
    if kind not in BASELINE_DEFAULTS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return {**_HEAD_DEFAULTS, **BASELINE_DEFAULTS[kind]}


def resolve_spec(spec: dict) -> dict:
    """Fill defaults for the spec's kind and reject unknown keys."""
    kind = spec.get("kind")
    full = model_defaults(kind)
    allowed = set(full)
    if kind != "tpc":
        allowed |= {f.name for f in fields(BaselineConfig)} - {"n_features", "n_flat", "n_diagnoses"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"unknown keys for model kind {kind!r}: {sorted(unknown)}")
    full.update(spec)
    return full


def tpc_config(spec: dict, n_features: int, n_flat: int, n_diagnoses: int) -> NetworkConfig:
    s = resolve_spec(spec)
    layers = default_layers(s["n_layers"], s["temp_channels"], s["point_channels"], s["kernel_size"],
                            s["temp_dropout"], s["main_dropout"], s["batch_norm"])
    cfg = NetworkConfig(n_features, n_flat, n_diagnoses, s["n_layers"], layers, s["diag_embedding_size"],
                        s["final_fc_size"], s["main_dropout"], s["batch_norm"], "full",
                        s["shared_temp_channels"])
    return make_variant(cfg, s["variant"])


def build_model(spec: dict, n_features: int, n_flat: int, n_diagnoses: int, seed: int = 0) -> Module:
    s = resolve_spec(spec)
    if s["kind"] == "tpc":
        model = TPCNetwork(tpc_config(s, n_features, n_flat, n_diagnoses), seed)
    else:
        model = build_baseline(BaselineConfig(n_features=n_features, n_flat=n_flat,
                                              n_diagnoses=n_diagnoses, **s), seed)
    model.spec = s
    model.dims = {"n_features": n_features, "n_flat": n_flat, "n_diagnoses": n_diagnoses}
    return model


def config_hash(spec: dict, dims: dict) -> str:
    """Stable hash of a resolved model description plus data dimensions."""
    payload = json.dumps({"model": resolve_spec(spec), "dims": dims}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


__all__ = ["MODEL_KINDS", "build_model", "config_hash", "model_defaults", "resolve_spec", "tpc_config"]
