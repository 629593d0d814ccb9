"""Constant predictors and recurrent/attention baselines sharing the TPC prediction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autograd import Tensor, as_tensor, concat
from .nn import LSTM, Linear, Module, TransformerEncoderLayer
from .tpc import MAX_DAYS, MIN_DAYS, PredictionHead, exp_hardtanh

BASELINE_KINDS = ("mean", "median", "lstm", "cw_lstm", "transformer")


@dataclass
class BaselineConfig:
    kind: str
    n_features: int = 1
    n_flat: int = 0
    n_diagnoses: int = 0
    hidden: int = 128            # LSTM hidden size, or per-feature size for cw_lstm
    layers: int = 2
    heads: int = 2
    feedforward: int = 256
    d_model: int = 16
    dropout: float = 0.2         # recurrent / transformer dropout
    constant: float | None = None
    diag_embedding_size: int = 64
    final_fc_size: int = 17
    main_dropout: float = 0.45
    batch_norm: bool = True

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.kind == "transformer" and self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.constant is not None and not self.constant > 0:
            raise ValueError("constant prediction must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def lstm_config(**kw) -> BaselineConfig:
    return BaselineConfig(kind="lstm", **{"hidden": 128, "layers": 2, "dropout": 0.2, **kw})


def cw_lstm_config(**kw) -> BaselineConfig:
    return BaselineConfig(kind="cw_lstm", **{"hidden": 8, "layers": 2, "dropout": 0.2, **kw})


def transformer_config(**kw) -> BaselineConfig:
    return BaselineConfig(kind="transformer",
                          **{"d_model": 16, "layers": 6, "heads": 2, "feedforward": 256, "dropout": 0.0, **kw})


class ConstantModel(Module):
    """Predicts one value everywhere; "training" computes it from the training labels."""

    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        super().__init__()
        if cfg.kind not in ("mean", "median"):
            raise ValueError("ConstantModel needs kind 'mean' or 'median'")
        self.cfg = cfg
        self.kind = cfg.kind
        self.buffer("constant", np.array(cfg.constant if cfg.constant is not None else np.nan))

    @property
    def constant(self) -> float:
        return float(self._buffers["constant"])

    def fit(self, labels: np.ndarray) -> ConstantModel:
        labels = np.asarray(labels, dtype=float)
        if labels.size == 0:
            raise ValueError("cannot fit a constant model on no labels")
        value = labels.mean() if self.kind == "mean" else np.median(labels)
        self._buffers["constant"][...] = float(np.clip(value, MIN_DAYS, MAX_DAYS))
        self.cfg.constant = self.constant
        return self

    def forward(self, batch) -> Tensor:
        if not np.isfinite(self.constant):
            raise RuntimeError("constant model has not been fitted")
        return Tensor(np.full(batch.labels.shape, self.constant))

    pre_activation = None


class _SequenceBaseline(Module):
    """Common wiring: per-hour input [values; decay] -> encoder -> shared head."""

    def __init__(self, cfg: BaselineConfig, ts_channels: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.kind
        self.head = PredictionHead(ts_channels, cfg.n_diagnoses, cfg.n_flat, cfg.diag_embedding_size,
                                   cfg.final_fc_size, cfg.main_dropout, cfg.batch_norm, rng)

    def encode(self, values: np.ndarray, decay: np.ndarray) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def pre_activation(self, batch) -> Tensor:
        if getattr(batch, "segment", None) is not None:
            raise ValueError(f"{self.kind} model cannot consume packed batches")
        ts = self.encode(batch.values, batch.decay)
        return self.head.pre_activation(ts, batch.diag, batch.flat, batch.pad_mask)

    def forward(self, batch) -> Tensor:
        return exp_hardtanh(self.pre_activation(batch))


class LSTMModel(_SequenceBaseline):
    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(cfg, cfg.hidden, rng)
        self.lstm = LSTM(2 * cfg.n_features, cfg.hidden, cfg.layers, rng, dropout=cfg.dropout)
        self.set_rng(np.random.default_rng(seed + 1))

    def encode(self, values, decay) -> Tensor:
        return self.lstm(concat([as_tensor(values), as_tensor(decay)], axis=1))


class CWLSTMModel(_SequenceBaseline):
    """One small LSTM per feature over its (value, decay) pair; outputs concatenated."""

    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(cfg, cfg.hidden * cfg.n_features, rng)
        self.lstm = LSTM(2, cfg.hidden, cfg.layers, rng, groups=cfg.n_features, dropout=cfg.dropout)
        self.set_rng(np.random.default_rng(seed + 1))

    def encode(self, values, decay) -> Tensor:
        B, F, T = np.shape(values)
        pairs = np.stack([np.asarray(values), np.asarray(decay)], axis=2).reshape(B, 2 * F, T)
        return self.lstm(as_tensor(pairs))


class TransformerModel(_SequenceBaseline):
    """Linear input projection, causal encoder stack, no positional encoding."""

    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        super().__init__(cfg, cfg.d_model, rng)
        self.proj = Linear(2 * cfg.n_features, cfg.d_model, rng)
        self.blocks = []
        for i in range(cfg.layers):
            block = TransformerEncoderLayer(cfg.d_model, cfg.heads, cfg.feedforward, cfg.dropout, rng)
            self.add_module(f"block{i}", block)
            self.blocks.append(block)
        self.set_rng(np.random.default_rng(seed + 1))

    def encode(self, values, decay) -> Tensor:
        x = concat([as_tensor(values), as_tensor(decay)], axis=1).transpose(0, 2, 1)  # [B, T, 2F]
        h = self.proj(x)
        for block in self.blocks:
            h = block(h)
        return h.transpose(0, 2, 1)


def build_baseline(cfg: BaselineConfig, seed: int = 0) -> Module:
    if cfg.kind in ("mean", "median"):
        return ConstantModel(cfg, seed)
    return {"lstm": LSTMModel, "cw_lstm": CWLSTMModel, "transformer": TransformerModel}[cfg.kind](cfg, seed)
