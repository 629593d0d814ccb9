"""Temporal Pointwise Convolution network.

Each layer runs two arms in parallel:

* temporal arm: a causal dilated convolution per feature (groups = F). Group ``f`` reads
  feature ``f``'s Y temporal channels, its original scaled value (skip channel) and every
  cumulative pointwise channel, and emits Y* channels.
* pointwise arm: a 1x1 convolution over ``[orig ; decay ; point]`` emitting Z* channels,
  appended to the cumulative pointwise channels.

Layer ``i`` (1-indexed) uses dilation ``i``. The final time-series representation
``[temp ; point ; orig]`` is fused with a diagnosis embedding and the flat features by a
two-layer pointwise head whose output goes through ``exp`` and a clamp to [1/48, 100] days.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, as_tensor, broadcast_to, clip, concat, make_node
from .nn import (BatchNorm, CausalConv1d, ConvSpec, Dropout, Linear, Module, PointwiseConv,
                 causal_conv1d)

MIN_DAYS = 1.0 / 48
MAX_DAYS = 100.0

VARIANTS = ("full", "temp_only", "point_only", "temp_only_weight_shared", "no_skip")


class LedgerError(ValueError):
    """Channel bookkeeping does not match the layer configuration."""


# ---------------------------------------------------------------------------
# output transform
# ---------------------------------------------------------------------------

def hardtanh_clip(x):
    """Clamp days to [1/48, 100]. Accepts scalars, arrays or tensors."""
    if isinstance(x, Tensor):
        return clip(x, MIN_DAYS, MAX_DAYS)
    out = np.clip(np.asarray(x, dtype=np.float64), MIN_DAYS, MAX_DAYS)
    return float(out) if out.ndim == 0 else out


def exp_hardtanh(x: Tensor) -> Tensor:
    """``hardtanh_clip(exp(x))`` fused so overflow never reaches the tape."""
    x = as_tensor(x)
    z = np.minimum(x.data, math.log(MAX_DAYS) + 1.0)
    e = np.exp(z)
    out = np.clip(e, MIN_DAYS, MAX_DAYS)
    inside = (x.data <= math.log(MAX_DAYS) + 1.0) & (e >= MIN_DAYS) & (e <= MAX_DAYS)

    def backward(g):
        return (g * out * inside,)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TPCLayerConfig:
    temp_channels: int = 12       # Y*: temporal channels per feature
    point_channels: int = 13      # Z*: pointwise outputs
    kernel_size: int = 4
    dilation: int = 1
    temp_dropout: float = 0.05
    main_dropout: float = 0.45
    batch_norm: bool = True

    def validate(self) -> None:
        if self.kernel_size < 1 or self.dilation < 1 or self.temp_channels < 1 or self.point_channels < 0:
            raise ValueError(f"invalid layer config {self}")


@dataclass
class NetworkConfig:
    n_features: int                           # F, time-series features
    n_flat: int                               # f, flat feature width after encoding
    n_diagnoses: int                          # diagnosis vector width
    n_layers: int = 9
    layers: list[TPCLayerConfig] = field(default_factory=list)
    diag_embedding_size: int = 64
    final_fc_size: int = 17
    main_dropout: float = 0.45
    batch_norm: bool = True
    variant: str = "full"
    shared_temp_channels: int = 32

    def __post_init__(self):
        if not self.layers:
            self.layers = [TPCLayerConfig() for _ in range(self.n_layers)]
        self.layers = [l if isinstance(l, TPCLayerConfig) else TPCLayerConfig(**l) for l in self.layers]
        if len(self.layers) != self.n_layers:
            raise ValueError(f"{len(self.layers)} layer configs for n_layers={self.n_layers}")
        for i, layer in enumerate(self.layers, start=1):
            layer.dilation = i
            layer.validate()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def default_layers(n_layers: int = 9, temp_channels: int = 12, point_channels: int = 13,
                   kernel_size: int = 4, temp_dropout: float = 0.05, main_dropout: float = 0.45,
                   batch_norm: bool = True) -> list[TPCLayerConfig]:
    return [TPCLayerConfig(temp_channels, point_channels, kernel_size, i + 1, temp_dropout,
                           main_dropout, batch_norm) for i in range(n_layers)]


def make_variant(cfg: NetworkConfig, variant: str) -> NetworkConfig:
    """Return a copy of ``cfg`` configured as one of the ablations."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    layers = [replace(l) for l in cfg.layers]
    if variant in ("temp_only", "temp_only_weight_shared"):
        layers = [replace(l, point_channels=0) for l in layers]
    if variant == "temp_only_weight_shared":
        layers = [replace(l, temp_channels=cfg.shared_temp_channels) for l in layers]
    return replace(cfg, layers=layers, variant=variant)


# ---------------------------------------------------------------------------
# layer
# ---------------------------------------------------------------------------

@dataclass
class TPCLayerState:
    """Channel ledger flowing between layers (batch dimension first everywhere)."""

    F: int
    T: int
    Y: int
    Z_prev: int
    orig: Tensor      # [B, F, T]
    decay: Tensor     # [B, F, T]
    temp: Tensor      # [B, F*Y, T]
    point: Tensor     # [B, Z_prev, T]

    def check(self) -> None:
        B = self.orig.shape[0]
        expected = {"orig": (B, self.F, self.T), "decay": (B, self.F, self.T),
                    "temp": (B, self.F * self.Y, self.T), "point": (B, self.Z_prev, self.T)}
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise LedgerError(f"{name}: expected {shape} channels ledger, got {actual}")


def initial_state(values, decay) -> TPCLayerState:
    """Layer-1 input: Y = 1 with the decay indicators as the temporal channel."""
    values, decay = as_tensor(values), as_tensor(decay)
    B, F, T = values.shape
    return TPCLayerState(F=F, T=T, Y=1, Z_prev=0, orig=values, decay=decay, temp=decay,
                         point=Tensor(np.zeros((B, 0, T))))


def _interleave(temp: Tensor, orig: Tensor, F: int, Y: int) -> Tensor:
    """Per feature: its Y temporal channels followed by its original value."""
    B, _, T = orig.shape
    t = temp.reshape(B, F, Y, T)
    o = orig.reshape(B, F, 1, T)
    return concat([t, o], axis=2).reshape(B, F * (Y + 1), T)


class TPCLayer(Module):
    def __init__(self, cfg: TPCLayerConfig, F: int, Y: int, Z_prev: int, variant: str,
                 rng: np.random.Generator, first: bool = False):
        super().__init__()
        self.cfg = cfg
        self.F, self.Y, self.Z_prev = F, Y, Z_prev
        self.variant = variant
        self.first = first
        self.has_temp = variant != "point_only"
        self.has_point = cfg.point_channels > 0 and variant not in ("temp_only", "temp_only_weight_shared")
        self.shared = variant == "temp_only_weight_shared"
        self.skip = variant != "no_skip" or first
        k, d = cfg.kernel_size, cfg.dilation
        Ys = cfg.temp_channels

        if self.has_temp:
            own = Y + 1 if self.skip else Y
            spec = ConvSpec(k, d, groups=F, in_channels_per_group=own, out_channels_per_group=Ys)
            self.temp_conv = CausalConv1d(spec, rng, shared=self.shared)
            if Z_prev > 0:
                # per-group weights on the pointwise channels every group sees
                fan = (own + Z_prev) * k
                bound = 1.0 / math.sqrt(fan)
                self.point_to_temp = self.param(
                    "point_to_temp", rng.uniform(-bound, bound, (1, F * Ys, Z_prev, k)))
            else:
                self.point_to_temp = None
            if cfg.batch_norm:
                self.temp_bn = BatchNorm(Ys if self.shared else F * Ys)
            self.temp_drop = Dropout(cfg.temp_dropout)

        if self.has_point:
            self.point_in = self.pointwise_inputs()
            self.point_conv = PointwiseConv(self.point_in, cfg.point_channels, rng)
            if cfg.batch_norm:
                self.point_bn = BatchNorm(cfg.point_channels)
            self.point_drop = Dropout(cfg.main_dropout)

    def pointwise_inputs(self) -> int:
        if self.skip:
            return 2 * self.F + self.Z_prev
        return self.F * self.Y + self.Z_prev

    @property
    def temporal_in_channels(self) -> int:
        """Input channels read by one feature's temporal filters."""
        return (self.Y + 1 if self.skip else self.Y) + self.Z_prev

    def out_Y(self) -> int:
        return self.cfg.temp_channels if self.has_temp else self.Y

    def out_Z(self) -> int:
        added = self.cfg.point_channels if self.has_point else 0
        if self.skip and self.variant != "no_skip":
            return self.Z_prev + added
        return added

    def forward(self, state: TPCLayerState, mask: np.ndarray | None = None) -> TPCLayerState:
        if (state.F, state.Y, state.Z_prev) != (self.F, self.Y, self.Z_prev):
            raise LedgerError(
                f"layer expects (F, Y, Z_prev) = {(self.F, self.Y, self.Z_prev)}, "
                f"got {(state.F, state.Y, state.Z_prev)}")
        state.check()
        B, F, T = state.orig.shape
        temp, Y = state.temp, state.Y
        # keep padding and inter-stay gaps at exactly zero so packed rows behave like padded ones
        keep = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(B, 1, T)

        if self.has_temp:
            own = _interleave(state.temp, state.orig, F, Y) if self.skip else state.temp
            x = self.temp_conv(own)
            if self.point_to_temp is not None:
                x = x + causal_conv1d(state.point, self.point_to_temp, None, self.cfg.dilation, 1)
            if self.cfg.batch_norm:
                x = self._temp_norm(x, mask)
            temp = self.temp_drop(x.relu())
            if keep is not None:
                temp = temp * keep
            Y = self.cfg.temp_channels

        if self.has_point:
            if self.skip:
                p_in = concat([state.orig, state.decay, state.point], axis=1)
            else:
                p_in = concat([state.temp, state.point], axis=1)
            p = self.point_conv(p_in)
            if self.cfg.batch_norm:
                p = self.point_bn(p, mask)
            p = self.point_drop(p.relu())
            if keep is not None:
                p = p * keep
            point = concat([state.point, p], axis=1) if self.variant != "no_skip" else p
        elif self.variant == "no_skip" and not self.first:
            point = Tensor(np.zeros((B, 0, T)))
        else:
            point = state.point

        out = TPCLayerState(F=F, T=T, Y=Y, Z_prev=point.shape[1], orig=state.orig,
                            decay=state.decay, temp=temp, point=point)
        if out.Z_prev != self.out_Z():
            raise LedgerError(f"pointwise channels: expected {self.out_Z()}, got {out.Z_prev}")
        out.check()
        return out

    def _temp_norm(self, x: Tensor, mask):
        if not self.shared:
            return self.temp_bn(x, mask)
        # shared filters: fold features into the batch so statistics are per shared channel
        B, _, T = x.shape
        F, Ys = self.F, self.cfg.temp_channels
        folded = x.reshape(B * F, Ys, T)
        fmask = None if mask is None else np.repeat(mask, F, axis=0)
        return self.temp_bn(folded, fmask).reshape(B, F * Ys, T)


# ---------------------------------------------------------------------------
# prediction head (shared with the baselines)
# ---------------------------------------------------------------------------

class PredictionHead(Module):
    """Fuse time series, diagnosis embedding and flat features; two pointwise layers; exp; clamp."""

    def __init__(self, ts_channels: int, n_diagnoses: int, n_flat: int, diag_embedding_size: int,
                 final_fc_size: int, dropout: float, batch_norm: bool, rng: np.random.Generator):
        super().__init__()
        self.use_diag = n_diagnoses > 0 and diag_embedding_size > 0
        D = diag_embedding_size if self.use_diag else 0
        if self.use_diag:
            self.diag_encoder = Linear(n_diagnoses, diag_embedding_size, rng)
        self.drop = Dropout(dropout)
        self.fc1 = PointwiseConv(ts_channels + D + n_flat, final_fc_size, rng)
        self.batch_norm = batch_norm
        if batch_norm:
            self.bn = BatchNorm(final_fc_size)
        self.fc2 = PointwiseConv(final_fc_size, 1, rng)
        self.in_channels = ts_channels + D + n_flat

    def pre_activation(self, ts: Tensor, diag, flat, mask=None, segment=None) -> Tensor:
        """``segment`` [B, T] maps packed positions to stay rows of ``diag``/``flat``."""
        B, _, T = ts.shape
        parts = [ts]
        per_stay = []
        if self.use_diag:
            per_stay.append(self.drop(self.diag_encoder(as_tensor(diag)).relu()))
        flat = as_tensor(flat)
        if flat.shape[1]:
            per_stay.append(flat)
        for v in per_stay:
            if segment is None:
                parts.append(broadcast_to(v.reshape(B, -1, 1), (B, v.shape[1], T)))
            else:
                parts.append(v[np.maximum(segment, 0)].transpose(0, 2, 1))
        h = self.fc1(concat(parts, axis=1))
        if self.batch_norm:
            h = self.bn(h, mask)
        h = self.drop(h.relu())
        return self.fc2(h).reshape(B, T)

    def forward(self, ts: Tensor, diag, flat, mask=None, segment=None) -> Tensor:
        return exp_hardtanh(self.pre_activation(ts, diag, flat, mask, segment))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class TPCNetwork(Module):
    kind = "tpc"

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        F = cfg.n_features
        Y, Z = 1, 0
        self.layers: list[TPCLayer] = []
        for i, lcfg in enumerate(cfg.layers):
            layer = TPCLayer(lcfg, F, Y, Z, cfg.variant, rng, first=(i == 0))
            self.add_module(f"layer{i + 1}", layer)
            self.layers.append(layer)
            Y, Z = layer.out_Y(), layer.out_Z()
        self.final_Y, self.final_Z = Y, Z
        ts_channels = F * Y + Z + (0 if cfg.variant == "no_skip" else F)
        self.head = PredictionHead(ts_channels, cfg.n_diagnoses, cfg.n_flat, cfg.diag_embedding_size,
                                   cfg.final_fc_size, cfg.main_dropout, cfg.batch_norm, rng)
        self.set_rng(np.random.default_rng(seed + 1))

    @property
    def pack_gap(self) -> int:
        """Zero hours needed between packed stays: the widest per-layer causal reach."""
        return max([(l.cfg.kernel_size - 1) * l.cfg.dilation for l in self.layers if l.has_temp] + [0])

    def ledger(self) -> list[tuple[int, int]]:
        """(temporal channels, cumulative pointwise channels) after each layer."""
        return [(self.cfg.n_features * l.out_Y(), l.out_Z()) for l in self.layers]

    def temporal_features(self, values, decay, mask=None) -> Tensor:
        state = initial_state(values, decay)
        for layer in self.layers:
            state = layer(state, mask)
        parts = [state.temp, state.point]
        if self.cfg.variant != "no_skip":
            parts.append(state.orig)
        return concat(parts, axis=1)

    def pre_activation(self, batch) -> Tensor:
        ts = self.temporal_features(batch.values, batch.decay, batch.pad_mask)
        return self.head.pre_activation(ts, batch.diag, batch.flat, batch.pad_mask,
                                        getattr(batch, "segment", None))

    def forward(self, batch) -> Tensor:
        return exp_hardtanh(self.pre_activation(batch))
