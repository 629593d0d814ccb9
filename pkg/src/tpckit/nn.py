"""Neural layers on top of :mod:`tpckit.autograd`.

Sequence tensors use the channels-first layout ``[batch, channels, time]`` except
inside the transformer, which works on ``[batch, time, d_model]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import DTYPE, Tensor, as_tensor, concat, einsum, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# causal (dilated, grouped) convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    dilation: int = 1
    groups: int = 1
    in_channels_per_group: int = 1
    out_channels_per_group: int = 1

    def __post_init__(self):
        for name in ("kernel_size", "dilation", "groups", "in_channels_per_group", "out_channels_per_group"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def left_padding(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    @property
    def in_channels(self) -> int:
        return self.groups * self.in_channels_per_group

    @property
    def out_channels(self) -> int:
        return self.groups * self.out_channels_per_group


def _padded(x: np.ndarray, groups: int, pad: int) -> np.ndarray:
    """[B, G*Cin, T] -> zero left-padded [B, G, Cin, pad + T]."""
    B, C, T = x.shape
    xp = np.zeros((B, groups, C // groups, T + pad), dtype=DTYPE)
    xp[..., pad:] = x.reshape(B, groups, C // groups, T)
    return xp


def _conv_backward(g, xp, weight, x_shape, groups, k, d, shared):
    """Gradients of the causal conv given output grad ``g`` [B, G*Cout, T].

    ``xp`` is the padded input from the forward pass and ``weight`` is [G', Cout, Cin, k].
    Returns (grad x, grad weight, grad bias per output channel).
    """
    B, C, T = x_shape
    cout = weight.shape[1]
    gg = np.ascontiguousarray(g).reshape(B, groups, cout, T)
    taps = np.ascontiguousarray(weight.transpose(3, 0, 1, 2))  # [k, G', Cout, Cin]
    gxp = np.zeros_like(xp)
    gw = np.empty(weight.shape, dtype=DTYPE)
    for j in range(k):
        xs = xp[..., j * d: j * d + T]
        gwj = np.matmul(gg, xs.swapaxes(-1, -2)).sum(axis=0)  # [G, Cout, Cin]
        gw[..., j] = gwj.sum(axis=0, keepdims=True) if shared else gwj
        gxp[..., j * d: j * d + T] += np.matmul(taps[j].swapaxes(-1, -2), gg)
    gx = gxp[..., (k - 1) * d:].reshape(B, C, T)
    gb = gg.sum(axis=(0, 3)).reshape(-1)
    return gx, gw, gb


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1,
                  groups: int = 1) -> Tensor:
    """Left-padded dilated grouped 1-D convolution; output length equals input length.

    ``weight`` is ``[G, Cout_g, Cin_g, k]``; a leading extent of 1 shares one filter bank
    across all ``groups`` (the weight-sharing ablation).
    """
    x = as_tensor(x)
    B, C, T = x.shape
    if C % groups:
        raise ValueError(f"{C} input channels not divisible by groups={groups}")
    if T < 1:
        raise ValueError("time extent must be at least 1")
    G_w, cout, cin, k = weight.shape
    shared = G_w == 1 and groups > 1
    if G_w not in (1, groups) or cin * groups != C:
        raise ValueError(
            f"weight {weight.shape} does not match {C} input channels in {groups} groups"
        )
    d = dilation
    xp = _padded(x.data, groups, (k - 1) * d)
    w = weight.data
    taps = np.ascontiguousarray(w.transpose(3, 0, 1, 2))  # [k, G', Cout, Cin]
    out = np.zeros((B, groups, cout, T), dtype=DTYPE)
    # tap j at output time t reads input time t - (k - 1 - j) * d
    for j in range(k):
        out += np.matmul(taps[j], xp[..., j * d: j * d + T])
    out = out.reshape(B, groups * cout, T)
    if bias is not None:
        b = bias.data if bias.shape[0] == groups * cout else np.tile(bias.data, groups)
        out += b.reshape(1, -1, 1)

    def backward(g):
        gx, gw, gb = _conv_backward(g, xp, w, x.shape, groups, k, d, shared)
        if bias is None:
            return gx, gw
        if bias.shape[0] != groups * cout:
            gb = gb.reshape(groups, cout).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-timepoint affine map; ``weight`` is ``[Cout, Cin]``."""
    x = as_tensor(x)
    out = einsum("oc,bct->bot", weight, x)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1)
    return out


# ---------------------------------------------------------------------------
# normalisation, dropout
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, mask: np.ndarray | None = None,
               eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation over batch and time of ``x`` [B, C, T].

    In training mode statistics come from positions where ``mask`` [B, T] is true
    (padding excluded) and the running buffers are updated in place.
    """
    x = as_tensor(x)
    B, C, T = x.shape
    m = None if mask is None else np.asarray(mask, dtype=DTYPE).reshape(B, 1, T)
    n = float(B * T) if m is None else float(m.sum())

    def msum(a):
        # per-channel sum over the masked batch/time positions
        return a.sum(axis=(0, 2)) if m is None else np.einsum("bct,bxt->c", a, m)

    if training:
        if n < 2:
            raise ValueError("batch norm in training mode needs at least 2 values per channel")
        mu = msum(x.data) / n
        diff = x.data - mu.reshape(1, C, 1)
        var = msum(diff * diff) / n
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
        diff = x.data - mu.reshape(1, C, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(1, C, 1)
    xhat = diff * inv_std
    out = xhat * gamma.data.reshape(1, C, 1) + beta.data.reshape(1, C, 1)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data.reshape(1, C, 1)
        if not training:
            return dxhat * inv_std, ggamma, gbeta
        # every output depends on the statistics; only masked inputs feed them
        s1 = (gbeta * gamma.data / n).reshape(1, C, 1)
        s2 = (ggamma * gamma.data / n).reshape(1, C, 1)
        corr = s1 + xhat * s2
        gx = inv_std * (dxhat - (corr if m is None else m * corr))
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    diff = x.data - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity in evaluation, survivors scaled by 1/(1-rate) in training."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG")
    keep = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))

    def backward(g):
        return (g * keep,)

    return make_node(x.data * keep, (x,), backward)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_layer(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Tensor:
    """One (optionally channel-wise) LSTM layer over ``x`` [B, G*I, T].

    ``w_ih`` [G, I, 4H], ``w_hh`` [G, H, 4H], ``bias`` [G, 4H]; gate order i, f, g, o.
    Each of the G groups is an independent LSTM reading only its own I channels.
    Returns hidden states [B, G*H, T] for every step, starting from zero state.
    """
    x = as_tensor(x)
    B, C, T = x.shape
    G, I, H4 = w_ih.shape
    H = H4 // 4
    if G * I != C:
        raise ValueError(f"LSTM expects {G * I} input channels, got {C}")
    xs = np.ascontiguousarray(x.data.reshape(B, G, I, T).transpose(3, 1, 0, 2))  # [T, G, B, I]
    zx = np.matmul(xs, w_ih.data) + bias.data[None, :, None, :]  # [T, G, B, 4H]
    Whh = w_hh.data
    hs = np.zeros((T + 1, G, B, H), dtype=DTYPE)
    cs = np.zeros((T + 1, G, B, H), dtype=DTYPE)
    gates = np.empty((T, G, B, H4), dtype=DTYPE)
    # sigmoid(z) = (1 + tanh(z / 2)) / 2, so one tanh covers all four gates
    scale = np.full(H4, 0.5)
    scale[2 * H:3 * H] = 1.0
    for t in range(T):
        z = zx[t] + np.matmul(hs[t], Whh)
        a = gates[t]
        np.tanh(z * scale, out=a)
        a[..., :2 * H] = 0.5 * (1.0 + a[..., :2 * H])
        a[..., 3 * H:] = 0.5 * (1.0 + a[..., 3 * H:])
        cs[t + 1] = a[..., H:2 * H] * cs[t] + a[..., :H] * a[..., 2 * H:3 * H]
        hs[t + 1] = a[..., 3 * H:] * np.tanh(cs[t + 1])
    out = hs[1:].transpose(2, 1, 3, 0).reshape(B, G * H, T)

    def backward(g):
        gh_all = g.reshape(B, G, H, T).transpose(3, 1, 0, 2)  # [T, G, B, H]
        dz = np.empty((T, G, B, H4), dtype=DTYPE)
        dh_next = np.zeros((G, B, H), dtype=DTYPE)
        dc_next = np.zeros((G, B, H), dtype=DTYPE)
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i_, f_, g_, o_ = a[..., :H], a[..., H:2 * H], a[..., 2 * H:3 * H], a[..., 3 * H:]
            tc = np.tanh(cs[t + 1])
            dh = gh_all[t] + dh_next
            dc = dh * o_ * (1 - tc * tc) + dc_next
            d = dz[t]
            d[..., :H] = dc * g_ * i_ * (1 - i_)
            d[..., H:2 * H] = dc * cs[t] * f_ * (1 - f_)
            d[..., 2 * H:3 * H] = dc * i_ * (1 - g_ * g_)
            d[..., 3 * H:] = dh * tc * o_ * (1 - o_)
            dc_next = dc * f_
            dh_next = np.matmul(d, np.swapaxes(Whh, -1, -2))
        # [G, I, T*B] @ [G, T*B, 4H]
        dzf = dz.transpose(1, 0, 2, 3).reshape(G, T * B, H4)
        gw_ih = np.matmul(xs.transpose(1, 3, 0, 2).reshape(G, I, T * B), dzf)
        gw_hh = np.matmul(hs[:-1].transpose(1, 3, 0, 2).reshape(G, H, T * B), dzf)
        gb = dzf.sum(axis=1)
        gx = np.matmul(dz, np.swapaxes(w_ih.data, -1, -2))  # [T, G, B, I]
        gx = gx.transpose(2, 1, 3, 0).reshape(B, C, T)
        return gx, gw_ih, gw_hh, gb

    return make_node(np.ascontiguousarray(out), (x, w_ih, w_hh, bias), backward)


# ---------------------------------------------------------------------------
# causal attention
# ---------------------------------------------------------------------------

def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of [..., T, T] with keys after the query masked out.

    The mask is additive -inf, so masked weights are exactly zero.
    """
    scores = as_tensor(scores)
    T = scores.shape[-1]
    allowed = np.tril(np.ones((T, T), dtype=bool))
    s = np.where(allowed, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, (scores,), backward)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True
        self.rng: np.random.Generator | None = None

    def __setattr__(self, key, value):
        if isinstance(value, Module) and key != "_children":
            self.__dict__.setdefault("_children", {})[key] = value
        object.__setattr__(self, key, value)

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=DTYPE).copy()
        self._buffers[name] = arr
        return arr

    def add_module(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def modules(self) -> Iterator[Module]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    @property
    def mode(self) -> str:
        return "training" if self.training else "evaluation"

    def set_rng(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            m.rng = rng

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{n}" for n in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data[...] = arr
        for name, b in buffers.items():
            b[...] = state[f"buffer:{name}"]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Linear(Module):
    """Affine map on the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", fan_in_uniform(rng, (in_features, out_features), in_features))
        self.bias = self.param("bias", fan_in_uniform(rng, (out_features,), in_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class PointwiseConv(Module):
    """1x1 convolution over [B, C, T]."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.param("weight", fan_in_uniform(rng, (out_channels, in_channels), in_channels))
        self.bias = self.param("bias", fan_in_uniform(rng, (out_channels,), in_channels))

    def forward(self, x: Tensor) -> Tensor:
        return pointwise_conv(x, self.weight, self.bias)


class CausalConv1d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, shared: bool = False, bias: bool = True):
        super().__init__()
        self.spec = spec
        G = 1 if shared else spec.groups
        fan_in = spec.in_channels_per_group * spec.kernel_size
        shape = (G, spec.out_channels_per_group, spec.in_channels_per_group, spec.kernel_size)
        self.weight = self.param("weight", fan_in_uniform(rng, shape, fan_in))
        nb = spec.out_channels_per_group if shared else spec.out_channels
        self.bias = self.param("bias", fan_in_uniform(rng, (nb,), fan_in)) if bias else None
        self.shared = shared

    def forward(self, x: Tensor) -> Tensor:
        bias = self.bias
        out = causal_conv1d(x, self.weight, None, self.spec.dilation, self.spec.groups)
        if bias is None:
            return out
        if self.shared:
            bias = concat([bias] * self.spec.groups, axis=0)
        return out + bias.reshape(1, -1, 1)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))
        self.running_mean = self.buffer("running_mean", np.zeros(channels))
        self.running_var = self.buffer("running_var", np.ones(channels))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, mask, self.eps, self.momentum)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training, self.rng)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class LSTM(Module):
    """Stacked LSTM over [B, G*I, T]; with ``groups`` > 1 it is channel-wise."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator,
                 groups: int = 1, dropout: float = 0.0):
        super().__init__()
        self.hidden_size = hidden_size
        self.groups = groups
        self.num_layers = num_layers
        fan = hidden_size
        for layer in range(num_layers):
            i = input_size if layer == 0 else hidden_size
            self.param(f"w_ih{layer}", fan_in_uniform(rng, (groups, i, 4 * hidden_size), fan))
            self.param(f"w_hh{layer}", fan_in_uniform(rng, (groups, hidden_size, 4 * hidden_size), fan))
            self.param(f"bias{layer}", fan_in_uniform(rng, (groups, 4 * hidden_size), fan))
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for layer in range(self.num_layers):
            if layer:
                h = self.drop(h)
            h = lstm_layer(h, self._params[f"w_ih{layer}"], self._params[f"w_hh{layer}"],
                           self._params[f"bias{layer}"])
        return h


class CausalSelfAttention(Module):
    """Multi-head self-attention over [B, T, D] with a causal mask, no positional encoding."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_model = d_model
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.proj = Linear(d_model, d_model, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)  # [3, B, H, T, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = einsum("bhqd,bhkd->bhqk", q, k) * (1.0 / math.sqrt(dh))
        weights = causal_softmax(scores)
        self.last_weights = weights.data
        ctx = einsum("bhqk,bhkd->bhqd", weights, v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(ctx)


class TransformerEncoderLayer(Module):
    """Post-norm encoder block: LN(x + attn(x)), LN(x + ff(x)), ReLU feedforward."""

    def __init__(self, d_model: int, heads: int, feedforward: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.attn = CausalSelfAttention(d_model, heads, rng)
        self.ff1 = Linear(d_model, feedforward, rng)
        self.ff2 = Linear(feedforward, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x)))
        ff = self.ff2(self.drop(self.ff1(x).relu()))
        return self.norm2(x + self.drop(ff))
