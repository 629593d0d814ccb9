import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import no_dropout, random_batch
from tpckit.autograd import Tensor, gradcheck, no_grad
from tpckit.data.batching import collate, pack
from tpckit.models import build_model
from tpckit.tpc import (MAX_DAYS, MIN_DAYS, VARIANTS, LedgerError, NetworkConfig, TPCNetwork,
                        default_layers, exp_hardtanh, hardtanh_clip, initial_state, make_variant)

TINY = {"kind": "tpc", "n_layers": 2, "temp_channels": 3, "point_channels": 2,
        "diag_embedding_size": 4, "final_fc_size": 5}


def network(F=3, n_layers=2, Y=3, Z=2, variant="full", k=4, seed=0, dropout=0.0, n_flat=2, n_diag=4):
    layers = default_layers(n_layers, Y, Z, k, dropout, dropout)
    cfg = NetworkConfig(F, n_flat, n_diag, n_layers, layers, 4, 5, dropout, True, "full", 4)
    return TPCNetwork(make_variant(cfg, variant), seed)


# ---------------------------------------------------------------- channel ledger

@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 5), st.integers(0, 4),
       st.sampled_from(VARIANTS))
def test_ledger_recurrence(F, n_layers, Y, Z, variant):
    net = network(F, n_layers, Y, Z, variant, k=2)
    ledger = net.ledger()
    z_prev = 0
    for i, (temp, z) in enumerate(ledger):
        added = 0 if variant in ("temp_only", "temp_only_weight_shared") else Z
        if variant == "no_skip":
            assert z == added
        else:
            assert z == z_prev + added
        expected_y = {"point_only": 1, "temp_only_weight_shared": 4}.get(variant, Y)
        assert temp == F * expected_y
        z_prev = z
    # the forward pass validates the same ledger at every layer
    rng = np.random.default_rng(0)
    with no_grad():
        ts = net.eval().temporal_features(rng.normal(size=(1, F, 5)), rng.random((1, F, 5)))
    skip = 0 if variant == "no_skip" else F
    assert ts.shape[1] == ledger[-1][0] + ledger[-1][1] + skip


def test_ledger_violation_is_reported():
    net = network()
    state = initial_state(np.zeros((1, 3, 4)), np.zeros((1, 3, 4)))
    state.Z_prev = 5
    with pytest.raises(LedgerError):
        net.layers[0](state)


# ---------------------------------------------------------------- variants

def test_variant_structure():
    nets = {v: network(F=4, n_layers=3, Y=3, Z=2, variant=v) for v in VARIANTS}
    assert not any(l.has_point for l in nets["temp_only"].layers)
    assert not any(l.has_temp for l in nets["point_only"].layers)
    assert all(l.temp_conv.weight.shape[0] == 1 for l in nets["temp_only_weight_shared"].layers)
    assert nets["full"].num_parameters() > nets["temp_only"].num_parameters()
    for v in VARIANTS:
        with pytest.raises(ValueError):
            make_variant(nets[v].cfg, "bogus")


def test_weight_sharing_params_independent_of_features():
    def temporal_params(F):
        net = network(F=F, n_layers=3, variant="temp_only_weight_shared")
        return sum(p.size for n, p in net.named_parameters() if not n.startswith("head."))
    assert temporal_params(3) == temporal_params(9)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_gradcheck(variant):
    rng = np.random.default_rng(1)
    net = network(F=2, n_layers=2, Y=2, Z=2, variant=variant)
    batch = random_batch(rng, B=2, F=2, T=5, lengths=[5, 3])

    def loss():
        return (net.pre_activation(batch) ** 2 * batch.mask).sum()

    for name, p in net.named_parameters():
        rep = gradcheck(lambda _: loss(), p)
        assert rep.passed, f"{variant} {name}: {rep.message}"


# ---------------------------------------------------------------- causality and receptive field

@pytest.mark.parametrize("variant", VARIANTS)
def test_causal_in_eval_mode(variant):
    rng = np.random.default_rng(2)
    net = network(F=3, n_layers=3, variant=variant, dropout=0.3).eval()
    batch = random_batch(rng, B=2, T=12)
    with no_grad():
        base = net(batch).data
        for t in (0, 5, 11):
            b2 = random_batch(np.random.default_rng(2), B=2, T=12)
            b2.values[:, :, t:] += rng.normal(size=b2.values[:, :, t:].shape)
            b2.decay[:, :, t:] = rng.random(b2.decay[:, :, t:].shape)
            out = net(b2).data
            np.testing.assert_array_equal(out[:, :t], base[:, :t])


def positive_network(n_layers=9, k=4):
    net = network(F=2, n_layers=n_layers, Y=2, Z=2, k=k).eval()
    rng = np.random.default_rng(0)
    for _, p in net.named_parameters():
        p.data[...] = rng.uniform(0.1, 0.5, size=p.shape)
    return net


def temporal_support(net, T=320, t0=40):
    rng = np.random.default_rng(1)
    values = rng.uniform(0.5, 1.0, size=(1, 2, T))
    decay = rng.uniform(0.5, 1.0, size=(1, 2, T))
    with no_grad():
        base = net.temporal_features(values, decay).data
        values[0, :, t0] += 1.0
        moved = net.temporal_features(values, decay).data
    changed = np.nonzero(np.any(moved != base, axis=1)[0])[0]
    return changed, t0


def test_receptive_field_nine_layers():
    changed, t0 = temporal_support(positive_network())
    assert changed.min() == t0
    assert changed.max() - changed.min() + 1 == 1 + 3 * 45 == 136
    assert changed.size == 136


@pytest.mark.parametrize("n_layers,k", [(1, 2), (3, 3), (5, 4)])
def test_receptive_field_formula(n_layers, k):
    changed, _ = temporal_support(positive_network(n_layers, k))
    assert changed.size == 1 + (k - 1) * n_layers * (n_layers + 1) // 2


# ---------------------------------------------------------------- packing

@pytest.mark.parametrize("variant", VARIANTS)
def test_packed_equals_padded(small_dataset, variant):
    stays = small_dataset.splits["train"][:12]
    ds = small_dataset
    net = build_model({**TINY, "n_layers": 3, "variant": variant}, ds.n_features, ds.n_flat,
                      ds.n_diagnoses, seed=1).eval()
    with no_grad():
        padded = net(collate(stays)).data
        packed_batch = pack(stays, net.pack_gap)
        packed = net(packed_batch).data
    assert packed_batch.values.shape[0] < len(stays)
    for i, s in enumerate(stays):
        np.testing.assert_allclose(packed[packed_batch.segment == i], padded[i, :s.length], rtol=0, atol=1e-12)


# ---------------------------------------------------------------- output clamp

def test_hardtanh_exact_values():
    assert hardtanh_clip(150.0) == 100.0
    assert hardtanh_clip(0.001) == 1.0 / 48
    assert hardtanh_clip(3.0) == 3.0


def test_exp_hardtanh_range_and_grad():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=5.0, size=10_000)
    out = exp_hardtanh(Tensor(x)).data
    assert out.min() >= MIN_DAYS and out.max() <= MAX_DAYS
    inside = (x > math.log(MIN_DAYS)) & (x < math.log(MAX_DAYS))
    np.testing.assert_allclose(out[inside], np.exp(x[inside]), rtol=1e-15)
    t = Tensor(np.array([-6.0, -1.0, 0.5, 3.0, 900.0]), requires_grad=True)
    exp_hardtanh(t).sum().backward()
    np.testing.assert_allclose(t.grad, [0.0, math.exp(-1.0), math.exp(0.5), math.exp(3.0), 0.0])


@given(st.floats(-1e6, 1e6))
def test_exp_hardtanh_never_overflows(v):
    out = exp_hardtanh(Tensor(np.array([v]))).data[0]
    assert MIN_DAYS <= out <= MAX_DAYS


def test_network_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(3, 0, 0, n_layers=2, layers=default_layers(3))
    with pytest.raises(ValueError):
        NetworkConfig(3, 0, 0, n_layers=1, variant="nope")


def test_build_model_applies_dropout_spec():
    net = build_model(no_dropout(TINY), 3, 2, 4)
    assert all(l.temp_drop.rate == 0.0 for l in net.layers)
