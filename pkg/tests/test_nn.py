import numpy as np
import pytest
from hypothesis import given, strategies as st

from tpckit import nn
from tpckit.autograd import Tensor, gradcheck, no_grad


def check_all(f, tensors, tol=1e-4):
    for i, t in enumerate(tensors):
        rep = gradcheck(lambda _: f(), t, tol=tol)
        assert rep.passed, f"input {i}: {rep.message}"


def naive_conv(x, w, b, d, groups):
    """Direct loop oracle: out[b, g*co + o, t] = sum_c sum_j w[g, o, c, j] x[b, g*ci + c, t - (k-1-j) d]."""
    B, C, T = x.shape
    G_w, co, ci, k = w.shape
    out = np.zeros((B, groups * co, T))
    for bi in range(B):
        for g in range(groups):
            wg = w[0 if G_w == 1 else g]
            for o in range(co):
                for t in range(T):
                    acc = 0.0
                    for c in range(ci):
                        for j in range(k):
                            src = t - (k - 1 - j) * d
                            if src >= 0:
                                acc += wg[o, c, j] * x[bi, g * ci + c, src]
                    out[bi, g * co + o, t] = acc
    if b is not None:
        out += np.tile(b, groups * co // b.size).reshape(1, -1, 1)
    return out


# ---------------------------------------------------------------- convolution

@pytest.mark.parametrize("groups,ci,co,k,d,shared", [
    (1, 3, 2, 3, 1, False),
    (3, 2, 4, 4, 2, False),
    (4, 1, 2, 2, 3, False),
    (3, 2, 2, 3, 2, True),
])
def test_conv_matches_direct_loop(groups, ci, co, k, d, shared):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, groups * ci, 9))
    w = rng.normal(size=(1 if shared else groups, co, ci, k))
    b = rng.normal(size=co if shared else groups * co)
    got = nn.causal_conv1d(Tensor(x), Tensor(w), Tensor(b), d, groups).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, d, groups), rtol=0, atol=1e-12)


@pytest.mark.parametrize("shared", [False, True])
def test_conv_gradcheck(shared):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 6, 7)), requires_grad=True)
    w = Tensor(rng.normal(size=(1 if shared else 3, 2, 2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2 if shared else 6), requires_grad=True)
    check_all(lambda: (nn.causal_conv1d(x, w, b, 2, 3) ** 2).sum(), [x, w, b])


def test_conv_mutation_is_caught(monkeypatch):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 4, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 2, 3)), requires_grad=True)
    f = lambda: (nn.causal_conv1d(x, w, None, 1, 2) ** 2).sum()
    assert gradcheck(lambda _: f(), w).passed
    real = nn._conv_backward

    def off_by_one_tap(g, xp, weight, *args):
        gx, gw, gb = real(g, xp, weight, *args)
        return gx, np.roll(gw, 1, axis=-1), gb

    monkeypatch.setattr(nn, "_conv_backward", off_by_one_tap)
    assert not gradcheck(lambda _: f(), w).passed


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        nn.causal_conv1d(x, Tensor(np.zeros((3, 1, 1, 2))), None, 1, 3)
    with pytest.raises(ValueError):
        nn.causal_conv1d(x, Tensor(np.zeros((2, 1, 3, 2))), None, 1, 2)
    with pytest.raises(ValueError):
        nn.ConvSpec(kernel_size=0)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 11))
def test_conv_is_causal(k, d, groups, t0):
    rng = np.random.default_rng(t0)
    x = rng.normal(size=(1, groups * 2, 12))
    w = Tensor(rng.normal(size=(groups, 2, 2, k)))
    base = nn.causal_conv1d(Tensor(x), w, None, d, groups).data
    x2 = x.copy()
    x2[..., t0] += 1.0
    moved = nn.causal_conv1d(Tensor(x2), w, None, d, groups).data
    np.testing.assert_array_equal(base[..., :t0], moved[..., :t0])


def test_pointwise_and_linear_gradcheck():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    pw = nn.PointwiseConv(3, 2, rng)
    check_all(lambda: (pw(x) ** 2).sum(), [x, pw.weight, pw.bias])
    lin = nn.Linear(4, 3, rng)
    check_all(lambda: (lin(x) ** 2).sum(), [x, lin.weight, lin.bias])


# ---------------------------------------------------------------- normalisation

def test_batch_norm_gradcheck_training_with_mask():
    rng = np.random.default_rng(0)
    g = Tensor(rng.normal(size=4) + 1, requires_grad=True)
    be = Tensor(rng.normal(size=4), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    mask = np.ones((2, 5), bool)
    mask[1, 3:] = False
    rm, rv = np.zeros(4), np.ones(4)
    f = lambda: (nn.batch_norm(x, g, be, rm.copy(), rv.copy(), True, mask) ** 3).sum()
    check_all(f, [x, g, be])


def test_batch_norm_gradcheck_eval():
    rng = np.random.default_rng(3)
    bn = nn.BatchNorm(3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2, size=3)
    bn.eval()
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    check_all(lambda: (bn(x) ** 3).sum(), [x, bn.gamma, bn.beta])


def test_batch_norm_ignores_padding():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6))
    mask = np.ones((2, 6), bool)
    mask[0, 4:] = False
    junk = x.copy()
    junk[0, :, 4:] = 1e6
    outs = []
    for arr in (x, junk):
        bn = nn.BatchNorm(3)
        outs.append(bn(Tensor(arr), mask).data)
    np.testing.assert_allclose(outs[0][mask[:, None, :].repeat(3, 1)],
                               outs[1][mask[:, None, :].repeat(3, 1)], rtol=0, atol=1e-12)
    # normalised valid positions have zero mean and unit (biased) variance
    v = outs[0].transpose(1, 0, 2)[:, mask]
    np.testing.assert_allclose(v.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(v.var(axis=1), 1, atol=1e-4)


def test_batch_norm_running_stats_update():
    bn = nn.BatchNorm(1)
    x = np.array([[[1.0, 2.0, 3.0, 6.0]]])
    bn(Tensor(x))
    assert bn.running_mean[0] == pytest.approx(0.1 * 3.0)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(4)
    ln = nn.LayerNorm(5)
    ln.gamma.data[:] = rng.normal(size=5)
    x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    check_all(lambda: (ln(x) ** 3).sum(), [x, ln.gamma, ln.beta])


def test_dropout_train_and_eval():
    x = Tensor(np.ones((200, 50)), requires_grad=True)
    out = nn.dropout(x, 0.25, True, np.random.default_rng(0))
    kept = out.data != 0
    assert abs(kept.mean() - 0.75) < 0.01
    np.testing.assert_allclose(out.data[kept], 1 / 0.75)
    assert nn.dropout(x, 0.25, False, None) is x
    small = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    rep = gradcheck(lambda t: (nn.dropout(t, 0.3, True, np.random.default_rng(9)) ** 2).sum(), small)
    assert rep.passed, rep.message
    with pytest.raises(ValueError):
        nn.Dropout(1.0)


# ---------------------------------------------------------------- LSTM

def naive_lstm(x, w_ih, w_hh, b):
    B, C, T = x.shape
    G, I, H4 = w_ih.shape
    H = H4 // 4
    sig = lambda z: 1 / (1 + np.exp(-z))
    out = np.zeros((B, G * H, T))
    for g in range(G):
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for t in range(T):
            z = x[:, g * I:(g + 1) * I, t] @ w_ih[g] + h @ w_hh[g] + b[g]
            i, f, gg, o = sig(z[:, :H]), sig(z[:, H:2 * H]), np.tanh(z[:, 2 * H:3 * H]), sig(z[:, 3 * H:])
            c = f * c + i * gg
            h = o * np.tanh(c)
            out[:, g * H:(g + 1) * H, t] = h
    return out


@pytest.mark.parametrize("groups", [1, 3])
def test_lstm_matches_reference_and_gradcheck(groups):
    rng = np.random.default_rng(groups)
    I, H = 2, 3
    x = Tensor(rng.normal(size=(2, groups * I, 5)), requires_grad=True)
    w_ih = Tensor(rng.normal(size=(groups, I, 4 * H)) * 0.5, requires_grad=True)
    w_hh = Tensor(rng.normal(size=(groups, H, 4 * H)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=(groups, 4 * H)) * 0.5, requires_grad=True)
    out = nn.lstm_layer(x, w_ih, w_hh, b).data
    np.testing.assert_allclose(out, naive_lstm(x.data, w_ih.data, w_hh.data, b.data), atol=1e-13)
    check_all(lambda: (nn.lstm_layer(x, w_ih, w_hh, b) ** 2).sum(), [x, w_ih, w_hh, b])


def test_stacked_lstm_module_gradcheck():
    rng = np.random.default_rng(8)
    lstm = nn.LSTM(3, 4, 2, rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    check_all(lambda: (lstm(x) ** 2).sum(), [x] + lstm.parameters())


# ---------------------------------------------------------------- attention

def test_causal_softmax_rows_and_mask():
    rng = np.random.default_rng(0)
    p = nn.causal_softmax(Tensor(rng.normal(size=(2, 6, 6)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] == 0.0)


def test_attention_gradcheck_and_weights():
    rng = np.random.default_rng(2)
    att = nn.CausalSelfAttention(4, 2, rng)
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    check_all(lambda: (att(x) ** 2).sum(), [x] + att.parameters())
    w = att.last_weights
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(np.triu(w[0, 0], 1) == 0.0)


def test_transformer_block_gradcheck():
    rng = np.random.default_rng(3)
    block = nn.TransformerEncoderLayer(4, 2, 6, 0.0, rng)
    x = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    check_all(lambda: (block(x) ** 2).sum(), [x] + block.parameters())


def test_attention_head_divisibility():
    with pytest.raises(ValueError):
        nn.CausalSelfAttention(5, 2, np.random.default_rng(0))


# ---------------------------------------------------------------- module plumbing

def test_state_dict_round_trip_and_mismatch():
    rng = np.random.default_rng(0)
    a, b = nn.LSTM(2, 3, 1, rng), nn.LSTM(2, 3, 1, rng)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(1, 2, 4)))
    with no_grad():
        np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(ValueError):
        b.load_state_dict({})
