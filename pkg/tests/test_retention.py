import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hesrn import tensor as T
from hesrn.errors import ParameterError, ShapeError
from hesrn.retention import (
    LayerParams,
    decay_mask,
    he_retention,
    head_gammas,
    hesrn_layer,
    msr,
    retention_parallel,
    retention_recurrent,
    xpos_modulate,
    xpos_thetas,
)
from hesrn.tensor import Tensor, grad_check

gammas = st.floats(0.05, 0.999)


def complex_pairs(x):
    return x[..., 0::2] + 1j * x[..., 1::2]


def xpos_oracle(q, k, n, m, thetas, gamma):
    """Re(sum_j q_j conj(k_j) (gamma e^{i theta_j})^(n - m)) in complex arithmetic."""
    zq = complex_pairs(q) * (gamma * np.exp(1j * thetas)) ** n
    zk = complex_pairs(k) * (gamma * np.exp(-1j * thetas)) ** (-m)
    return float(np.real(np.sum(zq * np.conj(zk))))


def test_head_gamma_schedule():
    assert head_gammas(1).tolist() == [0.96875]
    assert head_gammas(2).tolist() == [0.96875, 0.998046875]
    direct = [1 - np.exp(np.log(1 / 32) + i * (np.log(1 / 512) - np.log(1 / 32)) / 3) for i in range(4)]
    assert np.allclose(head_gammas(4), direct, rtol=0, atol=1e-15)


def test_theta_spectrum():
    assert np.allclose(xpos_thetas(8), [10000 ** (-2 * j / 8) for j in range(4)], rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        xpos_thetas(5)


def test_decay_mask_examples():
    assert decay_mask(1, 0.3).tolist() == [[1.0]]
    assert decay_mask(3, 0.5).tolist() == [[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]]
    with pytest.raises(ParameterError):
        decay_mask(3, 1.5)


@given(gammas, st.integers(1, 12))
def test_decay_mask_semigroup(gamma, length):
    d = decay_mask(length, gamma)
    for n in range(length):
        for m in range(n + 1):
            for p in range(m + 1):
                assert np.isclose(d[n, m] * d[m, p], d[n, p], rtol=1e-12, atol=0)
    assert not np.triu(d, 1).any()


def test_decay_mask_zeroes_padding():
    d = decay_mask(4, 0.5, np.array([True, True, False, True]))
    assert not d[2].any() and not d[:, 2].any()
    assert d[3, 1] == 0.25


@given(st.integers(1, 40), st.sampled_from([2, 4, 8, 16]), gammas, st.integers(0, 1000))
def test_parallel_matches_recurrent(length, dh, gamma, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(length, dh)) for _ in range(3))
    assert np.abs(retention_parallel(q, k, v, gamma).data - retention_recurrent(q, k, v, gamma)).max() < 1e-8


def test_small_cases_by_hand():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(2, 3)) for _ in range(3))
    out = retention_parallel(q, k, v, 0.7).data
    assert np.allclose(out[0], (q[0] @ k[0]) * v[0])
    assert np.allclose(out[1], q[1] @ (0.7 * np.outer(k[0], v[0]) + np.outer(k[1], v[1])))
    assert not retention_parallel(q, k, np.zeros_like(v), 0.7).data.any()


@given(st.integers(0, 1000))
def test_masked_batches_match_recurrent(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 9)) < 0.7
    q, k, v = (rng.normal(size=(3, 9, 4)) for _ in range(3))
    par = retention_parallel(q, k, v, 0.8, mask).data
    assert np.abs(par - retention_recurrent(q, k, v, 0.8, mask)).max() < 1e-10
    assert not par[~mask].any()


def test_he_retention_dense_oracle():
    rng = np.random.default_rng(3)
    length, c = 8, 3
    q, k, v = (rng.normal(size=(length, 4)) for _ in range(3))
    ht = rng.normal(size=(length, c))
    wq, wk = rng.normal(size=(c, c)), rng.normal(size=(c, c))
    qt, kt = ht @ wq, ht @ wk
    d = np.array([[0.8 ** (n - m) if n >= m else 0.0 for m in range(length)] for n in range(length)])
    expected = ((q @ k.T + 0.2 * qt @ kt.T) * d) @ v
    assert np.abs(he_retention(q, k, v, qt, kt, 0.8, 0.2).data - expected).max() < 1e-12


def test_he_retention_constant_type_score():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    ht = np.tile([0.0, 1.0, 0.0], (5, 1))
    qt = kt = ht @ np.eye(3)
    assert np.all(qt @ kt.T == 1.0)
    d = decay_mask(5, 0.6)
    expected = ((q @ k.T + 0.5) * d) @ v
    assert np.abs(he_retention(q, k, v, qt, kt, 0.6, 0.5).data - expected).max() < 1e-12


def test_he_retention_beta_zero_is_plain():
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    qt, kt = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    assert np.array_equal(he_retention(q, k, v, qt, kt, 0.9, 0.0).data, retention_parallel(q, k, v, 0.9).data)


def test_he_retention_type_width_mismatch():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(3, 2))
    with pytest.raises(ShapeError):
        he_retention(q, q, q, rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), 0.9, 0.5)


@given(st.integers(0, 10_000))
def test_causality_by_perturbation(seed):
    rng = np.random.default_rng(seed)
    length = 10
    n = int(rng.integers(length - 1))
    q, k, v = (rng.normal(size=(length, 4)) for _ in range(3))
    qt, kt = rng.normal(size=(length, 3)), rng.normal(size=(length, 3))
    base = he_retention(q, k, v, qt, kt, 0.9, 0.5).data
    for arr in (q, k, v, qt, kt):
        arr[n + 1 :] += rng.normal(size=arr[n + 1 :].shape) * 50
    after = he_retention(q, k, v, qt, kt, 0.9, 0.5).data
    assert np.abs(after[: n + 1] - base[: n + 1]).max() < 1e-14


def test_xpos_position_zero_unchanged():
    x = np.random.default_rng(0).normal(size=(1, 6))
    assert np.array_equal(xpos_modulate(x, [0], xpos_thetas(6), gamma=0.9).data, x)


@given(st.integers(0, 1000), gammas)
def test_xpos_same_position_cancels(seed, gamma):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(12, 8)), rng.normal(size=(12, 8))
    th, pos = xpos_thetas(8), np.arange(12)
    for g_ in (None, gamma):
        mq = xpos_modulate(q, pos, th, gamma=g_, sign="query").data
        mk = xpos_modulate(k, pos, th, gamma=g_, sign="key").data
        assert np.abs((mq * mk).sum(1) - (q * k).sum(1)).max() < 1e-12


def test_xpos_cross_position_complex_oracle():
    rng = np.random.default_rng(1)
    length, theta, gamma = 4, 0.5, 0.9
    q, k = rng.normal(size=(length, 2)), rng.normal(size=(length, 2))
    th = np.array([theta])
    mq = xpos_modulate(q, np.arange(length), th, gamma=gamma, sign="query").data
    mk = xpos_modulate(k, np.arange(length), th, gamma=gamma, sign="key").data
    for n in range(length):
        for m in range(length):
            phi = (n - m) * theta
            rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
            got = mq[n] @ mk[m]
            assert abs(got - xpos_oracle(q[n], k[m], n, m, th, gamma)) < 1e-10
            assert abs(got - gamma ** (n - m) * (rot @ q[n]) @ k[m]) < 1e-10


def test_xpos_errors():
    with pytest.raises(ShapeError):
        xpos_modulate(np.ones((2, 3)), [0, 1], [1.0])
    with pytest.raises(ParameterError):
        xpos_modulate(np.ones((2, 2)), [0, 1], [1.0], gamma=1.2)
    with pytest.raises(ParameterError):
        xpos_modulate(np.ones((2, 2)), [0, 1], [1.0], sign="value")


def _layer(seed, d=8, c=3, heads=2):
    return LayerParams.init(d, c, heads, 8, np.random.default_rng(seed))


def test_msr_width_must_split_into_heads():
    p = _layer(0)
    with pytest.raises(ShapeError):
        msr(Tensor(np.ones((4, 8))), Tensor(np.ones((4, 3))), p, 3, 0.5)


def test_layer_with_zero_output_maps_is_identity():
    p = _layer(1)
    p.wo.data[:] = 0
    p.ffn2.data[:] = 0
    hs = np.random.default_rng(2).normal(size=(5, 8))
    out = hesrn_layer(Tensor(hs), Tensor(np.ones((5, 3))), p, 2, 0.5).data
    assert np.array_equal(out, hs)


def test_layer_matches_composition_oracle():
    rng = np.random.default_rng(7)
    p = _layer(7)
    for t in (p.ln1_gain, p.ln1_bias, p.lnt_gain, p.lnt_bias, p.ln2_gain, p.ln2_bias):
        t.data = rng.normal(size=t.shape)
    hs, ht = rng.normal(size=(4, 8)), rng.normal(size=(4, 3))

    def ln(x, g, b):
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

    x, xt = ln(hs, p.ln1_gain.data, p.ln1_bias.data), ln(ht, p.lnt_gain.data, p.lnt_bias.data)
    heads = []
    for i, gamma in enumerate(head_gammas(2)):
        cols = slice(4 * i, 4 * i + 4)
        q, k, v = (x @ p.wq.data)[:, cols], (x @ p.wk.data)[:, cols], (x @ p.wv.data)[:, cols]
        th = xpos_thetas(4)
        zq = complex_pairs(q) * np.exp(1j * np.outer(np.arange(4), th))
        zk = complex_pairs(k) * np.exp(1j * np.outer(np.arange(4), th))
        scores = np.real(zq @ np.conj(zk).T) + 0.5 * (xt @ p.wtq.data[i]) @ (xt @ p.wtk.data[i]).T
        d = np.array([[gamma ** (n - m) if n >= m else 0 for m in range(4)] for n in range(4)])
        y = (scores * d) @ v
        heads.append((y - y.mean(-1, keepdims=True)) / np.sqrt(y.var(-1, keepdims=True) + 1e-5))
    gate = x @ p.wg.data
    gate = gate / (1 + np.exp(-gate))
    y = (gate * np.concatenate(heads, -1)) @ p.wo.data + hs
    expected = gelu(ln(y, p.ln2_gain.data, p.ln2_bias.data) @ p.ffn1.data) @ p.ffn2.data + y
    got = hesrn_layer(Tensor(hs), Tensor(ht), p, 2, 0.5).data
    assert np.abs(got - expected).max() < 1e-12


def test_padded_rows_stay_zero_and_do_not_leak():
    rng = np.random.default_rng(8)
    p = _layer(8)
    mask = np.array([[True, True, False, True, False]])
    hs = rng.normal(size=(1, 5, 8)) * mask[..., None]
    ht = rng.normal(size=(1, 5, 3))
    out = hesrn_layer(Tensor(hs), Tensor(ht), p, 2, 0.5, mask).data
    assert not out[~mask].any()
    hs2 = hs.copy()
    hs2[0, 2] = 99.0  # garbage in a padded slot
    out2 = hesrn_layer(Tensor(hs2), Tensor(ht), p, 2, 0.5, mask).data
    assert np.array_equal(out2[mask], out[mask])


def test_batch_partitioning_does_not_change_outputs():
    rng = np.random.default_rng(9)
    p = _layer(9)
    hs, ht = rng.normal(size=(6, 5, 8)), rng.normal(size=(6, 5, 3))
    whole = hesrn_layer(Tensor(hs), Tensor(ht), p, 2, 0.5).data
    parts = np.concatenate([hesrn_layer(Tensor(hs[i : i + 2]), Tensor(ht[i : i + 2]), p, 2, 0.5).data for i in (0, 2, 4)])
    assert np.abs(whole - parts).max() < 1e-13


def test_two_layer_encoder_gradients():
    rng = np.random.default_rng(10)
    layers = [_layer(10 + i) for i in range(2)]
    hs, ht = Tensor(rng.normal(size=(2, 6, 8))), Tensor(rng.normal(size=(2, 6, 3)))
    w = rng.normal(size=(2, 6, 8))

    def loss():
        h = hs
        for p in layers:
            h = hesrn_layer(h, ht, p, 2, 0.5)
        return T.tensor_sum(h * w)

    params = [t for p in layers for t in p.named("l").values()] + [hs]
    assert grad_check(loss, params) < 1e-4
