import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbpfusion import ops
from fbpfusion.attention import (
    AttentionParams, attention_pool, flatten_grid, read_weights_csv, unflatten_grid, weights_per_time,
    write_weights_csv,
)
from fbpfusion.errors import DimensionError, InputError
from fbpfusion.gradcheck import gradcheck, leaves
from fbpfusion.tensor import Tensor


def make_params(rng, c, d, lam, transformed, zero=False):
    W = np.zeros((d, c)) if zero else rng.standard_normal((d, c))
    b = np.zeros(d) if zero else rng.standard_normal(d)
    u = rng.standard_normal(d)
    return AttentionParams(*leaves(W, b, u), lam=lam, pool_transformed=transformed)


def transformed(x, p):
    return x @ p.W.data.T + p.b.data if p.pool_transformed else x


def attention_reference(x, p):
    h = x @ p.W.data.T + p.b.data
    e = np.tanh(h) @ p.u.data
    a = np.exp(p.lam * e - np.max(p.lam * e))
    a /= a.sum()
    return (a[:, None] * transformed(x, p)).sum(axis=0), a


@pytest.mark.parametrize("flag", [False, True])
def test_singleton_set(flag):
    rng = np.random.default_rng(0)
    p = make_params(rng, 4, 3, 1.0, flag)
    x = rng.standard_normal((1, 4))
    out = attention_pool(Tensor(x), p)
    np.testing.assert_array_equal(out.weights.data, [1.0])
    np.testing.assert_allclose(out.pooled.data, transformed(x, p)[0], atol=1e-14)


@pytest.mark.parametrize("flag", [False, True])
def test_identical_elements(flag):
    rng = np.random.default_rng(1)
    p = make_params(rng, 4, 5, 0.6, flag)
    x = np.tile(rng.standard_normal(4), (6, 1))
    out = attention_pool(Tensor(x), p)
    np.testing.assert_allclose(out.pooled.data, transformed(x, p)[0], atol=1e-12)


def test_zero_parameters_give_mean():
    rng = np.random.default_rng(2)
    p = make_params(rng, 3, 3, 1.0, False, zero=True)
    x = rng.standard_normal((5, 3))
    out = attention_pool(Tensor(x), p)
    np.testing.assert_allclose(out.weights.data, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(out.pooled.data, x.mean(axis=0), atol=1e-12)


def test_matches_reference_formula():
    rng = np.random.default_rng(3)
    for flag in (False, True):
        p = make_params(rng, 6, 4, 0.8, flag)
        x = rng.standard_normal((9, 6))
        out = attention_pool(Tensor(x), p)
        pooled, a = attention_reference(x, p)
        np.testing.assert_allclose(out.weights.data, a, atol=1e-12)
        np.testing.assert_allclose(out.pooled.data, pooled, atol=1e-12)


def test_errors():
    rng = np.random.default_rng(4)
    p = make_params(rng, 3, 2, 1.0, False)
    with pytest.raises(DimensionError):
        attention_pool(Tensor(np.zeros((4, 5))), p)
    with pytest.raises(InputError):
        attention_pool(Tensor(np.zeros(3)), p)
    with pytest.raises(ValueError):
        AttentionParams(*leaves(np.zeros((2, 3)), np.zeros(2), np.zeros(2)), lam=1.5)


case = st.tuples(st.integers(1, 12), st.integers(1, 6), st.integers(1, 6), st.floats(0, 1),
                 st.booleans(), st.integers(0, 2**31 - 1))


@settings(max_examples=100, deadline=None)
@given(case)
def test_invariants(args):
    n, c, d, lam, flag, seed = args
    rng = np.random.default_rng(seed)
    p = make_params(rng, c, d, lam, flag)
    x = rng.standard_normal((n, c)) * 3
    out = attention_pool(Tensor(x), p)
    w = out.weights.data
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-10
    src = transformed(x, p)
    assert np.all(out.pooled.data <= src.max(axis=0) + 1e-10)
    assert np.all(out.pooled.data >= src.min(axis=0) - 1e-10)
    perm = rng.permutation(n)
    out_p = attention_pool(Tensor(x[perm]), p)
    np.testing.assert_allclose(out_p.weights.data, w[perm], atol=1e-10)
    np.testing.assert_allclose(out_p.pooled.data, out.pooled.data, atol=1e-10)
    p.lam = 0.0
    np.testing.assert_allclose(attention_pool(Tensor(x), p).pooled.data, src.mean(axis=0), atol=1e-10)


@pytest.mark.parametrize("flag", [False, True])
def test_gradients(flag):
    rng = np.random.default_rng(5)
    p = make_params(rng, 5, 4, 0.9, flag)
    (x,) = leaves(rng.standard_normal((7, 5)))

    def fn(x, W, b, u):
        q = AttentionParams(W, b, u, lam=0.9, pool_transformed=flag)
        return attention_pool(x, q).pooled

    res = gradcheck(fn, [x, p.W, p.b, p.u], n_coords=100)
    assert res.passed(1e-4), res


def test_flatten_grid_order_and_round_trip():
    g = Tensor(np.arange(6.0).reshape(2, 1, 3))
    flat = flatten_grid(g)
    np.testing.assert_array_equal(flat.data, [[0, 3], [1, 4], [2, 5]])
    grid = np.random.default_rng(6).standard_normal((4, 3, 5))
    flat = flatten_grid(Tensor(grid))
    assert flat.shape == (15, 4)
    np.testing.assert_array_equal(unflatten_grid(flat, 3, 5).data, grid)
    # element i sits at (f, t) = divmod(i, T)
    np.testing.assert_array_equal(flat.data[7], grid[:, 1, 2])


def test_weights_per_time_and_csv(tmp_path):
    w = np.full(6, 1 / 6)
    per_t = weights_per_time(w, (2, 3))
    np.testing.assert_allclose(per_t, [1 / 3] * 3)
    rows = [("s1", "audio", i, v) for i, v in enumerate(per_t)] + [("s1", "video", 0, 1.0)]
    write_weights_csv(tmp_path / "w.csv", rows)
    back = read_weights_csv(tmp_path / "w.csv")
    assert back[0] == ("s1", "audio", 0, per_t[0])
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "sample_id,stream,index,weight"
