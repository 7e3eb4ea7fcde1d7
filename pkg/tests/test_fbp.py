import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbpfusion.errors import DimensionError
from fbpfusion.fbp import FBPParams, bilinear_pool_naive, fbp_forward, reconstruct_W
from fbpfusion.gradcheck import gradcheck, leaves
from fbpfusion.tensor import Tensor


def random_params(rng, m, n, k, o, p=0.0):
    U, V = leaves(rng.standard_normal((m, k * o)), rng.standard_normal((n, k * o)))
    return FBPParams(U, V, k, o, p)


def test_naive_examples():
    W = np.zeros((2, 2, 1))
    W[:, :, 0] = np.eye(2)
    assert bilinear_pool_naive([1, 2], [3, 4], W)[0] == 11
    assert bilinear_pool_naive([1, 2], [3, 4], np.ones((2, 2, 1)))[0] == 21
    W = np.random.default_rng(0).standard_normal((3, 4, 2))
    np.testing.assert_array_equal(bilinear_pool_naive(np.zeros(3), np.ones(4), W), [0, 0])
    with pytest.raises(DimensionError):
        bilinear_pool_naive([1, 2], [3], W)


def test_all_ones_factor_case():
    p = FBPParams(Tensor([[1.0], [1.0]]), Tensor([[1.0], [1.0]]), k=1, o=1, dropout_p=0.0)
    z = fbp_forward(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), p, normalize=False)
    assert z.data.tolist() == [21.0]


def test_zero_audio_vector():
    p = random_params(np.random.default_rng(1), 3, 4, 2, 3)
    a, v = Tensor(np.zeros(3)), Tensor(np.ones(4))
    np.testing.assert_array_equal(fbp_forward(a, v, p, normalize=False).data, 0)
    np.testing.assert_array_equal(fbp_forward(a, v, p).data, 0)


def test_reconstruct_basis_case():
    U = np.zeros((3, 1)); U[0, 0] = 1
    V = np.zeros((2, 1)); V[0, 0] = 1
    W = reconstruct_W(FBPParams(Tensor(U), Tensor(V), 1, 1, 0.0))
    expected = np.zeros((3, 2, 1)); expected[0, 0, 0] = 1
    np.testing.assert_array_equal(W, expected)


def test_reconstructed_rank_at_most_k():
    rng = np.random.default_rng(2)
    p = random_params(rng, 6, 7, 2, 3)
    W = reconstruct_W(p)
    for i in range(3):
        assert np.linalg.matrix_rank(W[:, :, i]) <= 2


def test_factorization_equivalence_fixed():
    rng = np.random.default_rng(3)
    p = random_params(rng, 5, 7, 3, 4)
    a, v = rng.standard_normal(5), rng.standard_normal(7)
    z = fbp_forward(Tensor(a), Tensor(v), p, normalize=False).data
    np.testing.assert_allclose(z, bilinear_pool_naive(a, v, reconstruct_W(p)), atol=1e-10)


dims = st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))


@settings(max_examples=100, deadline=None)
@given(dims, st.floats(-10, 10))
def test_fbp_properties(d, c):
    m, n, k, o, seed = d
    rng = np.random.default_rng(seed)
    p = random_params(rng, m, n, k, o)
    a, v = rng.standard_normal(m), rng.standard_normal(n)
    z = fbp_forward(Tensor(a), Tensor(v), p, normalize=False).data
    assert z.shape == (o,)
    np.testing.assert_allclose(z, bilinear_pool_naive(a, v, reconstruct_W(p)), atol=1e-10)
    np.testing.assert_allclose(fbp_forward(Tensor(c * a), Tensor(v), p, normalize=False).data, c * z, atol=1e-10)
    np.testing.assert_allclose(fbp_forward(Tensor(a), Tensor(c * v), p, normalize=False).data, c * z, atol=1e-10)
    # invariance needs the scaled vector to stay above the pass-through epsilon
    if np.linalg.norm(z) > 1e-6 and c > 1e-3:
        base = fbp_forward(Tensor(a), Tensor(v), p).data
        np.testing.assert_allclose(fbp_forward(Tensor(c * a), Tensor(v), p).data, base, atol=1e-10)
        assert abs(np.linalg.norm(base) - 1) < 1e-10


def test_dropout_only_in_training():
    rng = np.random.default_rng(4)
    p = random_params(rng, 4, 4, 2, 8, p=0.5)
    a, v = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    eval_z = fbp_forward(a, v, p, training=False).data
    np.testing.assert_array_equal(fbp_forward(a, v, p, training=False).data, eval_z)
    train_z = fbp_forward(a, v, p, training=True, rng=7).data
    assert not np.allclose(train_z, eval_z)
    np.testing.assert_array_equal(fbp_forward(a, v, p, training=True, rng=7).data, train_z)


def test_gradients_all_inputs():
    rng = np.random.default_rng(5)
    p = random_params(rng, 5, 6, 3, 4)
    a, v = leaves(rng.standard_normal(5), rng.standard_normal(6))

    def fn(a, v, U, V):
        return fbp_forward(a, v, FBPParams(U, V, 3, 4, 0.0))

    res = gradcheck(fn, [a, v, p.U, p.V], n_coords=100)
    assert res.passed(1e-4), res


def test_param_validation():
    with pytest.raises(DimensionError):
        FBPParams(Tensor(np.zeros((3, 5))), Tensor(np.zeros((2, 6))), k=2, o=3)
    p = random_params(np.random.default_rng(6), 3, 2, 2, 2)
    with pytest.raises(DimensionError):
        fbp_forward(Tensor(np.zeros(4)), Tensor(np.zeros(2)), p)
