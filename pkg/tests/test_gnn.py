import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from growgnn.gnn import (
    Activation, LossKind, ParamTensor, export_params_csv, filter_apply, gnn_backward, gnn_forward,
    grad_norm_bound, load_params, loss_and_grad, output_jacobian, project_nonamplifying,
    sample_loss_grad, save_params, spectral_response,
)
from growgnn.graphon import Graphon, sample_graph

PATH2 = np.array([[0.0, 1.0], [1.0, 0.0]]) / 2


def random_instance(seed, act=Activation.TANH):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    L = int(rng.integers(1, 4))
    K = int(rng.integers(1, 5))
    dims = tuple(int(d) for d in rng.integers(1, 5, size=L + 1))
    params = ParamTensor(dims, K, [rng.normal(0, 0.5, size=(K, a, b))
                                   for a, b in zip(dims[:-1], dims[1:])])
    S = sample_graph(Graphon.constant(0.6), n, seed).gso()
    X = rng.normal(size=(n, dims[0]))
    Y = rng.normal(size=(n, dims[-1]))
    return params, S, X, Y


def fd_gradient(params, S, X, Y, act, h=1e-6):
    flat = params.flat()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fu = loss_and_grad(Y, gnn_forward(params.with_flat(up), S, X, act)[0])[0]
        fd = loss_and_grad(Y, gnn_forward(params.with_flat(dn), S, X, act)[0])[0]
        grad[i] = (fu - fd) / (2 * h)
    return grad


def test_param_tensor_shapes():
    p = ParamTensor.zeros((3, 4, 2), 5)
    assert p.L == 2
    assert p.size == 5 * 3 * 4 + 5 * 4 * 2
    assert [c.shape for c in p.coeffs] == [(5, 3, 4), (5, 4, 2)]
    with pytest.raises(ValueError):
        ParamTensor((3, 4), 2, [np.zeros((2, 4, 3))])


def test_filter_identity_and_shift():
    X = np.arange(6.0).reshape(3, 2)
    S = np.ones((3, 3)) / 3
    assert np.array_equal(filter_apply(S, X, [np.eye(2)]), X)
    out = filter_apply(PATH2, np.array([[1.0], [0.0]]), [np.array([[0.0]]), np.array([[1.0]])])
    assert np.allclose(out.ravel(), [0.0, 0.5])
    assert not filter_apply(S, np.zeros((3, 2)), [np.ones((2, 2))] * 3).any()


def test_filter_shape_errors():
    with pytest.raises(ValueError):
        filter_apply(np.eye(3), np.ones((4, 1)), [np.ones((1, 1))])
    with pytest.raises(ValueError):
        filter_apply(np.eye(3), np.ones((3, 2)), [np.ones((1, 1))])


@pytest.mark.parametrize("seed", range(10))
def test_filter_matches_explicit_powers(seed):
    rng = np.random.default_rng(seed)
    n, fin, fout, K = int(rng.integers(1, 7)), 2, 3, int(rng.integers(1, 5))
    S = rng.uniform(size=(n, n))
    S = (S + S.T) / (2 * n)
    X = rng.normal(size=(n, fin))
    taps = [rng.normal(size=(fin, fout)) for _ in range(K)]
    want = sum(np.linalg.matrix_power(S, k) @ X @ taps[k] for k in range(K))
    assert np.allclose(filter_apply(S, X, taps), want, rtol=0, atol=1e-13)


def test_forward_examples():
    p = ParamTensor((1, 1), 1, [np.ones((1, 1, 1))])
    x = np.array([[0.3], [-1.2]])
    assert np.array_equal(gnn_forward(p, PATH2, x, Activation.IDENTITY)[0], x)
    p2 = ParamTensor((1, 1), 2, [np.array([[[0.0]], [[1.0]]])])
    y, _ = gnn_forward(p2, PATH2, np.array([[1.0], [0.0]]), Activation.TANH)
    assert np.allclose(y.ravel(), [0.0, 0.462117], atol=1e-6)


@pytest.mark.parametrize("act", list(Activation))
def test_zero_input_gives_zero_output(act):
    params, S, X, _ = random_instance(3)
    y, _ = gnn_forward(params, S, np.zeros_like(X), act)
    assert not y.any()


def test_cache_replays_forward():
    params, S, X, _ = random_instance(5)
    y, cache = gnn_forward(params, S, X)
    assert len(cache.pre) == params.L
    x = X
    for l, H in enumerate(params.coeffs):
        z = sum(cache.shifted[l][k] @ H[k] for k in range(params.K))
        assert np.array_equal(z, cache.pre[l])
        x = np.tanh(z)
        assert np.array_equal(x, cache.post[l])
    assert np.array_equal(x, y)


def test_backward_zero_upstream():
    params, S, X, _ = random_instance(1)
    y, cache = gnn_forward(params, S, X)
    g = gnn_backward(cache, S, np.zeros_like(y), params)
    assert g.norm() == 0.0


def test_backward_scalar_example():
    p = ParamTensor((1, 1), 1, [np.ones((1, 1, 1))])
    x = np.array([[1.0], [0.0]])
    _, g = sample_loss_grad(p, PATH2, x, np.zeros((2, 1)), Activation.IDENTITY,
                            kind=LossKind.HALF_SQUARE)
    assert g.coeffs[0][0, 0, 0] == pytest.approx(1.0)


def test_backward_rejects_stale_cache():
    params, S, X, _ = random_instance(2)
    y, cache = gnn_forward(params, S, X)
    bigger = np.zeros((S.shape[0] + 1,) * 2)
    with pytest.raises(ValueError):
        gnn_backward(cache, bigger, np.zeros((S.shape[0] + 1, y.shape[1])), params)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("act", [Activation.TANH, Activation.IDENTITY])
def test_backward_matches_finite_differences(seed, act):
    params, S, X, Y = random_instance(seed, act)
    _, g = sample_loss_grad(params, S, X, Y, act)
    fd = fd_gradient(params, S, X, Y, act)
    err = np.abs(g.flat() - fd) / max(1.0, np.linalg.norm(fd))
    assert err.max() <= 1e-4


def test_readout_override_gradient():
    params, S, X, Y = random_instance(7)
    _, g = sample_loss_grad(params, S, X, Y, Activation.TANH, Activation.IDENTITY)
    flat = params.flat()
    h = 1e-6
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        f = lambda v: loss_and_grad(Y, gnn_forward(params.with_flat(v), S, X, "tanh", "identity")[0])[0]  # noqa: E731
        fd[i] = (f(flat + e) - f(flat - e)) / (2 * h)
    assert np.allclose(g.flat(), fd, atol=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_permutation_equivariance(seed):
    params, S, X, _ = random_instance(seed)
    perm = np.random.default_rng(seed + 100).permutation(S.shape[0])
    P = np.eye(S.shape[0])[perm]
    y, _ = gnn_forward(params, S, X)
    yp, _ = gnn_forward(params, P @ S @ P.T, P @ X)
    assert np.allclose(yp, P @ y, rtol=0, atol=1e-12)


def test_loss_examples():
    v, d = loss_and_grad(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert v == 0.0 and not d.any()
    v, d = loss_and_grad(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert v == pytest.approx(0.25)
    assert np.allclose(d, [-0.5, 0.0])
    assert loss_and_grad(0 * np.ones(3), 0 * np.arange(3.0))[0] == 0.0
    with pytest.raises(ValueError):
        loss_and_grad(np.ones(2), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_loss_gradient_is_one_lipschitz(vals):
    y = np.array(vals[:2])
    a, b = np.array(vals[2:]), np.array(vals[2:]) + 0.37
    _, ga = loss_and_grad(y, a)
    _, gb = loss_and_grad(y, b)
    assert np.linalg.norm(ga - gb) <= np.linalg.norm(a - b) + 1e-12


def test_spectral_response_examples():
    assert spectral_response([1, 0, 0], 0.77) == 1
    assert spectral_response([0, 1], 0.3) == pytest.approx(0.3)
    assert spectral_response([1, 2, 3], 0.5) == pytest.approx(2.75)


def test_spectral_response_matches_eigen_filter():
    rng = np.random.default_rng(0)
    S = sample_graph(Graphon.additive(), 12, 1).gso()
    taps = rng.normal(size=4)
    lam, V = np.linalg.eigh(S)
    H = sum(h * np.linalg.matrix_power(S, k) for k, h in enumerate(taps))
    want = V @ np.diag([spectral_response(taps, x) for x in lam]) @ V.T
    assert np.allclose(H, want, atol=1e-12)


def test_projection_examples():
    def one(taps):
        p = ParamTensor((1, 1), len(taps), [np.array(taps, dtype=float).reshape(-1, 1, 1)])
        return project_nonamplifying(p, 1e-3).coeffs[0].ravel()

    assert np.array_equal(one([0.2, 0.3]), [0.2, 0.3])
    assert np.allclose(one([2.0, 0.0]), [0.999, 0.0])
    assert np.array_equal(one([0.0, 0.0]), [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_bounds_frequency_response(seed):
    rng = np.random.default_rng(seed)
    p = ParamTensor((2, 3), 4, [rng.normal(0, 3, size=(4, 2, 3))])
    q = project_nonamplifying(p, 1e-3)
    lams = np.linspace(-1, 1, 101)
    for i in range(2):
        for j in range(3):
            resp = [abs(spectral_response(q.coeffs[0][:, i, j], x)) for x in lams]
            assert max(resp) <= 1 - 1e-3 + 1e-12


def test_grad_norm_bound_examples():
    assert grad_norm_bound(1, 1, 1) == 1
    assert grad_norm_bound(2, 2, 4) == 32
    assert grad_norm_bound(3, 1, 9) == 3


def test_init_is_feasible():
    p = ParamTensor.init((1, 8, 8, 1), 3, seed=4)
    for H in p.coeffs:
        assert np.sum(np.abs(H), axis=0).max() < 1


def test_jacobian_rows_are_output_gradients():
    params, S, X, _ = random_instance(11)
    J = output_jacobian(params, S, X)
    y0, _ = gnn_forward(params, S, X)
    flat = params.flat()
    e = np.zeros_like(flat)
    e[0] = 1e-6
    y1, _ = gnn_forward(params.with_flat(flat + e), S, X)
    y2, _ = gnn_forward(params.with_flat(flat - e), S, X)
    assert np.allclose(J[:, 0], ((y1 - y2) / 2e-6).ravel(), atol=1e-7)
    assert J.shape == (y0.size, params.size)


def test_serialization_round_trip(tmp_path):
    p = ParamTensor.init((6, 16, 2), 3, seed=9)
    save_params(tmp_path / "p.bin", p, Activation.TANH, seed=9)
    q, header = load_params(tmp_path / "p.bin")
    assert header["L"] == 2 and header["K"] == 3 and header["dims"] == [6, 16, 2]
    assert header["activation"] == "tanh" and header["seed"] == 9
    assert np.array_equal(p.flat(), q.flat())
    export_params_csv(tmp_path / "p.csv", p)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "layer,tap,row,col,value"
    assert len(lines) == 1 + p.size
    assert float(lines[1].split(",")[-1]) == p.coeffs[0][0, 0, 0]


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a container")
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.bin")


def test_activation_properties():
    z = np.linspace(-3, 3, 61)
    for act in Activation:
        assert act(np.zeros(1))[0] == 0.0
    d = Activation.TANH.grad(z)
    assert d.max() <= 1.0
    assert math.isclose(float(Activation.TANH.grad(np.zeros(1))[0]), 1.0)
