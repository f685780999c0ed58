import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structprune import _accel
from structprune.autodiff import forward, gradient, hvp, jacobian
from structprune.data import Batch
from structprune.errors import InputError
from structprune.models import Network, convnet_toy, mlp_toy, restoy
from structprune.saliency import (QMatrix, RMatrix, SaliencyVector, contract_r, first_order_saliency, q_matrix,
                                  r_matrix, read_matrix, sosp_h_saliency, write_matrix)
from structprune.structures import extract_theta_s, segment, theta_struc

from conftest import linear_net, trained_like_params


# -- loss curvature ---------------------------------------------------------------

def test_r_matrix_example():
    R = r_matrix(np.zeros(2), "cross_entropy").dense()
    np.testing.assert_allclose(R, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    np.testing.assert_array_equal(r_matrix(np.zeros(3), "squared").dense(3), np.eye(3))
    with pytest.raises(InputError):
        r_matrix(np.zeros(2), "hinge")


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 16), seed=st.integers(0, 10 ** 6), scale=st.floats(0.1, 20))
def test_softmax_r_rows_sum_to_zero_and_psd(d, seed, scale):
    rng = np.random.default_rng(seed)
    R = r_matrix(scale * rng.normal(size=d), "cross_entropy").dense()
    np.testing.assert_allclose(R.sum(axis=1), 0, atol=1e-14)
    assert np.linalg.eigvalsh(R).min() >= -1e-14
    np.testing.assert_allclose(R, R.T, atol=0)


@pytest.mark.parametrize("d", [2, 10, 16, 64])
def test_contract_r_matches_dense(d):
    rng = np.random.default_rng(d)
    for _ in range(50):
        R = r_matrix(3 * rng.normal(size=d), "cross_entropy")
        u, v = rng.normal(size=(2, d))
        dense = u @ R.dense() @ v
        assert abs(contract_r(u, v, R) - dense) <= 1e-12 * max(1.0, abs(dense))
    assert contract_r(u, v, RMatrix("identity")) == pytest.approx(u @ v, rel=1e-14)


# -- Q matrix ----------------------------------------------------------------------

def dense_q_oracle(net, params, x, t, seg, kind, buffers=None):
    """Q from explicit per-sample Jacobians and dense R matrices."""
    n = len(x)
    thetas = np.stack([extract_theta_s(params, seg, s).to_dense() for s in range(seg.S)])
    acc = np.zeros((seg.S, seg.S))
    for i in range(n):
        jac = jacobian(net, params, x[i], buffers)
        out = forward(net, params, x[i:i + 1], buffers)[0]
        R = r_matrix(out, kind).dense(net.output_dim)
        phi = jac @ thetas.T                     # (D, S)
        acc += phi.T @ R @ phi
    g = gradient(net, params, x, t, kind, buffers)
    lam1 = np.abs(thetas @ g)
    return 0.5 * np.abs(acc / n) + np.diag(lam1)


@pytest.mark.parametrize("model", [
    mlp_toy(4, 3, (5, 5)),
    convnet_toy((2, 4, 4), 3, (2, 2, 1, 1, 2, 2)),
    restoy((2, 4, 4), 3, (2, 2, 2), 1),
], ids=["mlp", "convnet", "restoy"])
@pytest.mark.parametrize("kind", ["cross_entropy", "squared"])
def test_q_matches_dense_oracle(model, kind):
    net = Network(model)
    seg = segment(net)
    assert seg.S <= 16
    p, b = trained_like_params(net, 11)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6,) + net.input_shape)
    t = rng.integers(0, 3, 6) if kind == "cross_entropy" else rng.normal(size=(6, 3))
    q = q_matrix(net, p, Batch(x, t), seg, kind, b, chunk=4)
    ref = dense_q_oracle(net, p, x, t, seg, kind, b)
    np.testing.assert_allclose(q.values, ref, rtol=1e-9, atol=1e-13)
    np.testing.assert_allclose(q.values, q.values.T, atol=0)
    assert np.all(q.values >= 0)


@pytest.mark.parametrize("kind", ["cross_entropy", "squared"])
def test_gauss_newton_exact_for_linear_layer(kind):
    # the first layer enters the outputs linearly, so theta_s^T H theta_t is the GN form exactly
    net = linear_net()
    seg = segment(net)
    rng = np.random.default_rng(0)
    p = rng.normal(size=net.P)
    x = rng.normal(size=(8, 4))
    t = rng.integers(0, 3, 8) if kind == "cross_entropy" else rng.normal(size=(8, 3))
    q = q_matrix(net, p, Batch(x, t), seg, kind)
    for s in range(seg.S):
        hs = hvp(net, p, x, t, kind, extract_theta_s(p, seg, s).to_dense())
        for u in range(seg.S):
            exact = extract_theta_s(p, seg, u).to_dense() @ hs
            gn = q.values[s, u] - (q.first_order[s] if s == u else 0.0)
            assert gn == pytest.approx(0.5 * abs(exact), rel=1e-10, abs=1e-14)


def test_q_backends_agree():
    net = Network(mlp_toy(4, 3, (6, 5)))
    seg = segment(net)
    p = net.init_params(1)
    rng = np.random.default_rng(1)
    data = Batch(rng.normal(size=(30, 4)), rng.integers(0, 3, 30))
    a = q_matrix(net, p, data, seg, "cross_entropy", kernels=_accel.NUMPY_KERNELS)
    if _accel.NUMBA_KERNELS is not None:
        b = q_matrix(net, p, data, seg, "cross_entropy", kernels=_accel.NUMBA_KERNELS)
        np.testing.assert_allclose(a.values, b.values, rtol=1e-11, atol=1e-14)


def test_q_invariant_to_sample_order():
    net = Network(mlp_toy(4, 3, (6,)))
    seg = segment(net)
    p = net.init_params(3)
    rng = np.random.default_rng(3)
    x, t = rng.normal(size=(20, 4)), rng.integers(0, 3, 20)
    perm = rng.permutation(20)
    a = q_matrix(net, p, Batch(x, t), seg, "cross_entropy").values
    b = q_matrix(net, p, Batch(x[perm], t[perm]), seg, "cross_entropy").values
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_q_empty_batch_rejected():
    with pytest.raises(InputError):
        Batch(np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_q_records_phase_timings():
    net = Network(mlp_toy(4, 3, (6,)))
    seg = segment(net)
    tim = {}
    q_matrix(net, net.init_params(0), Batch(np.ones((3, 4)), np.array([0, 1, 2])), seg, "cross_entropy",
             timings=tim)
    assert set(tim) == {"projections", "accumulate"}


# -- SOSP-H ------------------------------------------------------------------------

def test_sosp_h_matches_explicit_hessian():
    net = Network(convnet_toy((1, 4, 4), 2, (2, 2, 2, 2, 2, 2)))
    seg = segment(net)
    p, b = trained_like_params(net, 4)
    rng = np.random.default_rng(5)
    x, t = rng.normal(size=(5, 1, 4, 4)), rng.integers(0, 2, 5)
    sal = sosp_h_saliency(net, p, Batch(x, t), seg, "cross_entropy", b)
    h = 1e-5
    H = np.zeros((net.P, net.P))
    for i in range(net.P):
        e = np.zeros(net.P)
        e[i] = h
        H[:, i] = (gradient(net, p + e, x, t, "cross_entropy", b)
                   - gradient(net, p - e, x, t, "cross_entropy", b)) / (2 * h)
    H = 0.5 * (H + H.T)
    g = gradient(net, p, x, t, "cross_entropy", b)
    hts = H @ theta_struc(p, seg)
    for s in range(seg.S):
        th = extract_theta_s(p, seg, s).to_dense()
        assert sal.first_order[s] == pytest.approx(abs(th @ g), rel=1e-12)
        assert sal.second_order[s] == pytest.approx(0.5 * abs(th @ hts), rel=1e-6, abs=1e-10)
    np.testing.assert_allclose(sal.total, sal.first_order + sal.second_order)


def test_sosp_h_with_zero_hessian_is_first_order():
    net = Network(mlp_toy(4, 3, (6, 5)))
    seg = segment(net)
    p = net.init_params(2)
    rng = np.random.default_rng(2)
    data = Batch(rng.normal(size=(10, 4)), rng.integers(0, 3, 10))
    zero = sosp_h_saliency(net, p, data, seg, "cross_entropy", hvp_fn=lambda v: np.zeros_like(v))
    fo = first_order_saliency(net, p, data, seg, "cross_entropy")
    np.testing.assert_array_equal(zero.total, fo.total)
    np.testing.assert_array_equal(zero.second_order, 0)


def test_sosp_h_chunking_does_not_change_result():
    net = Network(mlp_toy(4, 3, (6,)))
    seg = segment(net)
    p = net.init_params(5)
    rng = np.random.default_rng(5)
    data = Batch(rng.normal(size=(21, 4)), rng.integers(0, 3, 21))
    a = sosp_h_saliency(net, p, data, seg, "cross_entropy", chunk=4).total
    b = sosp_h_saliency(net, p, data, seg, "cross_entropy", chunk=100).total
    np.testing.assert_allclose(a, b, rtol=1e-12)


# -- serialisation -------------------------------------------------------------------

def test_matrix_file_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(5, 5))
    write_matrix(tmp_path / "q.bin", m)
    np.testing.assert_array_equal(read_matrix(tmp_path / "q.bin"), m)
    raw = (tmp_path / "q.bin").read_bytes()
    assert len(raw) == 8 + 8 * 25
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(InputError):
        read_matrix(tmp_path / "bad.bin")


def test_containers_round_trip():
    sv = SaliencyVector(np.array([1.0, 2.0]), np.array([0.5, 0.0]), "sosp_h")
    back = SaliencyVector.from_dict(sv.to_dict())
    np.testing.assert_array_equal(back.total, sv.total)
    q = QMatrix(np.eye(2), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(QMatrix.from_dict(q.to_dict()).values, q.values)
