import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ebrns.beliefs import GaussianBelief, TrendEstimate, covariance_ok
from ebrns.classic import default_prior, ekf_predict, ekf_update, rts_smooth_step, run_classic
from ebrns.models import StateSpaceModel, make_builtin
from ebrns.tensor import Tensor, matmul

from oracles import joint_gaussian_filter, joint_gaussian_smoother, sample_linear


def linear_model(A, C, Q, R, name="lin"):
    A, C = np.asarray(A, float), np.asarray(C, float)
    return StateSpaceModel(
        name, A.shape[0], C.shape[0],
        lambda x, k: matmul(A, x), lambda x, k: matmul(C, x),
        Q=np.asarray(Q, float), R=np.asarray(R, float),
        transition_jacobian=lambda x, k: Tensor(A), measurement_jacobian=lambda x, k: Tensor(C),
        linear=True,
    )


def scalar_model(q=1.0, r=1.0):
    return linear_model([[1.0]], [[1.0]], [[q]], [[r]])


def test_predict_identity_transition():
    m = scalar_model(q=1.0)
    prior = GaussianBelief(np.array([[2.0]]), np.array([[3.0]]))
    out = ekf_predict(prior, m, 1)
    assert out.mean[0, 0] == 2.0 and out.cov[0, 0] == 4.0
    out = ekf_predict(prior, m, 1, TrendEstimate(np.array([[0.5]]), np.array([[0.0]])))
    assert out.mean[0, 0] == 2.5


def test_predict_cv():
    m = make_builtin("cv2d-linear", dt=4)
    out = ekf_predict(GaussianBelief(np.array([0.0, 0, 1, 2]), np.eye(4)), m, 1)
    assert np.array_equal(out.mean.ravel(), [4.0, 8.0, 1.0, 2.0])


def test_scalar_update_closed_form():
    m = scalar_model(r=1.0)
    post, innov, Pz, Pxz = ekf_update(GaussianBelief([[0.0]], [[1.0]]), [1.0], m, 0)
    assert post.mean[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert innov[0, 0] == 1.0 and Pz[0, 0] == 2.0 and Pxz[0, 0] == 1.0


def test_uninformative_and_zero_innovation():
    m = scalar_model(r=1e12)
    prior = GaussianBelief([[3.0]], [[2.0]])
    post = ekf_update(prior, [10.0], m, 0)[0]
    assert abs(post.mean[0, 0] - 3.0) < 1e-6 and abs(post.cov[0, 0] - 2.0) < 1e-6
    post = ekf_update(prior, [3.0], scalar_model(), 0)[0]
    assert post.mean[0, 0] == 3.0


def test_precise_measurement_pulls_to_z():
    eps = 1e-8
    m = linear_model(np.eye(2), np.eye(2), np.eye(2), eps * np.eye(2))
    z = np.array([1.0, -2.0])
    post = ekf_update(GaussianBelief([0.0, 0.0], np.eye(2)), z, m, 0)[0]
    assert np.max(np.abs(post.mean.ravel() - z)) < 10 * eps


def test_smooth_step_trivial_cases():
    f = GaussianBelief([[1.0]], [[1.0]])
    pred = GaussianBelief([[1.0]], [[2.0]])
    out = rts_smooth_step(f, pred, pred, np.eye(1))
    assert np.array_equal(out.mean, f.mean) and np.allclose(out.cov, f.cov)
    # gain = 1 * 1 / 2
    sm = GaussianBelief([[3.0]], [[2.0]])
    out = rts_smooth_step(f, pred, sm, np.eye(1))
    assert out.mean[0, 0] == pytest.approx(1.0 + 0.5 * 2.0)


def test_k2_scalar_against_joint_conditioning():
    m = scalar_model(q=0.7, r=1.3)
    prior = GaussianBelief([[0.2]], [[2.0]])
    z = np.array([[0.5], [1.5]])
    c = run_classic(z, m, prior)
    mu, S = joint_gaussian_smoother(np.eye(1), np.eye(1), m.Q, m.R, prior.mean, prior.cov, z)
    assert np.max(np.abs(c.smooth_mean[..., 0] - mu)) < 1e-10
    assert np.max(np.abs(c.smooth_cov - S)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(1, 2))
def test_run_classic_matches_joint_oracle(seed, K, n):
    rng = np.random.default_rng(seed)
    A = np.eye(n) + 0.3 * rng.normal(size=(n, n))
    C = rng.normal(size=(1, n)) + 0.5
    Lq = rng.normal(size=(n, n)) * 0.5
    Q = Lq @ Lq.T + 0.1 * np.eye(n)
    R = np.array([[rng.uniform(0.2, 2.0)]])
    m0 = rng.normal(size=(n, 1))
    P0 = np.eye(n) * rng.uniform(0.5, 3.0)
    m = linear_model(A, C, Q, R)
    _, z = sample_linear(A, C, Q, R, m0, P0, K, rng)
    c = run_classic(z, m, GaussianBelief(m0, P0))
    mu, S = joint_gaussian_smoother(A, C, Q, R, m0, P0, z)
    fm, fS = joint_gaussian_filter(A, C, Q, R, m0, P0, z)
    assert np.max(np.abs(c.smooth_mean[..., 0] - mu)) < 1e-8
    assert np.max(np.abs(c.smooth_cov - S)) < 1e-8
    assert np.max(np.abs(c.filt_mean[..., 0] - fm)) < 1e-8
    assert np.max(np.abs(c.filt_cov - fS)) < 1e-8


def test_filter_converges_on_constant_state():
    m = scalar_model(q=1e-6, r=4.0)
    first, last = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        z = 5.0 + 2.0 * rng.standard_normal((30, 1))
        c = run_classic(z, m, mode="filter")
        first.append((c.filt_mean[0, 0, 0] - 5.0) ** 2)
        last.append((c.filt_mean[-1, 0, 0] - 5.0) ** 2)
    assert np.mean(last) < np.mean(first)


def test_smoothed_trace_not_above_filtered_on_cv():
    m = make_builtin("cv2d-linear")
    rng = np.random.default_rng(1)
    x0 = np.array([1000.0, -500.0, 20.0, 5.0])
    P0 = np.diag([1e4, 1e4, 100.0, 100.0])
    _, z = sample_linear(m.F(x0).value, m.H(x0).value, m.Q, m.R, x0, P0, 60, rng)
    c = run_classic(z, m)
    tr_s = np.trace(c.smooth_cov, axis1=1, axis2=2)
    tr_f = np.trace(c.filt_cov, axis1=1, axis2=2)
    assert np.all(tr_s[1:-1] <= tr_f[1:-1] + 1e-9)
    assert np.array_equal(c.smooth_mean[-1], c.filt_mean[-1])
    for P in list(c.filt_cov) + list(c.smooth_cov) + list(c.pred_cov):
        assert covariance_ok(P)


def test_run_classic_requires_two_frames():
    with pytest.raises(ValueError):
        run_classic(np.zeros((1, 1)), scalar_model())


def test_default_prior():
    m = make_builtin("cv2d-radar")
    p = default_prior(m, np.array([5000.0, np.arctan(4 / 3)]))
    assert np.allclose(p.mean.ravel(), [3000.0, 4000.0, 0.0, 0.0])
    assert np.array_equal(p.cov, 1e4 * 150.0 ** 2 * np.eye(4))
    lin = make_builtin("cv2d-linear")
    p = default_prior(lin, np.array([7.0, -3.0]))
    assert np.allclose(p.mean.ravel(), [7.0, -3.0, 0.0, 0.0])


def test_radar_innovation_wraps():
    m = make_builtin("cv2d-radar")
    pred = GaussianBelief(np.array([-1000.0, 1.0, 0.0, 0.0]), np.eye(4) * 100.0)
    z = np.array([1000.0, -np.pi + 1e-3])
    _, innov, _, _ = ekf_update(pred, z, m, 0)
    assert -np.pi < innov[1, 0] <= np.pi
    assert abs(innov[1, 0]) < 0.01
