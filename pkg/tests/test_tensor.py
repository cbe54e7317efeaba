import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ebrns import tensor as T
from ebrns.tensor import Tape, Tensor


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity_and_naive_oracle():
    A = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.mat_primitive("matmul", np.eye(3), A).value, A)
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    got = T.mat_primitive("matmul", a, b).value
    assert np.array_equal(got, naive_matmul(a, b))
    assert np.array_equal(got, [[17.0], [39.0]])


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (4, 2), elements=st.floats(-1e3, 1e3)))
def test_transpose_of_product(a, b):
    lhs = T.transpose(T.matmul(a, b)).value
    rhs = T.matmul(T.transpose(b), T.transpose(a)).value
    assert np.array_equal(lhs, rhs)
    assert np.array_equal(T.transpose(T.transpose(a)).value, a)


def test_shape_mismatch_names_kind():
    with pytest.raises(T.DimensionError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.DimensionError, match="add"):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_elementwise_fixed_points():
    z = np.zeros((2, 3))
    assert np.array_equal(T.elementwise("tanh", z).value, z)
    assert np.array_equal(T.elementwise("sigmoid", z).value, np.full((2, 3), 0.5))
    assert np.array_equal(T.elementwise("exp", z).value, np.ones((2, 3)))
    with pytest.raises(ValueError):
        T.elementwise("relu", z)


def test_spd_solve_examples():
    b = np.array([[1.0], [-2.0]])
    assert np.allclose(T.spd_solve(np.eye(2), b).value, b)
    x = T.spd_solve(np.diag([4.0, 9.0]), np.array([[2.0], [3.0]])).value
    assert np.allclose(x, [[0.5], [1 / 3]], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_spd_solve_residual(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 3))
    A = M @ M.T + 0.1 * np.eye(3)
    if np.linalg.cond(A) > 1e6:
        return
    B = rng.normal(size=(3, 2))
    X = T.spd_solve(A, B).value
    assert np.max(np.abs(A @ X - B)) < 1e-9 * max(np.max(np.abs(B)), 1e-300)


def test_spd_solve_jitter_and_failure():
    # rank deficient but PSD: rescued by jitter
    v = np.array([[1.0], [2.0]])
    A = v @ v.T
    T.spd_solve(A, v)
    with pytest.raises(T.SingularityError) as exc:
        T.spd_solve(np.diag([1.0, -1.0]), v)
    assert exc.value.jitter > 0
    with pytest.raises(T.DimensionError):
        T.spd_solve(np.ones((2, 3)), v)


def test_spd_solve_rejects_asymmetric():
    with pytest.raises(T.ContractError):
        T.spd_solve(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones((2, 1)))


def test_quadratic_and_tanh_gradients():
    tape = Tape()
    x0 = np.array([[1.0], [-2.0], [0.5]])
    x = tape.watch(x0)
    loss = T.matmul(T.transpose(x), x)
    (g,) = tape.backward(loss)
    assert np.array_equal(g, 2 * x0)

    tape = Tape()
    x = tape.watch(np.zeros((1, 1)))
    (g,) = T.tape_backward(tape, T.tanh(x))
    assert g[0, 0] == 1.0


def test_non_scalar_loss_is_contract_error():
    tape = Tape()
    x = tape.watch(np.ones((2, 1)))
    with pytest.raises(T.ContractError):
        tape.backward(T.tanh(x))


def test_unreached_parameter_gets_zero_adjoint():
    tape = Tape()
    a = tape.watch(np.ones((2, 1)))
    b = tape.watch(np.ones((3, 1)))
    grads = tape.backward(T.total(T.hadamard(a, a)))
    assert np.array_equal(grads[1], np.zeros((3, 1)))


def test_finite_diff_grad_examples():
    g = T.finite_diff_grad(lambda th: th[0] ** 2, np.array([3.0]), 1e-6)
    assert abs(g[0] - 6.0) < 1e-6
    assert np.array_equal(T.finite_diff_grad(lambda th: 7.0, np.ones(4)), np.zeros(4))
    with pytest.raises(ValueError):
        T.finite_diff_grad(lambda th: 0.0, np.ones(2), 0.0)


def _composite(params, const):
    """Scalar built from every differentiable primitive."""
    a, b, c, d = params
    spd = T.add(T.matmul(a, T.transpose(a)), np.eye(3))
    sol = T.spd_solve(T.symmetrize(spd), b)
    y = T.concat([T.tanh(sol), T.sigmoid(T.take(b, (slice(0, 2), slice(None))))], axis=-2)
    y = T.add(y, T.scale(T.exp(T.hadamard(d, d)), 0.3))
    r = T.sqrt(T.add(T.hadamard(c, c), 1.0))
    extra = T.div(T.matmul(T.diag_embed(r), r), T.add(T.take(T.diag_part(spd), (slice(0, 2), slice(None))), 1.0))
    ang = T.atan2(T.take(c, (slice(0, 1), slice(None))), T.add(T.take(c, (slice(1, 2), slice(None))), 3.0))
    w = T.wrap_angle(T.sub(ang, 4.0), [0])
    return T.add(T.add(T.total(T.hadamard(y, const)), T.total(extra)), T.total(w))


def test_tape_matches_finite_differences_on_every_primitive():
    rng = np.random.default_rng(3)
    shapes = [(3, 3), (3, 1), (2, 1), (5, 1)]
    values = [rng.uniform(-0.5, 0.5, s) for s in shapes]
    const = rng.normal(size=(5, 1))

    tape = Tape()
    params = [tape.watch(v) for v in values]
    grads = tape.backward(_composite(params, const))

    def f(theta):
        pos = 0
        ps = []
        for s in shapes:
            n = int(np.prod(s))
            ps.append(Tensor(theta[pos:pos + n].reshape(s)))
            pos += n
        return float(_composite(ps, const).value[0, 0])

    theta = np.concatenate([v.ravel() for v in values])
    fd = T.finite_diff_grad(f, theta, 1e-6)
    ad = np.concatenate([g.ravel() for g in grads])
    rel = np.abs(ad - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-8)
    assert np.max(rel) < 1e-4


def test_replay_is_bit_identical():
    rng = np.random.default_rng(9)
    values = [rng.uniform(-0.5, 0.5, s) for s in [(3, 3), (3, 1), (2, 1), (5, 1)]]
    const = rng.normal(size=(5, 1))
    out = []
    for _ in range(2):
        tape = Tape()
        params = [tape.watch(v) for v in values]
        out.append(tape.backward(_composite(params, const)))
    for g1, g2 in zip(*out):
        assert np.array_equal(g1, g2)


def test_broadcast_gradient_is_summed():
    tape = Tape()
    w = tape.watch(np.ones((2, 2)))
    x = np.arange(12.0).reshape(3, 2, 2)
    (g,) = tape.backward(T.total(T.matmul(w, x)))
    expect = sum(np.ones((2, 2)) @ x[i].T for i in range(3))
    assert np.allclose(g, expect)


def test_wrap_angle_range():
    a = np.array([[np.pi + 0.1], [3.0], [-np.pi]])
    w = T.wrap_angle(a, [0, 2]).value
    assert -np.pi < w[0, 0] <= np.pi and abs(w[0, 0] - (0.1 - np.pi)) < 1e-15
    assert w[1, 0] == 3.0
    assert w[2, 0] == np.pi
