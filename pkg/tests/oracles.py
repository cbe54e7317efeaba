"""Independent reference computations used by the tests.

Nothing here imports the package's filtering code.
"""
import numpy as np


def joint_gaussian_smoother(A, C, Q, R, m0, P0, z):
    """Smoothed marginals of a linear-Gaussian chain by direct conditioning.

    x_1 ~ N(m0, P0); x_{k+1} = A x_k + w_k; z_k = C x_k + v_k.  Builds the
    full joint over (x_1..x_K) and conditions on every measurement at once.
    Returns (means (K, n), covs (K, n, n)).
    """
    z = np.asarray(z, dtype=float).reshape(len(z), -1)
    K = z.shape[0]
    n = A.shape[0]
    m = C.shape[0]
    mu = np.zeros(K * n)
    S = np.zeros((K * n, K * n))
    mean = np.asarray(m0, dtype=float).reshape(n)
    cov = np.asarray(P0, dtype=float)
    covs = []
    for k in range(K):
        if k > 0:
            mean = A @ mean
            cov = A @ cov @ A.T + Q
        mu[k * n:(k + 1) * n] = mean
        covs.append(cov)
    for i in range(K):
        for j in range(i, K):
            block = np.linalg.matrix_power(A, j - i) @ covs[i]
            S[j * n:(j + 1) * n, i * n:(i + 1) * n] = block
            S[i * n:(i + 1) * n, j * n:(j + 1) * n] = block.T
    Cb = np.kron(np.eye(K), C)
    Rb = np.kron(np.eye(K), R)
    Szz = Cb @ S @ Cb.T + Rb
    Sxz = S @ Cb.T
    gain = np.linalg.solve(Szz, Sxz.T).T
    post_mu = mu + gain @ (z.reshape(-1) - Cb @ mu)
    post_S = S - gain @ Sxz.T
    means = post_mu.reshape(K, n)
    out = np.array([post_S[k * n:(k + 1) * n, k * n:(k + 1) * n] for k in range(K)])
    return means, out


def joint_gaussian_filter(A, C, Q, R, m0, P0, z):
    """Filtered marginals: condition the joint on z_1..z_k for each k."""
    z = np.asarray(z, dtype=float).reshape(len(z), -1)
    K = z.shape[0]
    means, covs = [], []
    for k in range(1, K + 1):
        mu, S = joint_gaussian_smoother(A, C, Q, R, m0, P0, z[:k])
        means.append(mu[-1])
        covs.append(S[-1])
    return np.array(means), np.array(covs)


def sample_linear(A, C, Q, R, m0, P0, K, rng):
    n = A.shape[0]
    x = np.zeros((K, n))
    x[0] = rng.multivariate_normal(np.reshape(m0, n), P0)
    for k in range(1, K):
        x[k] = A @ x[k - 1] + rng.multivariate_normal(np.zeros(n), Q)
    z = x @ C.T + rng.multivariate_normal(np.zeros(C.shape[0]), R, size=K)
    return x, z


def min_eig_and_asym(P):
    P = np.asarray(P)
    asym = float(np.max(np.abs(P - np.swapaxes(P, -1, -2)))) if P.size else 0.0
    eig = float(np.min(np.linalg.eigvalsh(0.5 * (P + np.swapaxes(P, -1, -2)))))
    return eig, asym
