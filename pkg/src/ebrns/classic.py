"""Extended Kalman filter and RTS smoother on plain numpy arrays.

Serves as the baseline estimator and as the reference that the learned
smoother must reproduce when its trend gates are disabled.  Arithmetic is
ordered exactly like :mod:`ebrns.core` so the two agree to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beliefs import GaussianBelief, TrendEstimate
from .models import StateSpaceModel
from .tensor import solve_spd, wrap_angle, Tensor

__all__ = [
    "SequenceCache",
    "default_prior",
    "ekf_predict",
    "ekf_update",
    "rts_smooth_step",
    "run_classic",
]


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


@dataclass
class SequenceCache:
    """Per-frame records of one run; index 0 is frame 1.

    ``pred_*`` at index 0 hold the prior assimilated with the first
    measurement; ``F[k]`` is the transition Jacobian used to predict frame k.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    F: np.ndarray
    innovation: np.ndarray
    smooth_mean: np.ndarray | None = None
    smooth_cov: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.filt_mean.shape[0]


def default_prior(model: StateSpaceModel, z1) -> GaussianBelief:
    """Diffuse prior over the first state, centred on the first measurement."""
    return GaussianBelief(model.initial_mean(z1), model.initial_cov())


def ekf_predict(prior: GaussianBelief, model: StateSpaceModel, k: int,
                trend: TrendEstimate | None = None) -> GaussianBelief:
    x = prior.mean
    F = model.F(x, k).value
    mean = model.f(x, k).value
    P = F @ prior.cov @ F.T + model.Q
    if trend is not None:
        mean = mean + np.asarray(trend.mean).reshape(-1, 1)
        P = P + np.diag(np.asarray(trend.var).reshape(-1))
    return GaussianBelief(mean, _sym(P))


def ekf_update(pred: GaussianBelief, z, model: StateSpaceModel, k: int):
    """Measurement update; returns (posterior, innovation, P^z, P^xz)."""
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    if z.shape[0] != model.n_z:
        raise ValueError(f"measurement has {z.shape[0]} entries, model expects {model.n_z}")
    x, P = pred.mean, pred.cov
    H = model.H(x, k).value
    z_hat = model.h(x, k).value
    Pz = _sym(H @ P @ H.T + model.R)
    Pxz = P @ H.T
    innov = wrap_angle(Tensor(z - z_hat), model.angle_rows).value
    mean = x + Pxz @ solve_spd(Pz, innov)
    cov = _sym(P - Pxz @ solve_spd(Pz, Pxz.T))
    return GaussianBelief(mean, cov), innov, Pz, Pxz


def rts_smooth_step(filtered_k: GaussianBelief, pred_next: GaussianBelief,
                    smoothed_next: GaussianBelief, F_next,
                    backward_trend: TrendEstimate | None = None) -> GaussianBelief:
    xb, Pb = pred_next.mean, pred_next.cov
    if backward_trend is not None:
        xb = xb + np.asarray(backward_trend.mean).reshape(-1, 1)
        Pb = Pb + np.diag(np.asarray(backward_trend.var).reshape(-1))
    C = filtered_k.cov @ np.asarray(F_next).T
    G = solve_spd(Pb, C.T).T
    mean = filtered_k.mean + G @ (smoothed_next.mean - xb)
    cov = _sym(filtered_k.cov + G @ (smoothed_next.cov - Pb) @ G.T)
    return GaussianBelief(mean, cov)


def run_classic(z, model: StateSpaceModel, prior: GaussianBelief | None = None,
                mode: str = "smooth") -> SequenceCache:
    """EKF over all frames, then (``mode="smooth"``) the RTS backward pass.

    ``prior`` is the belief over the first state before z_1 is assimilated;
    it defaults to :func:`default_prior`.
    """
    if mode not in ("filter", "smooth"):
        raise ValueError(f"mode must be 'filter' or 'smooth', got {mode!r}")
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    K = z.shape[0]
    if K < 2:
        raise ValueError("need at least two frames")
    n = model.n_x
    if prior is None:
        prior = default_prior(model, z[0])
    cache = SequenceCache(
        pred_mean=np.zeros((K, n, 1)), pred_cov=np.zeros((K, n, n)),
        filt_mean=np.zeros((K, n, 1)), filt_cov=np.zeros((K, n, n)),
        F=np.zeros((K, n, n)), innovation=np.zeros((K, model.n_z, 1)),
    )
    cache.F[0] = np.eye(n)
    pred = GaussianBelief(prior.mean, prior.cov)
    for k in range(K):
        if k > 0:
            prev = GaussianBelief(cache.filt_mean[k - 1], cache.filt_cov[k - 1])
            cache.F[k] = model.F(prev.mean, k).value
            pred = ekf_predict(prev, model, k)
        post, innov, _, _ = ekf_update(pred, z[k], model, k)
        cache.pred_mean[k], cache.pred_cov[k] = pred.mean, pred.cov
        cache.filt_mean[k], cache.filt_cov[k] = post.mean, post.cov
        cache.innovation[k] = innov
    if mode == "smooth":
        sm, sP = cache.filt_mean.copy(), cache.filt_cov.copy()
        for k in range(K - 2, -1, -1):
            out = rts_smooth_step(
                GaussianBelief(cache.filt_mean[k], cache.filt_cov[k]),
                GaussianBelief(cache.pred_mean[k + 1], cache.pred_cov[k + 1]),
                GaussianBelief(sm[k + 1], sP[k + 1]),
                cache.F[k + 1],
            )
            sm[k], sP[k] = out.mean, out.cov
        cache.smooth_mean, cache.smooth_cov = sm, sP
    return cache
