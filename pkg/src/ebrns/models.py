"""Nominal state-space models: transition, measurement, Jacobians, noise."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "DomainError",
    "BuiltinModelId",
    "StateSpaceModel",
    "make_builtin",
    "cv_matrix",
    "radar_measure",
    "radar_to_cartesian",
    "numeric_jacobian",
    "jacobian_check",
]


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


class BuiltinModelId(str, enum.Enum):
    RANDOM_WALK_1D = "rw1d"
    CV2D_RADAR = "cv2d-radar"
    CV2D_LINEAR = "cv2d-linear"


Fn = Callable[[Tensor, int], Tensor]


def numeric_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at column vector ``x``; step scaled per coordinate."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    f0 = np.asarray(fn(x)).reshape(-1)
    J = np.zeros((f0.size, x.shape[0]))
    for i in range(x.shape[0]):
        step = h * max(1.0, abs(x[i, 0]))
        xp, xm = x.copy(), x.copy()
        xp[i, 0] += step
        xm[i, 0] -= step
        J[:, i] = (np.asarray(fn(xp)).reshape(-1) - np.asarray(fn(xm)).reshape(-1)) / (2 * step)
    return J


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """First-order Markov model with additive Gaussian noise.

    ``transition`` / ``measurement`` take a state Tensor of shape (..., n_x, 1)
    and the frame index.  The Jacobian callables return (..., n_x, n_x) and
    (..., n_z, n_x).  When a Jacobian is omitted, a finite-difference fallback
    is used; that fallback is a constant on the tape (no gradient through it).
    """

    name: str
    n_x: int
    n_z: int
    transition: Fn
    measurement: Fn
    Q: np.ndarray
    R: np.ndarray
    dt: float = 1.0
    transition_jacobian: Fn | None = None
    measurement_jacobian: Fn | None = None
    # measurement rows holding angles; innovations on them get wrapped
    angle_rows: tuple[int, ...] = ()
    linear: bool = False
    params: dict = field(default_factory=dict)

    def f(self, x, k: int = 0) -> Tensor:
        return self.transition(T.as_tensor(x), k)

    def h(self, x, k: int = 0) -> Tensor:
        return self.measurement(T.as_tensor(x), k)

    def F(self, x, k: int = 0) -> Tensor:
        x = T.as_tensor(x)
        if self.transition_jacobian is not None:
            return self.transition_jacobian(x, k)
        return Tensor(_batched_numeric(lambda v: self.transition(Tensor(v), k).value, x.value))

    def H(self, x, k: int = 0) -> Tensor:
        x = T.as_tensor(x)
        if self.measurement_jacobian is not None:
            return self.measurement_jacobian(x, k)
        return Tensor(_batched_numeric(lambda v: self.measurement(Tensor(v), k).value, x.value))

    def initial_mean(self, z: np.ndarray) -> np.ndarray:
        """State mean implied by one measurement (position-only for radar)."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if self.name == BuiltinModelId.CV2D_RADAR.value:
            px, py = radar_to_cartesian(z[0], z[1])
            return np.array([[px], [py], [0.0], [0.0]])
        H = self.H(np.zeros((self.n_x, 1))).value
        return np.linalg.pinv(H) @ z.reshape(-1, 1)

    def initial_cov(self) -> np.ndarray:
        return 1e4 * float(np.max(np.diag(self.R))) * np.eye(self.n_x)


def _batched_numeric(fn, xv: np.ndarray) -> np.ndarray:
    if xv.ndim == 2:
        return numeric_jacobian(fn, xv)
    flat = xv.reshape(-1, xv.shape[-2], 1)
    out = np.stack([numeric_jacobian(fn, v) for v in flat])
    return out.reshape(xv.shape[:-2] + out.shape[-2:])


def cv_matrix(dt: float) -> np.ndarray:
    return np.array(
        [[1.0, 0.0, dt, 0.0],
         [0.0, 1.0, 0.0, dt],
         [0.0, 0.0, 1.0, 0.0],
         [0.0, 0.0, 0.0, 1.0]]
    )


def _linear(mat: np.ndarray) -> tuple[Fn, Fn]:
    const = Tensor(mat)
    return (lambda x, k: T.matmul(const, x)), (lambda x, k: const)


def _radar_h(x: Tensor, k: int) -> Tensor:
    px, py = x[..., 0:1, :], x[..., 1:2, :]
    eta = T.sqrt(px * px + py * py)
    return T.concat([eta, T.atan2(py, px)], axis=-2)


def _radar_H(x: Tensor, k: int) -> Tensor:
    px, py = x[..., 0:1, :], x[..., 1:2, :]
    r2 = px * px + py * py
    eta = T.sqrt(r2)
    zero = np.zeros((1, 2))
    row_eta = T.concat([px / eta, py / eta, zero], axis=-1)
    row_alpha = T.concat([-py / r2, px / r2, zero], axis=-1)
    return T.concat([row_eta, row_alpha], axis=-2)


def radar_measure(x) -> tuple[float, float]:
    """Range and azimuth of a single 4-state."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x[0] == 0.0 and x[1] == 0.0:
        raise DomainError("radar measurement undefined at the sensor origin")
    z = _radar_h(Tensor(x.reshape(-1, 1)), 0).value.reshape(-1)
    return float(z[0]), float(z[1])


def radar_to_cartesian(eta, alpha):
    return eta * np.cos(alpha), eta * np.sin(alpha)


def make_builtin(model_id: BuiltinModelId | str, **params) -> StateSpaceModel:
    """Build one of the three experiment models.

    rw1d: ``q2``, ``sigma_v`` (``dt`` optional, hours).
    cv2d-radar: ``dt``, ``q2``, ``sigma_eta`` (m), ``sigma_alpha`` (rad).
    cv2d-linear: ``dt``, ``q2``, ``sigma_v`` (m, per position axis).
    """
    model_id = BuiltinModelId(model_id)
    for key, val in params.items():
        if key.startswith(("q2", "sigma")) and not (np.isfinite(val) and val > 0):
            raise ConfigError(f"{key} must be a positive finite variance parameter, got {val!r}")

    if model_id is BuiltinModelId.RANDOM_WALK_1D:
        p = {"dt": 1.0, "q2": 1.0, "sigma_v": 2.0, **params}
        _require(p, ("dt", "q2", "sigma_v"))
        f, F = _linear(np.eye(1))
        h, H = _linear(np.eye(1))
        return StateSpaceModel(
            model_id.value, 1, 1, f, h,
            Q=np.array([[p["q2"]]]), R=np.array([[p["sigma_v"] ** 2]]), dt=p["dt"],
            transition_jacobian=F, measurement_jacobian=H, linear=True, params=p,
        )

    p = {"dt": 4.0, "q2": 10.0, **params}
    if p["dt"] <= 0:
        raise ConfigError("dt must be positive")
    f, F = _linear(cv_matrix(p["dt"]))
    Q = p["q2"] * np.eye(4)
    if model_id is BuiltinModelId.CV2D_RADAR:
        p.setdefault("sigma_eta", 150.0)
        p.setdefault("sigma_alpha", np.deg2rad(0.3))
        _require(p, ("dt", "q2", "sigma_eta", "sigma_alpha"))
        R = np.diag([p["sigma_eta"] ** 2, p["sigma_alpha"] ** 2])
        return StateSpaceModel(
            model_id.value, 4, 2, f, _radar_h, Q=Q, R=R, dt=p["dt"],
            transition_jacobian=F, measurement_jacobian=_radar_H, angle_rows=(1,), params=p,
        )
    p.setdefault("sigma_v", 150.0)
    _require(p, ("dt", "q2", "sigma_v"))
    h, H = _linear(np.eye(2, 4))
    return StateSpaceModel(
        model_id.value, 4, 2, f, h, Q=Q, R=p["sigma_v"] ** 2 * np.eye(2), dt=p["dt"],
        transition_jacobian=F, measurement_jacobian=H, linear=True, params=p,
    )


def _require(p: dict, keys):
    unknown = set(p) - set(keys)
    if unknown:
        raise ConfigError(f"unknown model parameters: {sorted(unknown)}")
    for key in keys:
        if not (np.isfinite(p[key]) and p[key] > 0):
            raise ConfigError(f"{key} must be positive, got {p[key]!r}")


def jacobian_check(model: StateSpaceModel, x, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference Jacobians."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    worst = 0.0
    pairs = (
        (model.F(x).value, numeric_jacobian(lambda v: model.f(v).value, x, h)),
        (model.H(x).value, numeric_jacobian(lambda v: model.h(v).value, x, h)),
    )
    for analytic, numeric in pairs:
        err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
        worst = max(worst, float(err.max()))
    return worst
