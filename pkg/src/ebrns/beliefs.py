"""Value types shared by the classic and learned estimators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GaussianBelief", "TrendEstimate", "MemoryBelief", "covariance_ok"]


@dataclass
class GaussianBelief:
    mean: np.ndarray  # (n, 1)
    cov: np.ndarray  # (n, n)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1, 1)
        self.cov = np.asarray(self.cov, dtype=np.float64)


@dataclass
class TrendEstimate:
    """Forward (``kind="forward"``) or global (``kind="global"``) trend.

    ``var`` holds the diagonal of the trend covariance as a column.
    """

    mean: np.ndarray
    var: np.ndarray
    kind: str = "forward"


@dataclass
class MemoryBelief:
    mean: np.ndarray
    var: np.ndarray
    direction: str = "forward"


def covariance_ok(P: np.ndarray, sym_tol: float = 1e-9, eig_tol: float = -1e-9) -> bool:
    """Symmetric within ``sym_tol`` and smallest eigenvalue at least ``eig_tol``.

    Both tolerances are applied relative to the largest entry when it exceeds one.
    """
    P = np.asarray(P, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(P)))) if P.size else 1.0
    if np.max(np.abs(P - np.swapaxes(P, -1, -2)), initial=0.0) > sym_tol * scale:
        return False
    eig = np.linalg.eigvalsh(0.5 * (P + np.swapaxes(P, -1, -2)))
    return bool(np.min(eig) >= eig_tol * scale)
