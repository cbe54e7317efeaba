"""Monte-Carlo RMSE harness and comparison reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .classic import run_classic
from .core import GateBank, run_ebrns
from .models import StateSpaceModel
from .tensor import ContractError

__all__ = [
    "ESTIMATORS",
    "McResult",
    "EstimatorFailure",
    "rmse",
    "estimate",
    "mc_run",
    "test_set_result",
    "compare_report",
    "simulate_measurements",
]

ESTIMATORS = ("ks", "kf", "ebrns_filter", "ebrns_smooth")


class EstimatorFailure(RuntimeError):
    def __init__(self, message: str, run: int):
        super().__init__(message)
        self.run = run


def rmse(errors, scope: str = "mean"):
    """Per-step (length K) or mean RMSE of an (M, K, d) error array."""
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim == 2:
        e = e[None]
    if e.ndim != 3 or e.shape[0] < 1 or e.shape[1] < 1:
        raise ValueError(f"errors must be (M, K, d), got shape {np.shape(errors)}")
    sq = np.einsum("mkd,mkd->mk", e, e)
    if scope == "per_step":
        return np.sqrt(sq.mean(axis=0))
    if scope == "mean":
        return float(np.sqrt(sq.sum() / (sq.shape[0] * sq.shape[1])))
    raise ValueError(f"unknown scope {scope!r}")


def _groups(n_x: int) -> dict[str, list[int]]:
    if n_x == 4:
        return {"position": [0, 1], "velocity": [2, 3]}
    return {}


@dataclass
class McResult:
    estimator: str
    per_step: list[float]
    mean: float
    M: int
    groups: dict[str, dict] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.per_step)

    @classmethod
    def from_errors(cls, estimator: str, errors: np.ndarray) -> "McResult":
        groups = {}
        for name, idx in _groups(errors.shape[-1]).items():
            sub = errors[..., idx]
            groups[name] = {"per_step": rmse(sub, "per_step").tolist(), "mean": rmse(sub, "mean")}
        return cls(estimator, rmse(errors, "per_step").tolist(), rmse(errors, "mean"), errors.shape[0], groups)


def simulate_measurements(x: np.ndarray, model: StateSpaceModel, rng: np.random.Generator) -> np.ndarray:
    """Noisy measurements of truth(s) ``x`` (..., K, n_x) under the model's R."""
    x = np.asarray(x, dtype=np.float64)
    zc = model.h(x[..., None]).value[..., 0]
    L = np.linalg.cholesky(model.R)
    noise = rng.standard_normal(zc.shape) @ L.T
    return zc + noise


def estimate(estimator: str, z: np.ndarray, model: StateSpaceModel, bank: GateBank | None = None,
             nominal: bool = False, init=None) -> np.ndarray:
    """State estimates for measurements ``z`` of shape (B, K, n_z); returns (B, K, n_x)."""
    z = np.asarray(z, dtype=np.float64)
    if estimator in ("ks", "kf"):
        mode = "smooth" if estimator == "ks" else "filter"
        out = []
        for b in range(z.shape[0]):
            c = run_classic(z[b], model, init, mode)
            out.append((c.smooth_mean if mode == "smooth" else c.filt_mean)[..., 0])
        return np.stack(out)
    if estimator in ("ebrns_filter", "ebrns_smooth"):
        if bank is None and not nominal:
            raise ValueError(f"{estimator} needs a gate bank")
        mode = "smooth" if estimator == "ebrns_smooth" else "filter_only"
        cache = run_ebrns(z, model, bank, init=init, mode=mode, nominal=nominal)
        name = "smooth_mean" if mode == "smooth" else "filt_mean"
        return cache.stack(name)[..., 0]
    raise ValueError(f"unknown estimator {estimator!r}")


def mc_run(estimator: str, truths, model: StateSpaceModel, M: int, seed: int,
           bank: GateBank | None = None, nominal: bool = False, init=None,
           chunk: int = 64) -> McResult:
    """Fixed truth(s), freshly drawn measurement noise per run.

    ``truths`` is (K, n_x) for one trajectory or (N, K, n_x); each of the M
    runs re-simulates noise for every truth with a generator derived from
    ``(seed, run)``.
    """
    x = np.asarray(truths, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    N, K, _ = x.shape
    zs = np.empty((M, N, K, model.n_z))
    for m in range(M):
        rng = np.random.default_rng([seed, m])
        zs[m] = simulate_measurements(x, model, rng)
    flat = zs.reshape(M * N, K, model.n_z)
    failures = (np.linalg.LinAlgError, ValueError, FloatingPointError)
    est = np.empty((M * N, K, model.n_x))
    for start in range(0, M * N, chunk):
        try:
            est[start:start + chunk] = estimate(estimator, flat[start:start + chunk], model, bank, nominal, init)
        except failures:
            # rerun one sequence at a time to name the failing run
            for i in range(start, min(start + chunk, M * N)):
                try:
                    estimate(estimator, flat[i:i + 1], model, bank, nominal, init)
                except failures as exc:
                    raise EstimatorFailure(f"{estimator} failed on run {i // N}: {exc}", i // N) from exc
            raise
    if not np.all(np.isfinite(est)):
        bad = int(np.argwhere(~np.isfinite(est))[0, 0]) // N
        raise EstimatorFailure(f"{estimator} produced non-finite estimates", bad)
    errors = (est - np.tile(x, (M, 1, 1)))
    return McResult.from_errors(estimator, errors)


def test_set_result(estimator: str, x, z, model: StateSpaceModel, bank: GateBank | None = None,
                    nominal: bool = False) -> McResult:
    """One run per test sample on the stored measurements (whole-set aggregation)."""
    est = estimate(estimator, z, model, bank, nominal)
    return McResult.from_errors(estimator, est - np.asarray(x, dtype=np.float64))


def _fmt(v: float) -> str:
    return format(v, ".17g")


def compare_report(results: Sequence[McResult], fmt: str = "json") -> str:
    if not results:
        raise ValueError("no results to report")
    K = results[0].K
    for r in results:
        if r.K != K:
            raise ContractError(f"result {r.estimator} has K={r.K}, expected {K}")
    group_names = sorted({g for r in results for g in r.groups})
    columns = ["estimator", "M", "K", "mean_rmse"] + [f"{g}_mean_rmse" for g in group_names]
    rows = []
    for r in results:
        row = {"estimator": r.estimator, "M": r.M, "K": r.K, "mean_rmse": r.mean}
        for g in group_names:
            row[f"{g}_mean_rmse"] = r.groups[g]["mean"] if g in r.groups else None
        rows.append(row)
    if fmt == "json":
        doc = {"columns": columns, "rows": rows, "per_step": {r.estimator: r.per_step for r in results}}
        return json.dumps(doc, indent=1)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else ("" if v is None else v) for v in
                        (row[c] for c in columns)])
        return buf.getvalue()
    if fmt == "text":
        lines = ["  ".join(f"{c:>20}" for c in columns)]
        for row in rows:
            lines.append("  ".join(
                f"{row[c]:>20.4g}" if isinstance(row[c], float) else f"{str(row[c]):>20}" for c in columns))
        return "\n".join(lines)
    raise ValueError(f"unknown format {fmt!r}")
