"""Offline trajectory datasets: synthetic generators, splits, CSV round-trip.

All randomness comes from numpy's PCG64 bit generator.  Sample ``i`` of a
dataset generated with ``seed`` draws from ``default_rng([seed, i])`` so any
sample can be regenerated on its own and results do not depend on platform
or generation order.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ConfigError, make_builtin

__all__ = [
    "TrajectorySample",
    "Dataset",
    "SplitDataset",
    "ParseError",
    "SchemaError",
    "gen_temperature",
    "gen_landing",
    "split",
    "norm_stats",
    "calibrate_q2",
    "write_csv",
    "read_csv",
    "csv_io",
    "LANDING_DESTINATION",
]

# runway threshold east of the radar at the origin; final approach heads west
LANDING_DESTINATION = (10_000.0, 0.0)


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class TrajectorySample:
    id: int
    x: np.ndarray  # (K, n_x)
    z: np.ndarray  # (K, n_z)


@dataclass
class Dataset:
    ids: np.ndarray  # (N,)
    x: np.ndarray  # (N, K, n_x)
    z: np.ndarray  # (N, K, n_z)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> TrajectorySample:
        return TrajectorySample(int(self.ids[i]), self.x[i], self.z[i])

    @property
    def K(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.ids[idx].copy(), self.x[idx].copy(), self.z[idx].copy())

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.ids.astype(np.int64), self.x, self.z):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class SplitDataset:
    train: Dataset
    validation: Dataset
    test: Dataset
    norm: np.ndarray


# ------------------------------------------------------------------ generators


def gen_temperature(count: int, K: int = 48, sigma_v: float = 8.0, seed: int = 0) -> Dataset:
    """Hourly temperature windows: daily cycle + linear drift + AR(1) weather.

    Truth per sample: baseline in [0, 20], amplitude in [5, 15], random phase,
    slope in [-0.2, 0.2] per step, AR(1) disturbance (0.9, innovation 0.5).
    Measurements add N(0, sigma_v^2).
    """
    if count < 1:
        raise ConfigError("dataset must contain at least one sample")
    if not sigma_v > 0:
        raise ConfigError(f"sigma_v must be positive, got {sigma_v!r}")
    k = np.arange(K, dtype=np.float64)
    xs = np.empty((count, K, 1))
    zs = np.empty((count, K, 1))
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        base = rng.uniform(0.0, 20.0)
        amp = rng.uniform(5.0, 15.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        slope = rng.uniform(-0.2, 0.2)
        ar = np.empty(K)
        ar[0] = rng.normal(0.0, 0.5 / np.sqrt(1 - 0.81))
        eps = rng.normal(0.0, 0.5, K)
        for t in range(1, K):
            ar[t] = 0.9 * ar[t - 1] + eps[t]
        x = base + amp * np.sin(2 * np.pi * k / 24.0 + phase) + slope * k + ar
        xs[i, :, 0] = x
        zs[i, :, 0] = x + rng.normal(0.0, sigma_v, K)
    return Dataset(np.arange(count), xs, zs)


def _smootherstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (u * (6.0 * u - 15.0) + 10.0)


def landing_truth(rng: np.random.Generator, K: int = 200, dt: float = 4.0, substeps: int = 40,
                  max_turn_rate: float = 1.5) -> np.ndarray:
    """One decelerating, turning approach ending near the runway threshold.

    Speed falls from ~120 m/s to ~70 m/s along a cubic profile; the heading
    starts up to 90 degrees off the final (westward) course and rotates onto
    it during one or two coordinated turns.  The path is integrated on a fine
    grid and shifted so it ends within 1 km of the destination.
    """
    T_end = (K - 1) * dt
    n = (K - 1) * substeps + 1
    t = np.linspace(0.0, T_end, n)
    u = t / T_end
    v0 = rng.uniform(108.0, 125.0)
    v1 = rng.uniform(65.0, 75.0)
    # cubic decay with zero slope at touchdown
    speed = v1 + (v0 - v1) * (1.0 - u) ** 3
    off = np.deg2rad(rng.uniform(-90.0, 90.0))
    n_turns = rng.integers(1, 3)
    # turn windows: start time and duration; the peak turn rate (deg/s) is
    # 15/8 of the average and never exceeds max_turn_rate
    fractions = np.sort(rng.uniform(0.15, 0.8, n_turns))
    split_ = rng.uniform(0.3, 0.7) if n_turns == 2 else 1.0
    amounts = [off * split_, off * (1 - split_)][:n_turns]
    heading = np.full(n, np.pi + off)
    for frac, amount in zip(fractions, amounts):
        avg_rate = max_turn_rate * 8.0 / 15.0 * rng.uniform(0.6, 1.0)
        dur = max(abs(np.rad2deg(amount)) / avg_rate, 20.0)
        start = frac * T_end
        heading = heading - amount * _smootherstep((t - start) / dur)
    vx = speed * np.cos(heading)
    vy = speed * np.sin(heading)
    h = t[1] - t[0]
    px = np.concatenate([[0.0], np.cumsum(0.5 * (vx[1:] + vx[:-1]) * h)])
    py = np.concatenate([[0.0], np.cumsum(0.5 * (vy[1:] + vy[:-1]) * h)])
    end = np.array(LANDING_DESTINATION) + rng.uniform(-1000.0, 1000.0, 2) * np.array([1.0, 0.5])
    px += end[0] - px[-1]
    py += end[1] - py[-1]
    idx = np.arange(0, n, substeps)
    return np.stack([px[idx], py[idx], vx[idx], vy[idx]], axis=1)


def gen_landing(count: int, K: int = 200, dt: float = 4.0, noise=(0.3, 150.0), seed: int = 0,
                max_turn_rate: float = 1.5) -> Dataset:
    """Landing trajectories with radar measurements.

    ``noise`` is ``(sigma_alpha in degrees, sigma_eta in metres)``.
    """
    if count < 1:
        raise ConfigError("dataset must contain at least one sample")
    sigma_alpha_deg, sigma_eta = noise
    if not (sigma_alpha_deg > 0 and sigma_eta > 0):
        raise ConfigError(f"noise levels must be positive, got {noise!r}")
    model = make_builtin("cv2d-radar", dt=dt, q2=10.0, sigma_eta=sigma_eta,
                         sigma_alpha=np.deg2rad(sigma_alpha_deg))
    xs = np.empty((count, K, 4))
    zs = np.empty((count, K, 2))
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        x = landing_truth(rng, K, dt, max_turn_rate=max_turn_rate)
        if np.any(x[:, 0] <= 0):
            raise RuntimeError("generated trajectory left the p_x > 0 half-plane")
        xs[i] = x
        z = model.h(x[..., None]).value[..., 0]
        z[:, 0] += rng.normal(0.0, sigma_eta, K)
        z[:, 1] += rng.normal(0.0, np.deg2rad(sigma_alpha_deg), K)
        zs[i] = z
    return Dataset(np.arange(count), xs, zs)


# ----------------------------------------------------------------------- split


def norm_stats(x: np.ndarray) -> np.ndarray:
    """Per-dimension max-abs over all samples and frames."""
    s = np.max(np.abs(np.asarray(x).reshape(-1, np.shape(x)[-1])), axis=0)
    return np.where(s > 0, s, 1.0)


def calibrate_q2(x: np.ndarray) -> float:
    """Random-walk process variance matched to the mean squared one-step increment."""
    x = np.asarray(x, dtype=np.float64)
    d = np.diff(x, axis=-2)
    return float(np.mean(np.sum(d * d, axis=-1)))


def split(data: Dataset, proportions=(0.7, 0.2, 0.1), seed: int = 0) -> SplitDataset:
    """Seeded shuffle then contiguous train/validation/test split.

    Validation and test sizes are floored; the remainder goes to train.
    """
    p = np.asarray(proportions, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"proportions must be three non-negative numbers summing to 1, got {proportions!r}")
    N = len(data)
    n_val = int(np.floor(p[1] * N + 1e-9))
    n_test = int(np.floor(p[2] * N + 1e-9))
    n_train = N - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"split of {N} samples leaves an empty part ({n_train}/{n_val}/{n_test})")
    perm = np.random.default_rng(seed).permutation(N)
    train = data.subset(np.sort(perm[:n_train]))
    val = data.subset(np.sort(perm[n_train:n_train + n_val]))
    test = data.subset(np.sort(perm[n_train + n_val:]))
    return SplitDataset(train, val, test, norm_stats(train.x))


# ------------------------------------------------------------------------- CSV


def write_csv(data: Dataset, path) -> None:
    n_x, n_z = data.x.shape[-1], data.z.shape[-1]
    header = ["sample_id", "k"] + [f"x_{i + 1}" for i in range(n_x)] + [f"z_{i + 1}" for i in range(n_z)]
    order = np.argsort(data.ids, kind="stable")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in order:
            for k in range(data.K):
                w.writerow([int(data.ids[i]), k + 1]
                           + [format(v, ".17g") for v in data.x[i, k]]
                           + [format(v, ".17g") for v in data.z[i, k]])


def read_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file") from None
        if header[:2] != ["sample_id", "k"]:
            raise ParseError("line 1: header must start with sample_id,k")
        xs = [c for c in header[2:] if c.startswith("x_")]
        zs = [c for c in header[2:] if c.startswith("z_")]
        n_x, n_z = len(xs), len(zs)
        expect = ["sample_id", "k"] + [f"x_{i + 1}" for i in range(n_x)] + [f"z_{i + 1}" for i in range(n_z)]
        if header != expect or n_x == 0 or n_z == 0:
            raise ParseError(f"line 1: header {header} does not match sample_id,k,x_1..x_n,z_1..z_m")
        samples: dict[int, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                sid, k = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ParseError(f"line {line_no}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"line {line_no}: non-finite value")
            rows = samples.setdefault(sid, [])
            if k != len(rows) + 1:
                raise ParseError(f"line {line_no}: sample {sid} frame {k} out of order")
            rows.append(vals)
    if not samples:
        raise ParseError("file holds no samples")
    ids = sorted(samples)
    lengths = {sid: len(samples[sid]) for sid in ids}
    first = ids[0]
    for sid in ids[1:]:
        if lengths[sid] != lengths[first]:
            raise SchemaError(
                f"sample {sid} has K={lengths[sid]} but sample {first} has K={lengths[first]}")
    arr = np.array([samples[sid] for sid in ids], dtype=np.float64)
    return Dataset(np.array(ids), arr[..., :n_x], arr[..., n_x:])


def csv_io(path, direction: str, dataset: Dataset | None = None):
    if direction == "read":
        return read_csv(path)
    if direction == "write":
        if dataset is None:
            raise ValueError("write needs a dataset")
        write_csv(dataset, path)
        return None
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
