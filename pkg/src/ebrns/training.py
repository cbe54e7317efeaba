"""Two-stage supervised training of the gate networks.

Stage one fits the forward group (``ac1, ac2, a1, a2``) on filtered-state
error with the backward group frozen; stage two fits the backward group on
smoothed-state error, reusing an untracked forward pass.  Gradients come from
the reverse-mode tape through the whole unrolled recursion.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .core import BACKWARD_NETS, FORWARD_NETS, GateBank, run_ebrns
from .datasets import Dataset, SplitDataset
from .evaluation import rmse
from .models import ConfigError, StateSpaceModel

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "loss_stage_one",
    "loss_stage_two",
    "batch_loss",
    "loss_and_grad",
    "sgd_step",
    "clip_global_norm",
    "train_stage",
]

STAGES = {"one": "a", "two": "b", 1: "a", 2: "b", "1": "a", "2": "b"}


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, sample_id: int, step: int):
        super().__init__(message)
        self.sample_id = sample_id
        self.step = step


@dataclass
class TrainConfig:
    stage: str = "one"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    tau_a: float = 1e-5
    tau_b: float = 1e-5
    clip: float = 5.0
    seed: int = 0
    patience: int = 20
    optimizer: str = "sgd"
    # loss on states divided by the bank's normalisation statistics
    normalized_loss: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be 'one' or 'two', got {self.stage!r}")
        self.stage = "one" if STAGES[self.stage] == "a" else "two"
        for name in ("lr", "clip"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        for name in ("tau_a", "tau_b"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be non-negative, got {v!r}")
        for name in ("batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if int(self.patience) < 0:
            raise ConfigError("patience must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    @property
    def group(self) -> str:
        return STAGES[self.stage]

    @property
    def tau(self) -> float:
        return self.tau_a if self.group == "a" else self.tau_b


@dataclass
class TrainReport:
    config: dict
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = float("inf")
    stopped_early: bool = False
    checkpoint: str | None = None
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def deterministic_dict(self) -> dict:
        """Everything except timing, which differs between otherwise identical runs."""
        d = asdict(self)
        d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


# ---------------------------------------------------------------------- loss


def _group_sq_norm(bank: GateBank, group: str) -> float:
    theta = bank.flat(group)
    return float(theta @ theta)


def _state_errors(cache, x, stage_group, scale):
    """Tracked per-frame errors e_k (B, n, 1) for k = 2..K (zero-based 1..K-1)."""
    means = cache.filt_mean if stage_group == "a" else cache.smooth_mean
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    out = []
    for k in range(1, x.shape[1]):
        e = T.sub(means[k], x[:, k, :, None])
        if scale is not None:
            e = T.hadamard(e, scale)
        out.append(e)
    return out


def _run(bank, z, model, group, tape, train, init=None):
    if group == "a":
        return run_ebrns(z, model, bank, init=init, mode="filter_only", tape=tape, train=train)
    fwd = run_ebrns(z, model, bank, init=init, mode="filter_only")
    return run_ebrns(z, model, bank, init=init, mode="smooth", tape=tape, train=train, forward_cache=fwd)


def per_sample_losses(bank: GateBank, x, z, model: StateSpaceModel, group: str, tau: float,
                      normalized: bool = False, init=None) -> np.ndarray:
    """Loss of every sample in a batch, (B,)."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.ndim == 2:
        z, x = z[None], x[None]
    cache = _run(bank, z, model, group, None, None, init)
    est = cache.stack("filt_mean" if group == "a" else "smooth_mean")[..., 0]
    e = est[:, 1:] - x[:, 1:]
    if normalized:
        e = e / bank.norm
    K = x.shape[1]
    return np.einsum("bkd,bkd->b", e, e) / K + tau * _group_sq_norm(bank, group)


def loss_stage_one(bank: GateBank, sample, model: StateSpaceModel, tau_a: float,
                   normalized: bool = False) -> float:
    """(1/K) sum_{k=2..K} ||x_{k|k} - x_k||^2 + tau_a ||phi_a||^2 for one sample."""
    return float(per_sample_losses(bank, sample.x, sample.z, model, "a", tau_a, normalized)[0])


def loss_stage_two(bank: GateBank, sample, model: StateSpaceModel, tau_b: float,
                   normalized: bool = False) -> float:
    """(1/K) sum_{k=2..K} ||x_{k|K} - x_k||^2 + tau_b ||phi_b||^2 for one sample."""
    return float(per_sample_losses(bank, sample.x, sample.z, model, "b", tau_b, normalized)[0])


def batch_loss(bank: GateBank, x, z, model: StateSpaceModel, group: str, tau: float,
               normalized: bool = False) -> float:
    return float(np.mean(per_sample_losses(bank, x, z, model, group, tau, normalized)))


def loss_and_grad(bank: GateBank, x, z, model: StateSpaceModel, group: str, tau: float,
                  normalized: bool = False, init=None, ids=None, step: int = -1):
    """Batch loss and its gradient over the full parameter vector.

    The frozen group's entries of the gradient are exactly zero.  Returns
    ``(loss, grad, per_sample)`` where ``grad`` is ordered like ``bank.flat()``.
    """
    if group not in ("a", "b"):
        raise ValueError(f"group must be 'a' or 'b', got {group!r}")
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if z.ndim == 2:
        z, x = z[None], x[None]
    B, K = x.shape[:2]
    tape = T.Tape()
    try:
        cache = _run(bank, z, model, group, tape, group, init)
    except (T.ContractError, T.SingularityError, FloatingPointError) as err:
        b = _first_failing(bank, x, z, model, group, init)
        sid = int(ids[b]) if ids is not None else b
        raise TrainingDiverged(f"numerical failure on sample {sid} at step {step}: {err}", sid, step) from err
    scale = (1.0 / bank.norm).reshape(-1, 1) if normalized else None
    errors = _state_errors(cache, x, group, scale)
    sq = [T.hadamard(e, e) for e in errors]
    acc = sq[0]
    for s in sq[1:]:
        acc = T.add(acc, s)
    per_sample = acc.value.sum(axis=(-2, -1)) / K
    reg = _group_sq_norm(bank, group)
    per_sample = per_sample + tau * reg
    bad = ~np.isfinite(per_sample)
    if np.any(bad):
        b = int(np.argmax(bad))
        sid = int(ids[b]) if ids is not None else b
        raise TrainingDiverged(f"non-finite loss for sample {sid} at step {step}", sid, step)
    loss = T.scale(T.total(acc), 1.0 / (B * K))
    adjoints = tape.backward(loss)
    grads = {}
    for (net, key), g in zip(_watched(bank, group), adjoints):
        grads[(net, key)] = g
    flat = []
    for net, key in bank.param_names("all"):
        if (net, key) in grads:
            flat.append(grads[(net, key)].ravel() + 2.0 * tau * bank.params[net][key].ravel())
        else:
            flat.append(np.zeros(bank.params[net][key].size))
    return float(np.mean(per_sample)), np.concatenate(flat), per_sample


def _first_failing(bank, x, z, model, group, init) -> int:
    for b in range(z.shape[0]):
        try:
            loss = per_sample_losses(bank, x[b], z[b], model, group, 0.0, init=init)
        except (T.ContractError, T.SingularityError, FloatingPointError):
            return b
        if not np.all(np.isfinite(loss)):
            return b
    return 0


def _watched(bank: GateBank, group: str):
    nets = FORWARD_NETS if group == "a" else BACKWARD_NETS
    return [(n, k) for n in nets for k in ("w1", "b1", "w2", "b2")]


# ----------------------------------------------------------------- optimiser


def clip_global_norm(g: np.ndarray, threshold: float) -> np.ndarray:
    norm = float(np.sqrt(g @ g))
    if norm > threshold:
        return g * (threshold / norm)
    return g


def sgd_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * grad


class _Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)


# ------------------------------------------------------------------ training


def _validation_rmse(bank: GateBank, data: Dataset, model: StateSpaceModel, group: str,
                     chunk: int = 64) -> float:
    mode = "filter_only" if group == "a" else "smooth"
    name = "filt_mean" if group == "a" else "smooth_mean"
    errs = []
    for s in range(0, len(data), chunk):
        cache = run_ebrns(data.z[s:s + chunk], model, bank, mode=mode)
        errs.append(cache.stack(name)[..., 0] - data.x[s:s + chunk])
    return rmse(np.concatenate(errs), "mean")


def train_stage(stage, bank: GateBank, data: SplitDataset, model: StateSpaceModel,
                config: TrainConfig | None = None, log=None) -> tuple[GateBank, TrainReport]:
    """Train one parameter group; returns the best-validation bank and the report."""
    config = config or TrainConfig(stage=stage)
    if STAGES.get(stage) != config.group:
        raise ConfigError(f"stage {stage!r} does not match config stage {config.stage!r}")
    if bank.n_x != model.n_x:
        raise ConfigError(f"gate bank has n_x={bank.n_x}, model has n_x={model.n_x}")
    train = data.train
    I = len(train)
    J = int(config.batch_size)
    if J > I:
        raise ConfigError(f"batch size {J} exceeds training-set size {I}")
    group = config.group
    start = time.perf_counter()
    report = TrainReport(config=asdict(config))
    rng = np.random.default_rng([config.seed, 1 if group == "a" else 2])
    theta = bank.flat("all")
    mask = np.zeros_like(theta)
    pos = 0
    for net, key in bank.param_names("all"):
        size = bank.params[net][key].size
        if net in (FORWARD_NETS if group == "a" else BACKWARD_NETS):
            mask[pos:pos + size] = 1.0
        pos += size
    adam = _Adam(theta.size, config.lr) if config.optimizer == "adam" else None

    current = bank.copy()
    best = current.copy()
    best_val = _validation_rmse(best, data.validation, model, group)
    report.best_val_rmse = best_val
    since_best = 0
    step = 0
    for epoch in range(int(config.epochs)):
        perm = rng.permutation(I)
        losses = []
        for b0 in range(0, I - J + 1, J):
            idx = np.sort(perm[b0:b0 + J])
            loss, grad, _ = loss_and_grad(current, train.x[idx], train.z[idx], model, group, config.tau,
                                          config.normalized_loss, ids=train.ids[idx], step=step)
            grad = clip_global_norm(grad * mask, config.clip)
            theta = adam.step(theta, grad) if adam is not None else sgd_step(theta, grad, config.lr)
            current = current.with_flat(theta)
            losses.append(loss)
            step += 1
        report.train_loss.append(float(np.mean(losses)))
        val = _validation_rmse(current, data.validation, model, group)
        report.val_rmse.append(val)
        if log is not None:
            log(f"epoch {epoch + 1}: train loss {report.train_loss[-1]:.6g}, val rmse {val:.6g}")
        if val < best_val:
            best_val = val
            best = current.copy()
            report.best_epoch = epoch
            report.best_val_rmse = val
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                report.stopped_early = True
                break
    report.wall_time = time.perf_counter() - start
    return best, report
