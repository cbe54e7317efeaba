"""Gated recurrent filter/smoother with learned forward and global trends.

The forward pass (FRGN) runs, per frame: memory update gate (FMUG), forward
filtering gate (FFG), trend-compensated EKF prediction and the EKF update.
The backward pass (BRGN) runs, per frame from K-1 down to 1: backward
smoothing gate (BSG), trend-compensated backward prediction, RTS-type
smoothing, then the backward memory update gate (BMUG).

Everything is written against :mod:`ebrns.tensor`, batched over sequences:
state means are (B, n_x, 1), covariances (B, n_x, n_x).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .beliefs import GaussianBelief, MemoryBelief, TrendEstimate
from .models import StateSpaceModel, ConfigError
from .tensor import Tensor

__all__ = [
    "NET_NAMES",
    "FORWARD_NETS",
    "BACKWARD_NETS",
    "GateBank",
    "EbrnsCache",
    "mlp_forward",
    "build_gate_input",
    "gate_pair",
    "frgn_step",
    "brgn_step",
    "run_ebrns",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "SCHEMA_VERSION",
]

FORWARD_NETS = ("ac1", "ac2", "a1", "a2")
BACKWARD_NETS = ("bc1", "bc2", "b1", "b2")
NET_NAMES = FORWARD_NETS + BACKWARD_NETS
PARAM_KEYS = ("w1", "b1", "w2", "b2")
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class GateBank:
    """Weights of the eight two-layer tanh networks plus input normalisation.

    ``params[net][key]`` with key in ``w1, b1, w2, b2``; biases are columns.
    Memory nets (``ac*``, ``bc*``) read ``2*d_c + n_x`` inputs and emit
    ``d_c``; trend nets (``a*``, ``b*``) read ``2*d_c`` and emit ``n_x``.
    """

    n_x: int
    d_c: int
    hidden: int
    params: dict[str, dict[str, np.ndarray]]
    norm: np.ndarray
    model_id: str = ""
    n_z: int = 0

    @classmethod
    def init(cls, n_x: int, d_c: int = 32, hidden: int = 32, norm=None,
             seed: int = 0, model_id: str = "", n_z: int = 0) -> "GateBank":
        rng = np.random.default_rng(seed)
        params = {}
        for name in NET_NAMES:
            n_in, n_out = cls.io_dims(name, n_x, d_c)
            lim1 = 1.0 / np.sqrt(n_in)
            lim2 = 1.0 / np.sqrt(hidden)
            params[name] = {
                "w1": rng.uniform(-lim1, lim1, (hidden, n_in)),
                "b1": rng.uniform(-lim1, lim1, (hidden, 1)),
                "w2": rng.uniform(-lim2, lim2, (n_out, hidden)),
                "b2": rng.uniform(-lim2, lim2, (n_out, 1)),
            }
        norm = np.ones(n_x) if norm is None else np.asarray(norm, dtype=np.float64).reshape(n_x)
        return cls(n_x, d_c, hidden, params, norm, model_id, n_z)

    @staticmethod
    def io_dims(name: str, n_x: int, d_c: int) -> tuple[int, int]:
        if name[1] == "c":
            return 2 * d_c + n_x, d_c
        return 2 * d_c, n_x

    def param_names(self, group: str = "all") -> list[tuple[str, str]]:
        nets = {"a": FORWARD_NETS, "b": BACKWARD_NETS, "all": NET_NAMES}[group]
        return [(net, key) for net in nets for key in PARAM_KEYS]

    def count(self, group: str = "all") -> int:
        return sum(self.params[n][k].size for n, k in self.param_names(group))

    def flat(self, group: str = "all") -> np.ndarray:
        return np.concatenate([self.params[n][k].ravel() for n, k in self.param_names(group)])

    def with_flat(self, theta: np.ndarray, group: str = "all") -> "GateBank":
        theta = np.asarray(theta, dtype=np.float64)
        params = {n: {k: v.copy() for k, v in d.items()} for n, d in self.params.items()}
        pos = 0
        for n, k in self.param_names(group):
            size = params[n][k].size
            params[n][k] = theta[pos:pos + size].reshape(params[n][k].shape).copy()
            pos += size
        if pos != theta.size:
            raise ValueError(f"expected {pos} parameters, got {theta.size}")
        return GateBank(self.n_x, self.d_c, self.hidden, params, self.norm.copy(), self.model_id, self.n_z)

    def copy(self) -> "GateBank":
        return self.with_flat(self.flat())

    def tensors(self, tape: T.Tape | None = None, train: str | None = None) -> dict[str, dict[str, Tensor]]:
        """Networks as Tensors; the ``train`` group ("a" or "b") is watched on ``tape``."""
        trained = set()
        if train is not None:
            if tape is None:
                raise ValueError("a tape is required to track parameters")
            trained = set(FORWARD_NETS if train == "a" else BACKWARD_NETS)
        out = {}
        for name in NET_NAMES:
            d = self.params[name]
            if name in trained:
                out[name] = {k: tape.watch(d[k], f"{name}.{k}") for k in PARAM_KEYS}
            else:
                out[name] = {k: Tensor(d[k]) for k in PARAM_KEYS}
        return out


def mlp_forward(net: dict, x) -> Tensor:
    """Two-layer network ``w2 tanh(w1 x + b1) + b2`` on column input(s)."""
    x = T.as_tensor(x)
    w1 = T.as_tensor(net["w1"])
    if x.shape[-2] != w1.shape[-1]:
        raise T.DimensionError(f"network expects {w1.shape[-1]} inputs, got {x.shape[-2]}")
    hidden = T.tanh(T.matmul(w1, x) + net["b1"])
    return T.matmul(net["w2"], hidden) + net["b2"]


def build_gate_input(kind: str, mem_mean, mem_var, state=None, norm=None) -> Tensor:
    """Gate input vector.

    Memory gates (``ac``, ``bc``): ``concat[sigmoid(concat[c, diag S]), x / norm]``.
    Trend gates (``a``, ``b``): ``sigmoid(concat[c, diag S])``.
    """
    squashed = T.sigmoid(T.concat([mem_mean, mem_var], axis=-2))
    if kind in ("a", "b"):
        if state is not None:
            raise ValueError(f"gate {kind!r} takes no state input")
        return squashed
    if kind not in ("ac", "bc"):
        raise ValueError(f"unknown gate kind {kind!r}")
    if state is None:
        raise ValueError(f"gate {kind!r} needs a state input")
    if norm is None:
        raise ConfigError("normalisation statistics are missing")
    inv = (1.0 / np.asarray(norm, dtype=np.float64)).reshape(-1, 1)
    return T.concat([squashed, T.hadamard(state, inv)], axis=-2)


def gate_pair(mean_net, var_net, inp, nominal: bool = False) -> tuple[Tensor, Tensor]:
    """Mean head and positive diagonal (entrywise exp of the second head)."""
    if nominal:
        n_out = np.asarray(T.as_tensor(mean_net["b2"]).value).shape[-2]
        zero = Tensor(np.zeros(inp.shape[:-2] + (n_out, 1)))
        return zero, zero
    return mlp_forward(mean_net, inp), T.exp(mlp_forward(var_net, inp))


# --------------------------------------------------------------------- steps


def _predict(mean, cov, model, k, trend_mean, trend_var):
    F = model.F(mean, k)
    x = model.f(mean, k) + trend_mean
    P = T.matmul(T.matmul(F, cov), T.transpose(F)) + model.Q
    P = T.symmetrize(P + T.diag_embed(trend_var))
    return x, P, F


def _update(mean, cov, z, model, k):
    H = model.H(mean, k)
    z_hat = model.h(mean, k)
    Pz = T.symmetrize(T.matmul(T.matmul(H, cov), T.transpose(H)) + model.R)
    Pxz = T.matmul(cov, T.transpose(H))
    innov = T.wrap_angle(z - z_hat, model.angle_rows)
    x = mean + T.matmul(Pxz, T.spd_solve(Pz, innov))
    P = T.symmetrize(cov - T.matmul(Pxz, T.spd_solve(Pz, T.transpose(Pxz))))
    return x, P, innov


def _forward_step(nets, model, norm, k, prev_mean, prev_cov, mem_mean, mem_var, z, nominal):
    if nominal:
        new_mem_mean, new_mem_var = mem_mean, mem_var
        zero = Tensor(np.zeros(prev_mean.shape))
        trend_mean, trend_var = zero, zero
    else:
        i_ac = build_gate_input("ac", mem_mean, mem_var, prev_mean, norm)
        new_mem_mean, new_mem_var = gate_pair(nets["ac1"], nets["ac2"], i_ac)
        i_a = build_gate_input("a", new_mem_mean, new_mem_var)
        trend_mean, trend_var = gate_pair(nets["a1"], nets["a2"], i_a)
    x_pred, P_pred, F = _predict(prev_mean, prev_cov, model, k, trend_mean, trend_var)
    x_filt, P_filt, innov = _update(x_pred, P_pred, z, model, k)
    return x_filt, P_filt, x_pred, P_pred, F, new_mem_mean, new_mem_var, trend_mean, trend_var, innov


def _backward_step(nets, norm, filt_mean, filt_cov, pred_mean_next, pred_cov_next, F_next,
                   sm_mean_next, sm_cov_next, mem_mean_next, mem_var_next, nominal):
    if nominal:
        zero = Tensor(np.zeros(filt_mean.shape))
        trend_mean, trend_var = zero, zero
        new_mem_mean, new_mem_var = mem_mean_next, mem_var_next
    else:
        i_b = build_gate_input("b", mem_mean_next, mem_var_next)
        trend_mean, trend_var = gate_pair(nets["b1"], nets["b2"], i_b)
    xb = pred_mean_next + trend_mean
    Pb = pred_cov_next + T.diag_embed(trend_var)
    C = T.matmul(filt_cov, T.transpose(F_next))
    G = T.transpose(T.spd_solve(Pb, T.transpose(C)))
    x = filt_mean + T.matmul(G, sm_mean_next - xb)
    P = T.symmetrize(filt_cov + T.matmul(T.matmul(G, sm_cov_next - Pb), T.transpose(G)))
    if not nominal:
        i_bc = T.concat([T.sigmoid(T.concat([mem_mean_next, mem_var_next], axis=-2)),
                         T.hadamard(sm_mean_next, (1.0 / norm).reshape(-1, 1))], axis=-2)
        new_mem_mean, new_mem_var = gate_pair(nets["bc1"], nets["bc2"], i_bc)
    return x, P, new_mem_mean, new_mem_var, trend_mean, trend_var


def _belief_tensors(b: GaussianBelief):
    return Tensor(b.mean), Tensor(b.cov)


def frgn_step(prev: GaussianBelief, prev_mem: MemoryBelief, z_k, model: StateSpaceModel,
              bank: GateBank | None, k: int, nominal: bool = False):
    """One forward frame on a single sequence.

    Returns ``(filtered, predicted, memory, trend)`` as plain-array value types.
    """
    if k < 1:
        raise ValueError("forward steps start at the second frame (k >= 1, zero-based)")
    nets = bank.tensors() if bank is not None else None
    nominal = nominal or bank is None
    norm = bank.norm if bank is not None else np.ones(model.n_x)
    out = _forward_step(nets, model, norm, k, *_belief_tensors(prev), Tensor(prev_mem.mean),
                        Tensor(prev_mem.var), Tensor(np.asarray(z_k, dtype=float).reshape(-1, 1)), nominal)
    x_f, P_f, x_p, P_p, _, c, s, d, sd, _ = (t.value for t in out)
    return (GaussianBelief(x_f, P_f), GaussianBelief(x_p, P_p),
            MemoryBelief(c, s, "forward"), TrendEstimate(d, sd, "forward"))


def brgn_step(k: int, cache: "EbrnsCache", next_backward_mem: MemoryBelief,
              bank: GateBank | None, nominal: bool = False, b: int = 0):
    """One backward frame of sequence ``b`` of a cache whose frame k+1 is smoothed.

    Returns ``(smoothed_k, backward_memory_k, global_trend_{k+1})``.
    """
    if cache.smooth_mean[k + 1] is None:
        raise ValueError(f"frame {k + 1} has not been smoothed yet")
    nets = bank.tensors() if bank is not None else None
    nominal = nominal or bank is None
    norm = bank.norm if bank is not None else np.ones(cache.n_x)
    pick = lambda t: Tensor(t.value[b] if t.value.ndim > 2 else t.value)
    x, P, c, s, d, sd = _backward_step(
        nets, norm, pick(cache.filt_mean[k]), pick(cache.filt_cov[k]),
        pick(cache.pred_mean[k + 1]), pick(cache.pred_cov[k + 1]), pick(cache.F[k + 1]),
        pick(cache.smooth_mean[k + 1]), pick(cache.smooth_cov[k + 1]),
        Tensor(next_backward_mem.mean), Tensor(next_backward_mem.var), nominal,
    )
    return (GaussianBelief(x.value, P.value), MemoryBelief(c.value, s.value, "backward"),
            TrendEstimate(d.value, sd.value, "global"))


# ---------------------------------------------------------------------- run


@dataclass
class EbrnsCache:
    """Per-frame Tensors of a batched run (index 0 = frame 1).

    Forward lists are filled first; backward lists stay ``None`` until the
    smoothing pass writes them.  ``mem_b[K-1]`` is the forward memory at K.
    """

    n_x: int
    batched: bool
    pred_mean: list = field(default_factory=list)
    pred_cov: list = field(default_factory=list)
    filt_mean: list = field(default_factory=list)
    filt_cov: list = field(default_factory=list)
    F: list = field(default_factory=list)
    innovation: list = field(default_factory=list)
    mem_a: list = field(default_factory=list)
    trend_a: list = field(default_factory=list)
    smooth_mean: list = field(default_factory=list)
    smooth_cov: list = field(default_factory=list)
    mem_b: list = field(default_factory=list)
    trend_b: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.filt_mean)

    def stack(self, name: str) -> np.ndarray:
        """Stacked values of one record list: (B, K, ...) or (K, ...) when unbatched."""
        items = getattr(self, name)
        if any(t is None for t in items):
            raise ValueError(f"{name} is incomplete")
        vals = [t.value if isinstance(t, Tensor) else t for t in items]
        arr = np.stack(vals, axis=1)
        return arr if self.batched else arr[0]

    def stack_pairs(self, name: str, which: int) -> np.ndarray:
        items = getattr(self, name)
        arr = np.stack([pair[which].value for pair in items], axis=1)
        return arr if self.batched else arr[0]


def _initial_beliefs(z: np.ndarray, model: StateSpaceModel, init):
    B = z.shape[0]
    if init is None:
        mean = np.stack([model.initial_mean(z[b, 0]) for b in range(B)])
        cov = np.broadcast_to(model.initial_cov(), (B, model.n_x, model.n_x)).copy()
    else:
        beliefs = init if isinstance(init, (list, tuple)) else [init] * B
        mean = np.stack([np.asarray(g.mean, dtype=float).reshape(-1, 1) for g in beliefs])
        cov = np.stack([np.asarray(g.cov, dtype=float) for g in beliefs])
    return Tensor(mean), Tensor(cov)


def run_ebrns(z, model: StateSpaceModel, bank: GateBank | None, init=None, mode: str = "smooth",
              nominal: bool = False, tape: T.Tape | None = None, train: str | None = None,
              forward_cache: EbrnsCache | None = None) -> EbrnsCache:
    """Forward filtering over all frames and, for ``mode="smooth"``, backward smoothing.

    ``z`` is (K, n_z) or (B, K, n_z).  ``init`` is the prior over the first
    state before z_1 (a GaussianBelief or one per sequence); default is the
    model's diffuse prior.  With ``tape`` and ``train`` in {"a", "b"} the
    corresponding parameter group is tracked.  A ``forward_cache`` computed
    without tracking may be passed to skip the forward pass (stage-two use).
    """
    if mode not in ("filter_only", "smooth"):
        raise ValueError(f"mode must be 'filter_only' or 'smooth', got {mode!r}")
    z = np.asarray(z, dtype=np.float64)
    batched = z.ndim == 3
    if not batched:
        z = z[None]
    B, K = z.shape[:2]
    if K < 2:
        raise ValueError("need at least two frames")
    zt = z.reshape(B, K, -1, 1)
    nominal = nominal or bank is None
    if bank is not None and (bank.n_x != model.n_x):
        raise ConfigError(f"gate bank has n_x={bank.n_x}, model has n_x={model.n_x}")
    nets = bank.tensors(tape, train) if bank is not None else None
    norm = bank.norm if bank is not None else np.ones(model.n_x)

    if forward_cache is not None:
        cache = forward_cache
        if cache.K != K:
            raise ValueError("forward cache length does not match the measurements")
    else:
        cache = EbrnsCache(model.n_x, batched)
        mean, cov = _initial_beliefs(z, model, init)
        x, P, innov = _update(mean, cov, Tensor(zt[:, 0]), model, 0)
        d_c = bank.d_c if bank is not None else 1
        mem = (Tensor(np.zeros((B, d_c, 1))), Tensor(np.ones((B, d_c, 1))))
        cache.pred_mean.append(mean)
        cache.pred_cov.append(cov)
        cache.filt_mean.append(x)
        cache.filt_cov.append(P)
        cache.F.append(Tensor(np.broadcast_to(np.eye(model.n_x), (B, model.n_x, model.n_x))))
        cache.innovation.append(innov)
        cache.mem_a.append(mem)
        zero = Tensor(np.zeros((B, model.n_x, 1)))
        cache.trend_a.append((zero, zero))
        for k in range(1, K):
            out = _forward_step(nets, model, norm, k, x, P, mem[0], mem[1], Tensor(zt[:, k]), nominal)
            x, P, xp, Pp, F, c, s, d, sd, innov = out
            mem = (c, s)
            cache.pred_mean.append(xp)
            cache.pred_cov.append(Pp)
            cache.filt_mean.append(x)
            cache.filt_cov.append(P)
            cache.F.append(F)
            cache.innovation.append(innov)
            cache.mem_a.append(mem)
            cache.trend_a.append((d, sd))

    if mode == "smooth":
        cache = _smooth(cache, nets, norm, nominal)
    return cache


def _smooth(fwd: EbrnsCache, nets, norm, nominal) -> EbrnsCache:
    K = fwd.K
    cache = EbrnsCache(
        fwd.n_x, fwd.batched, fwd.pred_mean, fwd.pred_cov, fwd.filt_mean, fwd.filt_cov,
        fwd.F, fwd.innovation, fwd.mem_a, fwd.trend_a,
    )
    cache.smooth_mean = [None] * K
    cache.smooth_cov = [None] * K
    cache.mem_b = [None] * K
    cache.trend_b = [None] * K
    cache.smooth_mean[K - 1] = fwd.filt_mean[K - 1]
    cache.smooth_cov[K - 1] = fwd.filt_cov[K - 1]
    cache.mem_b[K - 1] = fwd.mem_a[K - 1]
    for k in range(K - 2, -1, -1):
        mem = cache.mem_b[k + 1]
        x, P, c, s, d, sd = _backward_step(
            nets, norm, fwd.filt_mean[k], fwd.filt_cov[k], fwd.pred_mean[k + 1], fwd.pred_cov[k + 1],
            fwd.F[k + 1], cache.smooth_mean[k + 1], cache.smooth_cov[k + 1], mem[0], mem[1], nominal,
        )
        cache.smooth_mean[k], cache.smooth_cov[k] = x, P
        cache.mem_b[k] = (c, s)
        cache.trend_b[k + 1] = (d, sd)
    return cache


# --------------------------------------------------------------- checkpoints


def bank_to_dict(bank: GateBank) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "model_id": bank.model_id,
        "dims": {"n_x": bank.n_x, "n_z": bank.n_z, "d_c": bank.d_c, "hidden": bank.hidden},
        "norm": bank.norm.tolist(),
        "nets": {
            name: {k: bank.params[name][k].tolist() for k in PARAM_KEYS} for name in NET_NAMES
        },
    }


def bank_from_dict(doc: dict) -> GateBank:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    try:
        dims = doc["dims"]
        n_x, d_c, hidden = int(dims["n_x"]), int(dims["d_c"]), int(dims["hidden"])
        params = {}
        for name in NET_NAMES:
            n_in, n_out = GateBank.io_dims(name, n_x, d_c)
            expect = {"w1": (hidden, n_in), "b1": (hidden, 1), "w2": (n_out, hidden), "b2": (n_out, 1)}
            params[name] = {}
            for k in PARAM_KEYS:
                arr = np.array(doc["nets"][name][k], dtype=np.float64)
                if arr.shape != expect[k]:
                    raise CheckpointError(f"{name}.{k} has shape {arr.shape}, expected {expect[k]}")
                params[name][k] = arr
        norm = np.array(doc["norm"], dtype=np.float64)
        if norm.shape != (n_x,) or not np.all(norm > 0):
            raise CheckpointError(f"norm statistics must be {n_x} positive numbers")
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing field {e}") from None
    return GateBank(n_x, d_c, hidden, params, norm, doc.get("model_id", ""), int(dims.get("n_z", 0)))


def save_checkpoint(bank: GateBank, path) -> None:
    Path(path).write_text(json.dumps(bank_to_dict(bank), indent=1))


def load_checkpoint(path) -> GateBank:
    return bank_from_dict(json.loads(Path(path).read_text()))
