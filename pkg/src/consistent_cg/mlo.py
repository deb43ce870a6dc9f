"""Multilevel optimization: weighted training, implicit hypergradients, sequential meta updates.

One outer round runs ``tp`` gradient steps on the weighted training loss with
every meta-weight-net frozen, then a meta phase.  In ``mlo`` mode the meta
phase walks the buckets one at a time (simple to complex, or the reverse) and
gives each net ``tm`` updates on its own bucket's validation loss.  In
``mwn-simultaneous`` mode all nets step together on the joint validation loss.
``baseline`` never touches the nets and trains with unit weights.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError
from .models import (
    Batch,
    ModelConfig,
    init_meta_net,
    init_model,
    losses_batch,
    meta_forward_batch,
    query_features,
)
from .partition import ValidationPartition, partition
from .synth import Sample
from .tensor import GradientGraph, ParamSet, Tensor

log = logging.getLogger(__name__)

MODES = ("baseline", "mwn-simultaneous", "mlo")
ORDERS = ("s2c", "c2s")
MODE_ALIASES = {"mwn-sim": "mwn-simultaneous"}


@dataclass
class TrainConfig:
    k: int = 3
    tp: int = 20
    tm: int = 1
    lr_theta: float = 5e-5
    lr_omega: float = 0.05
    neumann_j: int = 3
    neumann_alpha: float | None = None  # None: same as lr_theta
    rounds: int = 30
    patience: int = 5
    batch_size: int | None = None  # None: full batch
    meta_batch_size: int | None = None  # rows of D_t in the hypergradient's training loss
    seed: int = 0
    mode: str = "mlo"
    order: str = "s2c"
    normalize_weights: bool = False
    d_emb: int = 16
    hidden: int = 64
    meta_hidden: int = 32

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)

    @property
    def alpha(self) -> float:
        return self.lr_theta if self.neumann_alpha is None else self.neumann_alpha

    def validate(self) -> TrainConfig:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.order not in ORDERS:
            problems.append(f"order must be one of {ORDERS}, got {self.order!r}")
        for name in ("k", "tp", "rounds", "patience", "d_emb", "hidden", "meta_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.tm < (0 if self.mode == "baseline" else 1):
            problems.append("tm must be >= 1 outside baseline mode")
        if self.neumann_j < 0:
            problems.append("neumann_j must be >= 0")
        for name in ("lr_theta", "lr_omega", "alpha"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("batch_size", "meta_batch_size"):
            value = getattr(self, name)
            if value is not None and value < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ValueError("invalid training config: " + "; ".join(problems))
        return self

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return ModelConfig(base.n_sizes, base.n_colors, base.n_shapes, self.d_emb, self.hidden, self.meta_hidden)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise DataError(f"unknown config keys {unknown}")
        return cls(**obj)


@dataclass
class TrainState:
    theta: ParamSet
    omegas: list[ParamSet]
    round: int = 0
    loss_history: list[list[float]] = field(default_factory=list)
    trace: list[int] = field(default_factory=list)


@dataclass
class TrainingData:
    """Training samples sorted by bucket, with their batched encodings."""

    samples: list[Sample]
    batch: Batch
    buckets: np.ndarray  # 1-based bucket of each row
    partition: ValidationPartition

    @classmethod
    def build(cls, samples: list[Sample], k: int, model_cfg: ModelConfig) -> TrainingData:
        part = partition(samples, k)
        labels = np.array([part.bucket_of(s) for s in samples])
        order = np.argsort(labels, kind="stable")
        ordered = [samples[r] for r in order]
        return cls(ordered, Batch.from_samples(ordered, model_cfg), labels[order], part)

    @property
    def k(self) -> int:
        return self.partition.k

    def rows(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.buckets == i)

    def active_buckets(self) -> list[int]:
        return [i for i in range(1, self.k + 1) if np.any(self.buckets == i)]


# ---------------------------------------------------------------- losses


def sample_weights(
    theta: ParamSet,
    omegas: Sequence[ParamSet],
    batch: Batch,
    buckets: np.ndarray,
    trainable: Sequence[int] = (),
    normalize: bool = False,
) -> Tensor:
    """w_d for every row, each from its own bucket's net; only ``trainable`` nets stay on the tape."""
    buckets = np.asarray(buckets)
    if buckets.shape != (len(batch),):
        raise DataError(f"need one bucket label per row, got {buckets.shape} for {len(batch)} rows")
    bad = (buckets < 1) | (buckets > len(omegas))
    if bad.any():
        raise DataError(f"sample {batch.ids[int(np.argmax(bad))]} has no bucket assignment")
    feats = query_features(theta, batch).data
    parts, order = [], []
    for i in range(1, len(omegas) + 1):
        rows = np.flatnonzero(buckets == i)
        if rows.size == 0:
            continue
        f = Tensor(feats[rows])
        if i in trainable:
            parts.append(meta_forward_batch(omegas[i - 1], f))
        else:
            with T.no_grad():
                parts.append(Tensor(meta_forward_batch(omegas[i - 1].detached(), f).data))
        order.append(rows)
    order = np.concatenate(order)
    w = T.concat(parts, axis=0)
    if not np.array_equal(order, np.arange(len(order))):
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        w = T.take(w, inverse)
    if normalize:
        w = w / T.mean(w)
    return w


def weighted_train_loss(
    theta: ParamSet,
    omegas: Sequence[ParamSet],
    batch: Batch,
    buckets: np.ndarray,
    mode: str = "mlo",
    trainable: Sequence[int] = (),
    normalize: bool = False,
    scale: float = 1.0,
) -> Tensor:
    """sum_i sum_{d in bucket i} w_d * L(theta; d); unit weights in baseline mode."""
    losses = losses_batch(theta, batch)
    if mode == "baseline":
        total = T.sum(losses)
    else:
        w = sample_weights(theta, omegas, batch, buckets, trainable, normalize)
        total = T.sum(w * losses)
    return total * scale if scale != 1.0 else total


def bucket_validation_loss(theta: ParamSet, data: TrainingData, buckets: Sequence[int]) -> Tensor:
    """Unweighted summed loss over the given buckets."""
    rows = np.concatenate([data.rows(i) for i in buckets])
    return T.sum(losses_batch(theta, data.batch.subset(rows)))


# ---------------------------------------------------------------- inner loop


def _minibatches(n: int, size: int | None, rng: np.random.Generator):
    if size is None or size >= n:
        while True:
            yield None
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start : start + size]


def parameter_optimization(state: TrainState, data: TrainingData, cfg: TrainConfig, rng: np.random.Generator | None = None) -> ParamSet:
    """``tp`` gradient-descent steps on the weighted training loss with all nets frozen."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    batches = _minibatches(len(data.batch), cfg.batch_size, rng)
    theta = state.theta
    for _ in range(cfg.tp):
        rows = next(batches)
        batch = data.batch if rows is None else data.batch.subset(rows)
        labels = data.buckets if rows is None else data.buckets[rows]
        loss = weighted_train_loss(theta, state.omegas, batch, labels, cfg.mode, normalize=cfg.normalize_weights)
        g = T.backward(loss, theta).flatten()
        theta = theta.unflatten(theta.flatten() - cfg.lr_theta * g)
    return theta


def gradient_descent(loss_fn: Callable[[ParamSet], Tensor], theta: ParamSet, lr: float, steps: int) -> ParamSet:
    """Plain GD on an arbitrary loss; the toy-problem counterpart of parameter_optimization."""
    for _ in range(steps):
        g = T.backward(loss_fn(theta), theta).flatten()
        theta = theta.unflatten(theta.flatten() - lr * g)
    return theta


# ---------------------------------------------------------------- hypergradients


def neumann_ihvp(hvp_fn: Callable[[np.ndarray], np.ndarray], v, alpha: float, j: int) -> np.ndarray:
    """alpha * sum_{n=0..j} (I - alpha H)^n v, using exactly j Hessian-vector products."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if j < 0:
        raise ValueError("j must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    term = v.copy()
    total = v.copy()
    for _ in range(j):
        with np.errstate(over="ignore", invalid="ignore"):
            term = term - alpha * np.asarray(hvp_fn(term))
            total = total + term
        if not np.isfinite(total).all():
            raise NumericError("Neumann series diverged")
    return alpha * total


def implicit_hypergradient(
    train_loss: Callable[[ParamSet, Sequence[ParamSet]], Tensor],
    val_loss: Callable[[ParamSet], Tensor],
    theta: ParamSet,
    omegas: Sequence[ParamSet],
    alpha: float,
    j: int,
) -> list[np.ndarray]:
    """d val_loss(theta*(omega)) / d omega through the implicit function theorem.

    -(d2 L_t / d omega d theta) H^-1 dL_v/dtheta, with H^-1 from a truncated
    Neumann series.  The validation loss has no direct omega dependence.
    """
    v = T.backward(val_loss(theta), theta).flatten()
    with T.recording(True):
        graph = GradientGraph(train_loss(theta, omegas), theta.tensors())
    p = neumann_ihvp(graph.hvp, v, alpha, j)
    flat = -graph.vjp(p, [t for om in omegas for t in om.tensors()])
    out, offset = [], 0
    for om in omegas:
        out.append(flat[offset : offset + om.size])
        offset += om.size
    return out


def _meta_rows(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
    n = len(data.batch)
    if cfg.meta_batch_size is None or cfg.meta_batch_size >= n:
        return data.batch, data.buckets, 1.0
    rows = np.sort(rng.choice(n, size=cfg.meta_batch_size, replace=False))
    return data.batch.subset(rows), data.buckets[rows], n / cfg.meta_batch_size


def hypergradient(
    buckets: Sequence[int],
    state: TrainState,
    data: TrainingData,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    validate_on: Sequence[int] | None = None,
) -> list[np.ndarray]:
    """Hypergradients for the nets of ``buckets`` at the current theta*.

    The validation objective is the unweighted loss over ``validate_on``
    (default: the same buckets).  Nets outside ``buckets`` are constants.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    batch, labels, scale = _meta_rows(data, cfg, rng)
    validate_on = list(buckets) if validate_on is None else list(validate_on)
    buckets = list(buckets)

    def train_loss(theta, nets):
        omegas = list(state.omegas)
        for i, net in zip(buckets, nets):
            omegas[i - 1] = net
        return weighted_train_loss(
            theta, omegas, batch, labels, cfg.mode, trainable=buckets,
            normalize=cfg.normalize_weights, scale=scale,
        )

    return implicit_hypergradient(
        train_loss,
        lambda theta: bucket_validation_loss(theta, data, validate_on),
        state.theta,
        [state.omegas[i - 1] for i in buckets],
        cfg.alpha,
        cfg.neumann_j,
    )


def meta_optimization(state: TrainState, data: TrainingData, cfg: TrainConfig, rng: np.random.Generator | None = None) -> list[ParamSet]:
    """One meta phase; updates ``state.omegas`` and appends to ``state.trace``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if cfg.mode == "baseline":
        return state.omegas
    active = data.active_buckets()
    if cfg.mode == "mlo":
        order = active if cfg.order == "s2c" else active[::-1]
        for i in order:
            for _ in range(cfg.tm):
                (g,) = hypergradient([i], state, data, cfg, rng)
                net = state.omegas[i - 1]
                state.omegas[i - 1] = net.unflatten(net.flatten() - cfg.lr_omega * g)
                state.trace.append(i)
    else:
        for _ in range(cfg.tm):
            grads = hypergradient(active, state, data, cfg, rng)
            for i, g in zip(active, grads):
                net = state.omegas[i - 1]
                state.omegas[i - 1] = net.unflatten(net.flatten() - cfg.lr_omega * g)
                state.trace.append(i)
    return state.omegas


# ---------------------------------------------------------------- outer loop


@dataclass
class RunResult:
    theta: ParamSet
    state: TrainState
    history: list[dict]
    model_config: ModelConfig
    partition: ValidationPartition
    stopped_early: bool = False


def params_digest(params: ParamSet) -> str:
    return hashlib.sha256(params.flatten().tobytes()).hexdigest()


def _round_stats(state: TrainState, data: TrainingData, cfg: TrainConfig) -> tuple[list[float], list[float]]:
    with T.no_grad():
        theta = state.theta.detached()
        losses = losses_batch(theta, data.batch).data
        if cfg.mode == "baseline":
            weights = np.ones(len(losses))
        else:
            weights = sample_weights(
                theta, [o.detached() for o in state.omegas], data.batch, data.buckets,
                normalize=cfg.normalize_weights,
            ).data
    val, wmean = [], []
    for i in range(1, data.k + 1):
        rows = data.rows(i)
        val.append(float(losses[rows].mean()) if rows.size else float("nan"))
        wmean.append(float(weights[rows].mean()) if rows.size else float("nan"))
    return val, wmean


def init_state(cfg: TrainConfig, model_cfg: ModelConfig) -> TrainState:
    root = np.random.default_rng(cfg.seed)
    model_rng, *net_rngs = root.spawn(cfg.k + 1)
    return TrainState(init_model(model_cfg, model_rng), [init_meta_net(model_cfg, r) for r in net_rngs])


def run(cfg: TrainConfig, train: list[Sample], model_cfg: ModelConfig, on_round: Callable[[dict], None] | None = None) -> RunResult:
    """Alternate parameter and meta optimization until the round cap or early stop."""
    cfg.validate()
    model_cfg = cfg.model_config(model_cfg)
    data = TrainingData.build(train, cfg.k, model_cfg)
    state = init_state(cfg, model_cfg)
    data_rng, meta_rng = np.random.default_rng([cfg.seed, 7]).spawn(2)
    history: list[dict] = []
    best, stale, stopped = float("inf"), 0, False
    for r in range(1, cfg.rounds + 1):
        state.round = r
        before = params_digest(state.omegas[0]) if state.omegas else ""
        state.theta = parameter_optimization(state, data, cfg, data_rng)
        assert not state.omegas or params_digest(state.omegas[0]) == before
        mark = len(state.trace)
        meta_optimization(state, data, cfg, meta_rng)
        val, wmean = _round_stats(state, data, cfg)
        state.loss_history.append(val)
        finite = [v for v in val if np.isfinite(v)]
        score = float(np.mean(finite))
        entry = {
            "round": r,
            "mean_val_loss": score,
            "bucket_val_loss": val,
            "bucket_mean_weight": wmean,
            "trace": state.trace[mark:],
        }
        history.append(entry)
        if on_round is not None:
            on_round(entry)
        log.info("round %d: val %.4f weights %s", r, score, np.round(wmean, 3).tolist())
        if score < best - 1e-12:
            best, stale = score, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                stopped = True
                break
    return RunResult(state.theta, state, history, model_cfg, data.partition, stopped)
