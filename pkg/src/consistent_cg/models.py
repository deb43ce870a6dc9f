"""Task model (query/scene classifier) and the per-bucket meta-weight-nets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .synth import Sample, Vocabulary
from .tensor import ParamSet, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_sizes: int = 3
    n_colors: int = 6
    n_shapes: int = 6
    d_emb: int = 16
    hidden: int = 64
    meta_hidden: int = 32

    @property
    def n_items(self) -> int:
        return self.n_sizes + self.n_colors + self.n_shapes

    @property
    def scene_dim(self) -> int:
        s, c, h = self.n_sizes, self.n_colors, self.n_shapes
        return s + c + h + s * c + s * h + c * h

    @property
    def feature_dim(self) -> int:
        return 2 * self.d_emb

    @classmethod
    def for_vocab(cls, vocab: Vocabulary, **kw) -> ModelConfig:
        return cls(len(vocab.sizes), len(vocab.colors), len(vocab.shapes), **kw)


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    d_in = cfg.feature_dim + cfg.scene_dim
    return ParamSet(
        {
            "emb": _uniform(rng, 1, (cfg.n_items, cfg.d_emb)),
            "w1": _uniform(rng, d_in, (d_in, cfg.hidden)),
            "b1": np.zeros(cfg.hidden),
            "w2": _uniform(rng, cfg.hidden, (cfg.hidden, 1)),
            "b2": np.zeros(1),
        }
    )


def init_meta_net(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    m = cfg.meta_hidden
    return ParamSet(
        {
            "l1_w": _uniform(rng, cfg.feature_dim, (cfg.feature_dim, m)),
            "l1_b": np.zeros(m),
            "l2_w": _uniform(rng, m, (m, m)),
            "l2_b": np.zeros(m),
            "l3_w": _uniform(rng, m, (m, 1)),
            "l3_b": np.zeros(1),
        }
    )


# ---------------------------------------------------------------- encodings


def _check_items(sample: Sample, cfg: ModelConfig) -> None:
    for desc in sample.query:
        for item in desc:
            if not 0 <= item < cfg.n_items:
                raise DataError(f"sample {sample.id}: unknown vocabulary item {item}")
    if len(sample.query) > 2:
        raise DataError(f"sample {sample.id}: at most two descriptors are supported")


def scene_vector(scene, cfg: ModelConfig) -> np.ndarray:
    """Presence indicators of single items and of cross-kind item pairs bound to one object."""
    s, c = cfg.n_sizes, cfg.n_colors
    n = cfg.n_items
    out = np.zeros(cfg.scene_dim)
    sc, sh = n, n + s * cfg.n_colors
    ch = sh + s * cfg.n_shapes
    for obj in scene:
        if len(obj) != 3:
            raise DataError(f"malformed scene object {obj}")
        z, col, shp = obj
        if not (0 <= z < s and s <= col < s + c and s + c <= shp < n):
            raise DataError(f"malformed scene object {obj}")
        ci, hi = col - s, shp - s - c
        out[[z, col, shp]] = 1.0
        out[sc + z * cfg.n_colors + ci] = 1.0
        out[sh + z * cfg.n_shapes + hi] = 1.0
        out[ch + ci * cfg.n_shapes + hi] = 1.0
    return out


def slot_matrices(samples: list[Sample], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row-averaging matrices A1, A2 with A_k @ emb = mean embedding of descriptor k."""
    a = np.zeros((2, len(samples), cfg.n_items))
    for r, sample in enumerate(samples):
        _check_items(sample, cfg)
        for k, desc in enumerate(sample.query):
            for item in desc:
                a[k, r, item] += 1.0 / len(desc)
    return a[0], a[1]


@dataclass
class Batch:
    """Constant encodings of a list of samples, ready for batched forward passes."""

    ids: list[str]
    slot1: Tensor
    slot2: Tensor
    scene: Tensor
    target: Tensor

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples: list[Sample], cfg: ModelConfig) -> Batch:
        if not samples:
            raise DataError("empty batch")
        a1, a2 = slot_matrices(samples, cfg)
        scenes = np.stack([scene_vector(s.scene, cfg) for s in samples])
        y = np.array([1.0 if s.answer else 0.0 for s in samples])
        return cls([s.id for s in samples], Tensor(a1), Tensor(a2), Tensor(scenes), Tensor(y))

    def subset(self, rows: np.ndarray) -> Batch:
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda t: Tensor(t.data[rows])  # noqa: E731
        return Batch([self.ids[r] for r in rows], pick(self.slot1), pick(self.slot2), pick(self.scene), pick(self.target))


def query_encoding(params: ParamSet, batch: Batch) -> Tensor:
    emb = params["emb"]
    return T.concat([batch.slot1 @ emb, batch.slot2 @ emb], axis=1)


def query_features(params: ParamSet, batch: Batch) -> Tensor:
    """Meta-net input g(d): the query encoding, detached from the model parameters."""
    with T.no_grad():
        return Tensor(query_encoding(params.detached(), batch).data)


def forward_batch(params: ParamSet, batch: Batch) -> Tensor:
    """Yes-probabilities, shape (N,)."""
    # same as concat([query, scene]) @ w1, without differentiating through the constant scene block
    w1 = params["w1"]
    q_dim = w1.shape[0] - batch.scene.shape[1]
    pre = query_encoding(params, batch) @ T.slice_axis(w1, 0, 0, q_dim)
    pre = pre + batch.scene @ T.slice_axis(w1, 0, q_dim, w1.shape[0])
    h = T.relu(pre + params["b1"])
    logits = h @ params["w2"] + params["b2"]
    return T.reshape(T.sigmoid(logits), (len(batch),))


def losses_batch(params: ParamSet, batch: Batch) -> Tensor:
    """Per-sample BCE, shape (N,)."""
    return T.binary_cross_entropy(forward_batch(params, batch), batch.target)


def meta_forward_batch(omega: ParamSet, features: Tensor) -> Tensor:
    """Sample weights in (0, 1), shape (N,)."""
    h = T.relu(features @ omega["l1_w"] + omega["l1_b"])
    h = T.relu(h @ omega["l2_w"] + omega["l2_b"])
    out = T.sigmoid(h @ omega["l3_w"] + omega["l3_b"])
    return T.reshape(out, (features.shape[0],))


# ---------------------------------------------------------------- model object


class CompositionModel:
    """Item embeddings plus a two-layer perceptron over [slot encodings || scene]."""

    def __init__(self, cfg: ModelConfig, params: ParamSet | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_model(cfg, np.random.default_rng(seed))

    def encode_query(self, sample: Sample) -> np.ndarray:
        return query_features(self.params, Batch.from_samples([sample], self.cfg)).data[0].copy()

    def forward(self, sample: Sample) -> float:
        with T.no_grad():
            return forward_batch(self.params.detached(), Batch.from_samples([sample], self.cfg)).item()

    def sample_loss(self, sample: Sample) -> Tensor:
        return losses_batch(self.params, Batch.from_samples([sample], self.cfg))

    def predict(self, samples: list[Sample]) -> np.ndarray:
        with T.no_grad():
            return forward_batch(self.params.detached(), Batch.from_samples(samples, self.cfg)).numpy()


def encode_query(sample: Sample, model: CompositionModel) -> np.ndarray:
    return model.encode_query(sample)


def model_forward(sample: Sample, model: CompositionModel) -> float:
    return model.forward(sample)


def sample_loss(sample: Sample, model: CompositionModel) -> float:
    return model.sample_loss(sample).item()


def weight_forward(i: int, feature, nets: list[ParamSet]) -> float:
    """Weight of a sample in bucket ``i`` (1-based) from the i-th meta-weight-net."""
    if not 1 <= i <= len(nets):
        raise IndexError(f"bucket index {i} outside 1..{len(nets)}")
    omega = nets[i - 1]
    feature = np.asarray(feature, dtype=np.float64).reshape(1, -1)
    if feature.shape[1] != omega["l1_w"].shape[0]:
        raise ShapeError(f"feature dimension {feature.shape[1]} != {omega['l1_w'].shape[0]}")
    with T.no_grad():
        return meta_forward_batch(omega.detached(), Tensor(feature)).item()


# ---------------------------------------------------------------- persistence


def save_model(path, cfg: ModelConfig, params: ParamSet, meta_nets: list[ParamSet] | None = None, extra: dict | None = None) -> None:
    doc = {
        "config": asdict(cfg),
        "params": params.to_json(),
        "meta_nets": [net.to_json() for net in meta_nets or []],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> tuple[ModelConfig, ParamSet, list[ParamSet], dict]:
    try:
        doc = json.loads(Path(path).read_text())
        cfg = ModelConfig(**doc["config"])
        params = ParamSet.from_json(doc["params"])
        nets = [ParamSet.from_json(n) for n in doc.get("meta_nets", [])]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model file: {exc}", str(path)) from exc
    return cfg, params, nets, doc
