"""Synthetic grounded-composition QA world.

A query is one or two descriptors ("large red cube", "green"), a scene is a
handful of (size, color, shape) objects, and the answer is whether every
descriptor is matched by some object.  A set of held-out (shape, color) pairs
never co-occur in a training query; each of them seeds test triplets at the
phrase-phrase, phrase-word and word-word level.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SCHEMA_VERSION = 1
LEVELS = ("train", "pp", "pw", "ww")
TEST_LEVELS = ("pp", "pw", "ww")
KINDS = ("size", "color", "shape")
# proposal mix over a training query's longest phrase; longer queries are
# rejected more often, and K=3 quantile buckets need every class below a third
LONGEST_PHRASE_MIX = (0.24, 0.32, 0.44)

SIZE_NAMES = ["small", "medium", "large", "tiny", "huge", "big"]
COLOR_NAMES = ["red", "blue", "green", "yellow", "purple", "gray", "brown", "cyan", "white", "black"]
SHAPE_NAMES = ["cube", "sphere", "cylinder", "cone", "torus", "prism", "pyramid", "ring", "disk", "star"]


@dataclass(frozen=True)
class Vocabulary:
    sizes: tuple[str, ...]
    colors: tuple[str, ...]
    shapes: tuple[str, ...]

    @property
    def n_items(self) -> int:
        return len(self.sizes) + len(self.colors) + len(self.shapes)

    def ids(self, kind: str) -> range:
        start = 0
        for k, names in zip(KINDS, (self.sizes, self.colors, self.shapes)):
            if k == kind:
                return range(start, start + len(names))
            start += len(names)
        raise KeyError(kind)

    def kind_of(self, item: int) -> int:
        """Slot index (0 size, 1 color, 2 shape) of an item id."""
        if item < 0 or item >= self.n_items:
            raise DataError(f"unknown vocabulary item {item}")
        if item < len(self.sizes):
            return 0
        if item < len(self.sizes) + len(self.colors):
            return 1
        return 2

    def name(self, item: int) -> str:
        return (self.sizes + self.colors + self.shapes)[item]

    def to_json(self) -> dict:
        return {"sizes": list(self.sizes), "colors": list(self.colors), "shapes": list(self.shapes)}

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        try:
            return cls(tuple(obj["sizes"]), tuple(obj["colors"]), tuple(obj["shapes"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary: {exc}") from exc


@dataclass(frozen=True)
class WorldConfig:
    n_sizes: int = 3
    n_colors: int = 6
    n_shapes: int = 6
    blacklist_size: int = 8
    min_objects: int = 2
    max_objects: int = 6
    # every shape keeps this many trainable colors and vice versa
    coverage_reserve: int = 2


@dataclass(frozen=True)
class World:
    vocab: Vocabulary
    blacklist: tuple[tuple[int, int], ...]  # (shape_id, color_id)
    config: WorldConfig = WorldConfig()

    def __post_init__(self):
        object.__setattr__(self, "_held_out", frozenset(tuple(sorted(p)) for p in self.blacklist))

    def is_blacklisted(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self._held_out


@dataclass
class Sample:
    id: str
    level: str
    query: tuple[tuple[int, ...], ...]
    scene: tuple[tuple[int, int, int], ...]
    answer: bool
    phrase_lengths: tuple[int, ...] | None = None
    triplet_id: str | None = None
    novel_composition: tuple[int, int] | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class Triplet:
    triplet_id: str
    pp: Sample
    pw: Sample
    ww: Sample
    p1: tuple[int, ...]
    p2: tuple[int, ...]
    w1: int
    w2: int


@dataclass
class Datasets:
    train: list[Sample]
    test: list[Sample]
    iid: list[Sample]
    triplets: list[Triplet]


@dataclass(frozen=True)
class Counts:
    train: int = 20000
    triplets: int = 200
    iid: int = 2000


def make_vocabulary(cfg: WorldConfig) -> Vocabulary:
    for n, names in ((cfg.n_sizes, SIZE_NAMES), (cfg.n_colors, COLOR_NAMES), (cfg.n_shapes, SHAPE_NAMES)):
        if not 1 <= n <= len(names):
            raise DataError(f"vocabulary kind size {n} outside 1..{len(names)}")
    return Vocabulary(
        tuple(SIZE_NAMES[: cfg.n_sizes]),
        tuple(COLOR_NAMES[: cfg.n_colors]),
        tuple(SHAPE_NAMES[: cfg.n_shapes]),
    )


def generate_world(cfg: WorldConfig = WorldConfig(), seed: int = 0) -> World:
    """Vocabulary plus a seeded blacklist of held-out (shape, color) pairs."""
    vocab = make_vocabulary(cfg)
    shapes, colors = list(vocab.ids("shape")), list(vocab.ids("color"))
    reserve = cfg.coverage_reserve
    cap = min(len(shapes) * (len(colors) - reserve), len(colors) * (len(shapes) - reserve))
    if cfg.blacklist_size < 0 or cfg.blacklist_size > max(cap, 0):
        raise DataError(
            f"blacklist size {cfg.blacklist_size} infeasible (at most {max(cap, 0)} pairs "
            f"keep {reserve} trainable partners per item)"
        )
    rng = np.random.default_rng(seed)
    pairs = [(s, c) for s in shapes for c in colors]
    for _ in range(100):
        order = rng.permutation(len(pairs))
        per_shape = dict.fromkeys(shapes, 0)
        per_color = dict.fromkeys(colors, 0)
        chosen = []
        for k in order:
            s, c = pairs[k]
            if per_shape[s] + 1 > len(colors) - reserve or per_color[c] + 1 > len(shapes) - reserve:
                continue
            # spread the holdout: no item is held out more than ceil(size / n) times
            limit = -(-cfg.blacklist_size // min(len(shapes), len(colors)))
            if per_shape[s] >= limit or per_color[c] >= limit:
                continue
            chosen.append((s, c))
            per_shape[s] += 1
            per_color[c] += 1
            if len(chosen) == cfg.blacklist_size:
                break
        if len(chosen) == cfg.blacklist_size:
            return World(vocab, tuple(sorted(chosen)), cfg)
    raise DataError(f"could not place {cfg.blacklist_size} blacklisted pairs")


def oracle_answer(scene, query) -> bool:
    """True iff each descriptor is matched by at least one object.

    Items are matched by value against all three object slots, which is exact
    because item ids are disjoint across kinds.
    """
    return all(any(all(item in obj for item in desc) for obj in scene) for desc in query)


def query_pairs(query) -> set[tuple[int, int]]:
    """Unordered item pairs co-occurring anywhere in a query."""
    items = sorted({i for desc in query for i in desc})
    return set(itertools.combinations(items, 2))


def _pick(rng, ids: range) -> int:
    return ids.start + int(rng.integers(len(ids)))


def _random_descriptor(rng, vocab: Vocabulary, length: int) -> tuple[int, ...]:
    kinds = sorted(rng.permutation(3)[:length])
    return tuple(_pick(rng, vocab.ids(KINDS[k])) for k in kinds)


def _random_object(rng, vocab: Vocabulary) -> list[int]:
    return [_pick(rng, vocab.ids(k)) for k in KINDS]


def _sample_scene(rng, vocab: Vocabulary, query, cfg: WorldConfig):
    """One proposal: a mix of exact matches, near misses and random objects."""
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    for _ in range(n):
        obj = _random_object(rng, vocab)
        mode = rng.random()
        if mode < 2 / 3:
            desc = query[int(rng.integers(len(query)))]
            for item in desc:
                obj[vocab.kind_of(item)] = item
            if mode >= 1 / 3:
                # near miss: flip one of the descriptor's items
                item = desc[int(rng.integers(len(desc)))]
                kind = vocab.kind_of(item)
                ids = vocab.ids(KINDS[kind])
                if len(ids) > 1:
                    # uniform over the kind's other items
                    shift = 1 + int(rng.integers(len(ids) - 1))
                    obj[kind] = ids.start + (item - ids.start + shift) % len(ids)
        objects.append(tuple(obj))
    return tuple(objects)


class _Budget:
    def __init__(self, requested: int, what: str):
        self.left = 100 * max(requested, 1)
        self.what = what

    def spend(self) -> None:
        self.left -= 1
        if self.left < 0:
            raise DataError(f"rejection budget exhausted while generating {self.what}")


def _scene_with_answer(rng, vocab, query, target: bool, cfg, budget: _Budget):
    while True:
        budget.spend()
        scene = _sample_scene(rng, vocab, query, cfg)
        if oracle_answer(scene, query) == target:
            return scene


def _balanced_targets(rng, n: int) -> np.ndarray:
    targets = np.arange(n) % 2 == 0
    return targets[rng.permutation(n)]


def _training_query(rng, world: World):
    vocab = world.vocab
    while True:
        longest = 1 + int(rng.choice(3, p=LONGEST_PHRASE_MIX))
        n_desc = int(rng.integers(1, 3))
        lengths = [longest] + [int(rng.integers(1, longest + 1)) for _ in range(n_desc - 1)]
        lengths = [lengths[k] for k in rng.permutation(n_desc)]
        query = tuple(_random_descriptor(rng, vocab, ln) for ln in lengths)
        if not any(world.is_blacklisted(a, b) for a, b in query_pairs(query)):
            return query


def _iid_split(rng, world: World, n: int, prefix: str, budget: _Budget) -> list[Sample]:
    targets = _balanced_targets(rng, n)
    out = []
    for k in range(n):
        budget.spend()
        query = _training_query(rng, world)
        scene = _scene_with_answer(rng, world.vocab, query, bool(targets[k]), world.config, budget)
        out.append(
            Sample(
                id=f"{prefix}-{k:06d}",
                level="train",
                query=query,
                scene=scene,
                answer=bool(targets[k]),
                phrase_lengths=tuple(len(d) for d in query),
            )
        )
    return out


def _triplet_queries(rng, world: World, w1: int, w2: int, seen: set, budget: _Budget):
    vocab = world.vocab
    sizes, colors, shapes = (vocab.ids(k) for k in KINDS)
    novel = tuple(sorted((w1, w2)))
    while True:
        budget.spend()
        form = int(rng.integers(3))
        if form == 0:
            p1 = (_pick(rng, sizes), w1)
        elif form == 1:
            p1 = (_pick(rng, colors), w1)
        else:
            p1 = (_pick(rng, sizes), _pick(rng, colors), w1)
        p2 = (w2, _pick(rng, shapes))
        if p2[1] == w1:
            continue
        pp, pw, ww = (p1, p2), (p1, (w2,)), ((w2, w1),)
        ok = True
        for q in (pp, pw, ww):
            unseen = {p for p in query_pairs(q) if p not in seen}
            if unseen != {novel}:
                ok = False
                break
        if ok and all(p in seen for p in query_pairs((p1,)) | query_pairs((p2,))):
            return p1, p2, pp, pw, ww


def generate_datasets(world: World, counts: Counts = Counts(), seed: int = 0) -> Datasets:
    """Training split, IID holdout, and test triplets over the held-out pairs."""
    rng = np.random.default_rng([seed, 1])
    train = _iid_split(rng, world, counts.train, "train", _Budget(counts.train, "training set"))
    iid = _iid_split(
        np.random.default_rng([seed, 2]), world, counts.iid, "iid", _Budget(counts.iid, "iid set")
    )

    seen: set[tuple[int, int]] = set()
    for s in train:
        seen |= query_pairs(s.query)

    triplets: list[Triplet] = []
    test: list[Sample] = []
    if counts.triplets and not world.blacklist:
        raise DataError("test triplets need at least one blacklisted pair")
    trng = np.random.default_rng([seed, 3])
    budget = _Budget(counts.triplets * 3, "test triplets")
    targets = {lvl: _balanced_targets(trng, counts.triplets) for lvl in TEST_LEVELS}
    for t in range(counts.triplets):
        w1, w2 = world.blacklist[t % len(world.blacklist)]
        p1, p2, *queries = _triplet_queries(trng, world, w1, w2, seen, budget)
        tid = f"T{t:05d}"
        members = {}
        for lvl, query in zip(TEST_LEVELS, queries):
            target = bool(targets[lvl][t])
            scene = _scene_with_answer(trng, world.vocab, query, target, world.config, budget)
            members[lvl] = Sample(
                id=f"{tid}-{lvl}",
                level=lvl,
                query=query,
                scene=scene,
                answer=target,
                phrase_lengths=tuple(len(d) for d in query),
                triplet_id=tid,
                novel_composition=tuple(sorted((w1, w2))),
            )
        test.extend(members[lvl] for lvl in TEST_LEVELS)
        triplets.append(Triplet(tid, members["pp"], members["pw"], members["ww"], p1, p2, w1, w2))
    return Datasets(train, test, iid, triplets)


def triplets_from_samples(samples: list[Sample]) -> list[Triplet]:
    """Regroup loaded test samples into triplets by ``triplet_id``."""
    groups: dict[str, dict[str, Sample]] = {}
    for s in samples:
        if s.triplet_id is not None:
            groups.setdefault(s.triplet_id, {})[s.level] = s
    out = []
    for tid in sorted(groups):
        g = groups[tid]
        missing = [lvl for lvl in TEST_LEVELS if lvl not in g]
        if missing:
            raise DataError(f"triplet {tid} is missing members {missing}")
        p1 = g["pw"].query[0]
        p2 = g["pp"].query[-1]
        # ids are laid out sizes < colors < shapes, so the larger id is the shape
        novel = g["ww"].novel_composition or (-1, -1)
        w2, w1 = min(novel), max(novel)
        out.append(Triplet(tid, g["pp"], g["pw"], g["ww"], p1, p2, w1, w2))
    return out


# ---------------------------------------------------------------- JSON lines

_FIELDS = ("id", "level", "triplet_id", "query", "phrase_lengths", "scene", "answer",
           "novel_composition", "schema_version")
_REQUIRED = ("id", "level", "query", "scene", "answer")


def sample_to_record(s: Sample) -> dict:
    rec = {
        "id": s.id,
        "level": s.level,
        "triplet_id": s.triplet_id,
        "query": [list(d) for d in s.query],
        "phrase_lengths": None if s.phrase_lengths is None else list(s.phrase_lengths),
        "scene": [list(o) for o in s.scene],
        "answer": s.answer,
        "novel_composition": None if s.novel_composition is None else list(s.novel_composition),
        "schema_version": SCHEMA_VERSION,
    }
    if s.phrase_lengths is None:
        del rec["phrase_lengths"]
    rec.update(s.extra)
    return rec


def sample_from_record(rec: dict, path: str | None = None, line: int | None = None) -> Sample:
    if not isinstance(rec, dict):
        raise DataError("record is not a JSON object", path, line)
    for key in _REQUIRED:
        if key not in rec:
            raise DataError(f"record missing {key!r}", path, line)
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise DataError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})", path, line)
    if rec["level"] not in LEVELS:
        raise DataError(f"unknown level {rec['level']!r}", path, line)
    if not isinstance(rec["answer"], bool):
        raise DataError("'answer' must be a boolean", path, line)
    try:
        query = tuple(tuple(int(i) for i in d) for d in rec["query"])
        scene = tuple(tuple(int(i) for i in o) for o in rec["scene"])
        lengths = rec.get("phrase_lengths")
        lengths = None if lengths is None else tuple(int(n) for n in lengths)
        novel = rec.get("novel_composition")
        novel = None if novel is None else tuple(int(i) for i in novel)
    except (TypeError, ValueError) as exc:
        raise DataError(f"malformed field: {exc}", path, line) from exc
    if not query or any(len(d) == 0 for d in query):
        raise DataError("query must hold at least one nonempty descriptor", path, line)
    if not scene or any(len(o) != 3 for o in scene):
        raise DataError("scene must hold (size, color, shape) objects", path, line)
    extra = {k: v for k, v in rec.items() if k not in _FIELDS}
    return Sample(
        id=str(rec["id"]),
        level=rec["level"],
        query=query,
        scene=scene,
        answer=rec["answer"],
        phrase_lengths=lengths,
        triplet_id=rec.get("triplet_id"),
        novel_composition=novel,
        extra=extra,
    )


def dumps(samples: list[Sample]) -> str:
    return "".join(json.dumps(sample_to_record(s)) + "\n" for s in samples)


def serialize(samples: list[Sample], path) -> None:
    Path(path).write_text(dumps(samples))


def load(path) -> list[Sample]:
    path = str(path)
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", path, lineno) from exc
            out.append(sample_from_record(rec, path, lineno))
    return out


def save_vocabulary(vocab: Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), indent=2) + "\n")


def load_vocabulary(path) -> Vocabulary:
    try:
        return Vocabulary.from_json(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from exc


def validate_scene(scene, vocab: Vocabulary) -> None:
    for obj in scene:
        if [vocab.kind_of(i) for i in obj] != [0, 1, 2]:
            raise DataError(f"malformed scene object {obj}")
