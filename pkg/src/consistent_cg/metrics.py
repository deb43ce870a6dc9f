"""Per-level accuracy and cross-level consistency over test triplets."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import DataError
from .synth import TEST_LEVELS

REPORT_METRICS = ("overall", "phrase_phrase", "phrase_word", "word_word", "consistency", "triplets")
_LEVEL_KEY = {"pp": "phrase_phrase", "pw": "phrase_word", "ww": "word_word"}


@dataclass(frozen=True)
class Labeled:
    """The part of a test record that scoring needs."""

    id: str
    level: str
    triplet_id: str | None
    answer: object


def _norm(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value).strip().lower()


def correctness(prediction, answer) -> int:
    """1 iff the prediction matches; booleans compare exactly, strings case-insensitively after trimming."""
    if isinstance(prediction, bool) and isinstance(answer, bool):
        return int(prediction == answer)
    return int(_norm(prediction) == _norm(answer))


def _prediction(predictions: dict, sample_id: str):
    try:
        return predictions[sample_id]
    except KeyError:
        raise DataError(f"no prediction for sample {sample_id}") from None


def level_accuracy(predictions: dict, samples, level: str) -> float:
    chosen = [s for s in samples if s.level == level]
    if not chosen:
        raise DataError(f"no samples at level {level!r}")
    return sum(correctness(_prediction(predictions, s.id), s.answer) for s in chosen) / len(chosen)


def group_triplets(samples) -> dict[str, dict[str, object]]:
    groups: dict[str, dict[str, object]] = {}
    for s in samples:
        if s.triplet_id is None or s.level not in TEST_LEVELS:
            continue
        groups.setdefault(s.triplet_id, {})[s.level] = s
    for tid, g in groups.items():
        missing = [lvl for lvl in TEST_LEVELS if lvl not in g]
        if missing:
            raise DataError(f"triplet {tid} is incomplete: missing {', '.join(missing)}")
    return groups


def consistency(predictions: dict, samples) -> float:
    """Fraction of triplets whose pp, pw and ww members are all answered correctly."""
    groups = group_triplets(samples)
    if not groups:
        raise DataError("no triplets to score")
    hits = 0
    for tid in sorted(groups):
        g = groups[tid]
        member_ok = []
        for lvl in TEST_LEVELS:
            s = g[lvl]
            if s.id not in predictions:
                raise DataError(f"triplet {tid}: no prediction for member {s.id}")
            member_ok.append(correctness(predictions[s.id], s.answer))
        hits += int(all(member_ok))
    return hits / len(groups)


@dataclass
class EvalReport:
    overall: float
    phrase_phrase: float
    phrase_word: float
    word_word: float
    consistency: float
    triplets: int
    counts: dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        return [(name, getattr(self, name)) for name in REPORT_METRICS]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        return cls(**obj)


def evaluate(predictions: dict, samples) -> EvalReport:
    samples = [s for s in samples if s.level in TEST_LEVELS]
    if not samples:
        raise DataError("no test samples to evaluate")
    groups = group_triplets(samples)
    # checked first so a missing member is reported with its triplet id
    cons = consistency(predictions, samples)
    overall = sum(correctness(_prediction(predictions, s.id), s.answer) for s in samples) / len(samples)
    per_level = {lvl: level_accuracy(predictions, samples, lvl) for lvl in TEST_LEVELS}
    counts = {lvl: sum(1 for s in samples if s.level == lvl) for lvl in TEST_LEVELS}
    return EvalReport(
        overall=overall,
        phrase_phrase=per_level["pp"],
        phrase_word=per_level["pw"],
        word_word=per_level["ww"],
        consistency=cons,
        triplets=len(groups),
        counts=counts,
    )


def emit_report(report: EvalReport, json_path=None, csv_path=None, provenance: dict | None = None) -> None:
    if json_path is not None:
        doc = report.to_json()
        if provenance is not None:
            doc = {**doc, "provenance": provenance}
        Path(json_path).write_text(json.dumps(doc, indent=2) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name, value in report.rows():
                writer.writerow([name, repr(value) if isinstance(value, float) else value])


def load_report(path) -> EvalReport:
    doc = json.loads(Path(path).read_text())
    doc.pop("provenance", None)
    return EvalReport.from_json(doc)


# ---------------------------------------------------------------- external files


def _jsonl(path):
    path = str(path)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON: {exc.msg}", path, lineno) from exc
            if not isinstance(rec, dict):
                raise DataError("record is not a JSON object", path, lineno)
            yield lineno, rec


def load_predictions(path) -> dict:
    out = {}
    for lineno, rec in _jsonl(path):
        if "id" not in rec or "answer" not in rec:
            raise DataError("prediction record needs 'id' and 'answer'", str(path), lineno)
        if not isinstance(rec["answer"], (str, bool)):
            raise DataError("'answer' must be a string or boolean", str(path), lineno)
        out[str(rec["id"])] = rec["answer"]
    return out


def load_labeled(path) -> list[Labeled]:
    """Test records in the dataset schema or the minimal {id, level, triplet_id, answer} one."""
    out = []
    for lineno, rec in _jsonl(path):
        for key in ("id", "level", "answer"):
            if key not in rec:
                raise DataError(f"record missing {key!r}", str(path), lineno)
        out.append(Labeled(str(rec["id"]), rec["level"], rec.get("triplet_id"), rec["answer"]))
    return out
