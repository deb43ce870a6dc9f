import csv
import itertools
import json

import numpy as np
import pytest

from consistent_cg.errors import DataError
from consistent_cg.metrics import (
    Labeled,
    consistency,
    correctness,
    emit_report,
    evaluate,
    level_accuracy,
    load_labeled,
    load_predictions,
    load_report,
)


def _triplets(n, answers=None):
    rng = np.random.default_rng(n)
    out = []
    for t in range(n):
        for lvl in ("pp", "pw", "ww"):
            ans = bool(rng.integers(2)) if answers is None else answers
            out.append(Labeled(f"T{t}-{lvl}", lvl, f"T{t}", ans))
    return out


def _truth(samples):
    return {s.id: s.answer for s in samples}


def test_correctness_examples():
    assert correctness("yes", "yes") == 1
    assert correctness("no", "yes") == 0
    assert correctness(" Yes", "yes") == 1
    assert correctness(True, True) == 1
    assert correctness(False, True) == 0
    assert correctness("YES ", True) == 1


def test_level_accuracy_examples():
    samples = [Labeled(f"s{k}", "pp", None, True) for k in range(10)]
    preds = {s.id: True for s in samples}
    assert level_accuracy(preds, samples, "pp") == 1.0
    preds.update({f"s{k}": False for k in range(5)})
    assert level_accuracy(preds, samples, "pp") == 0.5
    with pytest.raises(DataError):
        level_accuracy(preds, samples, "ww")


def test_missing_prediction():
    samples = _triplets(2)
    preds = _truth(samples)
    del preds["T1-pw"]
    with pytest.raises(DataError, match="T1"):
        consistency(preds, samples)
    with pytest.raises(DataError):
        level_accuracy(preds, samples, "pw")


def test_consistency_all_correct():
    samples = _triplets(5)
    assert consistency(_truth(samples), samples) == 1.0


def test_consistency_two_of_three():
    samples = _triplets(3)
    preds = _truth(samples)
    preds["T2-ww"] = not preds["T2-ww"]
    assert consistency(preds, samples) == 2 / 3


def test_incomplete_triplet_named():
    samples = [s for s in _triplets(3) if s.id != "T1-pp"]
    with pytest.raises(DataError, match="T1"):
        consistency(_truth(samples), samples)


def test_single_flip_costs_one_triplet():
    samples = _triplets(8)
    truth = _truth(samples)
    for s in samples:
        preds = dict(truth)
        preds[s.id] = not preds[s.id]
        assert consistency(preds, samples) == pytest.approx(1 - 1 / 8, abs=1e-15)


def _enumerate_consistency(preds, samples):
    # brute force over every (pp, pw, ww) combination sharing a triplet id
    by_level = {lvl: [s for s in samples if s.level == lvl] for lvl in ("pp", "pw", "ww")}
    hits = total = 0
    for a, b, c in itertools.product(by_level["pp"], by_level["pw"], by_level["ww"]):
        if a.triplet_id == b.triplet_id == c.triplet_id:
            total += 1
            hits += all(preds[s.id] == s.answer for s in (a, b, c))
    return hits / total


def _recount_accuracy(preds, samples, level):
    n = ok = 0
    for s in samples:
        if s.level == level:
            n += 1
            ok += preds[s.id] == s.answer
    return ok / n


@pytest.mark.parametrize("seed", range(1000))
def test_randomized_oracle_equivalence(seed):
    rng = np.random.default_rng(seed)
    samples = _triplets(int(rng.integers(1, 9)))
    order = rng.permutation(len(samples))
    shuffled = [samples[k] for k in order]
    preds = {s.id: bool(rng.integers(2)) for s in samples}
    cons = consistency(preds, shuffled)
    assert cons == _enumerate_consistency(preds, samples)
    assert cons == consistency(preds, samples)
    for lvl in ("pp", "pw", "ww"):
        acc = level_accuracy(preds, shuffled, lvl)
        assert acc == _recount_accuracy(preds, samples, lvl)
        assert cons <= acc


def test_evaluate_and_emit(tmp_path):
    samples = _triplets(4)
    preds = _truth(samples)
    preds["T0-pp"] = not preds["T0-pp"]
    preds["T3-ww"] = not preds["T3-ww"]
    rep = evaluate(preds, samples)
    assert rep.overall == 10 / 12
    assert rep.phrase_phrase == 0.75 and rep.phrase_word == 1.0 and rep.word_word == 0.75
    assert rep.consistency == 0.5 and rep.triplets == 4
    assert rep.counts == {"pp": 4, "pw": 4, "ww": 4}

    jpath, cpath = tmp_path / "r.json", tmp_path / "r.csv"
    emit_report(rep, jpath, cpath, provenance={"seed": 0})
    assert load_report(jpath) == rep
    assert json.loads(jpath.read_text())["provenance"] == {"seed": 0}
    with open(cpath) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"]
    assert len(rows) == 7
    assert float(dict(rows[1:])["consistency"]) == 0.5


def test_external_files(tmp_path):
    samples = _triplets(3, answers=True)
    lab = tmp_path / "triplets.jsonl"
    lab.write_text("".join(json.dumps({"id": s.id, "level": s.level, "triplet_id": s.triplet_id, "answer": "yes"}) + "\n" for s in samples))
    pred = tmp_path / "pred.jsonl"
    answers = {s.id: " Yes" for s in samples}
    answers["T0-pw"] = "no"
    pred.write_text("".join(json.dumps({"id": k, "answer": v}) + "\n" for k, v in answers.items()))
    rep = evaluate(load_predictions(pred), load_labeled(lab))
    assert rep.consistency == 2 / 3
    assert rep.phrase_word == 2 / 3


def test_external_file_errors(tmp_path):
    pred = tmp_path / "pred.jsonl"
    pred.write_text('{"id": "a", "answer": "yes"}\n{"id": "b"}\n')
    with pytest.raises(DataError, match=":2:"):
        load_predictions(pred)
    lab = tmp_path / "lab.jsonl"
    lab.write_text('{"id": "a", "answer": "yes"}\n')
    with pytest.raises(DataError, match="level"):
        load_labeled(lab)
