import csv
import hashlib
import json

import pytest

from consistent_cg.cli import main

FAST = ["--tp", "1", "--rounds", "2", "--lr-theta", "1e-3", "--lr-omega", "0.05"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--seed", "1", "--n-train", "400", "--n-triplets", "16", "--n-iid", "40"]) == 0
    return out


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


def test_gen_data_files(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert names == {"train.jsonl", "test.jsonl", "iid.jsonl", "vocab.json", "dataset.json"}
    meta = json.loads((data_dir / "dataset.json").read_text())
    assert meta["seed"] == 1 and meta["counts"]["train"] == 400
    assert meta["provenance"]["seed"] == 1


def test_train_eval_deterministic(data_dir, tmp_path):
    before = _digest(data_dir)
    reports = []
    for rep in range(2):
        run = tmp_path / f"run{rep}"
        assert main(["train", "--data", str(data_dir), "--out", str(run), "--mode", "baseline", "--seed", "4", *FAST]) == 0
        assert main(["eval", "--model", str(run / "model.json"), "--data", str(data_dir), "--out", str(run / "eval")]) == 0
        doc = json.loads((run / "eval" / "report.json").read_text())
        doc["provenance"].pop("model")
        reports.append(doc)
        history = json.loads((run / "history.json").read_text())
        assert history["provenance"]["seed"] == 4
        assert history["provenance"]["config"]["mode"] == "baseline"
        assert all(h["trace"] == [] for h in history["history"])
        model = json.loads((run / "model.json").read_text())
        assert model["meta_nets"] == [] and model["provenance"]["config"]["tp"] == 1
    assert reports[0] == reports[1]
    assert reports[0]["provenance"]["config"]["seed"] == 4
    assert _digest(data_dir) == before


def test_config_file_and_override(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "mlo", "order": "c2s", "tp": 3, "rounds": 1, "lr_theta": 1e-3, "k": 2}))
    run = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--config", str(cfg), "--tp", "1"]) == 0
    prov = json.loads((run / "history.json").read_text())["provenance"]["config"]
    assert (prov["tp"], prov["order"], prov["k"], prov["mode"]) == (1, "c2s", 2, "mlo")
    assert json.loads((run / "history.json").read_text())["history"][0]["trace"] == [2, 1]


def test_score_missing_member(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", "--data", str(data_dir), "--out", str(run), "--mode", "baseline", *FAST])
    main(["eval", "--model", str(run / "model.json"), "--data", str(data_dir), "--out", str(run / "eval")])
    preds = (run / "eval" / "predictions.jsonl").read_text().splitlines()
    dropped = json.loads(preds[4])["id"]
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(p for p in preds if json.loads(p)["id"] != dropped) + "\n")
    capsys.readouterr()
    assert main(["score", "--predictions", str(partial), "--triplets", str(data_dir / "test.jsonl")]) == 2
    assert dropped.split("-")[0] in capsys.readouterr().err
    # the full file scores to the same numbers as eval
    assert main(["score", "--predictions", str(run / "eval" / "predictions.jsonl"), "--triplets", str(data_dir / "test.jsonl"), "--out", str(tmp_path / "s")]) == 0
    a = json.loads((tmp_path / "s" / "report.json").read_text())
    b = json.loads((run / "eval" / "report.json").read_text())
    assert a["consistency"] == b["consistency"] and a["overall"] == b["overall"]


def test_exit_codes(data_dir, tmp_path):
    assert main([]) == 1
    assert main(["train", "--out", str(tmp_path), "--tp", "0"]) == 1
    assert main(["train", "--out", str(tmp_path), "--mode", "nope"]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x"}\n')
    assert main(["score", "--predictions", str(bad), "--triplets", str(data_dir / "test.jsonl")]) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"tp": 1,\n "bogus": 2}')
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2
    cfg.write_text('{"tp": 1,,}')
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2


def test_numeric_failure_exit(data_dir, tmp_path):
    args = ["train", "--data", str(data_dir), "--out", str(tmp_path / "r"), "--tp", "1", "--rounds", "1"]
    assert main([*args, "--mode", "mlo", "--neumann-alpha", "1e6", "--neumann-j", "60"]) == 3


def test_ablate_table(data_dir, tmp_path):
    outs = []
    for rep in range(2):
        out = tmp_path / f"ab{rep}"
        assert main(["ablate", "--data", str(data_dir), "--out", str(out), "--seeds", "2", *FAST]) == 0
        outs.append(out)
    with open(outs[0] / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert {(r["mode"], r["order"]) for r in rows} == {("baseline", "-"), ("mlo", "s2c"), ("mlo", "c2s"), ("mwn-simultaneous", "-")}
    keys = [(r["mode"], r["order"], int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    for name in ("overall", "phrase_phrase", "phrase_word", "word_word", "consistency"):
        assert all(0.0 <= float(r[name]) <= 1.0 for r in rows)
    assert (outs[0] / "ablation.csv").read_bytes() == (outs[1] / "ablation.csv").read_bytes()
    doc = json.loads((outs[0] / "ablation.json").read_text())
    assert doc["provenance"]["seed"] == [0, 1]
    assert len(doc["summary"]) == 4
