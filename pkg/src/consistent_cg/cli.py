"""Command line: gen-data, train, eval, score, ablate.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .errors import DataError, NumericError
from .metrics import EvalReport, emit_report, evaluate, load_labeled, load_predictions
from .mlo import TrainConfig, run
from .models import Batch, ModelConfig, forward_batch, load_model, save_model
from .synth import (
    Counts,
    Datasets,
    WorldConfig,
    generate_datasets,
    generate_world,
    load,
    load_vocabulary,
    save_vocabulary,
    serialize,
    triplets_from_samples,
)

log = logging.getLogger("consistent_cg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag name -> TrainConfig field
_OVERRIDES = {
    "seed": "seed",
    "mode": "mode",
    "order": "order",
    "k": "k",
    "tp": "tp",
    "tm": "tm",
    "lr_theta": "lr_theta",
    "lr_omega": "lr_omega",
    "neumann_j": "neumann_j",
    "neumann_alpha": "neumann_alpha",
    "rounds": "rounds",
    "patience": "patience",
}

ABLATION_CELLS = (("baseline", "-"), ("mlo", "c2s"), ("mlo", "s2c"), ("mwn-simultaneous", "-"))
ABLATION_METRICS = ("overall", "phrase_phrase", "phrase_word", "word_word", "consistency", "iid_accuracy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config


def effective_config(args) -> TrainConfig:
    """Config file values, then command-line overrides."""
    values = {}
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON: {exc.msg}", args.config, exc.lineno) from exc
        if not isinstance(values, dict):
            raise DataError("config must be a JSON object", args.config)
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    try:
        cfg = TrainConfig.from_dict(values)
    except TypeError as exc:
        raise DataError(str(exc), getattr(args, "config", None)) from exc
    return cfg.validate()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------- data


def load_data_dir(path) -> tuple[Datasets, dict]:
    root = Path(path)
    meta_path = root / "dataset.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DataError("missing dataset.json (run gen-data first)", str(meta_path)) from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON: {exc.msg}", str(meta_path), exc.lineno) from exc
    load_vocabulary(root / "vocab.json")
    test = load(root / "test.jsonl")
    data = Datasets(load(root / "train.jsonl"), test, load(root / "iid.jsonl"), triplets_from_samples(test))
    return data, meta


def default_data(seed: int) -> tuple[Datasets, dict]:
    world = generate_world(WorldConfig(), seed)
    counts = Counts()
    meta = {
        "seed": seed,
        "world_config": asdict(world.config),
        "counts": asdict(counts),
        "blacklist": [list(p) for p in world.blacklist],
        "vocab": world.vocab.to_json(),
    }
    return generate_datasets(world, counts, seed), meta


def _model_config(meta: dict) -> ModelConfig:
    v = meta["vocab"]
    return ModelConfig(len(v["sizes"]), len(v["colors"]), len(v["shapes"]))


def _resolve_data(args, seed: int) -> tuple[Datasets, dict]:
    if getattr(args, "data", None):
        return load_data_dir(args.data)
    return default_data(seed)


# ---------------------------------------------------------------- shared train/eval paths


def train_model(cfg: TrainConfig, data: Datasets, meta: dict):
    return run(cfg, data.train, _model_config(meta))


def predict(theta, model_cfg: ModelConfig, samples) -> dict[str, bool]:
    batch = Batch.from_samples(samples, model_cfg)
    with T.no_grad():
        probs = forward_batch(theta.detached(), batch).data
    return {sid: bool(p > 0.5) for sid, p in zip(batch.ids, probs)}


def evaluate_model(theta, model_cfg: ModelConfig, data: Datasets) -> tuple[EvalReport, dict[str, bool]]:
    preds = predict(theta, model_cfg, data.test)
    report = evaluate(preds, data.test)
    if data.iid:
        iid = predict(theta, model_cfg, data.iid)
        report.extra["iid_accuracy"] = float(np.mean([iid[s.id] == s.answer for s in data.iid]))
        report.counts["iid"] = len(data.iid)
    return report, preds


def _provenance(cfg: TrainConfig | None, seed, **more) -> dict:
    return {"version": __version__, "seed": seed, "config": None if cfg is None else cfg.to_dict(), **more}


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    wcfg, counts = WorldConfig(), Counts()
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON: {exc.msg}", args.config, exc.lineno) from exc
        try:
            wcfg = WorldConfig(**raw.get("world", {}))
            counts = Counts(**raw.get("counts", {}))
        except TypeError as exc:
            raise DataError(str(exc), args.config) from exc
    for name in ("train", "triplets", "iid"):
        value = getattr(args, f"n_{name}")
        if value is not None:
            counts = Counts(**{**asdict(counts), name: value})
    world = generate_world(wcfg, seed)
    data = generate_datasets(world, counts, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    serialize(data.train, out / "train.jsonl")
    serialize(data.test, out / "test.jsonl")
    serialize(data.iid, out / "iid.jsonl")
    save_vocabulary(world.vocab, out / "vocab.json")
    meta = {
        "seed": seed,
        "world_config": asdict(wcfg),
        "counts": asdict(counts),
        "blacklist": [list(p) for p in world.blacklist],
        "vocab": world.vocab.to_json(),
        "provenance": _provenance(None, seed),
    }
    _write_json(out / "dataset.json", meta)
    print(f"wrote {len(data.train)} train, {len(data.test)} test, {len(data.iid)} iid samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    data, meta = _resolve_data(args, cfg.seed)
    result = train_model(cfg, data, meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, cfg.seed, data=args.data, data_seed=meta["seed"])
    save_model(out / "model.json", result.model_config, result.theta, extra={"provenance": prov})
    _write_json(
        out / "history.json",
        {
            "provenance": prov,
            "stopped_early": result.stopped_early,
            "partition": {str(k): v for k, v in result.partition.length_to_bucket.items()},
            "history": result.history,
        },
    )
    print(f"trained {cfg.mode} for {len(result.history)} rounds; wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.model:
        raise UsageError("eval needs --model")
    model_cfg, theta, _, doc = load_model(args.model)
    prov = doc.get("provenance", {})
    if args.data:
        data, meta = load_data_dir(args.data)
    else:
        data, meta = default_data(int(prov.get("data_seed", prov.get("seed", 0))))
    report, preds = evaluate_model(theta, model_cfg, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = prov.get("config")
    provenance = {**_provenance(None, prov.get("seed"), model=str(args.model), data=args.data), "config": cfg}
    emit_report(report, out / "report.json", out / "report.csv", provenance)
    with open(out / "predictions.jsonl", "w") as fh:
        for s in data.test:
            fh.write(json.dumps({"id": s.id, "answer": "yes" if preds[s.id] else "no"}) + "\n")
    print(json.dumps({name: value for name, value in report.rows()}))
    return EXIT_OK


def cmd_score(args) -> int:
    if not args.predictions or not args.triplets:
        raise UsageError("score needs --predictions and --triplets")
    report = evaluate(load_predictions(args.predictions), load_labeled(args.triplets))
    prov = _provenance(None, None, predictions=str(args.predictions), triplets=str(args.triplets))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        emit_report(report, out / "report.json", out / "report.csv", prov)
    print(json.dumps({name: value for name, value in report.rows()}))
    return EXIT_OK


@dataclass(frozen=True)
class Cell:
    mode: str
    order: str
    seed: int
    config: dict
    data_dir: str | None = None


def run_cell(cell: Cell) -> dict:
    """One ablation cell through the same train and eval paths as the subcommands."""
    order = "s2c" if cell.order == "-" else cell.order
    cfg = TrainConfig.from_dict({**cell.config, "mode": cell.mode, "order": order, "seed": cell.seed}).validate()
    data, meta = load_data_dir(cell.data_dir) if cell.data_dir else default_data(cell.seed)
    result = train_model(cfg, data, meta)
    report, _ = evaluate_model(result.theta, result.model_config, data)
    row = {"mode": cell.mode, "order": cell.order, "seed": cell.seed}
    row.update({name: getattr(report, name) for name in ABLATION_METRICS[:-1]})
    row["iid_accuracy"] = report.extra.get("iid_accuracy", float("nan"))
    row["rounds"] = len(result.history)
    return row


def parse_seeds(text: str) -> list[int]:
    text = str(text).strip()
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError:
        raise UsageError(f"--seeds expects a count or a comma-separated list, got {text!r}") from None
    if n < 1:
        raise UsageError("--seeds must be at least 1")
    return list(range(n))


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for mode, order in sorted(ABLATION_CELLS):
        chosen = [r for r in rows if r["mode"] == mode and r["order"] == order]
        if chosen:
            entry = {"mode": mode, "order": order, "seeds": len(chosen)}
            entry.update({m: float(np.mean([r[m] for r in chosen])) for m in ABLATION_METRICS})
            out.append(entry)
    return out


def ablate(base: TrainConfig, seeds: list[int], jobs: int = 1, data_dir: str | None = None) -> list[dict]:
    config = base.to_dict()
    cells = [Cell(m, o, s, config, data_dir) for s in seeds for m, o in ABLATION_CELLS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = []
        for cell in cells:
            log.info("ablate: %s %s seed %d", cell.mode, cell.order, cell.seed)
            rows.append(run_cell(cell))
    return sorted(rows, key=lambda r: (r["mode"], r["order"], r["seed"]))


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    seeds = parse_seeds(args.seeds if args.seeds is not None else "5")
    rows = ablate(cfg, seeds, args.jobs, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["mode", "order", "seed", *ABLATION_METRICS, "rounds"]
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    summary = summarize(rows)
    _write_json(out / "ablation.json", {"provenance": _provenance(cfg, seeds, data=args.data), "rows": rows, "summary": summary})
    for s in summary:
        print(f"{s['mode']:>17} {s['order']:>3}  consistency {s['consistency']:.4f}  iid {s['iid_accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--data", help="dataset directory from gen-data (default: generate from --seed)")
    p.add_argument("--mode", choices=["baseline", "mwn-sim", "mwn-simultaneous", "mlo"])
    p.add_argument("--order", choices=["s2c", "c2s"])
    p.add_argument("--k", type=int)
    p.add_argument("--tp", type=int)
    p.add_argument("--tm", type=int)
    p.add_argument("--lr-theta", type=float)
    p.add_argument("--lr-omega", type=float)
    p.add_argument("--neumann-j", type=int)
    p.add_argument("--neumann-alpha", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="consistent-cg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic world and datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help='JSON {"world": {...}, "counts": {...}}')
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-triplets", type=int)
    p.add_argument("--n-iid", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on the test triplets")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score an external predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="baseline / mwn-sim / mlo (s2c, c2s) over several seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="count (0..N-1) or comma-separated list", default=None)
    p.add_argument("--jobs", type=int, default=1)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
