"""Command-line entry point: ``tsad <command> --config FILE --seed N --out DIR``.

The config file is JSON with optional sections::

    {"data": {"dir": "synth_out"} | {"synthetic": {"T": 5000, "N": 5}}
             | {"train": "a.csv", "test": "b.csv", "test_labels": "l.csv"},
     "model": {ModelConfig fields},
     "threshold": {ThresholdSpec fields},
     "experiment": {"seeds": 5, "combination": "local_or", "losses": [...], "rates": [...]}}

Synthetic data for train/score/evaluate uses ``data.synthetic.seed`` (default 0),
since ``--seed`` there is the model seed.

Failures exit with status 1 and a JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .dataio import AnomalySpec, load_csv, make_windows, normalize, save_csv, synthetic_profile
from .labeling import ThresholdSpec, extract_labels, save_labels
from .metrics import evaluate
from .models import ModelConfig, load_checkpoint, save_checkpoint, train_model
from .scoring import load_scores, save_scores, score_model

COMMANDS = ("synth", "train", "score", "label", "evaluate", "search", "contaminate", "benchmark")


def _read_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(cfg) - {"data", "model", "threshold", "experiment"}
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    return cfg


def _synthetic(cfg: dict, seed: int):
    opts = dict(cfg.get("data", {}).get("synthetic", {}))
    opts.setdefault("seed", seed)
    return synthetic_profile(**opts)


def _dataset(cfg: dict, seed: int) -> ex.Dataset:
    data = cfg.get("data", {})
    if not data or "synthetic" in data:
        prof = _synthetic(cfg, seed)
        return ex.Dataset(prof.test.name.removesuffix("-test"), prof.train, prof.test, tuple(prof.specs))
    if "dir" in data:
        d = Path(data["dir"])
        data = {"train": d / "train.csv", "test": d / "test.csv", "test_labels": d / "test_labels.csv"}
        if (d / "specs.json").exists():
            data["pool"] = d / "specs.json"
    train = load_csv(data["train"], data.get("train_labels"), name="train")
    test = load_csv(data["test"], data.get("test_labels"), name="test")
    if data.get("normalize", True) and "dir" not in cfg.get("data", {}):
        train = normalize(train)
        test = normalize(test, fit_stats=train.norm_stats)
    pool = ()
    if data.get("pool"):
        pool = tuple(AnomalySpec(**{**s, "variates": tuple(s["variates"])})
                     for s in json.loads(Path(data["pool"]).read_text()))
    return ex.Dataset(data.get("name", Path(str(data["test"])).stem), train, test, pool)


def _model_config(cfg: dict, seed: int | None) -> ModelConfig:
    d = dict(cfg.get("model", {}))
    if seed is not None:
        d["seed"] = seed
    return ModelConfig.from_dict(d)


def _threshold(cfg: dict) -> ThresholdSpec:
    return ThresholdSpec(**cfg.get("threshold", {}))


def _write(out: Path, name: str, text: str) -> Path:
    p = out / name
    p.write_text(text)
    return p


def cmd_synth(args, cfg, out: Path) -> dict:
    prof = _synthetic(cfg, args.seed or 0)
    save_csv(prof.train, out / "train.csv", out / "train_labels.csv")
    save_csv(prof.test, out / "test.csv", out / "test_labels.csv")
    specs = [{**vars(s), "variates": list(s.variates)} for s in prof.specs]
    _write(out, "specs.json", json.dumps(specs, indent=2, sort_keys=True) + "\n")
    return {"train": str(out / "train.csv"), "test": str(out / "test.csv"),
            "anomalous_test_stamps": int(prof.test.labels.sum())}


def cmd_train(args, cfg, out: Path) -> dict:
    ds = _dataset(cfg, 0)
    config = _model_config(cfg, args.seed)
    trained = train_model(config, make_windows(ds.train, config.W, config.S))
    path = save_checkpoint(trained, out / "model.npz")
    return {"checkpoint": str(path), "train_loss_curve": trained.train_loss_curve}


def cmd_score(args, cfg, out: Path) -> dict:
    ds = _dataset(cfg, 0)
    trained = load_checkpoint(args.checkpoint or out / "model.npz")
    test_path, _ = save_scores(score_model(trained, ds.test), out / "scores.csv")
    cal_path, _ = save_scores(score_model(trained, ds.train), out / "train_scores.csv")
    return {"scores": str(test_path), "calibration": str(cal_path)}


def cmd_label(args, cfg, out: Path) -> dict:
    scores = load_scores(args.scores or out / "scores.csv")
    cal_path = args.calibration or (out / "train_scores.csv")
    calibration = load_scores(cal_path) if Path(cal_path).exists() else None
    combination = cfg.get("experiment", {}).get("combination", "global")
    res = extract_labels(scores, _threshold(cfg), combination, calibration=calibration)
    path, _ = save_labels(res, out / "labels.csv")
    return {"labels": str(path), "positives": int(res.labels.sum()), "thresholds": res.thresholds}


def cmd_evaluate(args, cfg, out: Path) -> dict:
    ds = _dataset(cfg, 0)
    pred = np.loadtxt(args.labels or out / "labels.csv", dtype=np.int64, ndmin=1)
    report = evaluate(pred, ds.test.labels, dataset=ds.name, model=cfg.get("model", {}).get("kind", ""),
                      threshold_method=_threshold(cfg).method,
                      combination=cfg.get("experiment", {}).get("combination", "global"))
    _write(out, "evaluation.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"mcc": report.mcc}


def _exp(cfg: dict) -> dict:
    return cfg.get("experiment", {})


def cmd_search(args, cfg, out: Path) -> dict:
    e = _exp(cfg)
    rep = ex.search(_dataset(cfg, args.seed or 0), e.get("approach", "reco"), e.get("seeds", ex.DEFAULT_SEEDS),
                    _threshold(cfg), e.get("combination"), ModelConfig.from_dict(cfg.get("model", {})))
    _write(out, "grid.json", rep.to_json())
    _write(out, "grid.txt", rep.table())
    return {"selected": rep.selected.to_dict()}


def cmd_contaminate(args, cfg, out: Path) -> dict:
    e = _exp(cfg)
    rep = ex.contamination_study(_dataset(cfg, args.seed or 0), _model_config(cfg, None),
                                 e.get("losses", ("mse", "huber", "softdtw")), e.get("rates", (0.0, 0.02)),
                                 e.get("seeds", ex.DEFAULT_SEEDS), _threshold(cfg), e.get("combination"))
    _write(out, "contamination.json", rep.to_json())
    _write(out, "contamination.txt", rep.table())
    return {"report": str(out / "contamination.json")}


def cmd_benchmark(args, cfg, out: Path) -> dict:
    e = _exp(cfg)
    configs = {k: ModelConfig.from_dict(v) for k, v in e.get("configs", {}).items()}
    rep = ex.benchmark([_dataset(cfg, args.seed or 0)], e.get("models", ex.BENCHMARK_MODELS),
                       e.get("seeds", ex.DEFAULT_SEEDS), _threshold(cfg), configs)
    _write(out, "benchmark.json", rep.to_json())
    _write(out, "benchmark.txt", rep.table())
    return {"report": str(out / "benchmark.json")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsad", description="Time-series anomaly detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="dataset seed for synth/search/contaminate/benchmark; model seed for train")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "score":
            s.add_argument("--checkpoint")
        if name == "label":
            s.add_argument("--scores")
            s.add_argument("--calibration")
        if name == "evaluate":
            s.add_argument("--labels")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _read_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = globals()[f"cmd_{args.command}"](args, cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"status": "error", "command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
