"""Configuration search, multi-seed runs, contamination study and benchmarking.

All randomness flows from the dataset seed and the list of model seeds, so
every report produced here is a deterministic function of its inputs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataio import TimeSeries, contaminate, make_windows
from .labeling import COMBINATIONS, ThresholdSpec, extract_labels
from .metrics import confusion, mcc
from .models import ConfigError, ModelConfig, default_heads, train_model
from .scoring import ScoreSeries, score_baseline, score_model

log = logging.getLogger(__name__)

DEFAULT_SEEDS = 5
DEFAULT_W = 96
USAD_CONFIG = ModelConfig("usad", W=10, S=5, M=5)
BENCHMARK_MODELS = ("baseline", "usad", "transformer_reco", "itransformer_fc", "itransformer_reco")


@dataclass(frozen=True)
class Dataset:
    """A named train/test split; ``pool`` holds anomaly templates for contamination."""

    name: str
    train: TimeSeries
    test: TimeSeries
    pool: tuple = ()


def as_dataset(obj, name: str | None = None) -> Dataset:
    if isinstance(obj, Dataset):
        return obj
    pool = tuple(getattr(obj, "specs", ()) or ())
    return Dataset(name or obj.test.name.removesuffix("-test") or "dataset", obj.train, obj.test, pool)


# grid


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def label_runs(labels) -> np.ndarray:
    """Lengths of maximal runs of 1s."""
    lab = np.asarray(labels).astype(np.int8).ravel()
    edges = np.diff(np.concatenate([[0], lab, [0]]))
    return np.flatnonzero(edges == -1) - np.flatnonzero(edges == 1)


@dataclass(frozen=True)
class DatasetStats:
    a: float
    b: int
    N: int
    T_train: int
    T_test: int

    def __post_init__(self):
        if not self.a >= self.b >= 1:
            raise ValueError(f"need a >= b >= 1 (got a={self.a}, b={self.b})")

    @classmethod
    def from_split(cls, train: TimeSeries, test: TimeSeries) -> "DatasetStats":
        if test.labels is None:
            raise ValueError("test labels are needed to estimate anomaly lengths")
        runs = label_runs(test.labels)
        if runs.size == 0:
            raise ValueError("test labels contain no anomalies")
        return cls(float(runs.mean()), int(runs.min()), test.N, train.T, test.T)


def window_candidates(a: float) -> list[int]:
    w_plus = 50 * (math.floor(a / 50) + 1)
    w_minus = max(round_half_up(a / 2), 10)
    return list(dict.fromkeys([w_plus, w_minus, DEFAULT_W]))


def derive_candidates(stats: DatasetStats, approach: str = "reco",
                      base: ModelConfig | None = None) -> list[ModelConfig]:
    """Grid of window, step and model sizes derived from anomaly lengths.

    Head counts fall back to the largest divisor of M not above the base
    config's ``n_heads``.
    """
    base = base or ModelConfig()
    out: dict[tuple, ModelConfig] = {}
    for W in window_candidates(stats.a):
        if approach == "reco":
            combos = [(S, M) for S in (round_half_up(W / 2), round_half_up(W / 10))
                      for M in (W, round_half_up(W / 5))]
            kind = "itransformer_reco"
        elif approach == "fc":
            combos = [(1, 2)]
            kind = "itransformer_fc"
        else:
            raise ValueError(f"approach must be 'reco' or 'fc', got {approach!r}")
        for S, M in combos:
            S, M = max(S, 1), max(M, 1)
            out.setdefault((W, S, M), replace(base, kind=kind, W=W, S=S, M=M,
                                              n_heads=default_heads(M, base.n_heads)))
    return list(out.values())


# runs


@dataclass(frozen=True)
class RunResult:
    """One configuration evaluated over several model seeds."""

    config: ModelConfig
    seeds: tuple
    mcc_per_seed: dict = field(default_factory=dict)

    def __post_init__(self):
        for comb, vals in self.mcc_per_seed.items():
            if len(vals) != len(self.seeds):
                raise ValueError(f"{comb}: {len(vals)} MCC values for {len(self.seeds)} seeds")
            if any(not -1.0 <= v <= 1.0 for v in vals):
                raise ValueError("MCC values must lie in [-1, 1]")

    def mean(self, combination: str | None = None) -> float:
        return float(np.mean(self.mcc_per_seed[combination or self.chosen_combination]))

    def std(self, combination: str | None = None) -> float:
        return float(np.std(self.mcc_per_seed[combination or self.chosen_combination]))

    @property
    def best_mcc_per_combination(self) -> dict[str, float]:
        return {c: float(np.mean(v)) for c, v in self.mcc_per_seed.items()}

    @property
    def chosen_combination(self) -> str:
        means = self.best_mcc_per_combination
        return max(means, key=lambda c: (means[c], -list(means).index(c)))

    @property
    def mcc_mean(self) -> float:
        return self.mean()

    @property
    def mcc_std(self) -> float:
        return self.std()

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seeds": list(self.seeds),
            "mcc_per_seed": {c: list(v) for c, v in self.mcc_per_seed.items()},
            "mcc_mean_per_combination": self.best_mcc_per_combination,
            "mcc_std_per_combination": {c: self.std(c) for c in self.mcc_per_seed},
            "chosen_combination": self.chosen_combination,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(ModelConfig.from_dict(d["config"]), tuple(d["seeds"]),
                   {c: tuple(v) for c, v in d["mcc_per_seed"].items()})


def _seed_list(seeds) -> tuple:
    if isinstance(seeds, (int, np.integer)):
        return tuple(range(int(seeds)))
    return tuple(int(s) for s in seeds)


def _mcc_by_combination(scores: ScoreSeries, truth, spec: ThresholdSpec,
                        calibration: ScoreSeries | None) -> dict[str, float]:
    return {c: mcc(confusion(extract_labels(scores, spec, c, calibration=calibration).labels, truth))
            for c in COMBINATIONS}


def evaluate_config(config: ModelConfig, train: TimeSeries, test: TimeSeries,
                    spec: ThresholdSpec | None = None, calibrate: bool = True) -> dict[str, float]:
    """Train once, score the test split and return MCC per combination method.

    With ``calibrate`` the threshold is fitted on the training-split scores.
    """
    spec = spec or ThresholdSpec()
    if test.labels is None:
        raise ValueError("test labels are needed for evaluation")
    trained = train_model(config, make_windows(train, config.W, config.S))
    scores = score_model(trained, test)
    calibration = score_model(trained, train) if calibrate else None
    return _mcc_by_combination(scores, test.labels, spec, calibration)


def run_config(config: ModelConfig, train: TimeSeries, test: TimeSeries, seeds=DEFAULT_SEEDS,
               spec: ThresholdSpec | None = None, calibrate: bool = True,
               train_for_seed=None) -> RunResult:
    """``train_for_seed(seed)`` may supply a per-seed training series."""
    seeds = _seed_list(seeds)
    per: dict[str, list[float]] = {c: [] for c in COMBINATIONS}
    for seed in seeds:
        tr = train if train_for_seed is None else train_for_seed(seed)
        res = evaluate_config(replace(config, seed=seed), tr, test, spec, calibrate)
        log.info("%s seed %d: %s", config.tag(), seed, res)
        for c in COMBINATIONS:
            per[c].append(res[c])
    return RunResult(replace(config, seed=seeds[0] if seeds else config.seed), seeds,
                     {c: tuple(v) for c, v in per.items()})


def run_grid(dataset, candidates: Iterable[ModelConfig], seeds=DEFAULT_SEEDS,
             spec: ThresholdSpec | None = None, calibrate: bool = True) -> list[RunResult]:
    ds = as_dataset(dataset)
    return [run_config(c, ds.train, ds.test, seeds, spec, calibrate) for c in candidates]


def _summary(r: RunResult, combination: str | None) -> tuple[float, float, int, int, int]:
    return r.mean(combination), r.std(combination), r.config.M, r.config.S, r.config.W


def select_best(results: Sequence[RunResult], combination: str | None = None) -> ModelConfig:
    """Smallest (M, S, W) among results whose mean +- std overlaps the best one.

    ``combination`` fixes the labelling method; by default each result uses
    its own best method.
    """
    if not results:
        raise ValueError("select_best needs at least one result")
    rows = [(_summary(r, combination), r.config) for r in results]
    # best: highest mean, then lowest std and smallest sizes so input order never matters
    (bm, bs, *_), _ = min(rows, key=lambda x: (-x[0][0], x[0][1], x[0][2], x[0][3], x[0][4], repr(x[1])))
    close = [(s, c) for s, c in rows if abs(s[0] - bm) <= s[1] + bs]
    return min(close, key=lambda x: (x[0][2], x[0][3], x[0][4], -x[0][0], x[0][1], repr(x[1])))[1]


def result_for(results: Sequence[RunResult], config: ModelConfig) -> RunResult:
    key = replace(config, seed=0)
    for r in results:
        if replace(r.config, seed=0) == key:
            return r
    raise KeyError(config.tag())


# reports


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class GridReport:
    dataset: str
    stats: DatasetStats
    results: list
    selected: ModelConfig
    combination: str | None = None

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "stats": vars(self.stats), "combination": self.combination,
                "selected": self.selected.to_dict(), "results": [r.to_dict() for r in self.results]}

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    def table(self) -> str:
        lines = [f"grid search on {self.dataset} (a={self.stats.a:.1f}, b={self.stats.b})",
                 f"{'W':>5} {'S':>4} {'M':>4}  {'mean':>6} {'std':>6}  combination"]
        for r in self.results:
            c = self.combination or r.chosen_combination
            mark = " *" if replace(r.config, seed=0) == replace(self.selected, seed=0) else ""
            lines.append(f"{r.config.W:>5} {r.config.S:>4} {r.config.M:>4}  {r.mean(c):6.3f} {r.std(c):6.3f}  {c}{mark}")
        return "\n".join(lines) + "\n"


def search(dataset, approach: str = "reco", seeds=DEFAULT_SEEDS, spec: ThresholdSpec | None = None,
           combination: str | None = None, base: ModelConfig | None = None) -> GridReport:
    ds = as_dataset(dataset)
    stats = DatasetStats.from_split(ds.train, ds.test)
    results = run_grid(ds, derive_candidates(stats, approach, base), seeds, spec)
    return GridReport(ds.name, stats, results, select_best(results, combination), combination)


@dataclass
class ContaminationReport:
    dataset: str
    config: ModelConfig
    rates: tuple
    combination: str | None
    cells: dict  # (loss, rate) -> RunResult

    def mean(self, loss: str, rate: float) -> float:
        return self.cells[(loss, rate)].mean(self.combination)

    def std(self, loss: str, rate: float) -> float:
        return self.cells[(loss, rate)].std(self.combination)

    def to_dict(self) -> dict:
        rows = []
        for (loss, rate), r in self.cells.items():
            rows.append({"loss": loss, "rate": rate, "mcc_mean": self.mean(loss, rate),
                         "mcc_std": self.std(loss, rate),
                         "combination": self.combination or r.chosen_combination, "run": r.to_dict()})
        return {"dataset": self.dataset, "config": self.config.to_dict(), "rates": list(self.rates),
                "combination": self.combination, "rows": rows}

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    def table(self) -> str:
        losses = list(dict.fromkeys(k[0] for k in self.cells))
        head = f"{'loss':<8}" + "".join(f"  {'rate ' + format(r, 'g'):>16}" for r in self.rates)
        lines = [f"contamination study on {self.dataset} ({self.config.tag()})", head]
        for loss in losses:
            cells = "".join(f"  {self.mean(loss, r):7.3f} +- {self.std(loss, r):5.3f}" for r in self.rates)
            lines.append(f"{loss:<8}{cells}")
        return "\n".join(lines) + "\n"


def contamination_study(dataset, config: ModelConfig, losses: Sequence[str] = ("mse", "huber", "softdtw"),
                        rates: Sequence[float] = (0.0, 0.02), seeds=DEFAULT_SEEDS,
                        spec: ThresholdSpec | None = None, combination: str | None = None
                        ) -> ContaminationReport:
    """Train the given configuration with each loss on clean and contaminated
    training data; scoring is squared error throughout.

    Anomalies are planted from the dataset's template pool, with placement
    drawn from the model seed.
    """
    ds = as_dataset(dataset)
    if any(r > 0 for r in rates) and not ds.pool:
        raise ConfigError(f"dataset {ds.name} has no anomaly templates to contaminate with")
    cells = {}
    for loss in losses:
        cfg = replace(config, kind="itransformer_reco", loss=loss)
        for rate in rates:
            def train_for_seed(seed, rate=rate):
                return contaminate(ds.train, ds.pool, rate, seed=seed)
            cells[(loss, float(rate))] = run_config(cfg, ds.train, ds.test, seeds, spec,
                                                    train_for_seed=train_for_seed)
    return ContaminationReport(ds.name, config, tuple(float(r) for r in rates), combination, cells)


@dataclass
class BenchmarkReport:
    seeds: tuple
    threshold: dict
    datasets: list = field(default_factory=list)  # [{"name", "N", "rows": [...]}]

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "threshold": self.threshold, "datasets": self.datasets}

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BenchmarkReport":
        d = json.loads(text)
        return cls(tuple(d["seeds"]), d["threshold"], d["datasets"])

    def table(self) -> str:
        lines = [f"{'dataset':<18} {'model':<18} {'MCC':>16}  combination"]
        for ds in self.datasets:
            for row in ds["rows"]:
                m = f"{row['mcc_mean']:.3f}"
                if row["mcc_std"] is not None:
                    m += f" +- {row['mcc_std']:.3f}"
                lines.append(f"{ds['name']:<18} {row['model']:<18} {m:>16}  {row['combination']}")
        return "\n".join(lines) + "\n"


def _row(model: str, n_vars: int, per_comb: dict[str, float], std: dict[str, float] | None,
         config: ModelConfig | None, run: RunResult | None = None) -> dict:
    best = max(per_comb, key=lambda c: (per_comb[c], -list(per_comb).index(c)))
    return {
        "model": model,
        "config": None if config is None else config.to_dict(),
        "mcc_mean": per_comb[best],
        "mcc_std": None if std is None else std[best],
        "combination": "all equal" if n_vars == 1 else best,
        "mcc_per_combination": per_comb,
        "run": None if run is None else run.to_dict(),
    }


def benchmark(datasets, models: Sequence[str] = BENCHMARK_MODELS, seeds=DEFAULT_SEEDS,
              spec: ThresholdSpec | None = None, configs: dict | None = None) -> BenchmarkReport:
    """Compare models on each dataset, reporting each model's best combination.

    ``configs`` maps model kind to an explicit ModelConfig; iTransformer
    configurations not given are grid-searched, and the vanilla transformer
    reuses the selected iTransformer-reco configuration.
    """
    spec = spec or ThresholdSpec()
    seeds = _seed_list(seeds)
    configs = dict(configs or {})
    unknown = set(models) - set(BENCHMARK_MODELS)
    if unknown:
        raise ConfigError(f"unknown benchmark model(s): {sorted(unknown)}")
    report = BenchmarkReport(seeds, {k: v for k, v in vars(spec).items() if v is not None})
    if isinstance(datasets, (Dataset,)) or hasattr(datasets, "train"):
        datasets = [datasets]
    for obj in datasets:
        ds = as_dataset(obj)
        rows = []
        chosen = dict(configs)
        stats = None

        def grid(approach: str) -> ModelConfig:
            nonlocal stats
            stats = stats or DatasetStats.from_split(ds.train, ds.test)
            res = run_grid(ds, derive_candidates(stats, approach), seeds, spec)
            return select_best(res)

        if "transformer_reco" in models and "transformer_reco" not in chosen:
            if "itransformer_reco" not in chosen:
                chosen["itransformer_reco"] = grid("reco")
            chosen["transformer_reco"] = replace(chosen["itransformer_reco"], kind="transformer_reco")
        for model in models:
            if model == "baseline":
                res = _mcc_by_combination(score_baseline(ds.test), ds.test.labels, spec,
                                          score_baseline(ds.train))
                rows.append(_row(model, ds.test.N, res, None, None))
                continue
            if model not in chosen:
                chosen[model] = {"usad": USAD_CONFIG}.get(model) or grid("fc" if model == "itransformer_fc" else "reco")
            cfg = chosen[model]
            if cfg.kind != model:
                raise ConfigError(f"config for {model} has kind {cfg.kind}")
            run = run_config(cfg, ds.train, ds.test, seeds, spec)
            means = run.best_mcc_per_combination
            rows.append(_row(model, ds.test.N, means, {c: run.std(c) for c in means}, run.config, run))
        report.datasets.append({"name": ds.name, "N": ds.test.N, "rows": rows})
    return report
