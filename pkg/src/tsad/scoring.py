"""Per-timestamp, per-variate anomaly scores from model outputs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import TimeSeries, make_windows
from .losses import mse_elementwise
from .models import ConfigError, TrainedModel, baseline_score, usad_score


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    scores: np.ndarray
    model_id: str = ""
    coverage: np.ndarray | None = None
    meta: dict | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if not np.all(np.isfinite(s)) or (s < 0).any():
            raise ValueError("scores must be finite and non-negative")
        object.__setattr__(self, "scores", s)
        if self.coverage is None:
            object.__setattr__(self, "coverage", np.ones(s.shape[0], dtype=np.int64))

    @property
    def T(self) -> int:
        return self.scores.shape[0]

    @property
    def N(self) -> int:
        return self.scores.shape[1]


def score_baseline(ts: TimeSeries) -> ScoreSeries:
    return ScoreSeries(baseline_score(ts), model_id="baseline")


def score_reconstruction(trained: TrainedModel, ts: TimeSeries, batch: int = 256,
                         alpha: float = 0.5, beta: float = 0.5) -> ScoreSeries:
    """Squared reconstruction error over non-overlapping windows, padding dropped.

    USAD models use the weighted absolute error of both autoencoders instead.
    """
    cfg = trained.config
    if cfg.kind not in ("transformer_reco", "itransformer_reco", "usad"):
        raise ConfigError(f"score_reconstruction needs a reconstruction model, got {cfg.kind}")
    if ts.N != trained.n_vars:
        raise ConfigError(f"model trained on N={trained.n_vars} variates, series has N={ts.N}")
    windows = make_windows(ts, cfg.W, purpose="test_reco")
    X = windows.array()
    if cfg.kind == "usad":
        err = np.concatenate([usad_score(trained, X[i : i + batch], alpha, beta) for i in range(0, len(X), batch)])
    else:
        err = mse_elementwise(trained.predict(X, batch), X)
    scores = err.reshape(-1, ts.N)[: ts.T]
    meta = _meta(trained)
    if cfg.kind == "usad":
        meta.update(alpha=alpha, beta=beta)
    return ScoreSeries(scores, model_id=cfg.tag(), meta=meta)


def score_forecast(trained: TrainedModel, ts: TimeSeries, batch: int = 256) -> ScoreSeries:
    """Squared one-step-ahead error; the first W stamps have no prediction
    (score 0, coverage 0)."""
    cfg = trained.config
    if cfg.kind != "itransformer_fc":
        raise ConfigError(f"score_forecast needs a forecasting model, got {cfg.kind}")
    if ts.T <= cfg.W:
        raise ConfigError(f"series length T={ts.T} must exceed window W={cfg.W}")
    if ts.N != trained.n_vars:
        raise ConfigError(f"model trained on N={trained.n_vars} variates, series has N={ts.N}")
    windows = make_windows(ts, cfg.W, purpose="test_fc")
    n_pred = ts.T - cfg.W
    X = windows.array(np.arange(n_pred))
    pred = trained.predict(X, batch)[:, 0, :]
    scores = np.zeros((ts.T, ts.N))
    scores[cfg.W :] = mse_elementwise(pred, ts.values[cfg.W :])
    coverage = np.zeros(ts.T, dtype=np.int64)
    coverage[cfg.W :] = 1
    return ScoreSeries(scores, model_id=cfg.tag(), coverage=coverage, meta=_meta(trained))


def score_model(trained: TrainedModel, ts: TimeSeries, **kw) -> ScoreSeries:
    if trained.config.kind == "itransformer_fc":
        return score_forecast(trained, ts, **kw)
    return score_reconstruction(trained, ts, **kw)


def _meta(trained: TrainedModel) -> dict:
    c = trained.config
    return {"model_id": c.tag(), "kind": c.kind, "W": c.W, "S": c.S, "M": c.M, "loss": c.loss, "seed": c.seed}


def save_scores(scores: ScoreSeries, path) -> tuple[Path, Path]:
    """CSV of T rows x N columns plus a JSON sidecar with provenance."""
    path = Path(path)
    header = ",".join(f"v{i}" for i in range(scores.N))
    np.savetxt(path, scores.scores, delimiter=",", header=header, comments="", fmt="%.17g")
    side = path.with_suffix(".meta.json")
    meta = dict(scores.meta or {}, model_id=scores.model_id, coverage=scores.coverage.tolist())
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side


def load_scores(path) -> ScoreSeries:
    path = Path(path)
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    side = path.with_suffix(".meta.json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    coverage = np.asarray(meta.pop("coverage")) if "coverage" in meta else None
    return ScoreSeries(arr, model_id=meta.get("model_id", ""), coverage=coverage, meta=meta)
