"""Turn anomaly scores into binary labels.

Three threshold strategies (best-on-validation, top-fraction percentile,
peaks-over-threshold) and three ways of handling N-variate scores: average
the scores first (``global``), or threshold every variate separately and pool
with inclusive OR (``local_or``) or a vote of at least N/2 variates
(``local_majority``). A score counts as anomalous only when strictly above
the threshold.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .metrics import Confusion, METRICS

log = logging.getLogger(__name__)

THRESHOLD_METHODS = ("validation_best", "percentile", "pot")
COMBINATIONS = ("global", "local_or", "local_majority")


class PotError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdSpec:
    method: str = "pot"
    f: float | None = None
    q: float = 1e-3
    init_level: float = 0.98
    metric: str = "mcc"

    def __post_init__(self):
        if self.method not in THRESHOLD_METHODS:
            raise ValueError(f"unknown threshold method {self.method!r}")
        if self.method == "percentile" and (self.f is None or not 0 < self.f < 1):
            raise ValueError("percentile thresholding needs a fraction 0 < f < 1")
        if self.method == "pot" and not (0 < self.init_level < 1 and 0 < self.q < 1 - self.init_level):
            raise ValueError("POT needs 0 < init_level < 1 and 0 < q < 1 - init_level")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class GpdFit:
    u: float
    sigma: float
    xi: float
    n_excess: int
    n_total: int
    method: str = "grimshaw"

    def quantile(self, q: float) -> float:
        """Score level exceeded with probability ``q``."""
        r = q * self.n_total / self.n_excess
        if abs(self.xi) < 1e-8:
            return self.u - self.sigma * math.log(r)
        return self.u + (self.sigma / self.xi) * (r ** (-self.xi) - 1.0)


# univariate thresholds


def _vectorized_metric(metric: str, tp, tn, fp, fn) -> np.ndarray:
    tp, tn, fp, fn = (np.asarray(a, dtype=float) for a in (tp, tn, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        if metric == "mcc":
            den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
            out = np.where(den > 0, (tp * tn - fp * fn) / np.sqrt(np.where(den > 0, den, 1.0)), 0.0)
            return np.clip(out, -1.0, 1.0)
        prec = np.where(tp + fp > 0, tp / np.where(tp + fp > 0, tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.where(tp + fn > 0, tp + fn, 1), 0.0)
        if metric == "precision":
            return prec
        if metric == "recall":
            return rec
        if metric == "f1":
            return np.where(prec + rec > 0, 2 * prec * rec / np.where(prec + rec > 0, prec + rec, 1), 0.0)
        if metric == "accuracy":
            return (tp + tn) / (tp + tn + fp + fn)
    raise ValueError(f"unknown metric {metric!r}")


def threshold_validation_best(scores_val, labels_val, metric: str = "mcc") -> float:
    """Midpoint threshold maximising ``metric`` on a labelled validation set.

    Ties go to the larger threshold (fewer positives).
    """
    s = np.asarray(scores_val, dtype=float).ravel()
    y = np.asarray(labels_val).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("validation labels must contain both classes")
    uniq, inverse = np.unique(s, return_inverse=True)
    if len(uniq) == 1:
        return float(uniq[0])
    cnt_le = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    pos_le = np.cumsum(np.bincount(inverse, weights=y, minlength=len(uniq)))[:-1]
    n, P = len(s), int(y.sum())
    tp = P - pos_le
    fp = (n - cnt_le) - tp
    fn = pos_le
    tn = cnt_le - pos_le
    values = _vectorized_metric(metric, tp, tn, fp, fn)
    best = np.flatnonzero(values == values.max())[-1]
    return float((uniq[best] + uniq[best + 1]) / 2.0)


def threshold_percentile(scores, f: float) -> float:
    """Empirical (1 - f) quantile, linear interpolation."""
    if not 0 < f < 1:
        raise ValueError("fraction f must lie in (0, 1)")
    return float(np.quantile(np.asarray(scores, dtype=float).ravel(), 1.0 - f))


def _gpd_loglik(y: np.ndarray, sigma: float, xi: float) -> float:
    if sigma <= 0:
        return -math.inf
    if abs(xi) < 1e-12:
        return -len(y) * math.log(sigma) - y.sum() / sigma
    s = 1.0 + xi * y / sigma
    if (s <= 0).any():
        return -math.inf
    return -len(y) * math.log(sigma) - (1.0 + 1.0 / xi) * np.log(s).sum()


def _grimshaw(y: np.ndarray) -> tuple[float, float]:
    """Maximum-likelihood GPD fit via roots of Grimshaw's one-dimensional
    profile equation in t = xi / sigma."""
    ymax, ymin, ymean = y.max(), y.min(), y.mean()

    def w(t):
        s = 1.0 + np.multiply.outer(np.atleast_1d(t), y)
        return (1.0 + np.log(s).mean(axis=-1)) * (1.0 / s).mean(axis=-1) - 1.0

    grids = [-(1.0 / ymax) * np.unique(np.concatenate([np.logspace(-6, 0, 120)[:-1], 1.0 - np.logspace(-9, -1, 60)]))]
    if ymin > 0 and ymean > ymin:
        # the positive root, when present, lies below 2 (mean - min) / min^2
        upper = 2.0 * (ymean - ymin) / (ymin * ymin)
        lower = min(1e-6 / ymean, upper * 1e-6)
        grids.append(np.logspace(np.log10(lower), np.log10(upper), 400))
    roots = []
    for grid in grids:
        grid = np.sort(grid)
        vals = w(grid)
        for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if np.isfinite(fa) and np.isfinite(fb) and fa * fb < 0:
                roots.append(brentq(lambda t: float(w(t)[0]), a, b, xtol=1e-14, rtol=1e-12))
    # for very short tails (xi < -1) the likelihood has no interior stationary
    # point and increases towards the support edge, so keep the edge as a candidate
    roots.append(float(grids[0].min()))
    best = (ymean, 0.0)
    best_ll = _gpd_loglik(y, *best)
    for t in roots:
        xi = float(np.log1p(t * y).mean())
        sigma = xi / t
        ll = _gpd_loglik(y, sigma, xi)
        if ll > best_ll:
            best, best_ll = (sigma, xi), ll
    if not all(math.isfinite(v) for v in best) or best[0] <= 0:
        raise FloatingPointError("Grimshaw search produced an invalid fit")
    return best


def _moments(y: np.ndarray) -> tuple[float, float]:
    m, v = y.mean(), y.var()
    if v <= 0:
        return m, 0.0
    ratio = m * m / v
    return 0.5 * m * (ratio + 1.0), 0.5 * (1.0 - ratio)


def fit_gpd(scores, init_level: float = 0.98) -> GpdFit:
    x = np.asarray(scores, dtype=float).ravel()
    u = float(np.quantile(x, init_level))
    y = x[x > u] - u
    if len(y) < 2:
        raise PotError(
            f"only {len(y)} excess(es) above the initial level {init_level}; lower init_level to fit the tail"
        )
    try:
        sigma, xi = _grimshaw(y)
        method = "grimshaw"
    except (FloatingPointError, ValueError, RuntimeError):
        sigma, xi = _moments(y)
        method = "moments"
    return GpdFit(u, float(sigma), float(xi), int(len(y)), int(len(x)), method)


def threshold_pot(scores, q: float = 1e-3, init_level: float = 0.98) -> tuple[float, GpdFit]:
    """Peaks-over-threshold: fit a generalised Pareto tail above the
    ``init_level`` quantile and return the level exceeded with probability q."""
    fit = fit_gpd(scores, init_level)
    return fit.quantile(q), fit


# combination


def combine_global(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    return s.mean(axis=1) if s.ndim == 2 else s


def combine_local(per_variate_labels, mode: str = "or") -> np.ndarray:
    lab = np.asarray(per_variate_labels).astype(bool)
    if lab.ndim == 1:
        lab = lab[:, None]
    if mode == "or":
        return lab.any(axis=1).astype(np.int8)
    if mode == "majority":
        N = lab.shape[1]
        return (lab.sum(axis=1) >= math.ceil(N / 2)).astype(np.int8)
    raise ValueError(f"unknown local pooling {mode!r}")


@dataclass
class LabelResult:
    labels: np.ndarray
    method: str
    combine: str
    thresholds: list[float]
    fallback: list[bool] = field(default_factory=list)
    fits: list[dict | None] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {
            "method": self.method,
            "combine": self.combine,
            "thresholds": self.thresholds,
            "fallback": self.fallback,
            "fits": self.fits,
            "params": self.params,
        }


def _as_matrix(scores) -> tuple[np.ndarray, np.ndarray]:
    values = getattr(scores, "scores", scores)
    s = np.asarray(values, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    cov = getattr(scores, "coverage", None)
    covered = np.ones(len(s), bool) if cov is None else np.asarray(cov) > 0
    return s, covered


def _threshold_1d(x, spec: ThresholdSpec, calibration=None, validation=None):
    """Returns (threshold, fallback_flag, fit_dict)."""
    if spec.method == "percentile":
        return threshold_percentile(x, spec.f), False, None
    if spec.method == "validation_best":
        val_scores, val_labels = validation
        return threshold_validation_best(val_scores, val_labels, spec.metric), False, None
    try:
        thr, fit = threshold_pot(x if calibration is None else calibration, spec.q, spec.init_level)
        return thr, False, asdict(fit)
    except PotError as err:
        f = spec.f if spec.f is not None else spec.q
        log.warning("POT failed (%s); falling back to percentile f=%g", err, f)
        return threshold_percentile(x, f), True, None


def extract_labels(scores, spec: ThresholdSpec, combine: str = "global", calibration=None,
                   validation=None) -> LabelResult:
    """Binary label per timestamp.

    ``calibration``: optional reference scores (e.g. from the training split,
    same N) that POT fits its tail on instead of the scored series itself.
    ``validation``: ``(scores, labels)`` pair required by ``validation_best``.
    Timestamps with zero coverage (forecast warm-up) are never labelled
    positive and are left out of the fits.
    """
    if combine not in COMBINATIONS:
        raise ValueError(f"unknown combination {combine!r}")
    if spec.method == "validation_best" and validation is None:
        raise ValueError("validation_best needs validation=(scores, labels)")
    s, covered = _as_matrix(scores)
    cal = None
    if calibration is not None:
        cal, cal_cov = _as_matrix(calibration)
        cal = cal[cal_cov]
        if cal.shape[1] != s.shape[1]:
            raise ValueError("calibration scores have a different number of variates")
    val = None
    if validation is not None:
        vs, vcov = _as_matrix(validation[0])
        val = (vs[vcov], np.asarray(validation[1])[vcov])

    if combine == "global":
        columns = [combine_global(s)]
        cal_cols = [combine_global(cal)] if cal is not None else [None]
        val_cols = [combine_global(val[0])] if val is not None else [None]
    else:
        columns = [s[:, n] for n in range(s.shape[1])]
        cal_cols = [cal[:, n] for n in range(s.shape[1])] if cal is not None else [None] * s.shape[1]
        val_cols = [val[0][:, n] for n in range(s.shape[1])] if val is not None else [None] * s.shape[1]

    thresholds, fallback, fits, per_var = [], [], [], []
    for col, cal_col, val_col in zip(columns, cal_cols, val_cols):
        thr, fb, fit = _threshold_1d(col[covered], spec, cal_col, None if val is None else (val_col, val[1]))
        thresholds.append(float(thr))
        fallback.append(fb)
        fits.append(fit)
        per_var.append((col > thr) & covered)
    mat = np.stack(per_var, axis=1)
    if combine == "local_majority":
        labels = combine_local(mat, "majority")
    else:
        labels = combine_local(mat, "or")
    params = {k: v for k, v in asdict(spec).items() if v is not None}
    params["calibrated"] = calibration is not None
    return LabelResult(labels, spec.method, combine, thresholds, fallback, fits, params)


def save_labels(result: LabelResult, path) -> tuple[Path, Path]:
    path = Path(path)
    path.write_text("".join(f"{int(x)}\n" for x in result.labels))
    side = path.with_suffix(".meta.json")
    side.write_text(json.dumps(result.meta(), indent=2, sort_keys=True))
    return path, side

