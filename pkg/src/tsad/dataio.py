"""Time-series containers, CSV ingestion, normalisation, sliding windows and
synthetic data with injected anomalies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import seeded_rng

ANOMALY_KINDS = (
    "point_global",
    "point_contextual",
    "collective_shape",
    "collective_trend",
    "collective_season",
)
POINT_KINDS = ("point_global", "point_contextual")
WINDOW_PURPOSES = ("train", "test_reco", "test_fc")


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """T x N values, optional per-timestamp 0/1 labels."""

    values: np.ndarray
    labels: np.ndarray | None = None
    name: str = "series"
    norm_stats: dict | None = None
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DataError(f"values must be a non-empty T x N matrix, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (v.shape[0],):
                raise DataError(f"labels length {lab.shape} does not match T={v.shape[0]}")
            if not np.isin(lab, (0, 1)).all():
                raise DataError("labels must be 0/1")
            lab = lab.astype(np.int8)
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        if self.columns is None:
            object.__setattr__(self, "columns", tuple(f"v{i}" for i in range(v.shape[1])))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int, name: str | None = None) -> "TimeSeries":
        labels = None if self.labels is None else self.labels[start:stop]
        return replace(self, values=self.values[start:stop], labels=labels, name=name or self.name)


# CSV


def load_csv(path, label_path=None, name: str | None = None) -> TimeSeries:
    """Read a header-row CSV (one column per variate) and an optional 0/1 label file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    values = np.empty((len(body), len(header)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}: unparseable cell at row {r}, column {c + 1} ({header[c]!r}): {cell!r}") from None
            if not math.isfinite(x):
                raise DataError(f"{path}: non-finite cell at row {r}, column {c + 1} ({header[c]!r}): {cell!r}")
            values[r - 2, c] = x
    labels = None
    if label_path is not None:
        labels = _load_labels(Path(label_path))
        if len(labels) != len(values):
            raise DataError(f"{label_path}: {len(labels)} labels for {len(values)} rows")
    return TimeSeries(values, labels, name=name or path.stem, columns=tuple(header))


def _load_labels(path: Path) -> np.ndarray:
    out = []
    with path.open(encoding="utf-8") as fh:
        for r, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s not in ("0", "1"):
                raise DataError(f"{path}: label at row {r} is {s!r}, expected 0 or 1")
            out.append(int(s))
    if not out:
        raise DataError(f"{path}: empty label file")
    return np.array(out, dtype=np.int8)


def save_csv(ts: TimeSeries, path, label_path=None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ts.columns)
        for row in ts.values:
            w.writerow([repr(float(x)) for x in row])
    if label_path is not None:
        if ts.labels is None:
            raise DataError("series has no labels to save")
        Path(label_path).write_text("".join(f"{int(x)}\n" for x in ts.labels), encoding="utf-8")


# normalisation


def fit_norm_stats(values: np.ndarray, mode: str = "zscore") -> dict:
    if mode == "zscore":
        return {"mode": mode, "a": values.mean(axis=0).tolist(), "b": values.std(axis=0).tolist()}
    if mode == "minmax":
        return {"mode": mode, "a": values.min(axis=0).tolist(), "b": values.max(axis=0).tolist()}
    raise ValueError(f"unknown normalisation mode {mode!r}")


def normalize(ts: TimeSeries, mode: str = "zscore", fit_stats: dict | None = None) -> TimeSeries:
    """Per-variate z-score or min-max scaling.

    Pass ``fit_stats`` (e.g. ``train.norm_stats``) to reuse training statistics
    on a test split. Constant variates map to zeros.
    """
    stats = fit_stats if fit_stats is not None else fit_norm_stats(ts.values, mode)
    a, b = np.asarray(stats["a"], float), np.asarray(stats["b"], float)
    if stats["mode"] == "zscore":
        shift, scale = a, b
    else:
        shift, scale = a, b - a
    safe = np.where(scale > 0, scale, 1.0)
    out = np.where(scale > 0, (ts.values - shift) / safe, 0.0)
    return replace(ts, values=out, norm_stats=stats)


def decimate(ts: TimeSeries, k: int) -> TimeSeries:
    """Keep every k-th row (labels: max over each stride block)."""
    if k < 1:
        raise ValueError("decimation factor must be >= 1")
    labels = None
    if ts.labels is not None:
        T = ts.T
        pad = (-T) % k
        lab = np.concatenate([ts.labels, np.zeros(pad, dtype=np.int8)]).reshape(-1, k)
        labels = lab.max(axis=1)
    return replace(ts, values=ts.values[::k], labels=labels)


# sliding windows


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Strided view over a series: window i covers rows [i*S, i*S + W).

    The last window is padded by repeating the final row ``pad_len`` times.
    """

    source: TimeSeries
    W: int
    S: int
    count: int
    pad_len: int
    purpose: str = "train"

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.count) * self.S

    def array(self, idx=None) -> np.ndarray:
        """Stacked windows, shape (k, W, N)."""
        starts = self.starts if idx is None else self.starts[np.asarray(idx)]
        T = self.source.T
        rows = np.minimum(starts[:, None] + np.arange(self.W)[None, :], T - 1)
        return self.source.values[rows]

    def __len__(self) -> int:
        return self.count


def window_count(T: int, W: int, S: int) -> int:
    return -(-(T - W) // S) + 1


def make_windows(ts: TimeSeries, W: int, S: int = 1, purpose: str = "train") -> WindowSet:
    if purpose not in WINDOW_PURPOSES:
        raise ValueError(f"unknown window purpose {purpose!r}")
    if purpose == "test_reco":
        S = W
    elif purpose == "test_fc":
        S = 1
    if W < 1 or S < 1:
        raise DataError(f"window size and step must be >= 1 (W={W}, S={S})")
    if W > ts.T:
        raise DataError(f"window size W={W} exceeds series length T={ts.T}")
    count = window_count(ts.T, W, S)
    pad_len = (count - 1) * S + W - ts.T
    return WindowSet(ts, W, S, count, pad_len, purpose)


# synthetic data


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    start: int
    length: int = 1
    variates: tuple[int, ...] = (0,)
    magnitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise DataError(f"unknown anomaly kind {self.kind!r}")
        if self.length < 1 or self.start < 0:
            raise DataError("anomaly start must be >= 0 and length >= 1")
        if self.kind in POINT_KINDS and self.length != 1:
            raise DataError(f"{self.kind} anomalies have length 1")
        if not self.variates:
            raise DataError("anomaly must affect at least one variate")
        object.__setattr__(self, "variates", tuple(int(v) for v in self.variates))

    @property
    def stop(self) -> int:
        return self.start + self.length


def _check_specs(specs: Sequence[AnomalySpec], T: int, N: int) -> None:
    spans = sorted((s.start, s.stop) for s in specs)
    for s in specs:
        if s.stop > T:
            raise DataError(f"anomaly {s} extends past T={T}")
        if max(s.variates) >= N or min(s.variates) < 0:
            raise DataError(f"anomaly {s} references a variate outside 0..{N - 1}")
    for (_, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 < e0:
            raise DataError("anomaly specs overlap in time")


def inject(values: np.ndarray, spec: AnomalySpec, reference: np.ndarray | None = None) -> None:
    """Apply one anomaly to ``values`` in place.

    ``reference`` (defaults to ``values`` itself) supplies the per-variate
    centre, amplitude and range the anomaly is scaled by.
    """
    ref = values if reference is None else reference
    t0, t1 = spec.start, spec.stop
    k = np.arange(spec.length)
    for n in spec.variates:
        col = ref[:, n]
        centre = col.mean()
        amp = np.sqrt(2.0) * col.std()
        span = col.max() - col.min()
        seg = values[t0:t1, n]
        if spec.kind == "point_global":
            seg += spec.magnitude * span
        elif spec.kind == "point_contextual":
            # jump to the opposite phase: other side of the centre, at least
            # magnitude * amplitude away, so the level stays in range
            side = np.where(seg >= centre, -1.0, 1.0)
            seg[:] = centre + side * np.maximum(np.abs(seg - centre), spec.magnitude * amp)
        elif spec.kind == "collective_shape":
            # short-period square wave: abrupt level flips every few stamps
            seg[:] = centre + spec.magnitude * amp * np.where((k // 3) % 2 == 0, 1.0, -1.0)
        elif spec.kind == "collective_trend":
            seg += spec.magnitude * span * (k + 1) / spec.length
        elif spec.kind == "collective_season":
            src = np.minimum(t0 + 2 * k, len(values) - 1)
            seg[:] = values[src, n].copy()


def _base_signal(T: int, N: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    periods = np.linspace(16.0, 48.0, N) * rng.uniform(0.9, 1.1, N)
    phases = rng.uniform(0, 2 * np.pi, N)
    mixing = np.eye(N) + 0.4 * rng.normal(size=(N, N))
    t = np.arange(T)[:, None]
    sources = np.sin(2 * np.pi * t / periods[None, :] + phases[None, :])
    return sources @ mixing.T, float(np.abs(mixing).sum(axis=1).max())


def synthesize(T: int, N: int, specs: Sequence[AnomalySpec] = (), seed: int = 0, noise: float = 0.05,
               name: str = "synthetic") -> TimeSeries:
    """Correlated sinusoids plus Gaussian noise, with the given anomalies injected.

    Each variate is a random linear mix of sinusoids with distinct periods;
    noise std is ``noise`` times the variate's amplitude. Random draws do not
    depend on ``specs``, so the same seed with ``specs=[]`` reproduces the
    clean series.
    """
    specs = list(specs)
    _check_specs(specs, T, N)
    rng = seeded_rng(seed)
    clean, _ = _base_signal(T, N, rng)
    amp = np.sqrt(2.0) * clean.std(axis=0)
    values = clean + noise * amp[None, :] * rng.normal(size=(T, N))
    base = values.copy()
    labels = np.zeros(T, dtype=np.int8)
    for spec in specs:
        inject(values, spec, reference=base)
        labels[spec.start : spec.stop] = 1
    return TimeSeries(values, labels, name=name)


def random_specs(T: int, N: int, n_collective: int, n_point: int, seed: int,
                 length_range: tuple[int, int] = (20, 60), margin: int = 0) -> list[AnomalySpec]:
    """Draw non-overlapping anomaly specs spread over [margin, T)."""
    rng = seeded_rng(seed)
    lengths = [int(rng.integers(length_range[0], length_range[1] + 1)) for _ in range(n_collective)]
    lengths += [1] * n_point
    kinds = [("collective_shape", "collective_trend", "collective_season")[i % 3] for i in range(n_collective)]
    kinds += [("point_global", "point_contextual")[i % 2] for i in range(n_point)]
    order = rng.permutation(len(kinds))
    kinds = [kinds[i] for i in order]
    lengths = [lengths[i] for i in order]
    # evenly spaced slots, each anomaly placed at a random offset inside its slot
    slot = (T - margin) // max(1, len(kinds))
    specs = []
    for s, (kind, length) in enumerate(zip(kinds, lengths)):
        lo = margin + s * slot + 2
        hi = margin + (s + 1) * slot - length - 2
        if hi < lo:
            raise DataError("not enough room to place the requested anomalies")
        start = int(rng.integers(lo, hi + 1))
        n_aff = int(rng.integers(1, N + 1)) if kind.startswith("collective") else 1
        variates = tuple(sorted(rng.choice(N, size=n_aff, replace=False).tolist()))
        magnitude = {"point_global": 0.8, "point_contextual": 0.8, "collective_shape": 1.5,
                     "collective_trend": 1.5, "collective_season": 1.0}[kind]
        specs.append(AnomalySpec(kind, start, length, variates, magnitude))
    return specs


def contaminate(train: TimeSeries, test_pool: Sequence[AnomalySpec], rate: float, seed: int = 0,
                max_rate: float = 0.05) -> TimeSeries:
    """Inject anomalies drawn from ``test_pool`` into a training series.

    Pool entries are used as templates (kind, length, variates, magnitude) and
    placed at random free positions until the labelled fraction is as close
    to ``rate`` as the template lengths allow (off by less than one anomaly).
    """
    if not 0.0 <= rate <= max_rate:
        raise DataError(f"contamination rate {rate} outside [0, {max_rate}]")
    labels = np.zeros(train.T, dtype=np.int8) if train.labels is None else train.labels.copy()
    if rate == 0:
        return replace(train, labels=labels)
    if not test_pool:
        raise DataError("empty anomaly pool")
    target = rate * train.T
    if target + max(s.length for s in test_pool) > train.T:
        raise DataError(f"rate {rate} infeasible for T={train.T}")
    rng = seeded_rng(seed)
    values = np.array(train.values)
    reference = np.array(train.values)
    occupied = labels.astype(bool).copy()
    count = int(labels.sum())
    i = 0
    attempts = 0
    while count < target:
        tmpl = test_pool[i % len(test_pool)]
        if count + tmpl.length > target:
            # near the target: take the template that lands closest, or stop
            tmpl = min(test_pool, key=lambda s: abs(count + s.length - target))
            if abs(count + tmpl.length - target) >= target - count:
                break
        start = int(rng.integers(0, train.T - tmpl.length + 1))
        lo, hi = max(0, start - 1), min(train.T, start + tmpl.length + 1)
        attempts += 1
        if attempts > 100 * (len(test_pool) + int(target)):
            raise DataError(f"could not place anomalies to reach rate {rate}")
        if occupied[lo:hi].any():
            continue
        spec = replace(tmpl, start=start, variates=tuple(v for v in tmpl.variates if v < train.N) or (0,))
        inject(values, spec, reference=reference)
        occupied[spec.start : spec.stop] = True
        labels[spec.start : spec.stop] = 1
        count += spec.length
        i += 1
    return replace(train, values=values, labels=labels, name=f"{train.name}+contam{rate:g}")


@dataclass
class SyntheticProfile:
    """Clean training split and labelled test split sharing one base process."""

    train: TimeSeries
    test: TimeSeries
    specs: list[AnomalySpec] = field(default_factory=list)


def synthetic_profile(T: int = 5000, N: int = 5, n_collective: int = 10, n_point: int = 10, seed: int = 0,
                      noise: float = 0.05) -> SyntheticProfile:
    """Desk-scale benchmark: ``T`` clean training rows followed by ``T`` test
    rows carrying the injected anomalies, z-scored with training statistics."""
    specs = random_specs(T, N, n_collective, n_point, seed=seed + 1)
    shifted = [replace(s, start=s.start + T) for s in specs]
    full = synthesize(2 * T, N, shifted, seed=seed, noise=noise, name=f"synthetic-s{seed}")
    train = normalize(full.slice(0, T, name=f"{full.name}-train"))
    test = normalize(full.slice(T, 2 * T, name=f"{full.name}-test"), fit_stats=train.norm_stats)
    return SyntheticProfile(train, test, specs)
