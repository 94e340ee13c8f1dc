"""Scoring models: absolute-value baseline, vanilla and inverted transformer
encoders (reconstruction / forecasting heads) and the USAD autoencoder pair.

Windows are ``(B, W, N)`` arrays throughout. The inverted embedding turns each
variate's length-W history into one token, so attention mixes variates; the
standard embedding turns each timestamp into a token plus a sinusoidal
positional code.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tt
from .dataio import TimeSeries, WindowSet
from .losses import LossSpec
from .tensor import Adam, Tensor, init_weights

log = logging.getLogger(__name__)

MODEL_KINDS = ("baseline", "transformer_reco", "itransformer_reco", "itransformer_fc", "usad")
ATTENTION_KINDS = ("transformer_reco", "itransformer_reco", "itransformer_fc")
RECO_KINDS = ("transformer_reco", "itransformer_reco", "usad")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Model and optimisation settings.

    For ``usad``, ``M`` is the latent dimension.
    """

    kind: str = "itransformer_reco"
    W: int = 96
    S: int = 1
    M: int = 16
    n_heads: int = 2
    n_layers: int = 2
    loss: str = "mse"
    delta: float = 1.0
    gamma: float = 1.0
    epochs: int = 10
    batch: int = 32
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.W < 1 or self.S < 1 or self.M < 1:
            raise ConfigError(f"W, S, M must be >= 1 (got W={self.W}, S={self.S}, M={self.M})")
        if self.S > self.W:
            raise ConfigError(f"step S={self.S} larger than window W={self.W}")
        if self.kind in ATTENTION_KINDS:
            if self.n_heads < 1 or self.M % self.n_heads:
                raise ConfigError(f"n_heads={self.n_heads} must divide M={self.M}")
            if self.n_layers < 1:
                raise ConfigError("n_layers must be >= 1")
        if self.kind == "itransformer_fc":
            if self.S != 1:
                raise ConfigError("forecasting requires S=1")
            if self.loss == "softdtw":
                raise ConfigError("Soft-DTW has no alignment structure for a single-step target")
        if self.epochs < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch >= 1 and lr > 0 required")
        LossSpec(self.loss, self.delta, self.gamma)

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.delta, self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig field(s): {sorted(unknown)}")
        return cls(**d)

    def tag(self) -> str:
        return f"{self.kind}-W{self.W}-S{self.S}-M{self.M}-{self.loss}-s{self.seed}"


def default_heads(M: int, preferred: int = 2) -> int:
    """Largest head count <= ``preferred`` dividing ``M``."""
    return max(h for h in range(1, preferred + 1) if M % h == 0)


# baseline


def baseline_score(ts: TimeSeries | np.ndarray) -> np.ndarray:
    values = ts.values if isinstance(ts, TimeSeries) else np.asarray(ts, dtype=float)
    return np.abs(values)


# building blocks


def positional_encoding(L: int, M: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(M)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / M)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Params:
    """Ordered name -> Tensor registry; creation order fixes the RNG stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def weight(self, name: str, shape, scheme: str = "xavier_uniform") -> Tensor:
        t = init_weights(self.rng, shape, scheme, name=name)
        self.params[name] = t
        return t

    def const(self, name: str, shape, value: float) -> Tensor:
        t = Tensor(np.full(shape, float(value)), requires_grad=True, name=name)
        self.params[name] = t
        return t


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def _affine_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return tt.layer_norm(x) * g + b


def attention(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over the token axis."""
    B, L, M = x.shape
    dh = M // n_heads

    def heads(t: Tensor) -> Tensor:
        return tt.permute(t.reshape(B, L, n_heads, dh), (0, 2, 1, 3))

    q = heads(linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = heads(linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
    v = heads(linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    weights = tt.softmax((q @ tt.transpose(k)) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = tt.permute(weights @ v, (0, 2, 1, 3)).reshape(B, L, M)
    return linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def encoder_block(x: Tensor, p: dict[str, Tensor], prefix: str, n_heads: int) -> Tensor:
    x = _affine_norm(x + attention(x, p, f"{prefix}.attn", n_heads), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = tt.gelu(linear(x, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"]))
    h = linear(h, p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])
    return _affine_norm(x + h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])


def _register_block(reg: _Params, prefix: str, M: int) -> None:
    for name in ("q", "k", "v", "o"):
        reg.weight(f"{prefix}.attn.w{name}", (M, M))
        reg.weight(f"{prefix}.attn.b{name}", (M,), "zeros")
    reg.const(f"{prefix}.ln1.g", (M,), 1.0)
    reg.const(f"{prefix}.ln1.b", (M,), 0.0)
    reg.weight(f"{prefix}.ff1.w", (M, 4 * M))
    reg.weight(f"{prefix}.ff1.b", (4 * M,), "zeros")
    reg.weight(f"{prefix}.ff2.w", (4 * M, M))
    reg.weight(f"{prefix}.ff2.b", (M,), "zeros")
    reg.const(f"{prefix}.ln2.g", (M,), 1.0)
    reg.const(f"{prefix}.ln2.b", (M,), 0.0)


# transformer models


class TransformerModel:
    """Encoder-only transformer with inverted or standard embedding."""

    def __init__(self, config: ModelConfig, n_vars: int, rng: np.random.Generator | None = None):
        if config.kind not in ATTENTION_KINDS:
            raise ConfigError(f"{config.kind} is not an attention model")
        self.config = config
        self.n_vars = n_vars
        self.inverted = config.kind.startswith("itransformer")
        W, M, N = config.W, config.M, n_vars
        reg = _Params(rng if rng is not None else tt.seeded_rng(config.seed))
        reg.weight("embed.w", (W, M) if self.inverted else (N, M))
        reg.weight("embed.b", (M,), "zeros")
        for layer in range(config.n_layers):
            _register_block(reg, f"enc{layer}", M)
        out = {"itransformer_reco": W, "itransformer_fc": 1, "transformer_reco": N}[config.kind]
        reg.weight("head.w", (M, out))
        reg.weight("head.b", (out,), "zeros")
        self.params = reg.params
        self._pe = None if self.inverted else positional_encoding(W, M)

    def embed(self, x) -> Tensor:
        """(B, W, N) -> tokens: (B, N, M) inverted, (B, W, M) standard."""
        x = tt.as_tensor(x)
        W, N = self.config.W, self.n_vars
        if x.ndim != 3 or x.shape[1:] != (W, N):
            raise tt.ShapeError("embed", x.shape, (-1, W, N))
        p = self.params
        if self.inverted:
            return linear(tt.transpose(x), p["embed.w"], p["embed.b"])
        return linear(x, p["embed.w"], p["embed.b"]) + self._pe

    def encode(self, tokens: Tensor) -> Tensor:
        for layer in range(self.config.n_layers):
            tokens = encoder_block(tokens, self.params, f"enc{layer}", self.config.n_heads)
        return tokens

    def forward(self, x) -> Tensor:
        out = linear(self.encode(self.embed(x)), self.params["head.w"], self.params["head.b"])
        return tt.transpose(out) if self.inverted else out

    def reconstruct(self, x) -> Tensor:
        if self.config.kind not in ("itransformer_reco", "transformer_reco"):
            raise ConfigError(f"reconstruct called on a {self.config.kind} model")
        return self.forward(x)

    def forecast(self, x) -> Tensor:
        """Prediction of the row right after each window, shape (B, 1, N)."""
        if self.config.kind != "itransformer_fc":
            raise ConfigError(f"forecast called on a {self.config.kind} model")
        return self.forward(x)


class USADModel:
    """Shared encoder and two decoders over flattened windows (W*N -> latent -> W*N)."""

    def __init__(self, config: ModelConfig, n_vars: int, rng: np.random.Generator | None = None):
        self.config = config
        self.n_vars = n_vars
        d = config.W * n_vars
        h = max(config.M, d // 2)
        reg = _Params(rng if rng is not None else tt.seeded_rng(config.seed))
        reg.weight("enc.w1", (d, h))
        reg.weight("enc.b1", (h,), "zeros")
        reg.weight("enc.w2", (h, config.M))
        reg.weight("enc.b2", (config.M,), "zeros")
        for k in (1, 2):
            reg.weight(f"dec{k}.w1", (config.M, h))
            reg.weight(f"dec{k}.b1", (h,), "zeros")
            reg.weight(f"dec{k}.w2", (h, d))
            reg.weight(f"dec{k}.b2", (d,), "zeros")
        self.params = reg.params

    def _flat(self, x) -> tuple[Tensor, tuple]:
        x = tt.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.config.W, self.n_vars):
            raise tt.ShapeError("usad", x.shape, (-1, self.config.W, self.n_vars))
        return x.reshape(x.shape[0], -1), x.shape

    def encode(self, flat: Tensor) -> Tensor:
        p = self.params
        return tt.relu(linear(tt.relu(linear(flat, p["enc.w1"], p["enc.b1"])), p["enc.w2"], p["enc.b2"]))

    def decode(self, z: Tensor, k: int) -> Tensor:
        p = self.params
        return linear(tt.relu(linear(z, p[f"dec{k}.w1"], p[f"dec{k}.b1"])), p[f"dec{k}.w2"], p[f"dec{k}.b2"])

    def outputs(self, x):
        """AE1(y), AE2(y), AE2(AE1(y)) in window layout."""
        flat, shape = self._flat(x)
        z = self.encode(flat)
        w1 = self.decode(z, 1)
        w2 = self.decode(z, 2)
        w3 = self.decode(self.encode(w1), 2)
        return w1.reshape(shape), w2.reshape(shape), w3.reshape(shape)

    def group(self, k: int) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n.startswith("enc.") or n.startswith(f"dec{k}.")}


def build_model(config: ModelConfig, n_vars: int, rng=None):
    if config.kind == "usad":
        return USADModel(config, n_vars, rng)
    if config.kind in ATTENTION_KINDS:
        return TransformerModel(config, n_vars, rng)
    raise ConfigError("the baseline has no trainable model")


@dataclass
class TrainedModel:
    config: ModelConfig
    model: TransformerModel | USADModel
    train_loss_curve: list[float] = field(default_factory=list)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.model.params.items()}

    @property
    def n_vars(self) -> int:
        return self.model.n_vars

    def predict(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Reconstruction (B, W, N) or forecast (B, 1, N), no tape."""
        outs = []
        with tt.no_grad():
            for i in range(0, len(x), batch):
                if self.config.kind == "usad":
                    raise ConfigError("use usad_score for USAD models")
                outs.append(self.model.forward(x[i : i + batch]).data)
        return np.concatenate(outs) if outs else np.zeros((0,) + x.shape[1:])


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, shuffle_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.PCG64(init_ss)), np.random.Generator(np.random.PCG64(shuffle_ss))


def training_pairs(config: ModelConfig, windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and targets: the window itself (reconstruction) or the next row (forecasting)."""
    X = windows.array()
    if config.kind != "itransformer_fc":
        return X, X
    T = windows.source.T
    keep = windows.starts + windows.W < T
    if not keep.any():
        raise TrainingError("series too short for a forecasting target after any window")
    X = X[keep]
    Y = windows.source.values[windows.starts[keep] + windows.W][:, None, :]
    return X, Y


def _check_windows(config: ModelConfig, windows: WindowSet) -> None:
    if windows.W != config.W:
        raise ConfigError(f"windows have W={windows.W}, config expects W={config.W}")


def train_model(config: ModelConfig, train_windows: WindowSet) -> TrainedModel:
    """Mini-batch Adam training; one entry per epoch in the loss curve."""
    if config.kind == "usad":
        return usad_train(config, train_windows)
    _check_windows(config, train_windows)
    init_rng, shuffle_rng = _rngs(config.seed)
    model = TransformerModel(config, train_windows.source.N, init_rng)
    opt = Adam(model.params, lr=config.lr)
    loss_fn = config.loss_spec
    X, Y = training_pairs(config, train_windows)
    curve: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(X))
        total = 0.0
        for b, i in enumerate(range(0, len(X), config.batch), start=1):
            idx = order[i : i + config.batch]
            loss = loss_fn(model.forward(X[idx]), Y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss in {config.tag()} at epoch {epoch}, batch {b}")
            tt.backward(loss)
            opt.step()
            opt.zero_grad()
            total += value * len(idx)
        curve.append(total / len(X))
        log.debug("%s epoch %d loss %.6g", config.tag(), epoch, curve[-1])
    return TrainedModel(config, model, curve)


def usad_train(config: ModelConfig, train_windows: WindowSet) -> TrainedModel:
    """Two-phase USAD training.

    Epochs ``1..E//2`` train both autoencoders on plain reconstruction. Later
    epochs ``e`` use the adversarial objectives
    ``L1 = 1/e*|y-AE1| + (1-1/e)*|y-AE2(AE1)|`` and
    ``L2 = 1/e*|y-AE2| - (1-1/e)*|y-AE2(AE1)|`` (squared errors).
    """
    if config.kind != "usad":
        raise ConfigError(f"usad_train called with kind {config.kind}")
    _check_windows(config, train_windows)
    init_rng, shuffle_rng = _rngs(config.seed)
    model = USADModel(config, train_windows.source.N, init_rng)
    opt1 = Adam(model.group(1), lr=config.lr)
    opt2 = Adam(model.group(2), lr=config.lr)
    X = train_windows.array()
    mse = LossSpec("mse")
    phase_one = config.epochs // 2
    curve: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(X))
        adversarial = epoch > phase_one
        w_rec, w_adv = (1.0 / epoch, 1.0 - 1.0 / epoch) if adversarial else (1.0, 0.0)
        total = 0.0
        for b, i in enumerate(range(0, len(X), config.batch), start=1):
            y = X[order[i : i + config.batch]]
            w1, _, w3 = model.outputs(y)
            loss1 = mse(w1, y) * w_rec + mse(w3, y) * w_adv if adversarial else mse(w1, y)
            tt.backward(loss1)
            opt1.step()
            tt.zero_grad(model.params)
            _, w2, w3 = model.outputs(y)
            loss2 = mse(w2, y) * w_rec - mse(w3, y) * w_adv if adversarial else mse(w2, y)
            tt.backward(loss2)
            opt2.step()
            tt.zero_grad(model.params)
            v1 = loss1.item()
            if not (math.isfinite(v1) and math.isfinite(loss2.item())):
                raise TrainingError(f"non-finite loss in {config.tag()} at epoch {epoch}, batch {b}")
            total += v1 * len(y)
        curve.append(total / len(X))
    return TrainedModel(config, model, curve)


def usad_score(trained: TrainedModel, window: np.ndarray, alpha: float = 0.5, beta: float = 0.5) -> np.ndarray:
    """Element-wise ``alpha*|y-AE1(y)| + beta*|y-AE2(AE1(y))|``.

    Accepts a single (W, N) window or a (B, W, N) batch.
    """
    if alpha < 0 or beta < 0 or not math.isclose(alpha + beta, 1.0, abs_tol=1e-12):
        raise ValueError(f"alpha and beta must be non-negative and sum to 1 (got {alpha}, {beta})")
    y = np.asarray(window, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    with tt.no_grad():
        w1, _, w3 = trained.model.outputs(y)
    score = alpha * np.abs(y - w1.data) + beta * np.abs(y - w3.data)
    return score[0] if single else score


# checkpoints


def save_checkpoint(trained: TrainedModel, path) -> Path:
    path = Path(path)
    meta = {"config": trained.config.to_dict(), "n_vars": trained.n_vars, "curve": trained.train_loss_curve}
    arrays = {f"param:{n}": a for n, a in trained.parameters.items()}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> TrainedModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        config = ModelConfig.from_dict(meta["config"])
        model = build_model(config, meta["n_vars"])
        for name, t in model.params.items():
            key = f"param:{name}"
            if key not in z:
                raise ValueError(f"checkpoint {path} is missing parameter {name}")
            t.data = np.array(z[key], dtype=np.float64)
    return TrainedModel(config, model, list(meta["curve"]))


def with_seed(config: ModelConfig, seed: int) -> ModelConfig:
    return replace(config, seed=seed)
