"""Training objectives (MSE, Huber, Soft-DTW) and the element-wise scoring error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, custom_op, mean, square, sub

LOSS_KINDS = ("mse", "huber", "softdtw")


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def mse(y_hat, y) -> Tensor:
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    _check_same("mse", y_hat, y)
    return mean(square(sub(y_hat, y)))


def mse_elementwise(y_hat, y) -> np.ndarray:
    """Squared residual per cell; this is the anomaly score at test time."""
    a = y_hat.data if isinstance(y_hat, Tensor) else np.asarray(y_hat, dtype=float)
    b = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=float)
    if a.shape != b.shape:
        raise ShapeError("mse_elementwise", a.shape, b.shape)
    r = a - b
    return r * r


def huber_elementwise(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber(y_hat, y, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: quadratic for |r| < delta, linear beyond."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    _check_same("huber", y_hat, y)
    r = y_hat.data - y.data
    n = r.size
    value = huber_elementwise(r, delta).sum() / n

    def bw(g):
        dr = np.where(np.abs(r) < delta, r, delta * np.sign(r)) * (g / n)
        return dr, -dr

    return custom_op((y_hat, y), value, bw)


# soft dynamic time warping


def _pairwise_sqdist(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # (B, n, d), (B, m, d) -> (B, n, m)
    diff = x[:, :, None, :] - y[:, None, :, :]
    return np.einsum("bijk,bijk->bij", diff, diff)


def _softmin3(a: np.ndarray, b: np.ndarray, c: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 0:
        return np.minimum(np.minimum(a, b), c)
    z = np.stack([a, b, c]) / -gamma
    zmax = z.max(axis=0)
    return -gamma * (zmax + np.log(np.exp(z - zmax).sum(axis=0)))


def _diagonals(n: int, m: int):
    # cell indices (1-based into the padded DP table) grouped by i + j
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        yield i, k - i


def _sdtw_forward(D: np.ndarray, gamma: float) -> np.ndarray:
    B, n, m = D.shape
    R = np.full((B, n + 2, m + 2), np.inf)
    R[:, 0, 0] = 0.0
    for i, j in _diagonals(n, m):
        R[:, i, j] = D[:, i - 1, j - 1] + _softmin3(R[:, i - 1, j - 1], R[:, i - 1, j], R[:, i, j - 1], gamma)
    return R


def _sdtw_backward(D: np.ndarray, R: np.ndarray, gamma: float) -> np.ndarray:
    """Expected alignment matrix E = d r(n, m) / d D."""
    B, n, m = D.shape
    Dp = np.zeros((B, n + 2, m + 2))
    Dp[:, 1 : n + 1, 1 : m + 1] = D
    R = R.copy()
    R[:, :, m + 1] = -np.inf
    R[:, n + 1, :] = -np.inf
    R[:, n + 1, m + 1] = R[:, n, m]
    E = np.zeros((B, n + 2, m + 2))
    E[:, n + 1, m + 1] = 1.0
    for i, j in reversed(list(_diagonals(n, m))):
        rij = R[:, i, j]
        a = np.exp((R[:, i + 1, j] - rij - Dp[:, i + 1, j]) / gamma)
        b = np.exp((R[:, i, j + 1] - rij - Dp[:, i, j + 1]) / gamma)
        c = np.exp((R[:, i + 1, j + 1] - rij - Dp[:, i + 1, j + 1]) / gamma)
        E[:, i, j] = E[:, i + 1, j] * a + E[:, i, j + 1] * b + E[:, i + 1, j + 1] * c
    return E[:, 1 : n + 1, 1 : m + 1]


def softdtw_batch(x, y, gamma: float = 1.0) -> Tensor:
    """Soft-DTW value per batch element, shape (B,).

    ``x`` is (B, n, d), ``y`` is (B, m, d); the ground cost is the squared
    Euclidean distance between time steps. ``gamma == 0`` gives hard DTW
    (value only, no gradient).
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise ShapeError("softdtw", x.shape, y.shape)
    if x.shape[1] == 0 or y.shape[1] == 0:
        raise ValueError("softdtw: empty sequence")
    if gamma < 0:
        raise ValueError("softdtw: gamma must be positive")
    n, m = x.shape[1], y.shape[1]
    D = _pairwise_sqdist(x.data, y.data)
    R = _sdtw_forward(D, gamma)
    value = R[:, n, m].copy()

    def bw(g):
        if gamma == 0:
            raise ValueError("softdtw: hard DTW (gamma=0) is not differentiable")
        E = _sdtw_backward(D, R, gamma) * g[:, None, None]
        gx = 2.0 * (E.sum(axis=2)[:, :, None] * x.data - E @ y.data)
        gy = 2.0 * (E.sum(axis=1)[:, :, None] * y.data - np.swapaxes(E, 1, 2) @ x.data)
        return gx, gy

    return custom_op((x, y), value, bw)


def softdtw(x, y, gamma: float = 1.0) -> Tensor:
    """Soft-DTW between two sequences of vectors, shapes (n, d) and (m, d)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    return softdtw_batch(x.reshape(1, *x.shape), y.reshape(1, *y.shape), gamma).reshape(())


def dtw(x, y) -> float:
    """Hard DTW with squared-Euclidean cost."""
    return float(softdtw(x, y, gamma=0.0).data)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    delta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.delta <= 0 or self.gamma <= 0:
            raise ValueError("loss parameters delta and gamma must be positive")

    def __call__(self, y_hat, y) -> Tensor:
        """Batch loss for (B, W, N) predictions against targets."""
        if self.kind == "mse":
            return mse(y_hat, y)
        if self.kind == "huber":
            return huber(y_hat, y, self.delta)
        y_hat, y = as_tensor(y_hat), as_tensor(y)
        _check_same("softdtw", y_hat, y)
        # per-window value normalised by window length, averaged over the batch
        return mean(softdtw_batch(y, y_hat, self.gamma)) * (1.0 / y.shape[1])
