"""Differentiable operators and SGD written directly against numpy.

Each operator comes as a ``*_forward`` returning ``(out, cache)`` and a
``*_backward`` taking the upstream gradient and that cache. Tensors are
float32 numpy arrays in NCHW layout; batch statistics accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# Below this magnitude gradient checks compare absolute error. A float32 central
# difference at eps 1e-3 carries noise near ulp(loss) / eps, a few 1e-4 for
# unit-scale losses, so smaller gradients cannot be resolved relatively.
GRAD_FLOOR = 0.1


# --- convolution ---------------------------------------------------------------
#
# Operators accept ``layout="NCHW"`` (the public contract) or ``layout="CNHW"``
# (channel-major, used inside the network so each conv is a single GEMM and
# batch statistics reduce over contiguous rows).


def _to_cm(x, layout):
    if layout == "NCHW":
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    if layout == "CNHW":
        return x
    raise ValueError(f"unknown layout {layout!r}")


def _from_cm(x, layout):
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)) if layout == "NCHW" else x


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Channel-major (C, N, H, W) -> (C*K*K, N*H*W) patches of the zero-padded input."""
    c, n, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, k, k, n, h, w), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * k * k, n * h * w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, layout: str = "NCHW"):
    """Stride-1 'same' convolution. x: (N, C, H, W), w: (O, C, K, K), b: (O,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    xc = _to_cm(np.asarray(x, dtype=np.float32), layout)
    c, n, h, wd = xc.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd-sized, got {k}x{k2}")
    if b.shape != (o,):
        raise ValueError(f"bias shape {b.shape} does not match {o} output channels")
    cols = _im2col(xc, k)
    y = w.reshape(o, c * k * k) @ cols
    y += b[:, None]
    return _from_cm(y.reshape(o, n, h, wd), layout), (cols, xc.shape, w, layout)


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    """Gradients (dx, dw, db). With ``need_dx=False`` dx is None (first layer)."""
    cols, x_shape, w, layout = cache
    c, n, h, wd = x_shape
    o, _, k, _ = w.shape
    dyc = _to_cm(np.asarray(dy, dtype=np.float32), layout)
    if dyc.shape != (o, n, h, wd):
        raise ValueError(f"upstream gradient shape {dy.shape} does not match the forward output")
    dy2 = dyc.reshape(o, n * h * wd)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1, dtype=np.float64).astype(np.float32)
    if not need_dx:
        return None, dw, db
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx = (w_flip.reshape(c, o * k * k) @ _im2col(dyc, k)).reshape(x_shape)
    return _from_cm(dx, layout), dw, db


# --- pooling -------------------------------------------------------------------


def maxpool2_forward(x: np.ndarray):
    """2x2 / stride 2 max pooling over the last two axes.

    Ties resolve to the first maximal element in row-major order: columns are
    compared within each row (left wins ties), then rows (top wins ties).
    """
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    left, right = x[..., 0::2], x[..., 1::2]
    right_wins = right > left
    cols = np.maximum(left, right).reshape(*lead, h // 2, 2, w // 2)
    top, bottom = cols[..., 0, :], cols[..., 1, :]
    bottom_wins = bottom > top
    y = np.maximum(top, bottom)
    return y, (right_wins, bottom_wins, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    right_wins, bottom_wins, shape = cache
    *lead, h, w = shape
    rows = np.empty((*lead, h // 2, 2, w // 2), dtype=np.float32)
    np.multiply(dy, ~bottom_wins, out=rows[..., 0, :])
    np.multiply(dy, bottom_wins, out=rows[..., 1, :])
    rows = rows.reshape(*lead, h, w // 2)
    dx = np.empty(shape, dtype=np.float32)
    np.multiply(rows, ~right_wins, out=dx[..., 0::2])
    np.multiply(rows, right_wins, out=dx[..., 1::2])
    return dx


# --- batch normalization ---------------------------------------------------------


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            momentum=momentum,
            eps=eps,
        )


def _rows(x: np.ndarray, layout: str) -> np.ndarray:
    """View/copy the input as (C, count) with one row per channel."""
    if x.ndim == 2:
        return np.ascontiguousarray(x.T)
    return _to_cm(x, layout).reshape(x.shape[1] if layout == "NCHW" else x.shape[0], -1)


def _unrows(r: np.ndarray, like_shape, layout: str) -> np.ndarray:
    if len(like_shape) == 2:
        return np.ascontiguousarray(r.T)
    if layout == "NCHW":
        n, c, h, w = like_shape
        return np.ascontiguousarray(r.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    return r.reshape(like_shape)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str, layout: str = "NCHW"):
    """Per-channel normalization of (N, C) or 4-D input.

    ``mode='train'`` normalizes with batch statistics and updates the running
    statistics in place: running <- (1 - m) * running + m * batch.
    """
    r = _rows(np.asarray(x, dtype=np.float32), layout)
    batch = x.shape[0] if (x.ndim == 2 or layout == "NCHW") else x.shape[1]
    if mode == "train":
        if batch < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        count = r.shape[1]
        mean = r.sum(axis=1, dtype=np.float64) / count
        xc = r - mean.astype(np.float32)[:, None]
        var = np.einsum("ij,ij->i", xc, xc, dtype=np.float64) / count
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    elif mode == "infer":
        var = state.running_var.astype(np.float64)
        xc = r - state.running_mean[:, None]
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv_std.astype(np.float32)[:, None]
    y = xhat * state.gamma[:, None] + state.beta[:, None]
    return _unrows(y, x.shape, layout), (xhat, inv_std, state.gamma, mode, x.shape, layout)


def batchnorm_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma, mode, shape, layout = cache
    d = _rows(np.asarray(dy, dtype=np.float32), layout)
    dgamma = np.einsum("ij,ij->i", d, xhat, dtype=np.float64)
    dbeta = d.sum(axis=1, dtype=np.float64)
    scale = (gamma.astype(np.float64) * inv_std).astype(np.float32)[:, None]
    if mode == "infer":
        dx = d * scale
    else:
        count = d.shape[1]
        dx = scale * (d - (dbeta / count).astype(np.float32)[:, None]
                      - xhat * (dgamma / count).astype(np.float32)[:, None])
    return _unrows(dx, shape, layout), dgamma.astype(np.float32), dbeta.astype(np.float32)


# --- dense and pointwise ---------------------------------------------------------


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (N, I), w: (I, O), b: (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return (x @ w + b).astype(np.float32), (x, w)


def dense_backward(dy: np.ndarray, cache):
    x, w = cache
    return (dy @ w.T).astype(np.float32), (x.T @ dy).astype(np.float32), dy.sum(axis=0, dtype=np.float64).astype(np.float32)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask):
    return dy * mask


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dp, p):
    return dp * p * (1.0 - p)


def abs_diff_forward(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"abs_diff shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return np.abs(d), np.sign(d)


def abs_diff_backward(dy, sign):
    """Gradient for both operands; at a == b the subgradient 0 is used."""
    g = dy * sign
    return g, -g


def bce_loss(p, y, clamp: float = PROB_CLAMP):
    """Mean binary cross-entropy -[y log p + (1-y) log(1-p)] and its gradient w.r.t. p."""
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"bce shape mismatch: {p.shape} vs {y.shape}")
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dp = (p - y) / (p * (1.0 - p)) / p.size
    return float(loss.mean()), dp


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy over rows of ``logits`` and d(loss)/d(logits)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), (d / n).astype(np.float32)


# --- optimizer -------------------------------------------------------------------


@dataclass
class SgdState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: SgdState) -> dict[str, np.ndarray]:
    """v <- mu*v - lr*(g + wd*theta); theta <- theta + v. Updates ``params`` in place."""
    lr, mu, wd = np.float32(state.learning_rate), np.float32(state.momentum), np.float32(state.weight_decay)
    for name, g in grads.items():
        theta = params[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        v *= mu
        v -= lr * (g + wd * theta)
        theta += v
    return params


# --- verification ----------------------------------------------------------------


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[dict], float], inputs: dict[str, np.ndarray], name: str, eps: float = 1e-3,
                 indices=None, pattern: Callable[[dict], bytes] | None = None):
    """Central differences of ``fn`` w.r.t. ``inputs[name]``.

    Entries outside ``indices`` stay zero. With ``pattern`` (a function giving
    the discrete activation state, e.g. ReLU masks), entries whose perturbation
    changes that state are set to NaN: the difference straddles a kink there.
    """
    x = inputs[name]
    grad = np.zeros(x.shape, dtype=np.float64)
    base = pattern(inputs) if pattern is not None else None
    for i in range(x.size) if indices is None else indices:
        orig = x.flat[i]
        hi = np.float32(orig + eps)
        lo = np.float32(orig - eps)
        x.flat[i] = hi
        plus = fn(inputs)
        kink = pattern is not None and pattern(inputs) != base
        x.flat[i] = lo
        minus = fn(inputs)
        kink = kink or (pattern is not None and pattern(inputs) != base)
        x.flat[i] = orig
        # divide by the step actually representable in float32
        grad.flat[i] = np.nan if kink else (plus - minus) / (float(hi) - float(lo))
    return grad


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int


def grad_check(fn: Callable[[dict], tuple[float, dict]], inputs: dict[str, np.ndarray], eps: float = 1e-3,
               floor: float = GRAD_FLOOR, coords: int | None = None, seed: int = 0,
               pattern: Callable[[dict], bytes] | None = None) -> GradCheckResult:
    """Compare analytic gradients from ``fn`` with central differences.

    ``fn(inputs) -> (scalar loss, {name: grad})``; every named gradient is
    checked. ``coords`` limits each tensor to a seeded sample of that many
    entries; ``pattern`` excludes kink-straddling entries (see
    :func:`numeric_grad`), which are counted in ``skipped``.
    """
    inputs = {k: np.array(v, dtype=np.float32) for k, v in inputs.items()}
    _, analytic = fn(inputs)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name in sorted(analytic):
        size = inputs[name].size
        idx = np.arange(size)
        if coords is not None and size > coords:
            idx = np.sort(rng.choice(size, size=coords, replace=False))
        num = numeric_grad(lambda d: fn(d)[0], inputs, name, eps, idx, pattern).reshape(-1)[idx]
        a = analytic[name].reshape(-1)[idx]
        smooth = ~np.isnan(num)
        checked += int(smooth.sum())
        skipped += int((~smooth).sum())
        worst = max(worst, relative_error(a[smooth], num[smooth], floor))
    return GradCheckResult(worst, checked, skipped)
