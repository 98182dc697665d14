"""Seeded finite-difference gradient suites for the network operations.

Each suite runs one op on five seeded shapes in float32 and reports the worst
relative error between analytic and central-difference gradients. Layer ops
are reduced to a scalar through a fixed random projection of their output.

The full pair loss is piecewise smooth (ReLU, max pooling, absolute value).
Coordinates whose +-eps perturbation flips any of those switches are skipped,
since a central difference across a kink does not estimate the derivative;
the skipped count is reported with each result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nnkernel as nk
from .siamese import ArchitectureSpec, build_model, embed, pair_loss

THRESHOLD = 1e-2
EPS = 1e-3
SEEDS = (0, 1, 2, 3, 4)

# Same seven-conv topology as the default network at 2 channels on 16x16 inputs,
# small enough to difference every parameter.
SMALL_ARCH = "2x3,pool,2x3,pool,2x3,pool,2x3,2x3,pool,2x3,2x3"
SMALL_INPUT = 16


@dataclass(frozen=True)
class SuiteResult:
    name: str
    results: tuple[nk.GradCheckResult, ...]

    @property
    def errors(self) -> tuple[float, ...]:
        return tuple(r.max_error for r in self.results)

    @property
    def max_error(self) -> float:
        return max(self.errors)

    @property
    def skipped(self) -> int:
        return sum(r.skipped for r in self.results)

    @property
    def checked(self) -> int:
        return sum(r.checked for r in self.results)

    def passed(self, threshold: float = THRESHOLD) -> bool:
        return self.max_error <= threshold


def _project(out: np.ndarray, r: np.ndarray) -> float:
    return float((out.astype(np.float64) * r).sum())


def conv2d_case(seed: int) -> nk.GradCheckResult:
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 6, size=2)
    k = int(rng.choice([1, 3]))
    inputs = {
        "x": rng.standard_normal((n, c, h, w)),
        "w": rng.standard_normal((o, c, k, k)),
        "b": rng.standard_normal(o),
    }
    r = rng.standard_normal((n, o, h, w))

    def fn(d):
        y, cache = nk.conv2d_forward(d["x"], d["w"], d["b"])
        dx, dw, db = nk.conv2d_backward(r.astype(np.float32), cache)
        return _project(y, r), {"x": dx, "w": dw, "b": db}

    return nk.grad_check(fn, inputs, EPS, seed=seed)


def dense_case(seed: int) -> nk.GradCheckResult:
    rng = np.random.default_rng(seed)
    n, i, o = rng.integers(1, 6), rng.integers(1, 9), rng.integers(1, 9)
    inputs = {"x": rng.standard_normal((n, i)), "w": rng.standard_normal((i, o)), "b": rng.standard_normal(o)}
    r = rng.standard_normal((n, o))

    def fn(d):
        y, cache = nk.dense_forward(d["x"], d["w"], d["b"])
        dx, dw, db = nk.dense_backward(r.astype(np.float32), cache)
        return _project(y, r), {"x": dx, "w": dw, "b": db}

    return nk.grad_check(fn, inputs, EPS, seed=seed)


def batchnorm_case(seed: int) -> nk.GradCheckResult:
    rng = np.random.default_rng(seed)
    n, c = rng.integers(2, 5), rng.integers(1, 4)
    h, w = rng.integers(1, 4, size=2)
    inputs = {
        "x": rng.standard_normal((n, c, h, w)) * 2 + 1,
        "gamma": rng.uniform(0.5, 1.5, c),
        "beta": rng.standard_normal(c),
    }
    r = rng.standard_normal((n, c, h, w))

    def fn(d):
        state = nk.BatchNormState.fresh(c)
        state.gamma, state.beta = d["gamma"], d["beta"]
        y, cache = nk.batchnorm_forward(d["x"], state, "train")
        dx, dgamma, dbeta = nk.batchnorm_backward(r.astype(np.float32), cache)
        return _project(y, r), {"x": dx, "gamma": dgamma, "beta": dbeta}

    return nk.grad_check(fn, inputs, EPS, seed=seed)


def sigmoid_bce_case(seed: int) -> nk.GradCheckResult:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    inputs = {"z": rng.standard_normal(n) * 3}
    y = rng.integers(0, 2, n).astype(np.float64)

    def fn(d):
        p = nk.sigmoid(d["z"])
        loss, dp = nk.bce_loss(p, y)
        return loss, {"z": nk.sigmoid_backward(dp, p)}

    return nk.grad_check(fn, inputs, EPS, seed=seed)


def pair_loss_case(seed: int) -> nk.GradCheckResult:
    rng = np.random.default_rng(seed)
    spec = ArchitectureSpec.parse(SMALL_ARCH, input_size=SMALL_INPUT)
    params = build_model(spec, seed)
    # a nonzero head so every layer receives gradient
    params["head.w"] = (rng.standard_normal(spec.embed_dim) * 0.1).astype(np.float32)
    params["head.b"] = np.array(rng.standard_normal(), dtype=np.float32)
    m = int(rng.integers(3, 6))
    images = rng.uniform(0, 1, (m, SMALL_INPUT, SMALL_INPUT)).astype(np.float32)
    pairs = int(rng.integers(2, 6))
    left = rng.integers(0, m, pairs)
    right = (left + rng.integers(1, m, pairs)) % m
    labels = rng.integers(0, 2, pairs)
    names = [k for k in params if not k.endswith((".running_mean", ".running_var"))]

    def merged(d):
        full = dict(params)
        full.update(d)
        # batch norm updates running stats in place; keep the originals fixed across calls
        for k in params:
            if k.endswith((".running_mean", ".running_var")):
                full[k] = params[k].copy()
        return full

    def fn(d):
        loss, grads = pair_loss(merged(d), spec, images, left, right, labels)
        return loss, {k: grads[k] for k in names}

    def pattern(d):
        feats, (caches, *_) = embed(merged(d), images, "train", spec, keep_cache=True)
        switches = [feats[left] > feats[right]]
        for entry in caches:
            switches.extend(entry[1][:2] if entry[0] == "pool" else [entry[4]])
        return b"".join(np.packbits(np.asarray(m, dtype=bool)).tobytes() for m in switches)

    return nk.grad_check(fn, {k: params[k] for k in names}, EPS, seed=seed, pattern=pattern)


SUITES: dict[str, Callable[[int], nk.GradCheckResult]] = {
    "conv2d": conv2d_case,
    "dense": dense_case,
    "batchnorm": batchnorm_case,
    "sigmoid_bce": sigmoid_bce_case,
    "pair_loss": pair_loss_case,
}


def run_suite(name: str, seeds=SEEDS) -> SuiteResult:
    return SuiteResult(name, tuple(SUITES[name](s) for s in seeds))


def run_all(seeds=SEEDS) -> list[SuiteResult]:
    return [run_suite(name, seeds) for name in SUITES]
