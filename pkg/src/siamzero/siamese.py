"""Twin embedding network, L1 similarity head, and the pair training step.

There is one parameter set. "Both branches" of the siamese pair are the same
function applied to two inputs, so weight sharing holds by construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import nnkernel as nk

DEFAULT_ARCH = "32x3,pool,32x3,pool,64x3,pool,64x3,128x3,pool,128x3,128x3"
N_CONV = 7
EMBED_DIM = 128
INPUT_SIZE = 64
BUFFER_SUFFIXES = (".running_mean", ".running_var")

_CONV_TOKEN = re.compile(r"^(\d+)x(\d+)$")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered conv/pool layers followed by one dense layer of ``embed_dim`` units.

    ``layers`` holds ``(out_channels, kernel)`` tuples for convolutions and the
    string ``"pool"`` for 2x2 max pooling. Every conv is followed by batch norm
    and ReLU.
    """

    layers: tuple = ()
    embed_dim: int = EMBED_DIM
    input_size: int = INPUT_SIZE
    final_activation: str = "none"
    bn_momentum: float = nk.BN_MOMENTUM
    bn_eps: float = nk.BN_EPS

    def __post_init__(self):
        if not self.layers:
            object.__setattr__(self, "layers", parse_layers(DEFAULT_ARCH))
        self.validate()

    @classmethod
    def parse(cls, text: str, **kwargs) -> "ArchitectureSpec":
        return cls(layers=parse_layers(text), **kwargs)

    def validate(self) -> None:
        convs = [layer for layer in self.layers if layer != "pool"]
        if len(convs) != N_CONV:
            raise ArchitectureError(f"architecture needs exactly {N_CONV} conv layers, got {len(convs)}")
        if self.embed_dim != EMBED_DIM:
            raise ArchitectureError(f"dense layer must have {EMBED_DIM} units, got {self.embed_dim}")
        for out, k in convs:
            if out < 1 or k < 1 or k % 2 == 0:
                raise ArchitectureError(f"bad conv layer {out}x{k}: channels >= 1 and odd kernel required")
        size = self.input_size
        for layer in self.layers:
            if layer == "pool":
                if size % 2:
                    raise ArchitectureError(f"pooling a {size}x{size} map needs an even size")
                size //= 2
        if size < 1:
            raise ArchitectureError("pooling collapses the spatial size to zero")
        if self.final_activation not in ("none", "relu"):
            raise ArchitectureError(f"final_activation must be 'none' or 'relu', got {self.final_activation!r}")

    @property
    def final_size(self) -> int:
        return self.input_size >> sum(1 for layer in self.layers if layer == "pool")

    def to_string(self) -> str:
        return ",".join("pool" if layer == "pool" else f"{layer[0]}x{layer[1]}" for layer in self.layers)

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        in_ch = 1
        i = 0
        for layer in self.layers:
            if layer == "pool":
                continue
            out, k = layer
            shapes[f"conv{i}.w"] = (out, in_ch, k, k)
            shapes[f"conv{i}.b"] = (out,)
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"bn{i}.{suffix}"] = (out,)
            in_ch = out
            i += 1
        shapes["fc.w"] = (in_ch * self.final_size**2, self.embed_dim)
        shapes["fc.b"] = (self.embed_dim,)
        shapes["head.w"] = (self.embed_dim,)
        shapes["head.b"] = ()
        return shapes


def parse_layers(text: str) -> tuple:
    """Parse ``[conv=]32x3,pool,64x3,...`` into a layer tuple."""
    body = text.strip()
    if body.startswith("conv="):
        body = body[len("conv=") :]
    layers = []
    for token in body.split(","):
        token = token.strip()
        if token == "pool":
            layers.append("pool")
            continue
        m = _CONV_TOKEN.match(token)
        if not m:
            raise ArchitectureError(f"cannot parse architecture token {token!r}")
        layers.append((int(m.group(1)), int(m.group(2))))
    return tuple(layers)


@dataclass(frozen=True)
class SimilarityHead:
    w: np.ndarray
    b: float

    @classmethod
    def from_params(cls, params) -> "SimilarityHead":
        return cls(np.asarray(params["head.w"], dtype=np.float32), float(params["head.b"]))


def is_trainable(name: str) -> bool:
    return not name.endswith(BUFFER_SUFFIXES)


def build_model(spec: ArchitectureSpec, seed: int) -> dict[str, np.ndarray]:
    """He-initialized conv/dense weights, identity batch norm, zero similarity head."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".w") and len(shape) > 1:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return params


def _bn_state(params, i, spec):
    return nk.BatchNormState(
        gamma=params[f"bn{i}.gamma"],
        beta=params[f"bn{i}.beta"],
        running_mean=params[f"bn{i}.running_mean"],
        running_var=params[f"bn{i}.running_var"],
        momentum=spec.bn_momentum,
        eps=spec.bn_eps,
    )


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return x


def embed(params, images, mode: str, spec: ArchitectureSpec | None = None, keep_cache: bool = False):
    """Map a batch of 64x64 images to (N, 128) features.

    In ``train`` mode batch norm uses batch statistics and updates its running
    averages inside ``params``; ``infer`` mode is read-only. With
    ``keep_cache=True`` returns ``(features, cache)`` for :func:`embed_backward`.
    """
    spec = spec or ArchitectureSpec()
    x = _as_batch(images)
    if x.shape[1:] != (1, spec.input_size, spec.input_size):
        raise ValueError(f"expected inputs of shape (N, {spec.input_size}, {spec.input_size}), got {x.shape}")
    x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))  # channel-major inside the network
    caches = []
    i = 0
    for layer in spec.layers:
        if layer == "pool":
            x, c = nk.maxpool2_forward(x)
            caches.append(("pool", c))
            continue
        x, c_conv = nk.conv2d_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"], layout="CNHW")
        x, c_bn = nk.batchnorm_forward(x, _bn_state(params, i, spec), mode, layout="CNHW")
        x, c_relu = nk.relu_forward(x)
        caches.append(("conv", i, c_conv, c_bn, c_relu))
        i += 1
    cm_shape = x.shape
    x = x.transpose(1, 0, 2, 3).reshape(cm_shape[1], -1)
    feats, c_fc = nk.dense_forward(x, params["fc.w"], params["fc.b"])
    c_act = None
    if spec.final_activation == "relu":
        feats, c_act = nk.relu_forward(feats)
    if keep_cache:
        return feats, (caches, cm_shape, c_fc, c_act)
    return feats


def embed_backward(dfeats: np.ndarray, cache) -> dict[str, np.ndarray]:
    caches, cm_shape, c_fc, c_act = cache
    grads = {}
    if c_act is not None:
        dfeats = nk.relu_backward(dfeats, c_act)
    dx, grads["fc.w"], grads["fc.b"] = nk.dense_backward(dfeats.astype(np.float32), c_fc)
    c, n, h, w = cm_shape
    dx = np.ascontiguousarray(dx.reshape(n, c, h, w).transpose(1, 0, 2, 3))
    for entry in reversed(caches):
        if entry[0] == "pool":
            dx = nk.maxpool2_backward(dx, entry[1])
            continue
        _, i, c_conv, c_bn, c_relu = entry
        dx = nk.relu_backward(dx, c_relu)
        dx, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = nk.batchnorm_backward(dx, c_bn)
        dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = nk.conv2d_backward(dx, c_conv, need_dx=i > 0)
    return grads


def pair_logits(f: np.ndarray, F: np.ndarray, head: SimilarityHead) -> np.ndarray:
    """w . |f - F_row| + b for each row of ``F``, accumulated in float64.

    Each row reduces independently, so scoring one row alone gives the same
    bits as scoring it inside a larger matrix.
    """
    d = np.abs(np.asarray(f, dtype=np.float32) - np.asarray(F, dtype=np.float32))
    return (d.astype(np.float64) * head.w.astype(np.float64)).sum(axis=-1) + np.float64(head.b)


def similarity(f1: np.ndarray, f2: np.ndarray, head: SimilarityHead) -> float:
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    if f1.shape != f2.shape or f1.shape != head.w.shape:
        raise ValueError(f"similarity needs matching {head.w.shape} vectors, got {f1.shape} and {f2.shape}")
    p = float(nk.sigmoid(pair_logits(f1, f2, head)))
    return min(max(p, nk.PROB_CLAMP), 1.0 - nk.PROB_CLAMP)


def pair_loss(params, spec: ArchitectureSpec, images, left, right, labels, clamp: float = nk.PROB_CLAMP):
    """Mean corrected BCE over pairs (images[left[k]], images[right[k]], labels[k]).

    ``images`` holds each distinct image once; batch norm runs in train mode
    over that set. Returns ``(loss, grads)`` for every trainable parameter.
    """
    left = np.asarray(left)
    right = np.asarray(right)
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty pair batch")
    feats, cache = embed(params, images, "train", spec, keep_cache=True)
    head = SimilarityHead.from_params(params)
    dist, sign = nk.abs_diff_forward(feats[left], feats[right])
    logits = (dist.astype(np.float64) * head.w.astype(np.float64)).sum(axis=1) + head.b
    p = nk.sigmoid(logits)
    loss, dp = nk.bce_loss(p, y, clamp)
    dlogit = nk.sigmoid_backward(dp, p)
    grads = {
        "head.w": (dlogit @ dist.astype(np.float64)).astype(np.float32),
        "head.b": np.float32(dlogit.sum()).reshape(()),
    }
    ddist = (dlogit[:, None] * head.w[None, :]).astype(np.float32)
    dl, dr = nk.abs_diff_backward(ddist, sign)
    dfeats = np.zeros_like(feats)
    np.add.at(dfeats, left, dl)
    np.add.at(dfeats, right, dr)
    grads.update(embed_backward(dfeats, cache))
    return loss, grads


def train_step(params, spec: ArchitectureSpec, templates, samples, labels, sgd: nk.SgdState,
               clamp: float = nk.PROB_CLAMP) -> float:
    """One SGD step on a batch of (template, sample, label) pairs; returns the batch loss."""
    templates = _as_batch(templates)
    samples = _as_batch(samples)
    b = len(labels)
    if b == 0:
        raise ValueError("empty pair batch")
    images = np.concatenate([templates, samples])
    return train_step_indexed(params, spec, images, np.arange(b), b + np.arange(b), labels, sgd, clamp)


def project_head(params) -> None:
    """Clip head weights to <= 0 so the logit never increases with feature distance."""
    np.minimum(params["head.w"], 0.0, out=params["head.w"])


def train_step_indexed(params, spec, images, left, right, labels, sgd: nk.SgdState,
                       clamp: float = nk.PROB_CLAMP, nonpositive_head: bool = True) -> float:
    loss, grads = pair_loss(params, spec, images, left, right, labels, clamp)
    nk.sgd_step(params, grads, sgd)
    if nonpositive_head:
        project_head(params)
    return loss
