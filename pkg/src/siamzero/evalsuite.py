"""Seen/unseen split protocol, training loop with a plateau schedule, and evaluation.

Accuracy columns follow the "A|B" convention: classify samples of dataset A
with the candidate label space restricted to character set B.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnkernel as nk
from .dataio import GrayImage, load_manifest, load_pgm, load_szim
from .matcher import TemplateMatrix, build_template_matrix, classify, classify_restricted
from .pairs import PairList, generate_pairs, reshuffle
from .prep import preprocess
from .siamese import ArchitectureSpec, SimilarityHead, embed, embed_backward, train_step_indexed

log = logging.getLogger(__name__)

COLUMNS = ("Ds|Cs", "Ds|C", "Du|Cu", "Du|C", "D|C")


# --- data containers -------------------------------------------------------------


@dataclass
class GlyphData:
    """Preprocessed samples: (N, 64, 64) float32 images with labels and source paths."""

    images: np.ndarray
    labels: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.paths:
            self.paths = [f"#{k}" for k in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "GlyphData":
        idx = np.asarray(idx, dtype=np.intp)
        return GlyphData(self.images[idx], self.labels[idx], [self.paths[k] for k in idx])

    def of_classes(self, classes) -> "GlyphData":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)}


@dataclass
class TemplateSet:
    images: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

    def image_of(self, class_id: int) -> np.ndarray:
        return self.images[int(np.flatnonzero(self.class_ids == class_id)[0])]

    def of_classes(self, classes) -> "TemplateSet":
        mask = np.isin(self.class_ids, list(classes))
        return TemplateSet(self.images[mask], self.class_ids[mask])


def _load_image(path: Path, threshold: int) -> np.ndarray:
    if path.suffix == ".szim":
        return load_szim(path)
    return preprocess(load_pgm(path), threshold)


def load_glyphs(manifest_path, threshold: int = 0) -> GlyphData:
    manifest = load_manifest(manifest_path)
    images = [_load_image(manifest.resolve(rel), threshold) for rel, _ in manifest.entries]
    return GlyphData(np.stack(images), [c for _, c in manifest.entries], [rel for rel, _ in manifest.entries])


def load_templates(manifest_path, threshold: int = 0) -> TemplateSet:
    data = load_glyphs(manifest_path, threshold)
    return TemplateSet(data.images, data.labels)


def from_images(templates: Sequence[GrayImage], samples: Sequence[GrayImage], labels, threshold: int = 0):
    """Preprocess raw templates/samples into (GlyphData, TemplateSet)."""
    data = GlyphData(np.stack([preprocess(img, threshold) for img in samples]), labels)
    tset = TemplateSet(np.stack([preprocess(img, threshold) for img in templates]), np.arange(len(templates)))
    return data, tset


# --- split protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    c_seen: int
    seed: int
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen + self.unseen))


def split_charset(charset, c_seen: int, seed: int) -> SplitSpec:
    """Uniformly draw ``c_seen`` seen classes; the rest are unseen.

    ``c_seen == len(charset)`` gives the closed-set protocol (no unseen classes).
    """
    classes = np.array(sorted(range(charset) if isinstance(charset, int) else set(charset)), dtype=np.int64)
    if not 0 < c_seen <= len(classes):
        raise ValueError(f"c_seen must lie in (0, {len(classes)}], got {c_seen}")
    rng = np.random.default_rng(seed)
    seen = np.sort(rng.choice(classes, size=c_seen, replace=False))
    unseen = np.setdiff1d(classes, seen)
    return SplitSpec(c_seen, seed, tuple(int(c) for c in seen), tuple(int(c) for c in unseen))


def split_samples(labels, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded train/test partition of sample indices."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 1])
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(test_fraction * len(idx)))
        test.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=np.intp)), np.sort(np.array(test, dtype=np.intp))


# --- configuration ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr0: float = 0.1
    lr_decay: float = 0.1
    plateau_patience: int = 3
    max_decays: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_epochs: int = 100
    seed: int = 0
    n: int = 5
    prob_clamp: float = nk.PROB_CLAMP
    nonpositive_head: bool = True

    def validate(self) -> "TrainConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if f.name in ("weight_decay", "momentum", "seed", "max_decays"):
                if value < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {value}")
            elif not value > 0:
                raise ValueError(f"{f.name} must be positive, got {value}")
        if not self.lr_decay < 1:
            raise ValueError(f"lr_decay must be < 1, got {self.lr_decay}")
        return self


class PlateauSchedule:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without improvement.

    After ``max_decays`` decays, a further ``patience`` epochs without
    improvement sets :attr:`stop`.
    """

    def __init__(self, lr0: float, decay: float = 0.1, patience: int = 3, max_decays: int = 2):
        self.lr = lr0
        self.decay = decay
        self.patience = patience
        self.max_decays = max_decays
        self.best = -math.inf
        self.bad_epochs = 0
        self.decays = 0
        self.stop = False

    def step(self, metric: float) -> bool:
        """Record one epoch's monitor value; returns True if it is a new best."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.decays < self.max_decays:
                self.lr *= self.decay
                self.decays += 1
            else:
                self.stop = True
        return False


# --- inference helpers ---------------------------------------------------------------


def embed_all(params, images, spec: ArchitectureSpec, chunk: int = 128) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        return np.zeros((0, spec.embed_dim), np.float32)
    return np.concatenate([embed(params, images[k : k + chunk], "infer", spec) for k in range(0, len(images), chunk)])


def accuracy_on(params, spec: ArchitectureSpec, data: GlyphData, templates: TemplateSet, allowed=None) -> float:
    """Template-matching accuracy of ``data`` against ``allowed`` classes (default: all templates)."""
    if len(data) == 0:
        return float("nan")
    tset = templates if allowed is None else templates.of_classes(allowed)
    F = build_template_matrix(params, tset.images, tset.class_ids, spec)
    head = SimilarityHead.from_params(params)
    feats = embed_all(params, data.images, spec)
    hits = sum(classify(f, F, head)[0] == y for f, y in zip(feats, data.labels))
    return hits / len(data)


# --- training ----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    monitor_acc: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochRecord]
    step_losses: list[float]
    best_epoch: int


def _pair_batch(records, data: GlyphData, members: dict[int, np.ndarray], templates: TemplateSet):
    tmpl_classes = sorted({r.template_class for r in records})
    sample_ids = sorted({int(members[r.sample_class][r.sample_index]) for r in records})
    t_pos = {c: k for k, c in enumerate(tmpl_classes)}
    s_pos = {s: len(tmpl_classes) + k for k, s in enumerate(sample_ids)}
    images = np.concatenate([np.stack([templates.image_of(c) for c in tmpl_classes]), data.images[sample_ids]])
    left = np.array([t_pos[r.template_class] for r in records])
    right = np.array([s_pos[int(members[r.sample_class][r.sample_index])] for r in records])
    labels = np.array([r.label for r in records], dtype=np.float64)
    return images, left, right, labels


def train(params, spec: ArchitectureSpec, train_data: GlyphData, templates: TemplateSet, pairs: PairList,
          monitor: GlyphData, monitor_classes, config: TrainConfig, schedule: PlateauSchedule | None = None,
          monitor_fn=None) -> TrainResult:
    """Run pair training epochs with plateau scheduling on the monitor accuracy.

    ``pairs`` index samples as positions within ``train_data.by_class()``.
    The returned parameters are the snapshot with the best monitor accuracy.
    ``monitor_fn(params) -> float`` overrides the default monitor.
    """
    config.validate()
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    members = train_data.by_class()
    schedule = schedule or PlateauSchedule(config.lr0, config.lr_decay, config.plateau_patience, config.max_decays)
    sgd = nk.SgdState(schedule.lr, config.momentum, config.weight_decay)
    if monitor_fn is None:
        def monitor_fn(p):
            return accuracy_on(p, spec, monitor, templates, monitor_classes)

    acc = monitor_fn(params)
    schedule.step(acc)
    history = [EpochRecord(0, schedule.lr, float("nan"), acc)]
    best, best_epoch = copy.deepcopy(params), 0
    step_losses: list[float] = []
    log.info("epoch 0 monitor_acc=%.4f", acc)
    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        sgd.learning_rate = lr
        order = reshuffle(pairs, epoch).records
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            images, left, right, labels = _pair_batch(batch, train_data, members, templates)
            loss = train_step_indexed(params, spec, images, left, right, labels, sgd, config.prob_clamp,
                                       config.nonpositive_head)
            losses.append(loss)
            step_losses.append(loss)
        acc = monitor_fn(params)
        improved = schedule.step(acc)
        if improved:
            best, best_epoch = copy.deepcopy(params), epoch
        history.append(EpochRecord(epoch, lr, float(np.mean(losses)), acc))
        log.info("epoch %d lr=%g loss=%.5f monitor_acc=%.4f", epoch, lr, history[-1].train_loss, acc)
        if schedule.stop:
            break
    return TrainResult(best, history, step_losses, best_epoch)


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "monitor_acc"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.monitor_acc)])


# --- evaluation ----------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: dict[str, float | None]
    counts: dict[str, tuple[int, int]]
    confusion: dict[tuple[int, int], int]
    exemplars: dict[tuple[int, int], str]

    def row(self) -> list[str]:
        return ["" if self.accuracy[c] is None else f"{self.accuracy[c]:.6f}" for c in COLUMNS]


def evaluate(params, spec: ArchitectureSpec, split: SplitSpec, test: GlyphData, templates: TemplateSet) -> EvalReport:
    """The five accuracies of ``test`` under the seen/unseen split.

    Restricted columns use :func:`classify_restricted`, full-label-space
    columns :func:`classify` over every class in the split. Confusion counts
    and exemplars come from the full label space.
    """
    all_classes = set(split.all_classes)
    if not set(np.unique(test.labels)) <= all_classes:
        raise ValueError("test set contains classes outside the split")
    missing = all_classes - set(int(c) for c in templates.class_ids)
    if missing:
        raise ValueError(f"no template for classes {sorted(missing)[:10]}")
    tset = templates.of_classes(all_classes)
    F: TemplateMatrix = build_template_matrix(params, tset.images, tset.class_ids, spec)
    head = SimilarityHead.from_params(params)
    feats = embed_all(params, test.images, spec)
    seen = set(split.seen)
    correct = Counter()
    total = Counter()
    confusion: Counter = Counter()
    exemplars: dict[tuple[int, int], str] = {}
    for f, y, path in zip(feats, test.labels, test.paths):
        y = int(y)
        group, subset = ("s", split.seen) if y in seen else ("u", split.unseen)
        pred_full, _ = classify(f, F, head)
        pred_restricted, _ = classify_restricted(f, F, head, subset)
        total[group] += 1
        correct[f"D{group}|C"] += pred_full == y
        correct[f"D{group}|C{group}"] += pred_restricted == y
        if pred_full != y:
            confusion[(y, pred_full)] += 1
            exemplars.setdefault((y, pred_full), path)
    n_s, n_u = total["s"], total["u"]
    counts = {
        "Ds|Cs": (correct["Ds|Cs"], n_s),
        "Ds|C": (correct["Ds|C"], n_s),
        "Du|Cu": (correct["Du|Cu"], n_u),
        "Du|C": (correct["Du|C"], n_u),
        "D|C": (correct["Ds|C"] + correct["Du|C"], n_s + n_u),
    }
    accuracy = {k: (c / n if n else None) for k, (c, n) in counts.items()}
    return EvalReport(accuracy, counts, dict(confusion), exemplars)


def write_report_tsv(report: EvalReport, path, c: int | str = "", n: int | str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(("c", "n") + COLUMNS) + "\n")
        fh.write("\t".join([str(c), str(n)] + report.row()) + "\n")


@dataclass(frozen=True)
class ErrorCell:
    truth: int
    prediction: int
    count: int
    exemplar: str


def error_report(report: EvalReport, k: int = 10) -> list[ErrorCell]:
    """The ``k`` most frequent (truth, prediction) confusions, one exemplar each."""
    cells = sorted(report.confusion.items(), key=lambda item: (-item[1], item[0]))
    return [ErrorCell(t, p, count, report.exemplars.get((t, p), "")) for (t, p), count in cells[:k]]


# --- softmax comparison classifier -----------------------------------------------------


def classifier_logits(params, spec: ArchitectureSpec, images, mode: str, keep_cache: bool = False):
    feats = embed(params, images, mode, spec, keep_cache=keep_cache)
    if keep_cache:
        feats, cache = feats
        logits, c_fc = nk.dense_forward(feats, params["cls.w"], params["cls.b"])
        return logits, (cache, c_fc)
    return nk.dense_forward(feats, params["cls.w"], params["cls.b"])[0]


def softmax_loss(params, spec: ArchitectureSpec, images, labels):
    """Mean cross-entropy of the C-way classifier and gradients for backbone + output layer."""
    logits, (cache, c_fc) = classifier_logits(params, spec, images, "train", keep_cache=True)
    loss, dlogits = nk.softmax_cross_entropy(logits, labels)
    dfeats, dw, db = nk.dense_backward(dlogits, c_fc)
    grads = embed_backward(dfeats, cache)
    grads["cls.w"], grads["cls.b"] = dw, db
    return loss, grads


def evaluate_closed(params, spec: ArchitectureSpec, data: GlyphData, class_ids: Sequence[int] | None = None) -> float:
    """Closed-set accuracy of the C-way classifier; output unit k is class ``class_ids[k]``."""
    if len(data) == 0:
        return float("nan")
    class_ids = np.arange(params["cls.w"].shape[1]) if class_ids is None else np.asarray(class_ids)
    preds = []
    for k in range(0, len(data), 128):
        preds.append(class_ids[classifier_logits(params, spec, data.images[k : k + 128], "infer").argmax(axis=1)])
    return float((np.concatenate(preds) == data.labels).mean())


def train_softmax_baseline(backbone, spec: ArchitectureSpec, train_data: GlyphData, class_ids: Sequence[int],
                           config: TrainConfig) -> TrainResult:
    """Replace the similarity head with a C-way output layer and train with cross-entropy.

    The backbone starts from ``backbone`` (copied). Plateau scheduling
    monitors training-set accuracy.
    """
    config.validate()
    if len(train_data) == 0:
        raise ValueError("empty training set")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    index_of = {int(c): k for k, c in enumerate(class_ids)}
    targets = np.array([index_of[int(y)] for y in train_data.labels])
    rng = np.random.default_rng([config.seed, 2])
    params = {k: v.copy() for k, v in backbone.items() if not k.startswith(("head.", "cls."))}
    fan_in = params["fc.w"].shape[1]
    params["cls.w"] = (rng.standard_normal((fan_in, len(class_ids))) * np.sqrt(1.0 / fan_in)).astype(np.float32)
    params["cls.b"] = np.zeros(len(class_ids), np.float32)
    schedule = PlateauSchedule(config.lr0, config.lr_decay, config.plateau_patience, config.max_decays)
    sgd = nk.SgdState(schedule.lr, config.momentum, config.weight_decay)

    def monitor(p):
        return evaluate_closed(p, spec, train_data, class_ids)

    acc = monitor(params)
    schedule.step(acc)
    history = [EpochRecord(0, schedule.lr, float("nan"), acc)]
    best, best_epoch = copy.deepcopy(params), 0
    step_losses = []
    for epoch in range(1, config.max_epochs + 1):
        lr = sgd.learning_rate = schedule.lr
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(train_data))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            loss, grads = softmax_loss(params, spec, train_data.images[idx], targets[idx])
            nk.sgd_step(params, grads, sgd)
            losses.append(loss)
            step_losses.append(loss)
        acc = monitor(params)
        if schedule.step(acc):
            best, best_epoch = copy.deepcopy(params), epoch
        history.append(EpochRecord(epoch, lr, float(np.mean(losses)) if losses else float("nan"), acc))
        log.info("baseline epoch %d lr=%g loss=%.5f train_acc=%.4f", epoch, lr, history[-1].train_loss, acc)
        if schedule.stop:
            break
    return TrainResult(best, history, step_losses, best_epoch)


# --- end-to-end ----------------------------------------------------------------------


@dataclass
class Experiment:
    split: SplitSpec
    train_idx: np.ndarray
    test_idx: np.ndarray
    pairs: PairList
    result: TrainResult
    report: EvalReport


def prepare(data: GlyphData, c_seen: int, config: TrainConfig, test_fraction: float = 0.25):
    """Split classes and samples, and generate the training pairs over seen classes."""
    split = split_charset(sorted(set(int(c) for c in data.labels)), c_seen, config.seed)
    train_idx, test_idx = split_samples(data.labels, test_fraction, config.seed)
    train_data = data.subset(train_idx)
    seen_train = train_data.of_classes(split.seen)
    pairs = generate_pairs(seen_train.by_class(), config.n, config.seed)
    return split, train_idx, test_idx, seen_train, pairs


def run_experiment(data: GlyphData, templates: TemplateSet, spec: ArchitectureSpec, config: TrainConfig,
                   c_seen: int, test_fraction: float = 0.25, params=None) -> Experiment:
    """Split, pair, train on seen classes, monitor unseen classes, evaluate on the test split.

    With no unseen classes (closed set) the monitor falls back to seen-class
    training accuracy.
    """
    from .siamese import build_model

    split, train_idx, test_idx, seen_train, pairs = prepare(data, c_seen, config, test_fraction)
    train_data = data.subset(train_idx)
    if split.unseen:
        monitor, monitor_classes = train_data.of_classes(split.unseen), split.unseen
    else:
        monitor, monitor_classes = seen_train, split.seen
    params = build_model(spec, config.seed) if params is None else params
    result = train(params, spec, seen_train, templates, pairs, monitor, monitor_classes, config)
    report = evaluate(result.params, spec, split, data.subset(test_idx), templates)
    return Experiment(split, train_idx, test_idx, pairs, result, report)
