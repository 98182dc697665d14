"""Template feature caching and argmax-similarity classification."""

from __future__ import annotations

import numpy as np

from . import nnkernel as nk
from .dataio import TemplateMatrix
from .siamese import ArchitectureSpec, SimilarityHead, embed, pair_logits

__all__ = [
    "TemplateMatrix",
    "build_template_matrix",
    "classify",
    "classify_restricted",
    "classify_direct",
    "score_matrix",
]


def build_template_matrix(params, templates, class_ids, spec: ArchitectureSpec | None = None) -> TemplateMatrix:
    """Embed each template on its own in infer mode and stack the rows.

    Rows are ordered by class id.
    """
    templates = np.asarray(templates, dtype=np.float32)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if templates.ndim != 3 or len(templates) != len(class_ids):
        raise ValueError("expected (C, H, W) templates with one class id each")
    if len(np.unique(class_ids)) != len(class_ids):
        raise ValueError("duplicate class id among templates")
    order = np.argsort(class_ids, kind="stable")
    rows = [embed(params, templates[k][None], "infer", spec)[0] for k in order]
    return TemplateMatrix(np.stack(rows), class_ids[order])


def _pick(logits: np.ndarray, class_ids: np.ndarray) -> tuple[int, float]:
    best = logits.max()
    winner = int(class_ids[logits == best].min())
    p = float(nk.sigmoid(best))
    return winner, min(max(p, nk.PROB_CLAMP), 1.0 - nk.PROB_CLAMP)


def score_matrix(features: np.ndarray, F: TemplateMatrix, head: SimilarityHead) -> np.ndarray:
    """(Q, C) logits of every query against every template row."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float32))
    return np.stack([pair_logits(f, F.features, head) for f in features])


def classify(feature, F: TemplateMatrix, head: SimilarityHead) -> tuple[int, float]:
    """Class of the most similar template and its probability; ties go to the lowest class id."""
    if F.rows == 0:
        raise ValueError("empty template matrix")
    return _pick(pair_logits(feature, F.features, head), F.class_ids)


def classify_restricted(feature, F: TemplateMatrix, head: SimilarityHead, allowed) -> tuple[int, float]:
    allowed = {int(c) for c in allowed}
    if not allowed:
        raise ValueError("allowed class set is empty")
    unknown = allowed - {int(c) for c in F.class_ids}
    if unknown:
        raise ValueError(f"allowed set has classes without templates: {sorted(unknown)[:10]}")
    return classify(feature, F.subset(allowed), head)


def classify_direct(image, templates, class_ids, params, head: SimilarityHead,
                    spec: ArchitectureSpec | None = None) -> tuple[int, float]:
    """Uncached path: score the query against each template through the network, one pair at a time."""
    templates = np.asarray(templates, dtype=np.float32)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if len(templates) == 0:
        raise ValueError("no templates")
    f_x = embed(params, np.asarray(image, dtype=np.float32)[None], "infer", spec)[0]
    logits = np.empty(len(templates))
    for k, template in enumerate(templates):
        f_c = embed(params, template[None], "infer", spec)
        logits[k] = pair_logits(f_x, f_c, head)[0]
    return _pick(logits, class_ids)
