"""Seeded synthetic glyph classes: a clean template plus jittered "handwritten" samples.

Rasterization is integer-only (Bresenham lines, midpoint-circle arcs, square
brushes), so a fixture regenerates byte-identically on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import GrayImage, save_pgm, write_manifest
from .prep import preprocess

SIZE = 64
INK = 0
PAPER = 255
TEMPLATE_THICKNESS = 2


@dataclass(frozen=True)
class GlyphClassSpec:
    """Stroke program for one class.

    ``strokes`` holds ``("line", x0, y0, x1, y1)`` and
    ``("arc", cx, cy, radius, first_octant, n_octants)`` segments in canvas
    pixels. Each jittered endpoint moves by the sum of four uniform integers
    in ``[-jitter, jitter]`` (see :attr:`endpoint_stdev`); stroke width varies
    by up to ``thickness_jitter`` around the template width.
    """

    class_id: int
    seed: int
    strokes: tuple
    jitter: int = 1
    thickness_jitter: int = 1

    @property
    def endpoint_stdev(self) -> float:
        a = self.jitter
        return (4 * a * (a + 1) / 3) ** 0.5


def _build_vocabulary() -> tuple:
    """Shared stroke primitives on a 3x3 anchor grid: neighbor lines plus quarter arcs.

    Classes are drawn as subsets of this vocabulary, so unseen classes are new
    combinations of strokes that also occur in seen classes.
    """
    ticks = (14, 32, 50)
    anchors = [(x, y) for y in ticks for x in ticks]
    lines = []
    for i, (x0, y0) in enumerate(anchors):
        for x1, y1 in anchors[i + 1 :]:
            if max(abs(x1 - x0), abs(y1 - y0)) == 18:
                lines.append(("line", x0, y0, x1, y1))
    arcs = [("arc", cx, cy, 9, first, 2) for cx in (23, 41) for cy in (23, 41) for first in (0, 2, 4, 6)]
    return tuple(lines) + tuple(arcs)


VOCABULARY = _build_vocabulary()


def gen_class(seed: int, complexity: int = 4, class_id: int = 0, jitter: int = 1) -> GlyphClassSpec:
    """Draw ``complexity`` distinct strokes from :data:`VOCABULARY`."""
    if complexity < 2:
        raise ValueError(f"complexity must be >= 2 strokes, got {complexity}")
    if complexity > len(VOCABULARY):
        raise ValueError(f"complexity must be <= {len(VOCABULARY)}, got {complexity}")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(VOCABULARY), size=complexity, replace=False))
    return GlyphClassSpec(class_id, seed, tuple(VOCABULARY[k] for k in picks), jitter)


def _line_points(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _arc_points(cx, cy, r, first_octant, n_octants):
    keep = {(first_octant + k) % 8 for k in range(n_octants)}
    x, y, d = r, 0, 1 - r
    while x >= y:
        # octants counter-clockwise from +x axis
        for octant, (px, py) in enumerate(
            ((x, -y), (y, -x), (-y, -x), (-x, -y), (-x, y), (-y, x), (y, x), (x, y))
        ):
            if octant in keep:
                yield cx + px, cy + py
        y += 1
        if d < 0:
            d += 2 * y + 1
        else:
            x -= 1
            d += 2 * (y - x) + 1


def _stamp(canvas, points, thickness, value):
    lo = -(thickness // 2)
    for x, y in points:
        y0, y1 = max(0, y + lo), min(SIZE, y + lo + thickness)
        x0, x1 = max(0, x + lo), min(SIZE, x + lo + thickness)
        if y0 < y1 and x0 < x1:
            canvas[y0:y1, x0:x1] = value


def render(spec: GlyphClassSpec, jitter_seed: int | None = None) -> GrayImage:
    """Dark strokes on a white canvas. ``jitter_seed=None`` renders the clean template."""
    canvas = np.full((SIZE, SIZE), PAPER, dtype=np.uint8)
    rng = None if jitter_seed is None else np.random.default_rng([spec.seed, jitter_seed])
    clip_lo, clip_hi = 1, SIZE - 2

    def noise():
        return int(rng.integers(-spec.jitter, spec.jitter + 1, size=4).sum())

    def nudge(v):
        if rng is None:
            return v
        return min(max(v + noise(), clip_lo), clip_hi)

    ink = INK
    for stroke in spec.strokes:
        thickness = TEMPLATE_THICKNESS
        if rng is not None:
            thickness += int(rng.integers(-spec.thickness_jitter, spec.thickness_jitter + 1))
            thickness = max(1, thickness)
        if stroke[0] == "line":
            _, x0, y0, x1, y1 = stroke
            pts = _line_points(nudge(x0), nudge(y0), nudge(x1), nudge(y1))
        else:
            _, cx, cy, r, first, count = stroke
            if rng is not None:
                r = max(3, r + noise() // 2)
            pts = _arc_points(nudge(cx), nudge(cy), r, first, count)
        _stamp(canvas, pts, thickness, ink)
    return GrayImage(canvas)


def _class_seed(seed: int, class_id: int, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, class_id, attempt]).generate_state(1)[0])


def template_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference between two normalized templates."""
    return float(np.abs(a - b).mean())


def gen_classes(num_classes: int, seed: int, complexity: int = 4, min_distance: float = 0.04,
                jitter: int = 1, max_attempts: int = 50) -> list[GlyphClassSpec]:
    """Generate ``num_classes`` programs whose normalized templates differ by at least ``min_distance``."""
    specs, norms = [], []
    for cls in range(num_classes):
        for attempt in range(max_attempts):
            spec = gen_class(_class_seed(seed, cls, attempt), complexity, cls, jitter)
            norm = preprocess(render(spec))
            if all(template_distance(norm, other) >= min_distance for other in norms):
                break
        else:
            raise RuntimeError(f"class {cls}: no distinct glyph after {max_attempts} attempts")
        specs.append(spec)
        norms.append(norm)
    return specs


@dataclass
class ToyImages:
    templates: list[GrayImage]
    samples: list[GrayImage]
    labels: list[int]
    specs: list[GlyphClassSpec]


def make_toy(num_classes: int, samples_per_class: int, seed: int, complexity: int = 4,
             jitter: int = 1) -> ToyImages:
    specs = gen_classes(num_classes, seed, complexity, jitter=jitter)
    templates = [render(s) for s in specs]
    samples, labels = [], []
    for s in specs:
        for k in range(samples_per_class):
            samples.append(render(s, jitter_seed=k))
            labels.append(s.class_id)
    return ToyImages(templates, samples, labels, specs)


def write_toy_dataset(out_dir, num_classes: int, samples_per_class: int, seed: int,
                      complexity: int = 4, jitter: int = 1) -> dict[str, Path]:
    """Write samples/*.pgm + manifest.tsv and templates/*.pgm + templates/manifest.tsv."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    toy = make_toy(num_classes, samples_per_class, seed, complexity, jitter)
    entries = []
    per_class = {}
    for img, cls in zip(toy.samples, toy.labels):
        k = per_class.get(cls, 0)
        per_class[cls] = k + 1
        rel = f"samples/c{cls:04d}_{k:03d}.pgm"
        save_pgm(img, out / rel)
        entries.append((rel, cls))
    write_manifest(entries, out / "manifest.tsv")
    template_entries = []
    for cls, img in enumerate(toy.templates):
        rel = f"c{cls:04d}.pgm"
        save_pgm(img, out / "templates" / rel)
        template_entries.append((rel, cls))
    write_manifest(template_entries, out / "templates" / "manifest.tsv")
    return {"manifest": out / "manifest.tsv", "templates": out / "templates" / "manifest.tsv"}
