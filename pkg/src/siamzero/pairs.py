"""Positive/negative template-sample pair generation.

For every template class ``i`` all samples of class ``i`` become positives;
for every other class ``j`` exactly ``n`` distinct samples of ``j`` become
negatives. The whole list is shuffled with a seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np


class PairRecord(NamedTuple):
    template_class: int
    sample_class: int
    sample_index: int
    label: int


@dataclass(frozen=True)
class PairList:
    records: tuple[PairRecord, ...]
    seed: int
    n: int

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def counts(self) -> tuple[int, int]:
        pos = sum(r.label for r in self.records)
        return pos, len(self.records) - pos


def pair_counts(c: int, sizes: Sequence[int], n: int) -> tuple[int, int]:
    """Closed-form (positives, negatives) produced by :func:`generate_pairs`."""
    if len(sizes) != c:
        raise ValueError(f"expected {c} class sizes, got {len(sizes)}")
    return int(sum(sizes)), c * (c - 1) * n


def generate_pairs(dataset: Mapping[int, Sequence], n: int, seed: int) -> PairList:
    """Build the pair list for the classes in ``dataset``.

    ``dataset`` maps class id -> that class's samples; a record refers to a
    sample by ``(sample_class, position within dataset[sample_class])``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    classes = sorted(dataset)
    for cls in classes:
        size = len(dataset[cls])
        if size == 0:
            raise ValueError(f"class {cls} has no samples")
        if len(classes) > 1 and size < n:
            raise ValueError(f"class {cls} has {size} samples, fewer than n={n}")
    rng = np.random.default_rng(seed)
    records = []
    for i in classes:
        for j in classes:
            if i == j:
                records.extend(PairRecord(i, j, k, 1) for k in range(len(dataset[j])))
            else:
                picks = rng.choice(len(dataset[j]), size=n, replace=False)
                records.extend(PairRecord(i, j, int(k), 0) for k in picks)
    order = rng.permutation(len(records))
    return PairList(tuple(records[k] for k in order), seed, n)


def reshuffle(pairs: PairList, epoch: int) -> PairList:
    """Deterministic per-epoch permutation derived from (seed, epoch)."""
    rng = np.random.default_rng([pairs.seed, epoch])
    order = rng.permutation(len(pairs.records))
    return PairList(tuple(pairs.records[k] for k in order), pairs.seed, pairs.n)


def write_pairs_tsv(pairs: PairList, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={pairs.seed}\tn={pairs.n}\n")
        fh.write("template_class\tsample_class\tsample_index\tlabel\n")
        for r in pairs.records:
            fh.write(f"{r.template_class}\t{r.sample_class}\t{r.sample_index}\t{r.label}\n")


def read_pairs_tsv(path) -> PairList:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    meta = dict(field.split("=", 1) for field in lines[0].lstrip("# ").split("\t"))
    records = tuple(PairRecord(*map(int, line.split("\t"))) for line in lines[2:] if line)
    return PairList(records, int(meta["seed"]), int(meta["n"]))
