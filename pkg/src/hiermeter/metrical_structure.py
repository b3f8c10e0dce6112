"""Hierarchical metrical labels, hypermeasures and hypermeters.

Downbeat indices are 0-based throughout the code and in serialized files.
A label ``l`` at downbeat ``i`` means the downbeat is a boundary for every
level ``0..l``; level 0 boundaries are plain measure boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

DEFAULT_LEVELS = 4
ALLOWED_HYPERMETERS = (1, 2, 3)


@dataclass(frozen=True)
class LabelSequence:
    """Per-downbeat metrical boundary levels.

    Parameters
    ----------
    labels : sequence of int
        One label per downbeat, each in ``0..max_level``.
    max_level : int
        Number of levels above the measure (``L``).
    """

    labels: tuple[int, ...]
    max_level: int = DEFAULT_LEVELS

    def __init__(self, labels: Sequence[int], max_level: int = DEFAULT_LEVELS):
        labels = tuple(int(x) for x in labels)
        if not labels:
            raise ValueError("a label sequence needs at least one downbeat")
        if max_level < 1:
            raise ValueError(f"max_level must be >= 1, got {max_level}")
        for i, label in enumerate(labels):
            if not 0 <= label <= max_level:
                raise ValueError(f"label {label} at downbeat {i} outside 0..{max_level}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "max_level", max_level)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        return self.labels[i]

    def __iter__(self):
        return iter(self.labels)


@dataclass(frozen=True)
class Hypermeasure:
    """Span ``[start, end)`` of downbeats forming one level-``level`` unit.

    ``partial`` marks a span that is not closed by separators on both sides
    (the stretch before the first separator or after the last one).
    """

    level: int
    start: int
    end: int
    hypermeter: int
    partial: bool = False


def boundary_set(seq: LabelSequence, level: int) -> set[int]:
    if not 0 <= level <= seq.max_level:
        raise ValueError(f"level {level} outside 0..{seq.max_level}")
    return {i for i, label in enumerate(seq.labels) if label >= level}


def _count_separators(labels, start, end, level) -> int:
    return sum(1 for k in range(start, end) if labels[k] >= level)


def labels_to_hypermeasures(seq: LabelSequence, level: int) -> list[Hypermeasure]:
    """Split the downbeats into level-``level`` hypermeasures.

    Any downbeat with label ``>= level`` separates two hypermeasures. The
    stretch before the first separator and the stretch after the last one
    are returned with ``partial=True``. The hypermeter of a span is the
    number of level-``(level - 1)`` separators it contains.
    """
    if not 1 <= level <= seq.max_level:
        raise ValueError(f"level {level} outside 1..{seq.max_level}")
    labels = seq.labels
    n = len(labels)
    seps = [i for i, label in enumerate(labels) if label >= level]
    out = []
    edges = ([0] if not seps or seps[0] != 0 else []) + seps + [n]
    for a, b in zip(edges[:-1], edges[1:]):
        # leading stretch (no separator at its start) or trailing stretch
        partial = (not seps) or a < seps[0] or a == seps[-1]
        out.append(Hypermeasure(level, a, b, _count_separators(labels, a, b, level - 1), partial))
    return out


def to_dot_notation(seq: LabelSequence) -> list[str]:
    return ["." * (label + 1) for label in seq.labels]


def from_dot_notation(dots: Sequence[str], max_level: int = DEFAULT_LEVELS) -> LabelSequence:
    return LabelSequence([len(s) - 1 for s in dots], max_level)


def validate_hypermeters(seq: LabelSequence) -> list[tuple[int, int, int]]:
    """Report complete hypermeasures whose hypermeter is not 1, 2 or 3.

    Returns
    -------
    list of (level, start_downbeat, hypermeter)
    """
    report = []
    for level in range(1, seq.max_level + 1):
        for hm in labels_to_hypermeasures(seq, level):
            if not hm.partial and hm.hypermeter not in ALLOWED_HYPERMETERS:
                report.append((level, hm.start, hm.hypermeter))
    return report


def binary_template(n: int, max_level: int = DEFAULT_LEVELS, offset: int = 0) -> LabelSequence:
    """Strictly binary-regular labels: downbeat ``i`` gets the 2-adic valuation
    of ``i + offset`` capped at ``max_level``."""
    labels = []
    for i in range(n):
        k = i + offset
        level = 0
        while level < max_level and k % (2 ** (level + 1)) == 0:
            level += 1
        labels.append(level)
    return LabelSequence(labels, max_level)
