"""Rule-based novelty baseline and the strictly periodic oracle."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .emission_net.network import EmissionSequence
from .metrical_structure import DEFAULT_LEVELS, LabelSequence, boundary_set
from .score_ingest import DownbeatGrid, QuantizedTrack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RuleConfig:
    levels: int = DEFAULT_LEVELS
    clamp_eps: float = 1e-3


def _pooled_union(tracks: list[QuantizedTrack], total_units: int) -> np.ndarray:
    """Union of every track's piano+onset roll, ``[units, 256]``."""
    union = np.zeros((total_units, 256), dtype=bool)
    for t in tracks:
        union[:, :128] |= t.piano_roll
        union[:, 128:] |= t.onset_roll
    return union


def window_features(tracks: list[QuantizedTrack], grid: DownbeatGrid, window_measures: int) -> np.ndarray:
    """Mean-pooled union roll over ``window_measures`` measures from each downbeat."""
    if window_measures < 1:
        raise ValueError("window_measures must be >= 1")
    union = _pooled_union(tracks, grid.total_units).astype(np.float64)
    cum = np.vstack([np.zeros((1, 256)), np.cumsum(union, axis=0)])
    bounds = list(grid.downbeat_units) + [grid.total_units]
    n = grid.num_downbeats
    feats = np.zeros((n, 256))
    for i in range(n):
        a, b = bounds[i], bounds[min(i + window_measures, n)]
        feats[i] = (cum[b] - cum[a]) / max(b - a, 1)
    return feats


def similarity_matrix(tracks: list[QuantizedTrack], grid: DownbeatGrid, window_measures: int) -> np.ndarray:
    """Cosine self-similarity of windowed downbeat features.

    Rows with an all-zero feature are similar to nothing but themselves.
    """
    feats = window_features(tracks, grid, window_measures)
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = feats / safe[:, None]
    sim = unit @ unit.T
    sim = np.clip((sim + sim.T) / 2, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def checkerboard_kernel(half_width: int) -> np.ndarray:
    """Gaussian-tapered checkerboard of size ``2 * half_width``; offsets ``-h..h-1``."""
    offsets = np.arange(-half_width, half_width) + 0.5
    sigma = half_width / 2.0
    taper = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2 * sigma ** 2))
    sign = np.sign(offsets)
    return taper * np.outer(sign, sign)


def novelty_score(sim: np.ndarray, kernel_half_width: int) -> np.ndarray:
    """Checkerboard novelty along the diagonal of ``sim``.

    The kernel at downbeat ``i`` covers ``i - h .. i + h - 1`` so a peak marks
    the first downbeat of a new segment. Cells outside the matrix are left
    out, and the positive (within-segment) and negative (cross-segment)
    quadrants are each normalised by their in-range weight, so a constant
    matrix scores zero everywhere, edges included. Output is clamped at 0.
    """
    h = int(kernel_half_width)
    if h < 1:
        raise ValueError("kernel_half_width must be >= 1")
    n = sim.shape[0]
    out = np.zeros(n)
    if 2 * h > n:
        log.warning("novelty kernel (width %d) wider than the %d-downbeat matrix", 2 * h, n)
        return out
    kernel = checkerboard_kernel(h)
    pos_k, neg_k = np.maximum(kernel, 0), np.maximum(-kernel, 0)
    for i in range(n):
        lo, hi = i - h, i + h
        a, b = max(lo, 0), min(hi, n)
        block = sim[a:b, a:b]
        kp = pos_k[a - lo:b - lo, a - lo:b - lo]
        kn = neg_k[a - lo:b - lo, a - lo:b - lo]
        wp, wn = kp.sum(), kn.sum()
        if wp <= 0 or wn <= 0:
            continue
        out[i] = (kp * block).sum() / wp - (kn * block).sum() / wn
    return np.maximum(out, 0.0)


def strengths_to_emissions(strengths: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Turn per-level boundary strengths ``[N, L]`` into label distributions.

    Stick-breaking: ``p(l) = prod_{k<=l} b_k * (1 - b_{l+1})`` with each ``b``
    clamped to ``[eps, 1 - eps]`` and ``b_{L+1} = 0``.
    """
    b = np.clip(np.asarray(strengths, dtype=np.float64), eps, 1 - eps)
    n, levels = b.shape
    reach = np.hstack([np.ones((n, 1)), np.cumprod(b, axis=1)])  # P(label >= l)
    stop = np.hstack([1 - b, np.ones((n, 1))])
    probs = reach * stop
    return probs / probs.sum(axis=1, keepdims=True)


def level_strengths(tracks: list[QuantizedTrack], grid: DownbeatGrid,
                    levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Max-normalised novelty per level; level ``l`` uses ``2**(l-1)``-measure
    windows and kernel half-width."""
    cols = []
    for level in range(1, levels + 1):
        size = 2 ** (level - 1)
        nov = novelty_score(similarity_matrix(tracks, grid, size), size)
        peak = nov.max()
        cols.append(nov / peak if peak > 0 else nov)
    return np.column_stack(cols)


def rule_emissions(tracks: list[QuantizedTrack], grid: DownbeatGrid,
                   config: RuleConfig = RuleConfig()) -> EmissionSequence:
    return EmissionSequence(strengths_to_emissions(level_strengths(tracks, grid, config.levels),
                                                   config.clamp_eps))


def f1_score(pred: set[int], ref: set[int]) -> tuple[float, float, float]:
    """Exact-match precision, recall and F1; empty vs empty counts as perfect."""
    if not pred and not ref:
        return 1.0, 1.0, 1.0
    hits = len(pred & ref)
    precision = hits / len(pred) if pred else 0.0
    recall = hits / len(ref) if ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def periodic_candidates(n: int, level: int) -> list[set[int]]:
    period = 2 ** level
    return [set(range(offset, n, period)) for offset in range(period)]


def oracle_predict(ref: LabelSequence, level: int) -> set[int]:
    """Best strictly periodic boundary set for one level.

    Candidates repeat every ``2**level`` measures at every offset; the one
    with the highest F1 against the reference wins, smallest offset on ties.
    """
    target = boundary_set(ref, level)
    best, best_f1 = set(), -1.0
    for cand in periodic_candidates(len(ref), level):
        f1 = f1_score(cand, target)[2]
        if f1 > best_f1:
            best, best_f1 = cand, f1
    return best


def oracle_labels(ref: LabelSequence) -> list[set[int]]:
    """Oracle boundary set for every level ``1..L`` (not necessarily nested)."""
    return [oracle_predict(ref, level) for level in range(1, ref.max_level + 1)]
