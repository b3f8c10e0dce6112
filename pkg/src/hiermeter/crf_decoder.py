"""Joint-state chain CRF over hypermeasure positions and its Viterbi decoder.

A state holds one hypermeasure position per level, each in {0, 1, 2}. Its
boundary level is the number of leading zeros (all zeros = top level).
Per-level transitions reward alternating 0/1 positions (binary regularity)
and penalise deletions (0 -> 0) and insertions (1 -> 2); a position of 2
can only return to 0, so hypermeters above 3 cannot occur.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .emission_net.network import EmissionSequence, PROB_FLOOR
from .metrical_structure import DEFAULT_LEVELS, LabelSequence

CrfState = tuple[int, ...]
MAX_BRUTE_FORCE = 10


@dataclass(frozen=True)
class CrfWeights:
    """Per-level deletion and insertion penalties (strictly positive)."""

    w_del: tuple[float, ...]
    w_ins: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "w_del", tuple(float(x) for x in self.w_del))
        object.__setattr__(self, "w_ins", tuple(float(x) for x in self.w_ins))
        if len(self.w_del) != len(self.w_ins):
            raise ValueError("w_del and w_ins need one entry per level")
        if any(not x > 0 for x in self.w_del + self.w_ins):
            raise ValueError("CRF weights must be strictly positive")

    @classmethod
    def uniform(cls, value: float = 2.0, levels: int = DEFAULT_LEVELS,
                w_ins: float | None = None) -> "CrfWeights":
        return cls((value,) * levels, ((value if w_ins is None else w_ins),) * levels)

    @property
    def levels(self) -> int:
        return len(self.w_del)


DEFAULT_WEIGHTS = CrfWeights.uniform(2.0)
BASELINE_WEIGHTS = CrfWeights.uniform(1.0)


@dataclass
class DecodeResult:
    states: list[CrfState]
    labels: LabelSequence
    log_score: float


def all_states(levels: int = DEFAULT_LEVELS) -> list[CrfState]:
    """Every joint state, in lexicographic order."""
    return list(itertools.product((0, 1, 2), repeat=levels))


def boundary_level(z: CrfState) -> int:
    for k, pos in enumerate(z):
        if pos != 0:
            return k
    return len(z)


def level_transition_potential(src: int, dst: int, level: int, w: CrfWeights) -> float:
    """Entry ``(src, dst)`` of the 3x3 transition matrix of ``level`` (1-based)."""
    w_del, w_ins = w.w_del[level - 1], w.w_ins[level - 1]
    matrix = (
        (math.exp(-w_del), 1.0, 0.0),
        (1.0, 0.0, math.exp(-w_ins)),
        (1.0, 0.0, 0.0),
    )
    return matrix[src][dst]


def joint_transition_potential(z_prev: CrfState, z_next: CrfState, w: CrfWeights) -> float:
    """Transition potential between joint states.

    Entering a level-``l`` boundary updates the positions of levels
    ``1..l+1`` through their level matrices; positions above ``l+1`` must stay
    unchanged.
    """
    levels = len(z_next)
    top = boundary_level(z_next) + 1
    value = 1.0
    for level in range(1, levels + 1):
        a, b = z_prev[level - 1], z_next[level - 1]
        if level <= top:
            value *= level_transition_potential(a, b, level, w)
        elif a != b:
            return 0.0
    return value


@lru_cache(maxsize=32)
def _log_transition_table(w: CrfWeights) -> np.ndarray:
    states = all_states(w.levels)
    table = np.empty((len(states), len(states)))
    for i, a in enumerate(states):
        for j, b in enumerate(states):
            v = joint_transition_potential(a, b, w)
            table[i, j] = math.log(v) if v > 0 else -math.inf
    table.flags.writeable = False
    return table


def log_transition_table(w: CrfWeights) -> np.ndarray:
    """``[S, S]`` log potentials, ``-inf`` for forbidden transitions."""
    return _log_transition_table(w)


def _log_emissions(p, levels: int) -> np.ndarray:
    probs = p.probs if isinstance(p, EmissionSequence) else np.asarray(p, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != levels + 1:
        raise ValueError(f"emissions must have shape [N, {levels + 1}], got {probs.shape}")
    if probs.shape[0] < 1:
        raise ValueError("need at least one downbeat")
    state_level = np.array([boundary_level(z) for z in all_states(levels)])
    return np.log(np.maximum(probs, PROB_FLOOR))[:, state_level]  # [N, S]


def _result(path, levels, score) -> DecodeResult:
    states = all_states(levels)
    zs = [states[k] for k in path]
    return DecodeResult(zs, LabelSequence([boundary_level(z) for z in zs], levels), float(score))


def viterbi(p, w: CrfWeights = DEFAULT_WEIGHTS) -> DecodeResult:
    """Most probable joint state sequence under a uniform initial potential.

    Ties are broken towards the lexicographically smallest state at every
    argmax, which selects, among all optimal paths, the one whose reversed
    state sequence is lexicographically smallest.
    """
    levels = w.levels
    emis = _log_emissions(p, levels)
    trans = log_transition_table(w)
    n, s = emis.shape
    delta = emis[0].copy()
    back = np.zeros((n, s), dtype=np.int64)
    for i in range(1, n):
        cand = delta[:, None] + trans  # [prev, next]
        back[i] = np.argmax(cand, axis=0)
        delta = cand[back[i], np.arange(s)] + emis[i]
    last = int(np.argmax(delta))
    score = delta[last]
    if not np.isfinite(score):
        raise ValueError("every state sequence has zero potential")
    path = [last]
    for i in range(n - 1, 0, -1):
        path.append(int(back[i, path[-1]]))
    return _result(path[::-1], levels, score)


def brute_force_decode(p, w: CrfWeights = DEFAULT_WEIGHTS) -> DecodeResult:
    """Exhaustive search over every state sequence with nonzero potential.

    Test oracle for :func:`viterbi`. Paths are grown one downbeat at a time
    from all states, following only nonzero transitions, without any pruning
    by score. Scores accumulate left to right in the same order as the
    decoder so ties compare exactly.
    """
    levels = w.levels
    emis = _log_emissions(p, levels)
    n, s = emis.shape
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to {MAX_BRUTE_FORCE} downbeats, got {n}")
    states = all_states(levels)
    successors = [[(j, math.log(v)) for j, b in enumerate(states)
                   if (v := joint_transition_potential(a, b, w)) > 0] for a in states]
    # frontier of all partial paths: (paths [P, i], scores [P])
    paths = np.arange(s, dtype=np.int16)[:, None]
    scores = emis[0].copy()
    for i in range(1, n):
        last = paths[:, -1]
        new_paths, new_scores = [], []
        for a in range(s):
            rows = np.nonzero(last == a)[0]
            if rows.size == 0:
                continue
            for b, logv in successors[a]:
                new_paths.append(np.column_stack([paths[rows], np.full(rows.size, b, np.int16)]))
                new_scores.append((scores[rows] + logv) + emis[i, b])
        paths = np.concatenate(new_paths)
        scores = np.concatenate(new_scores)
    best = scores.max()
    if not np.isfinite(best):
        raise ValueError("every state sequence has zero potential")
    tied = paths[scores == best]
    # smallest reversed sequence: last state is the primary key
    order = np.lexsort(tied.T)
    return _result([int(k) for k in tied[order[0]]], levels, best)


def decode_song(tracks, grid, params, w: CrfWeights = DEFAULT_WEIGHTS) -> DecodeResult:
    """Network emissions for every track, fused, then decoded."""
    from .emission_net import forward_track, fuse_tracks

    if not tracks:
        raise ValueError("need at least one track")
    emissions = [forward_track(params, t, grid, "eval") for t in tracks]
    return viterbi(fuse_tracks(emissions), w)


def song_emissions(tracks, grid, params) -> EmissionSequence:
    from .emission_net import forward_track, fuse_tracks

    return fuse_tracks([forward_track(params, t, grid, "eval") for t in tracks])
