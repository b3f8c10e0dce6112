"""Score loading, downbeat grids, 16th-note quantization and corpus filtering."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .metrical_structure import DEFAULT_LEVELS, LabelSequence
from .midi import read_midi

log = logging.getLogger(__name__)

DEFAULT_TEMPO = 500000  # microseconds per quarter, i.e. 120 BPM
DRUM_CHANNEL = 9
UNITS_PER_QUARTER = 4
NUM_PITCHES = 128


@dataclass
class Track:
    name: str
    channel: int
    program: int
    is_drum: bool
    notes: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class Score:
    tracks: list[Track]
    tempo_map: list[tuple[int, int]]
    meter_map: list[tuple[int, int, int]]
    ticks_per_quarter: int
    metadata: dict = field(default_factory=dict)

    @property
    def end_tick(self) -> int:
        return max((on + dur for t in self.tracks for on, dur, _, _ in t.notes), default=0)


@dataclass
class DownbeatGrid:
    """Downbeat positions on the 16th-note grid.

    ``unit_ticks`` is kept as a :class:`~fractions.Fraction` so that odd
    ticks-per-quarter values do not accumulate rounding drift.
    """

    unit_ticks: Fraction
    downbeat_units: np.ndarray
    total_units: int

    def __post_init__(self):
        self.downbeat_units = np.asarray(self.downbeat_units, dtype=np.int64)
        d = self.downbeat_units
        if d.ndim != 1 or len(d) == 0:
            raise ValueError("a downbeat grid needs at least one downbeat")
        if np.any(np.diff(d) <= 0):
            raise ValueError("downbeat units must be strictly increasing")
        if d[0] < 0 or d[-1] >= self.total_units:
            raise ValueError(f"downbeats must lie in [0, {self.total_units})")

    @property
    def num_downbeats(self) -> int:
        return len(self.downbeat_units)

    def measure_spans(self) -> list[tuple[int, int]]:
        """``[start, end)`` unit spans of each measure; the last one runs to the grid end."""
        d = list(self.downbeat_units) + [self.total_units]
        return [(int(a), int(b)) for a, b in zip(d[:-1], d[1:])]


@dataclass
class QuantizedTrack:
    piano_roll: np.ndarray  # bool [total_units, 128]
    onset_roll: np.ndarray  # bool [total_units, 128]
    is_drum: bool
    name: str = ""
    program: int = 0

    @property
    def num_units(self) -> int:
        return self.piano_roll.shape[0]

    def features(self, dtype=np.float32) -> np.ndarray:
        """Network input: piano roll and onset roll side by side, ``[units, 256]``."""
        return np.concatenate([self.piano_roll, self.onset_roll], axis=1).astype(dtype)


# -- loading -----------------------------------------------------------------

def load_midi(path) -> Score:
    """Parse a format 0/1 Standard MIDI File into a :class:`Score`.

    Each (track chunk, channel) pair that carries notes becomes one
    :class:`Track`. Note-ons left open at the end of a chunk are closed at the
    chunk's last tick; their count is stored in ``metadata['unresolved_notes']``.
    """
    raw = read_midi(path)
    tempo_map: dict[int, int] = {}
    meter_map: dict[int, tuple[int, int]] = {}
    tracks: list[Track] = []
    unresolved = 0
    for events in raw.tracks:
        name = ""
        programs: dict[int, int] = {}
        open_notes: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
        notes: dict[int, list] = defaultdict(list)
        last_tick = 0
        for ev in events:
            last_tick = max(last_tick, ev.tick)
            if ev.kind == "tempo":
                tempo_map[ev.tick] = ev.data[0]
            elif ev.kind == "meter":
                meter_map[ev.tick] = (ev.data[0], ev.data[1])
            elif ev.kind == "name" and not name:
                name = ev.data[0].strip()
            elif ev.kind == "program":
                programs.setdefault(ev.channel, ev.data[0])
            elif ev.kind == "note_on":
                open_notes[(ev.channel, ev.data[0])].append((ev.tick, ev.data[1]))
            elif ev.kind == "note_off":
                stack = open_notes.get((ev.channel, ev.data[0]))
                if stack:
                    onset, velocity = stack.pop(0)
                    notes[ev.channel].append((onset, max(ev.tick - onset, 1), ev.data[0], velocity))
        for (channel, pitch), stack in open_notes.items():
            for onset, velocity in stack:
                unresolved += 1
                notes[channel].append((onset, max(last_tick - onset, 1), pitch, velocity))
        for channel in sorted(notes):
            tracks.append(Track(
                name=name,
                channel=channel,
                program=programs.get(channel, 0),
                is_drum=channel == DRUM_CHANNEL,
                notes=sorted(notes[channel]),
            ))
    tempo_map.setdefault(0, DEFAULT_TEMPO)
    meter_map.setdefault(0, (4, 4))
    if unresolved:
        log.warning("%s: %d note-on events without note-off were truncated", path, unresolved)
    return Score(
        tracks=tracks,
        tempo_map=sorted(tempo_map.items()),
        meter_map=[(t, n, d) for t, (n, d) in sorted(meter_map.items())],
        ticks_per_quarter=raw.ticks_per_quarter,
        metadata={"path": str(path), "unresolved_notes": unresolved},
    )


def _snap(ticks, unit: Fraction) -> int:
    """Nearest grid unit, exact halves rounding down."""
    q = Fraction(ticks) / unit
    base = math.floor(q)
    return base + 1 if q - base > Fraction(1, 2) else base


def extract_downbeat_grid(score: Score) -> DownbeatGrid:
    """Downbeats implied by the meter map, on a 16th-note grid.

    A new measure starts every ``numerator * 4 / denominator`` quarters from
    each meter change; a change that arrives mid-measure cuts that measure
    short. The grid extends to cover the last note end, and the final meter
    keeps producing downbeats until then.
    """
    tpq = score.ticks_per_quarter
    if tpq <= 0:
        raise ValueError("ticks_per_quarter must be positive")
    unit = Fraction(tpq, UNITS_PER_QUARTER)
    meters = sorted(score.meter_map) or [(0, 4, 4)]
    if meters[0][0] != 0:
        meters.insert(0, (0, 4, 4))
    for tick, num, den in meters:
        if num <= 0 or den <= 0:
            raise ValueError(f"invalid meter {num}/{den} at tick {tick}")
    end_tick = score.end_tick
    total_units = max(math.ceil(Fraction(end_tick) / unit), 1)

    downbeats = []
    for k, (tick, num, den) in enumerate(meters):
        measure = Fraction(num * UNITS_PER_QUARTER * tpq, den)
        seg_end = Fraction(meters[k + 1][0]) if k + 1 < len(meters) else None
        t = Fraction(tick)
        while (t < seg_end) if seg_end is not None else (t < end_tick or t == tick):
            downbeats.append(_snap(t, unit))
            t += measure
    units = sorted({u for u in downbeats if u < total_units})
    return DownbeatGrid(unit, np.array(units), total_units)


def load_downbeat_override(path, grid: DownbeatGrid) -> DownbeatGrid:
    """Replace the downbeats of ``grid`` with the unit indices listed in ``path``."""
    units = [int(line) for line in Path(path).read_text().split() if line.strip()]
    total = max(grid.total_units, max(units, default=0) + 1)
    return DownbeatGrid(grid.unit_ticks, np.array(units), total)


def quantize_track(track: Track, grid: DownbeatGrid) -> QuantizedTrack:
    n = grid.total_units
    piano = np.zeros((n, NUM_PITCHES), dtype=bool)
    onset = np.zeros((n, NUM_PITCHES), dtype=bool)
    for on_tick, dur, pitch, _ in track.notes:
        start = _snap(on_tick, grid.unit_ticks)
        if start >= n:
            continue
        if track.is_drum:
            stop = start + 1
        else:
            stop = max(_snap(on_tick + dur, grid.unit_ticks), start + 1)
        onset[start, pitch] = True
        piano[start:min(stop, n), pitch] = True
    return QuantizedTrack(piano, onset, track.is_drum, track.name, track.program)


def quantize_score(score: Score, grid: DownbeatGrid | None = None) -> tuple[list[QuantizedTrack], DownbeatGrid]:
    grid = grid or extract_downbeat_grid(score)
    return [quantize_track(t, grid) for t in score.tracks], grid


# -- annotations -------------------------------------------------------------

ANNOTATION_HEADER = "downbeat_index\tlabel"


class AnnotationError(ValueError):
    pass


def parse_annotations(text: str, num_downbeats: int | None = None,
                      max_level: int = DEFAULT_LEVELS) -> LabelSequence:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise AnnotationError(f"expected header {ANNOTATION_HEADER!r}")
    labels = []
    for row, line in enumerate(lines[1:], start=1):
        parts = line.split("\t")
        if len(parts) < 2:
            raise AnnotationError(f"row {row}: expected 2 tab-separated columns")
        try:
            index, label = int(parts[0]), int(parts[1])
        except ValueError:
            raise AnnotationError(f"row {row}: non-integer field in {line!r}") from None
        if index != row - 1:
            raise AnnotationError(f"row {row}: downbeat_index {index}, expected {row - 1}")
        if not 0 <= label <= max_level:
            raise AnnotationError(f"row {row}: label {label} outside 0..{max_level}")
        labels.append(label)
    if num_downbeats is not None and len(labels) != num_downbeats:
        raise AnnotationError(
            f"annotation has {len(labels)} rows but the grid has {num_downbeats} downbeats")
    return LabelSequence(labels, max_level)


def load_annotations(path, grid: DownbeatGrid | None = None,
                     max_level: int = DEFAULT_LEVELS) -> LabelSequence:
    text = Path(path).read_text(encoding="utf-8")
    return parse_annotations(text, grid.num_downbeats if grid is not None else None, max_level)


def format_annotations(seq: LabelSequence) -> str:
    rows = [ANNOTATION_HEADER] + [f"{i}\t{label}" for i, label in enumerate(seq.labels)]
    return "\n".join(rows) + "\n"


# -- corpus statistics and filtering ----------------------------------------

def measure_rest_ratio(track: QuantizedTrack, grid: DownbeatGrid) -> float:
    """Fraction of measures in which ``track`` has no onset."""
    active = track.onset_roll.any(axis=1)
    spans = grid.measure_spans()
    silent = sum(1 for a, b in spans if not active[a:b].any())
    return silent / len(spans)


DEFAULT_NAME_PATTERNS = ("melody", "vocal")


def is_melody_name(name: str, patterns: Iterable[str] = DEFAULT_NAME_PATTERNS) -> bool:
    lowered = name.lower()
    return any(p.lower() in lowered for p in patterns)


@dataclass
class FilterCriteria:
    min_tracks: int = 6
    require_drum: bool = True
    name_contains: Sequence[str] = DEFAULT_NAME_PATTERNS
    group_key: Callable[[Path], str] | None = None


@dataclass
class FilterResult:
    kept: list[Path]
    rejected: list[Path]
    skipped: list[Path]  # unreadable or unparsable


def score_passes(score: Score, criteria: FilterCriteria) -> bool:
    if len(score.tracks) < criteria.min_tracks:
        return False
    if criteria.require_drum and not any(t.is_drum for t in score.tracks):
        return False
    if criteria.name_contains and not any(is_melody_name(t.name, criteria.name_contains)
                                          for t in score.tracks):
        return False
    return True


MIDI_SUFFIXES = (".mid", ".midi", ".smf")


def filter_corpus(root, criteria: FilterCriteria) -> FilterResult:
    """Select MIDI files under ``root`` that satisfy ``criteria``.

    With a ``group_key``, at most one file per group survives; the
    lexicographically smallest path wins so the result does not depend on
    directory listing order.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(str(root))
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES)
    kept, rejected, skipped = [], [], []
    for path in paths:
        try:
            score = load_midi(path)
        except (OSError, ValueError) as exc:
            log.info("skipping %s: %s", path, exc)
            skipped.append(path)
            continue
        (kept if score_passes(score, criteria) else rejected).append(path)
    if criteria.group_key is not None:
        seen = set()
        deduped = []
        for path in kept:
            key = criteria.group_key(path)
            if key in seen:
                rejected.append(path)
                continue
            seen.add(key)
            deduped.append(path)
        kept = deduped
    if skipped:
        log.warning("%d unreadable files skipped", len(skipped))
    return FilterResult(kept, sorted(rejected), skipped)


# -- songs -------------------------------------------------------------------

@dataclass
class Song:
    """A quantized piece with its downbeat grid and (optionally) reference labels."""

    name: str
    tracks: list[QuantizedTrack]
    grid: DownbeatGrid
    labels: LabelSequence | None = None

    def with_tracks(self, tracks: list[QuantizedTrack]) -> "Song":
        return Song(self.name, tracks, self.grid, self.labels)


def load_song(midi_path, annotation_path=None, downbeat_path=None,
              max_level: int = DEFAULT_LEVELS) -> Song:
    score = load_midi(midi_path)
    grid = extract_downbeat_grid(score)
    if downbeat_path is not None:
        grid = load_downbeat_override(downbeat_path, grid)
    tracks = [quantize_track(t, grid) for t in score.tracks]
    labels = load_annotations(annotation_path, grid, max_level) if annotation_path else None
    return Song(Path(midi_path).stem, tracks, grid, labels)
