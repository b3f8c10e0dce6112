"""Boundary F1, split evaluation with ablations, and corpus statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .baselines import f1_score
from .metrical_structure import DEFAULT_LEVELS, LabelSequence, boundary_set
from .score_ingest import DEFAULT_NAME_PATTERNS, Song, is_melody_name, measure_rest_ratio

log = logging.getLogger(__name__)

# an analyzer returns labels, or one boundary set per level 1..L (the oracle)
Prediction = Union[LabelSequence, Sequence[set]]
Analyzer = Callable[[Song], Prediction]


def boundary_f1(pred: LabelSequence, ref: LabelSequence, level: int) -> tuple[float, float, float]:
    """Precision, recall and F1 of level-``level`` boundaries, exact index match."""
    if len(pred) != len(ref):
        raise ValueError(f"prediction has {len(pred)} downbeats, reference {len(ref)}")
    return f1_score(boundary_set(pred, level), boundary_set(ref, level))


def _pred_boundaries(pred: Prediction, level: int) -> set[int]:
    if isinstance(pred, LabelSequence):
        return boundary_set(pred, level)
    return set(pred[level - 1])


def song_scores(pred: Prediction, ref: LabelSequence) -> np.ndarray:
    """``[L, 3]`` precision/recall/F1 per level."""
    if isinstance(pred, LabelSequence) and len(pred) != len(ref):
        raise ValueError(f"prediction has {len(pred)} downbeats, reference {len(ref)}")
    return np.array([f1_score(_pred_boundaries(pred, level), boundary_set(ref, level))
                     for level in range(1, ref.max_level + 1)])


# -- ablations ---------------------------------------------------------------

ABLATIONS = ("full", "no_drums", "melody_only")


@dataclass(frozen=True)
class AblationSpec:
    variant: str = "full"
    melody_patterns: tuple[str, ...] = DEFAULT_NAME_PATTERNS

    def __post_init__(self):
        variant = self.variant.replace("-", "_")
        if variant not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.variant!r}; choose from {ABLATIONS}")
        object.__setattr__(self, "variant", variant)

    def apply(self, song: Song) -> Song:
        if self.variant == "no_drums":
            return song.with_tracks([t for t in song.tracks if not t.is_drum])
        if self.variant == "melody_only":
            return song.with_tracks([t for t in song.tracks
                                     if is_melody_name(t.name, self.melody_patterns)])
        return song


@dataclass
class LevelScores:
    """Per-level mean and standard deviation across songs.

    ``per_song`` holds ``[L, 3]`` precision/recall/F1 arrays in song order;
    ``errors`` lists ``(song, message)`` for songs left out of the aggregate.
    """

    names: list[str]
    per_song: list[np.ndarray]
    errors: list[tuple[str, str]] = field(default_factory=list)
    ddof: int = 0

    @property
    def levels(self) -> int:
        return self.per_song[0].shape[0] if self.per_song else 0

    def _stack(self) -> np.ndarray:
        return np.stack(self.per_song)  # [songs, L, 3]

    def mean(self, metric: int = 2) -> np.ndarray:
        return self._stack()[:, :, metric].mean(axis=0)

    def std(self, metric: int = 2) -> np.ndarray:
        data = self._stack()[:, :, metric]
        if data.shape[0] <= self.ddof:
            return np.zeros(data.shape[1])
        return data.std(axis=0, ddof=self.ddof)

    def to_tsv(self, per_song: bool = False) -> str:
        rows = ["level\tmetric\tmean\tstd\tsongs"]
        n = len(self.per_song)
        if n:
            for m, metric in enumerate(("precision", "recall", "f1")):
                mean, std = self.mean(m), self.std(m)
                for level in range(self.levels):
                    rows.append(f"{level + 1}\t{metric}\t{mean[level]:.4f}\t{std[level]:.4f}\t{n}")
        if per_song:
            rows.append("song\t" + "\t".join(f"f1_level{l + 1}" for l in range(self.levels)))
            for name, s in zip(self.names, self.per_song):
                rows.append(name + "\t" + "\t".join(f"{v:.4f}" for v in s[:, 2]))
        for name, msg in self.errors:
            rows.append(f"# error\t{name}\t{msg}")
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        if not self.per_song:
            return "no songs evaluated\n"
        mean, std = self.mean(), self.std()
        head = "".join(f"{'Level ' + str(l + 1):>18}" for l in range(self.levels))
        body = "".join(f"{f'{m:.4f} ± {s:.4f}':>18}" for m, s in zip(mean, std))
        lines = [f"{'':8}{head}", f"{'F1':8}{body}"]
        if self.errors:
            lines.append(f"({len(self.errors)} songs failed)")
        return "\n".join(lines) + "\n"


def evaluate_split(songs: list[Song], model: Analyzer, ablation: AblationSpec = AblationSpec(),
                   ddof: int = 0) -> LevelScores:
    """Run ``model`` on every (ablated) song and score it against the references.

    Songs left with no tracks by the ablation, or whose analysis fails, are
    recorded in ``errors`` and excluded from the aggregate.
    """
    if not songs:
        raise ValueError("no songs to evaluate")
    names, scores, errors = [], [], []
    for song in songs:
        if song.labels is None:
            errors.append((song.name, "no reference labels"))
            continue
        ablated = ablation.apply(song)
        if not ablated.tracks:
            errors.append((song.name, f"ablation {ablation.variant} leaves no tracks"))
            continue
        try:
            pred = model(ablated)
            scores.append(song_scores(pred, song.labels))
        except ValueError as exc:
            errors.append((song.name, str(exc)))
            continue
        names.append(song.name)
    return LevelScores(names, scores, errors, ddof)


# -- confidence statistics ---------------------------------------------------

GM_PROGRAMS = [
    "Acoustic Grand Piano", "Bright Acoustic Piano", "Electric Grand Piano", "Honky-tonk Piano",
    "Electric Piano 1", "Electric Piano 2", "Harpsichord", "Clavinet", "Celesta", "Glockenspiel",
    "Music Box", "Vibraphone", "Marimba", "Xylophone", "Tubular Bells", "Dulcimer",
    "Drawbar Organ", "Percussive Organ", "Rock Organ", "Church Organ", "Reed Organ", "Accordion",
    "Harmonica", "Tango Accordion", "Acoustic Guitar (nylon)", "Acoustic Guitar (steel)",
    "Electric Guitar (jazz)", "Electric Guitar (clean)", "Electric Guitar (muted)",
    "Overdriven Guitar", "Distortion Guitar", "Guitar Harmonics", "Acoustic Bass",
    "Electric Bass (finger)", "Electric Bass (pick)", "Fretless Bass", "Slap Bass 1",
    "Slap Bass 2", "Synth Bass 1", "Synth Bass 2", "Violin", "Viola", "Cello", "Contrabass",
    "Tremolo Strings", "Pizzicato Strings", "Orchestral Harp", "Timpani", "String Ensemble 1",
    "String Ensemble 2", "Synth Strings 1", "Synth Strings 2", "Choir Aahs", "Voice Oohs",
    "Synth Choir", "Orchestra Hit", "Trumpet", "Trombone", "Tuba", "Muted Trumpet",
    "French Horn", "Brass Section", "Synth Brass 1", "Synth Brass 2", "Soprano Sax", "Alto Sax",
    "Tenor Sax", "Baritone Sax", "Oboe", "English Horn", "Bassoon", "Clarinet", "Piccolo",
    "Flute", "Recorder", "Pan Flute", "Blown Bottle", "Shakuhachi", "Whistle", "Ocarina",
    "Lead 1 (square)", "Lead 2 (sawtooth)", "Lead 3 (calliope)", "Lead 4 (chiff)",
    "Lead 5 (charang)", "Lead 6 (voice)", "Lead 7 (fifths)", "Lead 8 (bass + lead)",
    "Pad 1 (new age)", "Pad 2 (warm)", "Pad 3 (polysynth)", "Pad 4 (choir)", "Pad 5 (bowed)",
    "Pad 6 (metallic)", "Pad 7 (halo)", "Pad 8 (sweep)", "FX 1 (rain)", "FX 2 (soundtrack)",
    "FX 3 (crystal)", "FX 4 (atmosphere)", "FX 5 (brightness)", "FX 6 (goblins)",
    "FX 7 (echoes)", "FX 8 (sci-fi)", "Sitar", "Banjo", "Shamisen", "Koto", "Kalimba",
    "Bagpipe", "Fiddle", "Shanai", "Tinkle Bell", "Agogo", "Steel Drums", "Woodblock",
    "Taiko Drum", "Melodic Tom", "Synth Drum", "Reverse Cymbal", "Guitar Fret Noise",
    "Breath Noise", "Seashore", "Bird Tweet", "Telephone Ring", "Helicopter", "Applause",
    "Gunshot",
]
REST_RATIO_CUTOFF = 1 / 3


def instrument_group(track, melody_patterns=DEFAULT_NAME_PATTERNS) -> str:
    """Melody-named tracks form their own group, drums are grouped by channel."""
    if is_melody_name(track.name, melody_patterns):
        return "Melody"
    if track.is_drum:
        return "Drum"
    return GM_PROGRAMS[track.program]


@dataclass
class GroupStat:
    group: str
    mean: float
    std: float
    count: int


def confidence_stats(corpus: list[Song], params, melody_patterns=DEFAULT_NAME_PATTERNS,
                     rest_cutoff: float = REST_RATIO_CUTOFF, ddof: int = 0) -> list[GroupStat]:
    """Mean raw confidence per track, grouped by instrument.

    Tracks silent in more than ``rest_cutoff`` of their measures are left out.
    Groups are sorted by name.
    """
    from .emission_net import forward_track

    groups: dict[str, list[float]] = {}
    for song in corpus:
        for track in song.tracks:
            if measure_rest_ratio(track, song.grid) > rest_cutoff:
                continue
            alpha = forward_track(params, track, song.grid, "eval").confidence
            groups.setdefault(instrument_group(track, melody_patterns), []).append(float(np.mean(alpha)))
    out = []
    for name in sorted(groups):
        vals = np.array(groups[name])
        std = float(vals.std(ddof=ddof)) if len(vals) > ddof else 0.0
        out.append(GroupStat(name, float(vals.mean()), std, len(vals)))
    return out


def format_confidence_tsv(stats: list[GroupStat]) -> str:
    rows = ["instrument\tmean\tstd\ttracks"]
    rows += [f"{s.group}\t{s.mean:.4f}\t{s.std:.4f}\t{s.count}" for s in stats]
    return "\n".join(rows) + "\n"


# -- drum events by boundary level -------------------------------------------

DRUM_GROUPS = {
    "Bass Drum": (35, 36),
    "Acoustic Snare": (38,),
    "Closed Hi Hat": (42,),
    "Open Hi Hat": (46,),
    "Crash Cymbal": (49, 57),
    "Ride Cymbal": (51, 59),
    "Splash Cymbal": (55,),
}


@dataclass
class DrumRow:
    name: str
    counts: np.ndarray  # [L+1]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def percentages(self) -> np.ndarray | None:
        return None if self.total == 0 else 100.0 * self.counts / self.total


def drum_boundary_distribution(corpus: list[Song], predictions: list[LabelSequence],
                               levels: int = DEFAULT_LEVELS) -> list[DrumRow]:
    """Count downbeats carrying each drum event, bucketed by predicted level.

    A downbeat counts once per row when any drum track has an onset of that
    instrument exactly on the downbeat unit. ``Any`` counts downbeats with
    any drum onset at all.
    """
    if len(corpus) != len(predictions):
        raise ValueError("one prediction per song is required")
    names = ["Any"] + list(DRUM_GROUPS)
    counts = {n: np.zeros(levels + 1, dtype=np.int64) for n in names}
    for song, pred in zip(corpus, predictions):
        if len(pred) != song.grid.num_downbeats:
            raise ValueError(f"song {song.name}: prediction not aligned to downbeats")
        drums = [t for t in song.tracks if t.is_drum]
        if not drums:
            continue
        hits = np.zeros((song.grid.num_downbeats, 128), dtype=bool)
        for t in drums:
            hits |= t.onset_roll[song.grid.downbeat_units]
        labels = np.asarray(pred.labels)
        any_hit = hits.any(axis=1)
        np.add.at(counts["Any"], labels[any_hit], 1)
        for name, pitches in DRUM_GROUPS.items():
            sel = hits[:, list(pitches)].any(axis=1)
            np.add.at(counts[name], labels[sel], 1)
    return [DrumRow(n, counts[n]) for n in names]


def format_drum_tsv(rows: list[DrumRow], levels: int = DEFAULT_LEVELS) -> str:
    out = ["drum\t" + "\t".join(f"L-{l}" for l in range(levels + 1)) + "\tsamples"]
    for row in rows:
        pct = row.percentages
        if pct is None:
            out.append(f"{row.name}\t" + "\t".join("no samples" for _ in range(levels + 1)) + "\t0")
        else:
            out.append(f"{row.name}\t" + "\t".join(f"{v:.2f}" for v in pct) + f"\t{row.total}")
    return "\n".join(out) + "\n"
