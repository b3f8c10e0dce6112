"""Synthetic multi-track songs with a planted metrical hierarchy.

Every song is generated from its label sequence. Musical cues are tied to
boundary levels: chord changes and melodic cadences mark level-1
hypermeasures, crashes and string re-attacks mark level 2, the drum fill
before a boundary grows with its level, and the arrangement texture is
redrawn at every level-2 hypermeasure, so self-similarity alone cannot
tell level-2 from higher boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrical_structure import DEFAULT_LEVELS, LabelSequence, binary_template
from .midi import TrackSpec, write_midi
from .score_ingest import (DRUM_CHANNEL, Score, Song, Track, extract_downbeat_grid,
                           format_annotations, quantize_track)

UNITS_PER_MEASURE = 16
SECTION_MEASURES = 2 ** DEFAULT_LEVELS

KICK, SNARE, CLOSED_HAT, OPEN_HAT, CRASH, RIDE, SPLASH = 36, 38, 42, 46, 49, 51, 55
TOMS = (50, 48, 45, 43)
MAJOR = (0, 2, 4, 5, 7, 9, 11)
PROGRESSIONS = ((0, 4), (5, 3), (0, 3), (3, 4), (5, 4), (1, 4))  # scale-degree pairs
GROOVES = ("hat8", "hat16", "ride8", "half")


@dataclass(frozen=True)
class SynthConfig:
    ticks_per_quarter: int = 480
    min_sections: int = 2
    max_sections: int = 3
    lead_ins: tuple[int, ...] = (0, 0, 2, 4, 8)  # measures before the first section
    crash_min_level: int = 2
    fill_prob: float = 0.9
    note_drop: float = 0.05
    texture_change: str = "level2"  # or "level4": one texture per section


@dataclass
class Irregularity:
    """Where a measure was inserted into or deleted from a level-1 hypermeasure."""

    kind: str  # 'insert' or 'delete'
    start: int  # downbeat opening the irregular level-1 hypermeasure
    end: int  # downbeat closing it
    level: int = 1

    @property
    def hypermeter(self) -> int:
        return self.end - self.start


@dataclass
class SynthSong:
    name: str
    score: Score
    labels: LabelSequence
    irregularity: Irregularity | None = None

    def to_song(self) -> Song:
        grid = extract_downbeat_grid(self.score)
        if grid.num_downbeats != len(self.labels):
            raise RuntimeError(f"{self.name}: grid has {grid.num_downbeats} downbeats, "
                               f"labels {len(self.labels)}")
        return Song(self.name, [quantize_track(t, grid) for t in self.score.tracks], grid,
                    self.labels)


def planted_labels(rng: np.random.Generator, num_sections: int, lead_in: int = 0,
                   irregular: str | None = None) -> tuple[list[int], Irregularity | None]:
    n = lead_in + num_sections * SECTION_MEASURES
    labels = list(binary_template(n, DEFAULT_LEVELS, (SECTION_MEASURES - lead_in) % SECTION_MEASURES))
    if irregular is None:
        return labels, None
    # pick a level-1 hypermeasure away from the song edges
    starts = [i for i in range(4, n - 6) if labels[i] >= 1]
    j = int(rng.choice(starts))
    if irregular == "insert":
        labels.insert(j + 1, 0)
        return labels, Irregularity("insert", j, j + 3)
    if irregular == "delete":
        del labels[j + 1]
        return labels, Irregularity("delete", j, j + 1)
    raise ValueError(f"unknown irregularity {irregular!r}")


@dataclass(frozen=True)
class _Texture:
    groove: str
    progression: tuple[int, int]
    register: int
    guitar: bool
    strings: bool
    motif: tuple[tuple[int, int], ...]  # (unit, scale step)


def _random_texture(rng: np.random.Generator) -> _Texture:
    n_notes = int(rng.integers(4, 7))
    units = sorted(rng.choice(np.arange(0, 16, 2), size=n_notes, replace=False).tolist())
    steps = rng.integers(0, 7, size=n_notes).tolist()
    return _Texture(
        groove=str(rng.choice(GROOVES)),
        progression=PROGRESSIONS[int(rng.integers(len(PROGRESSIONS)))],
        register=int(rng.choice([0, 12])),
        guitar=bool(rng.random() < 0.6),
        strings=bool(rng.random() < 0.6),
        motif=tuple(zip(units, steps)),
    )


def _scale_pitch(key: int, step: int) -> int:
    return key + 12 * (step // 7) + MAJOR[step % 7]


def render(labels: list[int], rng: np.random.Generator, config: SynthConfig = SynthConfig(),
           max_level: int = DEFAULT_LEVELS) -> Score:
    """Arrange six tracks (melody, drums, bass, pad, guitar, strings) over ``labels``."""
    unit = config.ticks_per_quarter // 4
    n = len(labels)
    key = int(rng.integers(0, 12))
    notes = {name: [] for name in ("Melody", "Drums", "Bass", "Pad", "Guitar", "Strings")}

    def add(track, measure, u, length, pitch, vel=90):
        if track != "Drums" and rng.random() < config.note_drop:
            return
        notes[track].append(((measure * UNITS_PER_MEASURE + u) * unit, max(length, 1) * unit,
                             int(pitch), int(np.clip(vel + rng.integers(-10, 11), 1, 127))))

    texture_level = 2 if config.texture_change == "level2" else max_level
    texture = _random_texture(rng)
    chord_idx = 0
    l1_len = 1
    for i in range(n):
        level = labels[i]
        nxt = labels[i + 1] if i + 1 < n else max_level
        if i > 0 and level >= texture_level:
            texture = _random_texture(rng)
        if level >= 2 or i == 0:
            chord_idx = 0
        elif level >= 1:
            chord_idx += 1
        if level >= 1 or i == 0:
            l1_len = 1
            j = i + 1
            while j < n and labels[j] < 1:
                l1_len, j = l1_len + 1, j + 1
        degree = texture.progression[chord_idx % 2]
        root = _scale_pitch(key + 36, degree)
        triad = [_scale_pitch(key + 60, degree + k) for k in (0, 2, 4)]
        closes_l1 = nxt >= 1

        # melody: motif, ending in a held cadence before a level-1 boundary
        mel_key = key + 60 + texture.register
        if closes_l1:
            add("Melody", i, 0, 2, _scale_pitch(mel_key, texture.motif[0][1]), 100)
            add("Melody", i, 2, 2, _scale_pitch(mel_key, texture.motif[-1][1]), 95)
            add("Melody", i, 4, 12, _scale_pitch(mel_key, degree), 95)
        else:
            motif = texture.motif
            for k, (u, step) in enumerate(motif):
                stop = motif[k + 1][0] if k + 1 < len(motif) else 16
                add("Melody", i, u, stop - u, _scale_pitch(mel_key, step), 100)

        # bass: root pattern
        for u in (0, 6, 8, 14):
            add("Bass", i, u, 2, root, 100)

        # pad: chord re-attacked at each level-1 hypermeasure
        if level >= 1 or i == 0:
            for p in triad:
                add("Pad", i, 0, UNITS_PER_MEASURE * l1_len, p - 12, 70)

        if texture.guitar:
            for u in (2, 6, 10, 14):
                for p in triad:
                    add("Guitar", i, u, 1, p, 75)

        if texture.strings and (level >= 2 or i == 0):
            span = 0
            j = i
            while True:
                span += 1
                j += 1
                if j >= n or labels[j] >= 2:
                    break
            for p in (triad[0] + 12, triad[2] + 12):
                add("Strings", i, 0, UNITS_PER_MEASURE * span, p, 65)

        # drums
        fill_from = 16
        if nxt >= 1 and rng.random() < config.fill_prob:
            fill_from = {1: 12, 2: 8}.get(nxt, 0) if nxt < 3 else 0
        for u in range(16):
            if u >= fill_from:
                if u == 0:
                    add("Drums", i, u, 1, KICK, 110)
                pitch = SNARE if nxt <= 1 else TOMS[(u - fill_from) * len(TOMS) // (16 - fill_from)]
                add("Drums", i, u, 1, pitch, 80 + 2 * (u - fill_from))
                continue
            if u in (0, 8) or (texture.groove != "half" and u in (10,)):
                add("Drums", i, u, 1, KICK, 110)
            if u in (4, 12) and texture.groove != "half" or (texture.groove == "half" and u == 8):
                add("Drums", i, u, 1, SNARE, 105)
            if texture.groove == "hat16" or (texture.groove in ("hat8", "half") and u % 2 == 0):
                add("Drums", i, u, 1, CLOSED_HAT, 70)
            elif texture.groove == "ride8" and u % 2 == 0:
                add("Drums", i, u, 1, RIDE, 70)
        if level >= config.crash_min_level:
            add("Drums", i, 0, 1, CRASH, 115)
        if level >= 3 and config.crash_min_level <= 3:
            add("Drums", i, 0, 1, SPLASH, 100)

    programs = {"Melody": 73, "Drums": 0, "Bass": 33, "Pad": 89, "Guitar": 26, "Strings": 48}
    tracks = []
    for ch, (name, evts) in enumerate(notes.items()):
        channel = DRUM_CHANNEL if name == "Drums" else (ch if ch < DRUM_CHANNEL else ch + 1)
        tracks.append(Track(name, channel, programs[name], name == "Drums", sorted(evts)))
    # trailing silence guard: make the grid cover the whole last measure
    end = n * UNITS_PER_MEASURE * unit
    if max(o + d for t in tracks for o, d, _, _ in t.notes) < end:
        tracks[3].notes.append((end - unit, unit, key + 48, 1))
    return Score(tracks, [(0, 500000)], [(0, 4, 4)], config.ticks_per_quarter)


def generate_song(seed: int, irregular: str | None = None, config: SynthConfig = SynthConfig(),
                  name: str | None = None) -> SynthSong:
    rng = np.random.default_rng(seed)
    num_sections = int(rng.integers(config.min_sections, config.max_sections + 1))
    lead_in = int(rng.choice(config.lead_ins))
    labels, irr = planted_labels(rng, num_sections, lead_in, irregular)
    score = render(labels, rng, config)
    return SynthSong(name or f"synth_{seed:04d}", score, LabelSequence(labels), irr)


def generate_corpus(num_regular: int = 20, irregular: tuple[str, ...] = ("insert", "delete"),
                    seed: int = 0, config: SynthConfig = SynthConfig()) -> list[SynthSong]:
    """``num_regular`` binary-regular songs followed by one song per irregularity kind."""
    songs = [generate_song(seed * 1000 + k, None, config, f"synth_{k:03d}") for k in range(num_regular)]
    for j, kind in enumerate(irregular):
        k = num_regular + j
        songs.append(generate_song(seed * 1000 + k, kind, config, f"synth_{k:03d}_{kind}"))
    return songs


def write_corpus(songs: list[SynthSong], midi_dir, annotation_dir) -> None:
    midi_dir, annotation_dir = Path(midi_dir), Path(annotation_dir)
    midi_dir.mkdir(parents=True, exist_ok=True)
    annotation_dir.mkdir(parents=True, exist_ok=True)
    for s in songs:
        specs = [TrackSpec(t.name, t.channel, t.program,
                           [(o, d, p, v) for o, d, p, v in t.notes]) for t in s.score.tracks]
        write_midi(midi_dir / f"{s.name}.mid", specs, s.score.ticks_per_quarter,
                   s.score.tempo_map, s.score.meter_map)
        (annotation_dir / f"{s.name}.tsv").write_text(format_annotations(s.labels))
