from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hiermeter.midi import TrackSpec, write_midi
from hiermeter.score_ingest import DownbeatGrid, QuantizedTrack, Song

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def write_song(tmp_path):
    """Write a format-1 MIDI file from ``(name, channel, program, notes)`` tuples."""

    def _write(tracks, name="song.mid", tpq=480, tempo_map=None, meter_map=None):
        path = tmp_path / name
        write_midi(path, [TrackSpec(*t) for t in tracks], tpq, tempo_map, meter_map)
        return path

    return _write


def six_track_specs(with_drum=True, melody_name="Melody", count=6):
    """Tracks of one note per measure over 4 measures (tpq 480)."""
    names = [melody_name, "Bass", "Pad", "Guitar", "Strings", "Drums"][:count]
    specs = []
    for k, name in enumerate(names):
        drum = with_drum and name == "Drums"
        channel = 9 if drum else k
        notes = [(m * 1920, 480, 36 if drum else 60 + k, 90) for m in range(4)]
        specs.append((name, channel, 0, notes))
    return specs


def make_grid(num_measures: int, measure_units: int = 16) -> DownbeatGrid:
    from fractions import Fraction

    return DownbeatGrid(Fraction(120), np.arange(num_measures) * measure_units,
                        num_measures * measure_units)


def make_track(total_units: int, onsets=(), is_drum=False, name="Piano", program=0,
               pitch=60, length=1) -> QuantizedTrack:
    piano = np.zeros((total_units, 128), dtype=bool)
    onset = np.zeros((total_units, 128), dtype=bool)
    for u in onsets:
        onset[u, pitch] = True
        piano[u:u + (1 if is_drum else length), pitch] = True
    return QuantizedTrack(piano, onset, is_drum, name, program)


def random_song(rng: np.random.Generator, num_measures=8, num_tracks=2, labels=None,
                density=0.2) -> Song:
    grid = make_grid(num_measures)
    tracks = []
    for t in range(num_tracks):
        onset = rng.random((grid.total_units, 128)) < density / 16
        tracks.append(QuantizedTrack(onset.copy(), onset, t == num_tracks - 1 and num_tracks > 1,
                                     f"track{t}", t))
    return Song("random", tracks, grid, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
