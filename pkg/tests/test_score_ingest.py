from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_grid, make_track, six_track_specs
from hiermeter.midi import MidiParseError, TrackSpec, midi_bytes, parse_midi_bytes
from hiermeter.score_ingest import (AnnotationError, FilterCriteria, Score, Track,
                                    extract_downbeat_grid, filter_corpus, format_annotations,
                                    load_annotations, load_downbeat_override, load_midi,
                                    load_song, measure_rest_ratio, parse_annotations,
                                    quantize_track)


# -- load_midi ---------------------------------------------------------------

def test_single_note_round_trip(write_song):
    path = write_song([("Piano", 0, 0, [(0, 480, 60, 100)])])
    score = load_midi(path)
    assert len(score.tracks) == 1
    assert score.tracks[0].notes == [(0, 480, 60, 100)]
    assert score.ticks_per_quarter == 480


def test_missing_tempo_defaults_to_120_bpm(write_song):
    score = load_midi(write_song([("Piano", 0, 0, [(0, 480, 60, 100)])]))
    assert score.tempo_map == [(0, 500000)]
    assert score.meter_map == [(0, 4, 4)]


def test_multitrack_file_flags_drum_channel(write_song):
    score = load_midi(write_song(six_track_specs()))
    assert len(score.tracks) >= 6
    assert [t.is_drum for t in score.tracks].count(True) == 1
    drum = next(t for t in score.tracks if t.is_drum)
    assert drum.channel == 9 and drum.name == "Drums"


def test_tempo_and_meter_events_are_read(write_song):
    path = write_song([("Piano", 0, 5, [(0, 480, 60, 100)])],
                      tempo_map=[(0, 600000), (960, 400000)], meter_map=[(0, 3, 4)])
    score = load_midi(path)
    assert score.tempo_map == [(0, 600000), (960, 400000)]
    assert score.meter_map == [(0, 3, 4)]
    assert score.tracks[0].program == 5


def test_unresolved_note_is_truncated_and_counted(tmp_path):
    # hand-built single-track file: note-on 60 at 0, note-on 62 at 0 with
    # note-off 62 at 480; pitch 60 never closes
    events = bytes([0x00, 0x90, 60, 100, 0x00, 0x90, 62, 100,
                    0x83, 0x60, 0x80, 62, 0, 0x00, 0xFF, 0x2F, 0x00])
    data = (b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big") + (1).to_bytes(2, "big")
            + (480).to_bytes(2, "big") + b"MTrk" + len(events).to_bytes(4, "big") + events)
    path = tmp_path / "open.mid"
    path.write_bytes(data)
    score = load_midi(path)
    assert score.metadata["unresolved_notes"] == 1
    assert (0, 480, 60, 100) in score.tracks[0].notes


def test_running_status_and_velocity_zero_note_off(tmp_path):
    events = bytes([0x00, 0x90, 60, 100, 0x83, 0x60, 60, 0, 0x00, 0xFF, 0x2F, 0x00])
    data = (b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big") + (1).to_bytes(2, "big")
            + (480).to_bytes(2, "big") + b"MTrk" + len(events).to_bytes(4, "big") + events)
    path = tmp_path / "rs.mid"
    path.write_bytes(data)
    assert load_midi(path).tracks[0].notes == [(0, 480, 60, 100)]


def test_malformed_header_names_byte_offset():
    with pytest.raises(MidiParseError) as err:
        parse_midi_bytes(b"MThx" + bytes(10))
    assert err.value.offset == 0
    assert "offset" in str(err.value)


def test_truncated_chunk_names_byte_offset():
    data = midi_bytes([TrackSpec("Piano", 0, 0, [(0, 480, 60, 100)])])
    with pytest.raises(MidiParseError) as err:
        parse_midi_bytes(data[:-5])
    assert err.value.offset > 14


def test_format_2_rejected():
    header = b"MThd" + (6).to_bytes(4, "big") + (2).to_bytes(2, "big") + (1).to_bytes(2, "big") \
        + (480).to_bytes(2, "big")
    with pytest.raises(MidiParseError):
        parse_midi_bytes(header)


# -- extract_downbeat_grid ----------------------------------------------------

def _score(notes, tpq=480, meter_map=None):
    return Score([Track("Piano", 0, 0, False, notes)], [(0, 500000)],
                 meter_map or [(0, 4, 4)], tpq)


def test_grid_four_four_eight_quarters():
    grid = extract_downbeat_grid(_score([(0, 8 * 480, 60, 90)]))
    assert grid.unit_ticks == 120
    assert grid.downbeat_units.tolist() == [0, 16]
    assert grid.total_units == 32


def test_grid_meter_change_spacing():
    # two bars of 4/4, then 3/4
    score = _score([(0, 2 * 1920 + 3 * 1440, 60, 90)], meter_map=[(0, 4, 4), (3840, 3, 4)])
    grid = extract_downbeat_grid(score)
    assert np.diff(grid.downbeat_units).tolist() == [16, 16, 12, 12]


def test_grid_pickup_measure():
    # a 1/4 pickup bar followed by 4/4
    score = _score([(0, 480 + 2 * 1920, 60, 90)], meter_map=[(0, 1, 4), (480, 4, 4)])
    grid = extract_downbeat_grid(score)
    assert grid.downbeat_units[0] == 0
    assert 0 < grid.downbeat_units[1] < 16


def test_grid_odd_ticks_per_quarter_does_not_drift():
    # tpq 95 is not divisible by 4: 100 bars must still land on multiples of 16 units
    score = _score([(0, 100 * 4 * 95, 60, 90)], tpq=95)
    grid = extract_downbeat_grid(score)
    assert grid.unit_ticks == Fraction(95, 4)
    assert grid.downbeat_units.tolist() == list(range(0, 1600, 16))


def test_grid_zero_meter_rejected():
    with pytest.raises(ValueError):
        extract_downbeat_grid(_score([(0, 480, 60, 90)], meter_map=[(0, 0, 4)]))


meters = st.lists(st.tuples(st.integers(1, 8000), st.integers(1, 12), st.sampled_from([2, 4, 8, 16])),
                  max_size=5)


@given(first=st.tuples(st.integers(1, 12), st.sampled_from([2, 4, 8])), changes=meters,
       end=st.integers(1, 40000), tpq=st.sampled_from([96, 95, 480, 384]))
def test_downbeats_strictly_increasing(first, changes, end, tpq):
    meter_map = [(0, *first)] + sorted({t: (t, n, d) for t, n, d in changes}.values())
    grid = extract_downbeat_grid(_score([(0, end, 60, 90)], tpq=tpq, meter_map=meter_map))
    assert grid.num_downbeats >= 1
    assert np.all(np.diff(grid.downbeat_units) > 0)
    assert grid.downbeat_units[-1] < grid.total_units


def test_downbeat_override(tmp_path):
    grid = make_grid(4)
    path = tmp_path / "db.txt"
    path.write_text("0\n12\n30\n")
    assert load_downbeat_override(path, grid).downbeat_units.tolist() == [0, 12, 30]


# -- quantize_track -----------------------------------------------------------

def test_onset_snaps_to_nearest_unit():
    q = quantize_track(Track("P", 0, 0, False, [(119, 240, 60, 90)]), make_grid(1))
    assert np.flatnonzero(q.onset_roll[:, 60]).tolist() == [1]


def test_exact_half_rounds_down():
    q = quantize_track(Track("P", 0, 0, False, [(60, 240, 60, 90)]), make_grid(1))
    assert np.flatnonzero(q.onset_roll[:, 60]).tolist() == [0]


def test_empty_track_gives_zero_rolls():
    q = quantize_track(Track("P", 0, 0, False, []), make_grid(2))
    assert not q.piano_roll.any() and not q.onset_roll.any()
    assert q.piano_roll.shape == (32, 128)


def test_short_note_gets_one_unit():
    q = quantize_track(Track("P", 0, 0, False, [(240, 30, 64, 90)]), make_grid(1))
    assert np.flatnonzero(q.piano_roll[:, 64]).tolist() == [2]


def test_drum_span_is_one_unit():
    q = quantize_track(Track("D", 9, 0, True, [(0, 960, 36, 90)]), make_grid(1))
    assert np.flatnonzero(q.piano_roll[:, 36]).tolist() == [0]


def test_features_stack_piano_and_onset():
    q = make_track(16, onsets=[3], length=4)
    f = q.features()
    assert f.shape == (16, 256)
    assert f[3:7, 60].tolist() == [1, 1, 1, 1] and f[3, 188] == 1 and f[4, 188] == 0


notes_strategy = st.lists(st.tuples(st.integers(0, 4000), st.integers(1, 2000),
                                    st.integers(0, 127), st.integers(1, 127)), max_size=40)


@given(notes=notes_strategy, is_drum=st.booleans())
def test_onsets_inside_piano_roll(notes, is_drum):
    q = quantize_track(Track("T", 9 if is_drum else 0, 0, is_drum, sorted(notes)), make_grid(2))
    assert q.onset_roll.shape == q.piano_roll.shape
    assert not np.any(q.onset_roll & ~q.piano_roll)


# -- annotations --------------------------------------------------------------

def test_annotation_rows_parse_in_order(tmp_path):
    path = tmp_path / "a.tsv"
    path.write_text("downbeat_index\tlabel\n0\t2\n1\t0\n2\t1\n3\t0\n")
    assert load_annotations(path, make_grid(4)).labels == (2, 0, 1, 0)


def test_all_zero_annotation_is_valid():
    seq = parse_annotations("downbeat_index\tlabel\n" + "".join(f"{i}\t0\n" for i in range(6)), 6)
    assert seq.labels == (0,) * 6


def test_label_out_of_range_names_row():
    with pytest.raises(AnnotationError, match="row 2"):
        parse_annotations("downbeat_index\tlabel\n0\t1\n1\t5\n", 2)


def test_row_count_mismatch_reports_both_counts():
    with pytest.raises(AnnotationError, match="3 rows.*4 downbeats"):
        parse_annotations("downbeat_index\tlabel\n0\t1\n1\t0\n2\t0\n", 4)


def test_non_integer_field_is_an_annotation_error():
    with pytest.raises(AnnotationError, match="row 1"):
        parse_annotations("downbeat_index\tlabel\n0\tx\n")


def test_annotation_format_round_trip():
    text = "downbeat_index\tlabel\n0\t4\n1\t0\n2\t1\n"
    assert format_annotations(parse_annotations(text)) == text


# -- measure_rest_ratio -------------------------------------------------------

def test_rest_ratio_half():
    grid = make_grid(4)
    assert measure_rest_ratio(make_track(64, onsets=[0, 16]), grid) == 0.5


def test_rest_ratio_fully_active():
    grid = make_grid(4)
    assert measure_rest_ratio(make_track(64, onsets=[0, 20, 33, 60]), grid) == 0.0


def test_rest_ratio_three_of_eight():
    grid = make_grid(8)
    ratio = measure_rest_ratio(make_track(128, onsets=[0, 16, 32, 48, 64]), grid)
    assert ratio == 0.375 and ratio > 1 / 3


@given(a=st.sets(st.integers(0, 127), max_size=20), b=st.sets(st.integers(0, 127), max_size=20))
def test_rest_ratio_bounded_and_monotone(a, b):
    grid = make_grid(8)
    before = measure_rest_ratio(make_track(128, onsets=sorted(a)), grid)
    after = measure_rest_ratio(make_track(128, onsets=sorted(a | b)), grid)
    assert 0.0 <= after <= before <= 1.0


# -- filter_corpus ------------------------------------------------------------

def test_filter_keeps_six_tracks_with_drum_and_melody(write_song, tmp_path):
    keep = write_song(six_track_specs(), "keep.mid")
    write_song(six_track_specs(count=5), "five.mid")
    write_song(six_track_specs(melody_name="Lead"), "nomelody.mid")
    result = filter_corpus(tmp_path, FilterCriteria())
    assert result.kept == [keep]
    assert len(result.rejected) == 2


def test_filter_rejects_five_tracks(write_song, tmp_path):
    write_song(six_track_specs(count=5), "five.mid")
    assert filter_corpus(tmp_path, FilterCriteria(min_tracks=6)).kept == []


def test_filter_matches_vocal_case_insensitively(write_song, tmp_path):
    path = write_song(six_track_specs(melody_name="LEAD VOCAL"), "v.mid")
    assert filter_corpus(tmp_path, FilterCriteria()).kept == [path]


def test_filter_dedupes_by_group_key(write_song, tmp_path):
    a = write_song(six_track_specs(), "a.mid")
    write_song(six_track_specs(), "b.mid")
    result = filter_corpus(tmp_path, FilterCriteria(group_key=lambda p: "same"))
    assert result.kept == [a]


def test_filter_skips_unreadable_files(write_song, tmp_path):
    keep = write_song(six_track_specs(), "ok.mid")
    (tmp_path / "broken.mid").write_bytes(b"not midi")
    result = filter_corpus(tmp_path, FilterCriteria())
    assert result.kept == [keep]
    assert [p.name for p in result.skipped] == ["broken.mid"]


def test_filter_is_idempotent(write_song, tmp_path):
    for k in range(3):
        write_song(six_track_specs(with_drum=k != 1), f"s{k}.mid")
    first = filter_corpus(tmp_path, FilterCriteria())
    second = filter_corpus(tmp_path, FilterCriteria())
    assert first == second


def test_filter_missing_root_raises(tmp_path):
    with pytest.raises(NotADirectoryError):
        filter_corpus(tmp_path / "absent", FilterCriteria())


def test_load_song_aligns_labels(write_song, tmp_path):
    path = write_song(six_track_specs())
    ann = tmp_path / "song.tsv"
    ann.write_text("downbeat_index\tlabel\n0\t2\n1\t0\n2\t1\n3\t0\n")
    song = load_song(path, ann)
    assert song.grid.num_downbeats == 4
    assert song.labels.labels == (2, 0, 1, 0)
    assert song.name == "song"
