from __future__ import annotations

import os
import subprocess
import sys

import pytest

from conftest import six_track_specs
from hiermeter.cli import main
from hiermeter.emission_net import load_params
from hiermeter.metrical_structure import binary_template, boundary_set
from hiermeter.score_ingest import parse_annotations


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", str(out), "--num-regular", "6", "--seed", "2"]) == 0
    return out


def _names(corpus):
    return sorted(p.stem for p in (corpus / "midi").iterdir())


def _layered_midi(write_song, name="layered.mid", num_measures=33, lead_in=1):
    """Two tracks whose pitch changes every 2 and every 4 measures."""
    tracks = []
    for k, (period, base) in enumerate(((2, 40), (4, 60))):
        notes = [(m * 1920 + q * 480, 240, base + 2 * (((m + lead_in) // period) % 5), 90)
                 for m in range(num_measures) for q in range(4)]
        tracks.append((f"t{k}", k, 0, notes))
    return write_song(tracks, name=name)


# -- analyze ------------------------------------------------------------------

def test_analyze_is_deterministic(corpus, tmp_path):
    midi = corpus / "midi" / f"{_names(corpus)[0]}.mid"
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    assert main(["analyze", str(midi), "--out", str(a)]) == 0
    assert main(["analyze", str(midi), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "downbeat_index\tlabel"


def test_rule_analyze_recovers_periodic_levels(write_song, tmp_path):
    midi = _layered_midi(write_song)
    out = tmp_path / "pred.tsv"
    assert main(["analyze", str(midi), "--model", "rule", "--out", str(out)]) == 0
    labels = parse_annotations(out.read_text())
    ref = binary_template(33, offset=1)
    for level in (1, 2):
        assert boundary_set(labels, level) == boundary_set(ref, level)


def test_analyze_dots_and_states(corpus, tmp_path):
    midi = corpus / "midi" / f"{_names(corpus)[0]}.mid"
    out, states = tmp_path / "p.tsv", tmp_path / "s.tsv"
    assert main(["analyze", str(midi), "--dots", "--states", str(states), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "downbeat_index\tlabel\tdots"
    index, label, dots = rows[1].split("\t")
    assert dots == "." * (int(label) + 1)
    srows = states.read_text().splitlines()
    assert srows[0] == "downbeat_index\tstate\tlabel" and srows[-1].startswith("# log_score\t")
    assert len(srows) == len(rows) + 1


def test_analyze_missing_file_exits_one(tmp_path, capsys):
    out = tmp_path / "out.tsv"
    assert main(["analyze", str(tmp_path / "nope.mid"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "nope.mid" in capsys.readouterr().err


def test_analyze_net_without_params_is_config_error(corpus):
    midi = corpus / "midi" / f"{_names(corpus)[0]}.mid"
    assert main(["analyze", str(midi), "--model", "net"]) == 2


def test_analyze_weight_flags(corpus, tmp_path):
    midi = corpus / "midi" / f"{_names(corpus)[0]}.mid"
    wfile = tmp_path / "w.txt"
    wfile.write_text("w_del.1=2.5\nw_ins.4=0.5\n")
    assert main(["analyze", str(midi), "--weights", str(wfile), "--w-del", "1,2,3,4"]) == 0
    wfile.write_text("w_del.9=1\n")
    assert main(["analyze", str(midi), "--weights", str(wfile)]) == 2
    assert main(["analyze", str(midi), "--w-del", "1,2"]) == 2
    assert main(["analyze", str(midi), "--w-ins", "0"]) == 2


# -- train --------------------------------------------------------------------

def _train_args(corpus, tmp_path, tag, seed=0, train=None, val=None):
    names = _names(corpus)
    (tmp_path / "train.txt").write_text("\n".join(train or names[:3]) + "\n")
    (tmp_path / "val.txt").write_text("\n".join(val or names[3:4]) + "\n")
    return ["train", str(corpus / "midi"), str(corpus / "annotations"),
            "--train-list", str(tmp_path / "train.txt"), "--val-list", str(tmp_path / "val.txt"),
            "--out", str(tmp_path / f"{tag}.npz"), "--epochs", "1", "--max-steps", "2",
            "--batch-size", "2", "--window-units", "64", "--seed", str(seed)]


def test_train_writes_loadable_checkpoint(corpus, tmp_path):
    assert main(_train_args(corpus, tmp_path, "m")) == 0
    params = load_params(tmp_path / "m.npz")
    assert params.config.num_blocks == 6
    log = (tmp_path / "m.log.tsv").read_text().splitlines()
    assert log[0] == "step\tloss\tval_loss" and len(log) >= 2


def test_train_same_seed_same_log(corpus, tmp_path):
    assert main(_train_args(corpus, tmp_path, "a", seed=7)) == 0
    assert main(_train_args(corpus, tmp_path, "b", seed=7)) == 0
    assert (tmp_path / "a.log.tsv").read_bytes() == (tmp_path / "b.log.tsv").read_bytes()
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_train_overlapping_splits_exit_two(corpus, tmp_path):
    names = _names(corpus)
    args = _train_args(corpus, tmp_path, "x", train=names[:2], val=names[1:3])
    assert main(args) == 2
    assert not (tmp_path / "x.npz").exists()


def test_trained_model_can_analyze(corpus, tmp_path):
    assert main(_train_args(corpus, tmp_path, "m")) == 0
    midi = corpus / "midi" / f"{_names(corpus)[0]}.mid"
    out = tmp_path / "p.tsv"
    assert main(["analyze", str(midi), "--params", str(tmp_path / "m.npz"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) > 1


# -- evaluate -------------------------------------------------------------------

def test_evaluate_reference_scores_one(corpus, capsys):
    assert main(["evaluate", str(corpus / "midi"), str(corpus / "annotations"),
                 "--model", "reference"]) == 0
    out = capsys.readouterr().out
    assert out.count("1.0000 ± 0.0000") == 4


def test_evaluate_oracle_on_regular_songs(corpus, tmp_path, capsys):
    regular = [n for n in _names(corpus) if "insert" not in n and "delete" not in n]
    songs = tmp_path / "songs.txt"
    songs.write_text("\n".join(regular) + "\n")
    assert main(["evaluate", str(corpus / "midi"), str(corpus / "annotations"), "--model", "oracle",
                 "--songs", str(songs), "--per-song"]) == 0
    out = capsys.readouterr().out
    assert out.count("1.0000 ± 0.0000") == 4
    assert all(line.endswith("1.0000\t1.0000\t1.0000\t1.0000")
               for line in out.splitlines() if line.startswith("synth_"))


def test_evaluate_all_songs_failing_exits_one(corpus, tmp_path, capsys):
    songs = tmp_path / "songs.txt"
    songs.write_text("missing_song\n")
    assert main(["evaluate", str(corpus / "midi"), str(corpus / "annotations"),
                 "--songs", str(songs)]) == 1
    assert "missing_song" in capsys.readouterr().err


# -- stats ----------------------------------------------------------------------

def test_stats_empty_corpus_prints_header(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    (tmp_path / "ann").mkdir()
    assert main(["stats", str(tmp_path / "empty"), "--kind", "drums",
                 "--annotations", str(tmp_path / "ann")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "drum\tL-0\tL-1\tL-2\tL-3\tL-4\tsamples"
    assert len(out) == 1


def test_stats_confidence_needs_params(corpus):
    assert main(["stats", str(corpus / "midi")]) == 2


def test_stats_drums_from_annotations(corpus, capsys):
    assert main(["stats", str(corpus / "midi"), "--kind", "drums",
                 "--annotations", str(corpus / "annotations")]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[1].startswith("Any\t")


# -- filter ---------------------------------------------------------------------

def _filter_tree(tmp_path, write_song):
    root = tmp_path / "root"
    root.mkdir()
    keep = write_song(six_track_specs(), name="root/keep.mid")
    write_song(six_track_specs(with_drum=False), name="root/nodrum.mid")
    write_song(six_track_specs(count=5), name="root/five.mid")
    return root, keep


def test_filter_prints_passing_file(tmp_path, write_song, capsys):
    root, keep = _filter_tree(tmp_path, write_song)
    assert main(["filter", str(root)]) == 0
    first = capsys.readouterr().out
    assert first == f"{keep}\n"
    assert main(["filter", str(root)]) == 0
    assert capsys.readouterr().out == first


def test_filter_flags(tmp_path, write_song, capsys):
    root, _ = _filter_tree(tmp_path, write_song)
    assert main(["filter", str(root), "--min-tracks", "5", "--no-require-drum"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["filter", str(root), "--name-contains", "bassoon"]) == 0
    assert capsys.readouterr().out == ""


def test_filter_unreadable_root_exits_one(tmp_path):
    assert main(["filter", str(tmp_path / "missing")]) == 1


# -- config and help -------------------------------------------------------------

def test_config_file_supplies_defaults_and_flags_win(tmp_path, write_song, capsys):
    root, _ = _filter_tree(tmp_path, write_song)
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# relaxed\nmin-tracks = 5\nrequire_drum = false\n")
    assert main(["--config", str(cfg), "filter", str(root)]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["--config", str(cfg), "filter", str(root), "--min-tracks", "6"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2  # drum still not required


def test_config_unknown_key_exits_two(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("min_trakcs=5\n")
    assert main(["--config", str(cfg), "filter", str(tmp_path)]) == 2
    assert "min_trakcs" in capsys.readouterr().err


def test_config_can_satisfy_required_options(corpus, tmp_path):
    args = _train_args(corpus, tmp_path, "c")
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(f"train-list={tmp_path / 'train.txt'}\nval-list={tmp_path / 'val.txt'}\n")
    drop = args.index("--train-list")
    args = args[:drop] + args[drop + 4:]
    assert main(["--config", str(cfg)] + args) == 0


def test_help_shows_defaults(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "(default: 0.0001)" in out and "(default: 16)" in out


def test_bad_usage_exits_two():
    assert main(["evaluate"]) == 2
    assert main(["analyze", "x.mid", "--model", "magic"]) == 2


def test_module_entry_point(tmp_path):
    env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
    proc = subprocess.run([sys.executable, "-m", "hiermeter", "filter", str(tmp_path / "none")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1 and "input error" in proc.stderr
