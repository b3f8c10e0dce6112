"""Command-line entry point: analyze, train, evaluate, stats, filter.

Every flag can also be set in a flat ``key=value`` config file passed with
``--config``; keys are the long flag names with dashes written as
underscores (``min_tracks=6``).
Flags override the file, and the file overrides the built-in defaults.

Exit codes: 0 success, 1 input error (unreadable or malformed data),
2 configuration error (bad flags, config keys or missing parameters).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .baselines import oracle_labels, rule_emissions
from .crf_decoder import BASELINE_WEIGHTS, DEFAULT_WEIGHTS, CrfWeights, viterbi
from .emission_net import (PRESETS, CheckpointError, EmissionSequence, NetConfig, TrainConfig,
                           TrainingError, load_params, save_emissions, save_params, train)
from .emission_net.checkpoint import atomic_write_bytes
from .emission_net.network import forward_track, fuse_tracks
from .evaluation import (AblationSpec, confidence_stats, drum_boundary_distribution,
                         evaluate_split, format_confidence_tsv, format_drum_tsv)
from .metrical_structure import to_dot_notation
from .midi import MidiParseError
from .score_ingest import (DEFAULT_NAME_PATTERNS, MIDI_SUFFIXES, AnnotationError, FilterCriteria, Song, filter_corpus,
                           format_annotations, load_song)

log = logging.getLogger("hiermeter")


class InputError(Exception):
    """Unreadable or malformed input data (exit code 1)."""


class ConfigError(Exception):
    """Invalid configuration (exit code 2)."""


_INPUT_ERRORS = (OSError, MidiParseError, AnnotationError, CheckpointError)


# -- helpers -----------------------------------------------------------------

def _write_text(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write_bytes(Path(out), text.encode())


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _weight_list(text: str) -> tuple[float, ...]:
    """``"2.0"`` or a comma-separated value per level."""
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight list {text!r}") from None
    if any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError("CRF weights must be strictly positive")
    return values


def _weights_file(path, base: CrfWeights) -> CrfWeights:
    """Read ``w_del.<level>=value`` / ``w_ins.<level>=value`` lines over ``base``."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read weights file {path}: {exc}") from exc
    table = {"w_del": list(base.w_del), "w_ins": list(base.w_ins)}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        name, _, level = key.partition(".")
        try:
            k = int(level) - 1
            if name not in table or not 0 <= k < base.levels:
                raise ValueError
            table[name][k] = float(value)
        except ValueError:
            raise ConfigError(f"{path}:{number}: expected w_del.<1..{base.levels}>=x "
                              f"or w_ins.<1..{base.levels}>=x, got {raw!r}") from None
    try:
        return CrfWeights(table["w_del"], table["w_ins"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _resolve_weights(args, base: CrfWeights) -> CrfWeights:
    """Model default, then ``--weights`` file, then ``--w-del``/``--w-ins``."""
    if args.weights is not None:
        base = _weights_file(args.weights, base)

    def expand(values, fallback):
        if values is None:
            return fallback
        if len(values) == 1:
            return values * base.levels
        if len(values) != base.levels:
            raise ConfigError(f"expected 1 or {base.levels} weights, got {len(values)}")
        return values

    return CrfWeights(expand(args.w_del, base.w_del), expand(args.w_ins, base.w_ins))


def _read_list(path) -> list[str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read list {path}: {exc}") from exc
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def _midi_files(corpus_dir) -> dict[str, Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise InputError(f"corpus directory {root} is not readable")
    files = {}
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES:
            files.setdefault(p.stem, p)
    return files


def _load_corpus(corpus_dir, annotations_dir=None, names=None,
                 require_labels=False) -> tuple[list[Song], list[tuple[str, str]]]:
    """Load songs in name order; failures are returned instead of raised."""
    files = _midi_files(corpus_dir)
    if names is None:
        names = sorted(files)
    songs, errors = [], []
    for name in names:
        if name not in files:
            errors.append((name, "MIDI file not found"))
            continue
        ann = None
        if annotations_dir is not None:
            ann = Path(annotations_dir) / f"{name}.tsv"
            if not ann.is_file():
                if require_labels:
                    errors.append((name, f"annotation file {ann} not found"))
                    continue
                ann = None
        try:
            songs.append(load_song(files[name], ann))
        except _INPUT_ERRORS as exc:
            errors.append((name, str(exc)))
        except ValueError as exc:
            errors.append((name, str(exc)))
    return songs, errors


def _load_params_or_fail(path):
    if path is None:
        return None
    try:
        return load_params(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"parameter file {path} not found") from exc


def _net_emissions(params, song: Song) -> EmissionSequence:
    return fuse_tracks([forward_track(params, t, song.grid, "eval") for t in song.tracks])


# -- subcommands -------------------------------------------------------------

def cmd_analyze(args) -> int:
    params = _load_params_or_fail(args.params)
    model = args.model
    if model == "auto":
        model = "net" if params is not None else "rule"
    if model == "net" and params is None:
        raise ConfigError("--model net needs --params")
    path = Path(args.midi)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    song = load_song(path, downbeat_path=args.downbeats)
    if not song.tracks:
        raise InputError(f"{path}: no note-bearing tracks")
    if model == "net":
        emissions, base = _net_emissions(params, song), DEFAULT_WEIGHTS
    else:
        emissions, base = rule_emissions(song.tracks, song.grid), BASELINE_WEIGHTS
    result = viterbi(emissions, _resolve_weights(args, base))
    labels = result.labels
    text = format_annotations(labels)
    if args.dots:
        rows = text.rstrip("\n").split("\n")
        dots = to_dot_notation(labels)
        text = "\n".join([rows[0] + "\tdots"] + [r + "\t" + d for r, d in zip(rows[1:], dots)]) + "\n"
    if args.emissions:
        save_emissions(emissions, args.emissions)
    if args.states:
        rows = ["downbeat_index\tstate\tlabel"]
        rows += [f"{i}\t{','.join(map(str, z))}\t{lab}"
                 for i, (z, lab) in enumerate(zip(result.states, labels))]
        rows.append(f"# log_score\t{result.log_score!r}")
        atomic_write_bytes(Path(args.states), ("\n".join(rows) + "\n").encode())
    _write_text(text, args.out)
    return 0


def cmd_train(args) -> int:
    train_names = _read_list(args.train_list)
    val_names = _read_list(args.val_list)
    overlap = sorted(set(train_names) & set(val_names))
    if overlap:
        raise ConfigError(f"train and validation splits overlap: {', '.join(overlap)}")
    if not train_names or not val_names:
        raise ConfigError("train and validation splits must both be non-empty")
    songs, errors = _load_corpus(args.corpus, args.annotations, train_names + val_names,
                                 require_labels=True)
    if errors:
        for name, msg in errors:
            log.error("%s: %s", name, msg)
        raise InputError(f"{len(errors)} songs could not be loaded")
    by_name = {s.name: s for s in songs}
    net_config = NetConfig(**{**PRESETS[args.preset].to_dict(), "seed": args.seed})
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         learning_rate=args.learning_rate, passes_per_epoch=args.passes_per_epoch,
                         window_units=args.window_units, max_steps=args.max_steps,
                         eval_every=args.eval_every, seed=args.seed)
    try:
        result = train([by_name[n] for n in train_names], config, [by_name[n] for n in val_names],
                       net_config)
    except TrainingError as exc:
        raise InputError(str(exc)) from exc
    save_params(result.params, args.out)
    rows = ["step\tloss\tval_loss"] + [f"{s}\t{l!r}\t{v!r}" for s, l, v in result.log]
    log_path = args.log or str(Path(args.out).with_suffix(".log.tsv"))
    atomic_write_bytes(Path(log_path), ("\n".join(rows) + "\n").encode())
    log.info("best validation loss %.4f at step %d", result.best_val_loss, result.best_step)
    return 0


def _analyzer(args, params):
    model = args.model
    if model == "net":
        if params is None:
            raise ConfigError("--model net needs --params")
        w = _resolve_weights(args, DEFAULT_WEIGHTS)
        return lambda song: viterbi(_net_emissions(params, song), w).labels
    if model == "rule":
        w = _resolve_weights(args, BASELINE_WEIGHTS)
        return lambda song: viterbi(rule_emissions(song.tracks, song.grid), w).labels
    if model == "oracle":
        return lambda song: oracle_labels(song.labels)
    return lambda song: song.labels


def cmd_evaluate(args) -> int:
    params = _load_params_or_fail(args.params)
    names = _read_list(args.songs) if args.songs else None
    analyze = _analyzer(args, params)
    songs, errors = _load_corpus(args.corpus, args.annotations, names, require_labels=True)
    ablation = AblationSpec(args.ablation)
    if songs:
        scores = evaluate_split(songs, analyze, ablation, ddof=args.ddof)
        errors = errors + scores.errors
    for name, msg in errors:
        print(f"{name}: {msg}", file=sys.stderr)
    if not songs or not scores.per_song:
        print("every song failed", file=sys.stderr)
        return 1
    text = scores.to_text()
    if args.per_song:
        text += "\n" + "\t".join(["song"] + [f"level{l + 1}" for l in range(scores.levels)]) + "\n"
        for name, s in zip(scores.names, scores.per_song):
            text += name + "\t" + "\t".join(f"{v:.4f}" for v in s[:, 2]) + "\n"
    _write_text(text, args.out)
    return 0


def cmd_stats(args) -> int:
    params = _load_params_or_fail(args.params)
    if args.kind == "confidence" and params is None:
        raise ConfigError("confidence statistics need --params")
    if args.kind == "drums" and params is None and args.annotations is None:
        raise ConfigError("drum statistics need --params or --annotations")
    songs, errors = _load_corpus(args.corpus, args.annotations if params is None else None,
                                 require_labels=params is None)
    for name, msg in errors:
        print(f"{name}: {msg}", file=sys.stderr)
    if args.kind == "confidence":
        text = format_confidence_tsv(confidence_stats(songs, params, rest_cutoff=args.rest_cutoff,
                                                      ddof=args.ddof))
    else:
        if params is not None:
            preds = [viterbi(_net_emissions(params, s), DEFAULT_WEIGHTS).labels for s in songs]
        else:
            preds = [s.labels for s in songs]
        # an empty corpus gives the bare header
        text = format_drum_tsv(drum_boundary_distribution(songs, preds) if songs else [])
    _write_text(text, args.out)
    return 0


def _dedupe_map(path):
    mapping = {}
    for line in _read_list(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise InputError(f"{path}: expected 'path<TAB>key' lines, got {line!r}")
        mapping[Path(parts[0]).resolve()] = parts[1]
    return lambda p: mapping.get(Path(p).resolve(), str(Path(p).resolve()))


def cmd_filter(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise InputError(f"{root} is not a readable directory")
    criteria = FilterCriteria(min_tracks=args.min_tracks, require_drum=args.require_drum,
                              name_contains=tuple(t for t in args.name_contains.split(",") if t),
                              group_key=_dedupe_map(args.dedupe_key) if args.dedupe_key else None)
    result = filter_corpus(root, criteria)
    _write_text("".join(f"{p}\n" for p in result.kept), args.out)
    return 0


def cmd_synth(args) -> int:
    from .synth import generate_corpus, write_corpus

    songs = generate_corpus(args.num_regular, seed=args.seed)
    out = Path(args.out_dir)
    write_corpus(songs, out / "midi", out / "annotations")
    regular = [s.name for s in songs if s.irregularity is None]
    irregular = [s.name for s in songs if s.irregularity is not None]
    n_train = min(15, max(len(regular) - 1, 1))
    splits = {
        "train.txt": regular[:n_train],
        "val.txt": regular[max(n_train - 3, 0):n_train],
        "test.txt": regular[n_train:] + irregular,
    }
    # validation songs are drawn from the training portion; the training list excludes them
    splits["train.txt"] = [n for n in splits["train.txt"] if n not in splits["val.txt"]] or regular[:1]
    for fname, names in splits.items():
        atomic_write_bytes(out / fname, "".join(n + "\n" for n in names).encode())
    irr_rows = ["song\tkind\tstart\tend"] + [
        f"{s.name}\t{s.irregularity.kind}\t{s.irregularity.start}\t{s.irregularity.end}"
        for s in songs if s.irregularity is not None]
    atomic_write_bytes(out / "irregularities.tsv", ("\n".join(irr_rows) + "\n").encode())
    return 0


# -- parser ------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_weights(p) -> None:
    p.add_argument("--weights", default=None, help="CRF weights file of w_del.<level>=x lines")
    p.add_argument("--w-del", type=_weight_list, default=None,
                   help="deletion penalty, one value or one per level (model default if unset)")
    p.add_argument("--w-ins", type=_weight_list, default=None,
                   help="insertion penalty, one value or one per level (model default if unset)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiermeter", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("--config", default=None, help="flat key=value file of flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("analyze", help="predict hierarchical metrical labels for one MIDI file",
                       formatter_class=_Formatter)
    p.add_argument("midi", help="input MIDI file")
    p.add_argument("--model", choices=("auto", "rule", "net"), default="auto",
                   help="emission model; auto uses net when --params is given")
    p.add_argument("--params", default=None, help="trained network checkpoint")
    p.add_argument("--downbeats", default=None, help="downbeat override file (one unit per line)")
    p.add_argument("--dots", action="store_true", help="add a dot-notation column")
    p.add_argument("--emissions", default=None,
                   help="also cache the emission probabilities here (.tsv or binary)")
    p.add_argument("--states", default=None,
                   help="also write the decoded joint states and log score here")
    p.add_argument("--out", default=None, help="output TSV (stdout if unset)")
    _add_weights(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train the emission network", formatter_class=_Formatter)
    p.add_argument("corpus", help="directory of MIDI files")
    p.add_argument("annotations", help="directory of <song>.tsv annotation files")
    p.add_argument("--train-list", required=True, help="file listing training song names")
    p.add_argument("--val-list", required=True, help="file listing validation song names")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training log TSV (default: <out>.log.tsv)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="network size")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="windows per step")
    p.add_argument("--learning-rate", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--passes-per-epoch", type=int, default=5, help="passes over the songs per epoch")
    p.add_argument("--window-units", type=int, default=512, help="window length in 16th notes")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--eval-every", type=int, default=None,
                   help="validation interval in steps (default: once per epoch)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="boundary F1 per level on an annotated corpus",
                       formatter_class=_Formatter)
    p.add_argument("corpus", help="directory of MIDI files")
    p.add_argument("annotations", help="directory of <song>.tsv annotation files")
    p.add_argument("--songs", default=None, help="file listing the songs to evaluate (default: all)")
    p.add_argument("--model", choices=("net", "rule", "oracle", "reference"), default="rule",
                   help="analyzer to score")
    p.add_argument("--params", default=None, help="trained network checkpoint (for --model net)")
    p.add_argument("--ablation", choices=("full", "no-drums", "melody-only"), default="full",
                   help="tracks given to the analyzer")
    p.add_argument("--per-song", action="store_true", help="add per-song F1 rows")
    p.add_argument("--ddof", type=int, default=0, help="delta degrees of freedom for the std")
    p.add_argument("--out", default=None, help="output file (stdout if unset)")
    _add_weights(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", help="confidence or drum-event statistics", formatter_class=_Formatter)
    p.add_argument("corpus", help="directory of MIDI files")
    p.add_argument("--kind", choices=("confidence", "drums"), default="confidence", help="table")
    p.add_argument("--params", default=None, help="trained network checkpoint")
    p.add_argument("--annotations", default=None,
                   help="label directory used for drum statistics when no --params is given")
    p.add_argument("--rest-cutoff", type=float, default=1 / 3,
                   help="leave out tracks silent in more than this fraction of measures")
    p.add_argument("--ddof", type=int, default=0, help="delta degrees of freedom for the std")
    p.add_argument("--out", default=None, help="output TSV (stdout if unset)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("filter", help="list MIDI files meeting corpus criteria",
                       formatter_class=_Formatter)
    p.add_argument("root", help="directory searched recursively")
    p.add_argument("--min-tracks", type=int, default=6, help="minimum number of tracks")
    p.add_argument("--require-drum", action=argparse.BooleanOptionalAction, default=True,
                   help="require a drum track")
    p.add_argument("--name-contains", default=",".join(DEFAULT_NAME_PATTERNS),
                   help="comma-separated texts; some track name must contain one (empty: no check)")
    p.add_argument("--dedupe-key", default=None,
                   help="'path<TAB>key' file; keep one file per key")
    p.add_argument("--out", default=None, help="output file (stdout if unset)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("synth", formatter_class=_Formatter)
    p.add_argument("out_dir")
    p.add_argument("--num-regular", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    # keep the generator out of the command listing
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "synth"]
    return parser


def _subcommands(parser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config_file(parser, argv) -> None:
    """Install ``key=value`` lines from ``--config`` as subcommand defaults."""
    # pre-parse only --config and the command so required options may come from the file
    pre_parser = argparse.ArgumentParser(add_help=False)
    pre_parser.add_argument("--config", default=None)
    pre_parser.add_argument("-v", "--verbose", action="count", default=0)
    pre_parser.add_argument("command", nargs="?")
    pre, _ = pre_parser.parse_known_args(argv)
    if pre.config is None or pre.command is None:
        return
    if pre.command not in _subcommands(parser):
        return
    try:
        lines = Path(pre.config).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {pre.config}: {exc}") from exc
    sub = _subparser(parser, pre.command)
    actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest != "help"}
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{pre.config}:{number}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"{pre.config}:{number}: unknown key {key!r} for {pre.command}")
        action = actions[dest]
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                converted = _parse_bool(value)
            elif action.type is not None:
                converted = action.type(value)
            else:
                converted = value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"{pre.config}:{number}: bad value for {key}: {exc}") from exc
        if action.choices is not None and converted not in action.choices:
            raise ConfigError(f"{pre.config}:{number}: {key} must be one of {list(action.choices)}")
        values[dest] = converted
        if action.required:
            action.required = False
    sub.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"hiermeter: config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hiermeter: config error: {exc}", file=sys.stderr)
        return 2
    except (InputError, *_INPUT_ERRORS) as exc:
        print(f"hiermeter: input error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"hiermeter: input error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
