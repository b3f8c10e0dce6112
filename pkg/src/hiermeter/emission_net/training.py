"""Augmentation, batched loss/gradient, Adam training loop and gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..metrical_structure import LabelSequence
from ..score_ingest import DownbeatGrid, QuantizedTrack, Song
from .network import (NetConfig, NetParams, PROB_FLOOR, features_backward, features_forward,
                      fuse_arrays, fused_loss_backward, heads_backward, heads_forward,
                      init_params)

log = logging.getLogger(__name__)

NUM_PITCHES = 128


class TrainingError(RuntimeError):
    pass


# -- augmentation ------------------------------------------------------------

def shift_pitch(roll: np.ndarray, semitones: int) -> np.ndarray:
    """Transpose a ``[units, 128]`` roll; notes pushed outside 0..127 are dropped."""
    if semitones == 0:
        return roll.copy()
    out = np.zeros_like(roll)
    if semitones > 0:
        out[:, semitones:] = roll[:, :NUM_PITCHES - semitones]
    else:
        out[:, :NUM_PITCHES + semitones] = roll[:, -semitones:]
    return out


def shift_time(roll: np.ndarray, offset: int) -> np.ndarray:
    """Delay (positive ``offset``) or advance a roll along time, zero-filled."""
    if offset == 0:
        return roll.copy()
    out = np.zeros_like(roll)
    if offset > 0:
        out[offset:] = roll[:-offset]
    else:
        out[:offset] = roll[-offset:]
    return out


def augment(sample, rng: np.random.Generator, max_pitch_shift: int = 12, max_offset: int = 2,
            pitch_shift: int | None = None, offset: int | None = None):
    """Label-preserving augmentation of ``(tracks, grid, labels)``.

    One shared transposition in ``[-max_pitch_shift, max_pitch_shift]`` is
    applied to every pitched track (drums are never transposed) and one
    shared time offset in ``[-max_offset, max_offset]`` units moves every
    track's notes relative to the unchanged downbeat grid.
    """
    tracks, grid, labels = sample
    if pitch_shift is None:
        pitch_shift = int(rng.integers(-max_pitch_shift, max_pitch_shift + 1))
    if offset is None:
        offset = int(rng.integers(-max_offset, max_offset + 1))
    out = []
    for t in tracks:
        piano, onset = t.piano_roll, t.onset_roll
        if not t.is_drum:
            piano, onset = shift_pitch(piano, pitch_shift), shift_pitch(onset, pitch_shift)
        out.append(QuantizedTrack(shift_time(piano, offset), shift_time(onset, offset),
                                  t.is_drum, t.name, t.program))
    return out, grid, labels


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    """Windows of several tracks plus the per-sample fusion layout.

    ``samples[k]`` is ``(track_rows, positions, labels)``: the batch rows of
    the tracks fused together, the downbeat positions inside the window and
    the reference labels at those downbeats.
    """

    x: np.ndarray  # [B, W, 256]
    is_drum: np.ndarray  # [B]
    samples: list[tuple[list[int], np.ndarray, np.ndarray]]

    @property
    def num_downbeats(self) -> int:
        return sum(len(s[2]) for s in self.samples)


def song_batch(tracks: list[QuantizedTrack], grid: DownbeatGrid, labels, dtype=np.float64) -> Batch:
    """A single-sample batch covering a whole song with all its tracks."""
    x = np.stack([t.features(dtype) for t in tracks])
    is_drum = np.array([t.is_drum for t in tracks])
    lab = np.asarray(labels.labels if isinstance(labels, LabelSequence) else labels)
    return Batch(x, is_drum, [(list(range(len(tracks))), grid.downbeat_units.copy(), lab)])


def loss_and_grads(params: NetParams, batch: Batch, mode: str = "train",
                   rng: np.random.Generator | None = None, need_grads: bool = True):
    """Mean fused cross-entropy over every downbeat in ``batch`` and its gradients."""
    feats, caches = features_forward(params, batch.x, batch.is_drum, mode, rng)
    rows_b, rows_t, slices = [], [], []
    start = 0
    for track_rows, positions, labels in batch.samples:
        for r in track_rows:
            rows_b.append(np.full(len(positions), r))
            rows_t.append(positions)
        slices.append((start, len(track_rows), len(positions), labels))
        start += len(track_rows) * len(positions)
    bi, ti = np.concatenate(rows_b), np.concatenate(rows_t)
    gathered = feats[bi, ti]
    logits, conf = heads_forward(params, gathered)
    total = batch.num_downbeats
    loss_sum = 0.0
    dlogits = np.zeros_like(logits)
    dconf = np.zeros_like(conf)
    for s0, k, n, labels in slices:
        lg = logits[s0:s0 + k * n].reshape(k, n, -1)
        cf = conf[s0:s0 + k * n].reshape(k, n)
        ls, dl, dc = fused_loss_backward(lg, cf, labels)
        loss_sum += ls
        dlogits[s0:s0 + k * n] = dl.reshape(k * n, -1)
        dconf[s0:s0 + k * n] = dc.reshape(k * n)
    loss = loss_sum / total
    if not need_grads:
        return loss, None
    dlogits /= total
    dconf /= total
    grads, dgathered = heads_backward(params, gathered, dlogits, dconf)
    dfeats = np.zeros_like(feats)
    np.add.at(dfeats, (bi, ti), dgathered)
    grads.update(features_backward(params, dfeats, batch.is_drum, caches))
    return loss, grads


# -- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, weights: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            g = g.astype(weights[k].dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            weights[k] -= update.astype(weights[k].dtype)


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    passes_per_epoch: int = 5
    window_units: int = 512
    tracks_per_sample: int = 2
    max_steps: int | None = None
    eval_every: int | None = None  # steps; default once per epoch
    max_pitch_shift: int = 12
    max_offset: int = 2
    seed: int = 0


@dataclass
class TrainResult:
    params: NetParams
    log: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, val_loss)
    best_step: int = 0
    best_val_loss: float = math.inf


def _sample_window(song: Song, cfg: TrainConfig, rng: np.random.Generator, dtype):
    """Draw one augmented training window; returns rows, drum flags, positions, labels."""
    w = cfg.window_units
    total = song.grid.total_units
    downbeats = song.grid.downbeat_units
    for _ in range(100):
        start = int(rng.integers(0, max(total - w, 0) + 1))
        inside = (downbeats >= start) & (downbeats < start + w)
        if inside.any():
            break
    else:
        raise TrainingError(f"song {song.name}: no downbeat inside any {w}-unit window")
    k = min(cfg.tracks_per_sample, len(song.tracks))
    chosen = sorted(rng.choice(len(song.tracks), size=k, replace=False).tolist())
    pitch = int(rng.integers(-cfg.max_pitch_shift, cfg.max_pitch_shift + 1))
    offset = int(rng.integers(-cfg.max_offset, cfg.max_offset + 1))
    rows = []
    # content is read ``offset`` units earlier so notes land ``offset`` units later
    lo, hi = start - offset, start - offset + w
    src_lo, src_hi = max(lo, 0), min(hi, total)
    for idx in chosen:
        t = song.tracks[idx]
        feat = np.zeros((w, 256), dtype=dtype)
        if src_hi > src_lo:
            piano = t.piano_roll[src_lo:src_hi]
            onset = t.onset_roll[src_lo:src_hi]
            if not t.is_drum:
                piano, onset = shift_pitch(piano, pitch), shift_pitch(onset, pitch)
            feat[src_lo - lo:src_hi - lo, :128] = piano
            feat[src_lo - lo:src_hi - lo, 128:] = onset
        rows.append((feat, t.is_drum))
    positions = downbeats[inside] - start
    labels = np.asarray(song.labels.labels)[inside]
    return rows, positions, labels, (start, offset, pitch)


def make_batch(songs: list[Song], cfg: TrainConfig, rng: np.random.Generator, dtype):
    feats, drums, samples, origin = [], [], [], []
    for _ in range(cfg.batch_size):
        si = int(rng.integers(len(songs)))
        rows, positions, labels, window = _sample_window(songs[si], cfg, rng, dtype)
        idx = list(range(len(feats), len(feats) + len(rows)))
        for f, d in rows:
            feats.append(f)
            drums.append(d)
        samples.append((idx, positions, labels))
        origin.append((songs[si].name, window))
    return Batch(np.stack(feats), np.array(drums), samples), origin


def song_emission_arrays(params: NetParams, song: Song):
    """Eval-mode logits ``[T, N, C]`` and confidences ``[T, N]`` for every track."""
    logits, conf = [], []
    for t in song.tracks:
        x = t.features(params.dtype)[None]
        feats, _ = features_forward(params, x, np.array([t.is_drum]), "eval")
        lg, cf = heads_forward(params, feats[0, song.grid.downbeat_units])
        logits.append(lg)
        conf.append(cf)
    return np.stack(logits).astype(np.float64), np.stack(conf).astype(np.float64)


def validation_loss(params: NetParams, songs: list[Song]) -> float:
    """Cross-entropy averaged within each reference label, then across labels.

    Weighting every label equally keeps the rare high-level boundaries from
    being swamped by the plentiful level-0 downbeats.
    """
    per_label: dict[int, list[float]] = {}
    for song in songs:
        logits, conf = song_emission_arrays(params, song)
        p, _, _ = fuse_arrays(logits, conf)
        labels = np.asarray(song.labels.labels)
        nll = -np.log(np.maximum(p[np.arange(len(labels)), labels], PROB_FLOOR))
        for lab, v in zip(labels, nll):
            per_label.setdefault(int(lab), []).append(float(v))
    return float(np.mean([np.mean(v) for _, v in sorted(per_label.items())]))


def train(songs: list[Song], config: TrainConfig, val_songs: list[Song],
          net_config: NetConfig | None = None, params: NetParams | None = None,
          callback=None) -> TrainResult:
    """Train the emission network with Adam on fused two-track windows.

    Each epoch makes ``passes_per_epoch`` passes over the training songs, so
    it has ``ceil(passes_per_epoch * len(songs) / batch_size)`` steps. The
    returned parameters are the ones with the lowest validation loss seen at
    an evaluation point.
    """
    if not songs:
        raise ValueError("training set is empty")
    if not val_songs:
        raise ValueError("a validation subset is required")
    for s in list(songs) + list(val_songs):
        if s.labels is None:
            raise ValueError(f"song {s.name} has no reference labels")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(net_config or NetConfig(seed=config.seed))
    params = params.copy()
    dtype = params.dtype
    steps_per_epoch = max(1, math.ceil(config.passes_per_epoch * len(songs) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    eval_every = config.eval_every or steps_per_epoch
    opt = Adam(params.weights, config.learning_rate)
    result = TrainResult(params.copy())
    running = []
    for step in range(1, total_steps + 1):
        batch, origin = make_batch(songs, config, rng, dtype)
        loss, grads = loss_and_grads(params, batch, "train", rng)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss {loss} at step {step}; windows {origin}")
        opt.step(params.weights, grads)
        running.append(loss)
        if step % eval_every == 0 or step == total_steps:
            val = validation_loss(params, val_songs)
            train_loss = float(np.mean(running))
            running = []
            result.log.append((step, train_loss, val))
            log.info("step %d loss %.4f val %.4f", step, train_loss, val)
            if val < result.best_val_loss:
                result.best_val_loss, result.best_step = val, step
                result.params = params.copy()
            if callback is not None:
                callback(step, train_loss, val)
    return result


# -- gradient check ----------------------------------------------------------

def _relu_pattern(params: NetParams, batch: Batch) -> np.ndarray:
    """Which rectifier inputs are positive, flattened over every layer."""
    _, caches = features_forward(params, batch.x, batch.is_drum, "check")
    return np.concatenate([c[key][0].ravel() for c in caches for key in ("act1", "act2")])


def gradient_check(params: NetParams, sample, epsilon: float = 1e-4, max_entries: int = 24,
                   seed: int = 0) -> tuple[float, dict[str, float]]:
    """Compare backprop gradients with central finite differences.

    ``sample`` is ``(tracks, grid, labels)``. The loss is evaluated in
    ``'check'`` mode (batch statistics, no dropout) in double precision. For
    each parameter group up to ``max_entries`` coordinates are probed: half
    the largest analytic entries and half drawn at random. A probe whose
    ``+-epsilon`` step flips any rectifier is skipped, since the difference
    quotient straddles a kink there. The relative error of a group is
    ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-8)`` over the remaining entries.

    Returns
    -------
    max_error : float
    per_group : dict of group name -> relative error
    """
    params = params.astype(np.float64)
    batch = song_batch(*sample, dtype=np.float64)
    _, grads = loss_and_grads(params, batch, "check")
    pattern = _relu_pattern(params, batch)
    rng = np.random.default_rng(seed)
    errors = {}
    skipped = 0
    for name in sorted(params.weights):
        w = params.weights[name]
        g = grads[name]
        flat = np.abs(g).ravel()
        size = flat.size
        top = np.argsort(-flat, kind="stable")[:max_entries // 2]
        rand = rng.choice(size, size=min(size, max_entries - len(top)), replace=False)
        probe = np.unique(np.concatenate([top, rand]))
        analytic, numeric = [], []
        for idx in probe:
            pos = np.unravel_index(idx, w.shape)
            orig = w[pos]
            w[pos] = orig + epsilon
            lp, _ = loss_and_grads(params, batch, "check", need_grads=False)
            kink = not np.array_equal(_relu_pattern(params, batch), pattern)
            w[pos] = orig - epsilon
            lm, _ = loss_and_grads(params, batch, "check", need_grads=False)
            kink = kink or not np.array_equal(_relu_pattern(params, batch), pattern)
            w[pos] = orig
            if kink:
                skipped += 1
                continue
            analytic.append(g[pos])
            numeric.append((lp - lm) / (2 * epsilon))
        a, n = np.array(analytic), np.array(numeric)
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
        errors[name] = float(np.linalg.norm(a - n) / denom)
    if skipped:
        log.debug("gradient check skipped %d probes across a rectifier kink", skipped)
    return max(errors.values()), errors
