"""Per-track dilated convolution network, emission heads and track fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..metrical_structure import DEFAULT_LEVELS, LabelSequence
from ..score_ingest import DownbeatGrid, QuantizedTrack
from . import layers

INPUT_DIM = 256
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NetConfig:
    num_blocks: int = 6
    channels: int = 64
    kernel_size: int = 3
    dropout_p: float = 0.5
    input_dim: int = INPUT_DIM
    num_labels: int = DEFAULT_LEVELS + 1
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    def dilation(self, block: int) -> int:
        """Dilation of 0-based ``block``."""
        return 2 ** block

    @property
    def receptive_radius(self) -> int:
        """Units on either side of a step that can influence its output."""
        half = self.kernel_size // 2
        return sum(2 * half * self.dilation(b) for b in range(self.num_blocks))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "paper": NetConfig(num_blocks=6, channels=256),
    "desk": NetConfig(num_blocks=6, channels=64),
}


@dataclass
class NetParams:
    """Trainable ``weights`` plus batch-norm running ``stats``."""

    config: NetConfig
    weights: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                         {k: v.copy() for k, v in self.stats.items()})

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.config, {k: v.astype(dtype) for k, v in self.weights.items()},
                         {k: v.astype(dtype) for k, v in self.stats.items()})

    @property
    def dtype(self):
        return self.weights["head.w"].dtype


def init_params(config: NetConfig, seed: int | None = None, dtype=np.float32,
                zero_heads: bool = False) -> NetParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    k, c = config.kernel_size, config.channels
    w: dict[str, np.ndarray] = {}
    s: dict[str, np.ndarray] = {}

    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    for b in range(config.num_blocks):
        cin = config.input_dim if b == 0 else c
        p = f"b{b}."
        w[p + "conv1.w"] = he(k * cin, (k * cin, c))
        if b == 0:
            w[p + "conv1.w_drum"] = he(k * cin, (k * cin, c))
        w[p + "conv2.w"] = he(k * c, (k * c, c))
        for bn in ("bn1", "bn2"):
            w[p + bn + ".gamma"] = np.ones(c)
            w[p + bn + ".beta"] = np.zeros(c)
            s[p + bn + ".mean"] = np.zeros(c)
            s[p + bn + ".var"] = np.ones(c)
        w[p + "res.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, c))
        w[p + "res.b"] = np.zeros(c)
    scale = 0.0 if zero_heads else np.sqrt(1.0 / c)
    w["head.w"] = rng.normal(0.0, 1.0, size=(c, config.num_labels)) * scale
    w["head.b"] = np.zeros(config.num_labels)
    w["conf.w"] = rng.normal(0.0, 1.0, size=(c, 1)) * scale
    w["conf.b"] = np.zeros(1)
    return NetParams(config,
                     {k_: v.astype(dtype) for k_, v in w.items()},
                     {k_: v.astype(dtype) for k_, v in s.items()})


# -- batched forward / backward ---------------------------------------------

MODES = ("train", "eval", "check")


def features_forward(params: NetParams, x: np.ndarray, is_drum: np.ndarray, mode: str,
                     rng: np.random.Generator | None = None):
    """Run the residual blocks on ``x`` ``[batch, time, 256]``.

    ``mode``: ``'train'`` uses batch statistics, dropout and updates the
    running statistics in place; ``'eval'`` uses running statistics and no
    dropout; ``'check'`` uses batch statistics without dropout and leaves the
    running statistics alone (a smooth function of the weights).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "train" and params.config.dropout_p > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    cfg, w, st = params.config, params.weights, params.stats
    k = cfg.kernel_size
    batch_stats = mode != "eval"
    drop_rng = rng if mode == "train" else None
    is_drum = np.asarray(is_drum, dtype=bool)
    h = x
    caches = []
    for b in range(cfg.num_blocks):
        p, d = f"b{b}.", cfg.dilation(b)
        res = h @ w[p + "res.w"] + w[p + "res.b"]
        if b == 0:
            cols = layers.dilated_im2col(h, k, d)
            a1 = np.empty(cols.shape[:2] + (cfg.channels,), dtype=h.dtype)
            for flag, name in ((False, "conv1.w"), (True, "conv1.w_drum")):
                sel = is_drum == flag
                if sel.any():
                    a1[sel] = cols[sel] @ w[p + name]
        else:
            a1, cols = layers.conv_forward(h, w[p + "conv1.w"], k, d)
        out = a1
        block_cache = {"in": h, "cols1": cols}
        for i, bn in ((1, "bn1"), (2, "bn2")):
            if i == 2:
                out, block_cache["cols2"] = layers.conv_forward(out, w[p + "conv2.w"], k, d)
            run = (st.get(p + bn + ".mean"), st.get(p + bn + ".var")) if mode != "check" else (None, None)
            out, block_cache[bn], new_run = layers.batchnorm_forward(
                out, w[p + bn + ".gamma"], w[p + bn + ".beta"], run[0], run[1], batch_stats)
            if mode == "train":
                st[p + bn + ".mean"], st[p + bn + ".var"] = (
                    new_run[0].astype(st[p + bn + ".mean"].dtype),
                    new_run[1].astype(st[p + bn + ".var"].dtype))
            out, block_cache["act" + str(i)] = layers.relu_dropout_forward(out, cfg.dropout_p, drop_rng)
        h = out + res
        caches.append(block_cache)
    return h, caches


def features_backward(params: NetParams, dh: np.ndarray, is_drum: np.ndarray, caches):
    cfg, w = params.config, params.weights
    k = cfg.kernel_size
    is_drum = np.asarray(is_drum, dtype=bool)
    grads: dict[str, np.ndarray] = {}
    for b in reversed(range(cfg.num_blocks)):
        p, d, cache = f"b{b}.", cfg.dilation(b), caches[b]
        x_in = cache["in"]
        grads[p + "res.w"] = x_in.reshape(-1, x_in.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
        grads[p + "res.b"] = dh.sum(axis=(0, 1))
        dx_res = dh @ w[p + "res.w"].T if b > 0 else None

        g = layers.relu_dropout_backward(dh, cache["act2"])
        g, grads[p + "bn2.gamma"], grads[p + "bn2.beta"] = layers.batchnorm_backward(g, cache["bn2"])
        g, grads[p + "conv2.w"] = layers.conv_backward(g, cache["cols2"], w[p + "conv2.w"], k, d)
        g = layers.relu_dropout_backward(g, cache["act1"])
        g, grads[p + "bn1.gamma"], grads[p + "bn1.beta"] = layers.batchnorm_backward(g, cache["bn1"])
        if b == 0:
            cols = cache["cols1"]
            for flag, name in ((False, "conv1.w"), (True, "conv1.w_drum")):
                sel = is_drum == flag
                gw = np.zeros_like(w[p + name])
                if sel.any():
                    c_sel = cols[sel]
                    gw = c_sel.reshape(-1, c_sel.shape[-1]).T @ g[sel].reshape(-1, g.shape[-1])
                grads[p + name] = gw
            # the network input needs no gradient
        else:
            g, grads[p + "conv1.w"] = layers.conv_backward(g, cache["cols1"], w[p + "conv1.w"], k, d)
            dh = g + dx_res
    return grads


def heads_forward(params: NetParams, feats: np.ndarray):
    w = params.weights
    logits = feats @ w["head.w"] + w["head.b"]
    conf = (feats @ w["conf.w"] + w["conf.b"])[..., 0]
    return logits, conf


def heads_backward(params: NetParams, feats, dlogits, dconf):
    w = params.weights
    grads = {
        "head.w": feats.T @ dlogits,
        "head.b": dlogits.sum(axis=0),
        "conf.w": feats.T @ dconf[:, None],
        "conf.b": np.array([dconf.sum()], dtype=feats.dtype),
    }
    dfeats = dlogits @ w["head.w"].T + dconf[:, None] @ w["conf.w"].T
    return grads, dfeats


# -- single-track interface --------------------------------------------------

@dataclass
class TrackEmission:
    logits: np.ndarray  # [N, L+1]
    confidence: np.ndarray  # [N]


@dataclass
class EmissionSequence:
    probs: np.ndarray  # [N, L+1], rows sum to 1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("emission probabilities must be a 2-d array")

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def max_level(self) -> int:
        return self.probs.shape[1] - 1


def forward_track(params: NetParams, track: QuantizedTrack, grid: DownbeatGrid,
                  mode: str = "eval", rng: np.random.Generator | None = None) -> TrackEmission:
    if track.num_units != grid.total_units:
        raise ValueError(f"track has {track.num_units} units but the grid has {grid.total_units}")
    x = track.features(params.dtype)[None]
    feats, _ = features_forward(params, x, np.array([track.is_drum]), mode, rng)
    logits, conf = heads_forward(params, feats[0, grid.downbeat_units])
    return TrackEmission(logits, conf)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def fuse_arrays(logits: np.ndarray, conf: np.ndarray):
    """Confidence-weighted fusion of ``logits`` ``[T, N, C]`` with ``conf`` ``[T, N]``.

    Track contributions are summed in a canonical per-downbeat order so that
    the result does not depend on track order, bit for bit.

    Returns ``(p, a, s)``: fused probabilities ``[N, C]``, track weights
    ``[T, N]`` and per-track softmaxes ``[T, N, C]``, the latter two in the
    caller's track order.
    """
    s = softmax(logits, axis=-1)
    num_tracks = logits.shape[0]
    if num_tracks == 1:
        return s[0].copy(), np.ones_like(conf), s
    # sort key: confidence first, then the logits, per downbeat
    keys = [logits[:, :, c].T for c in reversed(range(logits.shape[2]))] + [conf.T]
    order = np.lexsort(keys, axis=-1).T  # [T, N]
    cols = np.arange(conf.shape[1])[None, :]
    conf_sorted = conf[order, cols]
    shifted = conf_sorted - conf_sorted.max(axis=0)
    e_sorted = np.exp(shifted)
    z = e_sorted.sum(axis=0)
    a_sorted = e_sorted / z
    p = (a_sorted[:, :, None] * s[order, cols]).sum(axis=0)
    a = np.empty_like(a_sorted)
    a[order, cols] = a_sorted
    return p, a, s


def fuse_tracks(emissions: list[TrackEmission]) -> EmissionSequence:
    if not emissions:
        raise ValueError("need at least one track emission")
    n = {e.logits.shape[0] for e in emissions}
    if len(n) != 1:
        raise ValueError(f"track emissions disagree on downbeat count: {sorted(n)}")
    logits = np.stack([np.asarray(e.logits, dtype=np.float64) for e in emissions])
    conf = np.stack([np.asarray(e.confidence, dtype=np.float64) for e in emissions])
    p, _, _ = fuse_arrays(logits, conf)
    return EmissionSequence(p)


def fusion_weights(confidences: np.ndarray) -> np.ndarray:
    """Exponentially normalised track weights, ``confidences`` ``[T, N]``."""
    return softmax(np.asarray(confidences, dtype=np.float64), axis=0)


def training_loss(p, ref: LabelSequence) -> float:
    probs = p.probs if isinstance(p, EmissionSequence) else np.asarray(p)
    labels = np.asarray(ref.labels if isinstance(ref, LabelSequence) else ref)
    if probs.shape[0] != len(labels):
        raise ValueError(f"{probs.shape[0]} emission rows vs {len(labels)} labels")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def fused_loss_backward(logits, conf, labels):
    """Cross-entropy of the fused emissions for one sample and its gradients.

    Parameters
    ----------
    logits : array [T, N, C]
    conf : array [T, N]
    labels : int array [N]

    Returns
    -------
    loss_sum : float
        Summed (not averaged) negative log-likelihood over the N downbeats.
    dlogits, dconf : arrays shaped like the inputs
    """
    p, a, s = fuse_arrays(logits, conf)
    n = len(labels)
    idx = np.arange(n)
    py = p[idx, labels]
    floored = py <= PROB_FLOOR
    loss_sum = float(-np.log(np.maximum(py, PROB_FLOOR)).sum())
    dpy = np.where(floored, 0.0, -1.0 / np.maximum(py, PROB_FLOOR)).astype(logits.dtype)
    sy = s[:, idx, labels]  # [T, N]
    # d loss / d s_t = a_t * dpy at the label entry only
    g_y = a * dpy[None, :]
    dlogits = -s * (g_y * sy)[:, :, None]
    dlogits[:, idx, labels] += g_y * sy
    # d loss / d a_t = dpy * s_t[y]; then through the softmax over tracks
    da = dpy[None, :] * sy
    dconf = a * (da - (a * da).sum(axis=0, keepdims=True))
    return loss_sum, dlogits, dconf
