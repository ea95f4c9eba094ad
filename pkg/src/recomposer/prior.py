"""Second stage: gated masked-convolution autoregressive prior over code grids.

Layer 1 is a (5,5) mask-A convolution without a residual path; layers 2-15
are (3,3) mask-B convolutions with residual connections.  Every layer uses
the gated unit ``tanh(f) * sigmoid(g)`` and receives two additive
conditioning terms on both halves: a projection of the concatenated
previous/current/next chord embeddings (broadcast over space) and an
optional 1x1 projection of an embedded spatial map (the previous measure's
grid).  A 1x1 conv, ReLU, 1x1 conv head produces one logit per codebook
entry.

This is a single-stack masked network, so it has the usual PixelCNN blind
spot; on a 13x4 grid that is immaterial.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import ADAM_LR, Adam
from .rng import SplitMix64
from .tensor import MaskSpec, NonFiniteError, Tape, Tensor
from .vqvae import TrainingHalted, batch_schedule

log = logging.getLogger(__name__)


@dataclass
class PriorConfig:
    codebook_size: int = 256
    chord_vocab_size: int = 1
    grid_shape: tuple[int, int] = (13, 4)
    channels: int = 64
    layers: int = 15
    first_kernel: int = 5
    kernel: int = 3
    embed_dim: int = 64
    head_channels: int = 64
    spatial: bool = False   # whether training fed previous-measure maps

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        return d


@dataclass
class CondSpec:
    """Batch of conditioning: chord triplets (N, 3) plus optional spatial maps (N, h, w).

    ``spatial_present[n]`` False means row ``n`` contributes an all-zero map.
    """

    triplets: np.ndarray
    spatial: np.ndarray | None = None
    spatial_present: np.ndarray | None = None

    def __post_init__(self):
        self.triplets = np.atleast_2d(np.asarray(self.triplets, dtype=np.int64))
        if self.triplets.shape[1] != 3:
            raise ValueError(f"triplets must be (N, 3), got {self.triplets.shape}")
        if self.spatial is not None:
            sp = np.asarray(self.spatial, dtype=np.int64)
            if sp.ndim == 2:
                sp = sp[None]
            self.spatial = sp
            if self.spatial_present is None:
                self.spatial_present = np.ones(len(sp), dtype=bool)
            self.spatial_present = np.asarray(self.spatial_present, dtype=bool)

    def __len__(self) -> int:
        return len(self.triplets)

    def subset(self, idx) -> "CondSpec":
        if self.spatial is None:
            return CondSpec(self.triplets[idx])
        return CondSpec(self.triplets[idx], self.spatial[idx], self.spatial_present[idx])


@dataclass
class PriorModel:
    config: PriorConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: PriorConfig, seed: int = 0, dtype=np.float32) -> "PriorModel":
        rng = SplitMix64(seed)
        cfg = config
        c, e, k = cfg.channels, cfg.embed_dim, cfg.codebook_size
        p: dict[str, np.ndarray] = {}

        def glorot(name, shape, fan_in, fan_out):
            p[name] = T.glorot_uniform(rng, shape, fan_in, fan_out, dtype)

        glorot("code_embed", (k, c), k, c)
        for role in ("prev", "cur", "next"):
            glorot(f"chord_{role}", (cfg.chord_vocab_size, e), cfg.chord_vocab_size, e)
        glorot("spatial_embed", (k, e), k, e)
        for layer in range(cfg.layers):
            ks = cfg.first_kernel if layer == 0 else cfg.kernel
            glorot(f"layer{layer}.w", (ks, ks, c, 2 * c), ks * ks * c, ks * ks * 2 * c)
            p[f"layer{layer}.b"] = np.zeros(2 * c, dtype)
            glorot(f"layer{layer}.cond_w", (3 * e, 2 * c), 3 * e, 2 * c)
            glorot(f"layer{layer}.spatial_w", (1, 1, e, 2 * c), e, 2 * c)
        glorot("head1.w", (1, 1, c, cfg.head_channels), c, cfg.head_channels)
        p["head1.b"] = np.zeros(cfg.head_channels, dtype)
        glorot("head2.w", (1, 1, cfg.head_channels, k), cfg.head_channels, k)
        p["head2.b"] = np.zeros(k, dtype)
        return cls(cfg, p)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(v, requires_grad=requires_grad) for n, v in self.params.items()}

    def masks(self) -> list[MaskSpec]:
        cfg = self.config
        return [MaskSpec("A", cfg.first_kernel, cfg.first_kernel)] + [
            MaskSpec("B", cfg.kernel, cfg.kernel) for _ in range(cfg.layers - 1)]


def prior_logits(model: PriorModel, grids, cond: CondSpec,
                 P: dict[str, Tensor] | None = None) -> Tensor:
    """Teacher-forced logits ``(N, h, w, K)``.

    The logit at raster position p depends on grid entries strictly before p,
    on the chord triplet, and on spatial-map entries at or before p (the map
    enters through 1x1 projections, so it travels only along the causal stack).
    """
    cfg = model.config
    P = P or model.tensors()
    grids = np.asarray(grids, dtype=np.int64)
    if grids.ndim == 2:
        grids = grids[None]
    if len(cond) != len(grids):
        raise ValueError(f"{len(grids)} grids but {len(cond)} conditioning rows")
    if cond.triplets.size and (cond.triplets.min() < 0 or cond.triplets.max() >= cfg.chord_vocab_size):
        raise IndexError(f"chord id out of range [0, {cfg.chord_vocab_size})")
    c = cfg.channels
    n = len(grids)

    h = T.embedding(P["code_embed"], grids)
    hvec = T.concat([T.embedding(P["chord_prev"], cond.triplets[:, 0]),
                     T.embedding(P["chord_cur"], cond.triplets[:, 1]),
                     T.embedding(P["chord_next"], cond.triplets[:, 2])], axis=-1)
    smap = None
    if cond.spatial is not None:
        if cond.spatial.shape != grids.shape:
            raise ValueError(f"spatial map shape {cond.spatial.shape} vs grid {grids.shape}")
        present = cond.spatial_present.astype(h.dtype)[:, None, None, None]
        smap = T.embedding(P["spatial_embed"], cond.spatial) * present

    for layer, mask in enumerate(model.masks()):
        pre = T.conv2d(h, P[f"layer{layer}.w"], P[f"layer{layer}.b"], mask=mask)
        proj = T.reshape(hvec @ P[f"layer{layer}.cond_w"], (n, 1, 1, 2 * c))
        pre = pre + proj
        if smap is not None:
            pre = pre + T.conv2d(smap, P[f"layer{layer}.spatial_w"])
        out = T.gated_unit(T.take_channels(pre, 0, c), T.take_channels(pre, c, 2 * c))
        h = out if layer == 0 else h + out

    h = T.relu(T.conv2d(h, P["head1.w"], P["head1.b"]))
    return T.conv2d(h, P["head2.w"], P["head2.b"])


def prior_loss(logits: Tensor, grids) -> Tensor:
    return T.cross_entropy_categorical(logits, np.asarray(grids, dtype=np.int64))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64) - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_codes(model: PriorModel, cond: CondSpec, temperature: float = 1.0,
                 seed: int | SplitMix64 = 0) -> np.ndarray:
    """Raster-order sampling, one full network evaluation per grid position.

    Returns ``(N, h, w)`` grids.  Temperature 0 is greedy (ties to the lowest
    index).  Random draws are taken position-major, batch-minor.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    rng = seed if isinstance(seed, SplitMix64) else SplitMix64(seed)
    gh, gw = model.config.grid_shape
    grids = np.zeros((len(cond), gh, gw), dtype=np.int64)
    P = model.tensors()
    for i in range(gh):
        for j in range(gw):
            logits = prior_logits(model, grids, cond, P).data[:, i, j, :]
            for b in range(len(grids)):
                if temperature == 0:
                    grids[b, i, j] = int(np.argmax(logits[b]))
                else:
                    probs = np.exp(_log_softmax(logits[b] / temperature))
                    grids[b, i, j] = rng.categorical(probs)
    return grids


def grid_log_prob(model: PriorModel, grids, cond: CondSpec) -> np.ndarray:
    """Sum of per-position conditional log-probabilities of each grid."""
    grids = np.asarray(grids, dtype=np.int64)
    if grids.ndim == 2:
        grids = grids[None]
    logp = _log_softmax(prior_logits(model, grids, cond).data)
    picked = np.take_along_axis(logp, grids[..., None], axis=-1)[..., 0]
    return picked.reshape(len(grids), -1).sum(axis=1)


def generate_sequence(model: PriorModel, chord_ids: Sequence[int], use_spatial: bool = False,
                      temperature: float = 1.0, seed: int = 0) -> list[np.ndarray]:
    """One grid per interior chord; boundary chords only serve as context.

    With ``use_spatial`` each measure is also conditioned on the previous
    sampled grid (the first measure on an all-zero map).
    """
    ids = [int(c) for c in chord_ids]
    if len(ids) < 3:
        raise ValueError("need at least 3 chord labels (two boundary repeats + one measure)")
    rng = SplitMix64(seed)
    gh, gw = model.config.grid_shape
    out: list[np.ndarray] = []
    prev = np.zeros((gh, gw), dtype=np.int64)
    for t in range(1, len(ids) - 1):
        trip = np.array([[ids[t - 1], ids[t], ids[t + 1]]])
        if use_spatial:
            cond = CondSpec(trip, prev[None], np.array([t > 1]))
        else:
            cond = CondSpec(trip)
        grid = sample_codes(model, cond, temperature, rng)[0]
        out.append(grid)
        prev = grid
    return out


@dataclass
class PriorTrainConfig:
    steps: int = 100000
    batch: int = 50
    seed: int = 0
    lr: float = ADAM_LR
    log_every: int = 100


@dataclass
class PriorTrainResult:
    model: PriorModel
    optimizer: Adam
    losses: list[tuple[int, float]]


def train_prior(model: PriorModel, grids: np.ndarray, cond: CondSpec, config: PriorTrainConfig,
                train_indices: Sequence[int] | None = None,
                on_batch: Callable[[int, np.ndarray], None] | None = None,
                stop: Callable[[int, PriorModel], bool] | None = None,
                optimizer: Adam | None = None) -> PriorTrainResult:
    grids = np.asarray(grids, dtype=np.int64)
    if len(grids) != len(cond):
        raise ValueError(f"{len(grids)} code grids but {len(cond)} conditioning rows")
    idx = np.arange(len(grids)) if train_indices is None else np.asarray(train_indices)
    if len(idx) == 0:
        raise ValueError("empty training set")
    opt = optimizer or Adam(model.params, lr=config.lr)
    batches = batch_schedule(idx, config.batch, SplitMix64(config.seed))
    losses: list[tuple[int, float]] = []
    for step in range(1, config.steps + 1):
        b = next(batches)
        if on_batch is not None:
            on_batch(step, b)
        P = model.tensors(requires_grad=True)
        try:
            with Tape() as tape:
                loss = prior_loss(prior_logits(model, grids[b], cond.subset(b), P), grids[b])
            names = sorted(P)
            grads = tape.backward(loss, [P[n] for n in names])
            opt.step(dict(zip(names, grads)))
        except NonFiniteError as exc:
            raise TrainingHalted(step, str(exc)) from exc
        losses.append((step, loss.item()))
        if step % config.log_every == 0 or step == config.steps:
            log.info("prior step %d loss %.6f", step, loss.item())
            if stop is not None and stop(step, model):
                break
    return PriorTrainResult(model, opt, losses)
