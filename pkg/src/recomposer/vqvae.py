"""First stage: piano-roll measure <-> grid of discrete codebook indices.

Encoder: two (4,4) stride-2 convolutions then two (4,4) stride-1
convolutions, batch norm + ReLU after all but the last.  The decoder mirrors
it with transpose convolutions and ends in a clamped sigmoid.  A
``(52, 16, 4)`` roll becomes a ``(13, 4)`` grid of indices into a
256-entry codebook.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import ADAM_LR, Adam
from .rng import SplitMix64
from .tensor import BatchNormState, DimensionError, NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingHalted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training halted at step {step}: {message}")
        self.step = step


@dataclass
class VqVaeConfig:
    height: int = 52
    width: int = 16
    voices: int = 4
    channels: tuple[int, ...] = (64, 128, 256, 256)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    kernel: int = 4
    codebook_size: int = 256
    beta: float = 0.25

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have equal length")

    @property
    def code_dim(self) -> int:
        return self.channels[-1]

    @property
    def latent_shape(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for s in self.strides:
            h, w = -(-h // s), -(-w // s)
        return h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d


@dataclass
class VqLosses:
    reconstruction: float
    codebook: float
    commitment: float


@dataclass
class Quantized:
    z_q: Tensor            # straight-through output fed to the decoder
    codes: Tensor          # raw codebook rows (gradient flows to the codebook)
    indices: np.ndarray    # (N, h, w) int64


@dataclass
class VqVae:
    config: VqVaeConfig
    params: dict[str, np.ndarray]
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def init(cls, config: VqVaeConfig, seed: int = 0, dtype=np.float32) -> "VqVae":
        rng = SplitMix64(seed)
        cfg = config
        k = cfg.kernel
        params: dict[str, np.ndarray] = {}
        bn: dict[str, BatchNormState] = {}
        n = len(cfg.channels)
        cin = cfg.voices
        for i, cout in enumerate(cfg.channels):
            params[f"enc{i}.w"] = T.glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout, dtype)
            params[f"enc{i}.b"] = np.zeros(cout, dtype)
            if i < n - 1:
                params[f"enc{i}.gamma"] = np.ones(cout, dtype)
                params[f"enc{i}.beta"] = np.zeros(cout, dtype)
                bn[f"enc{i}"] = BatchNormState(cout)
            cin = cout
        lim = 1.0 / cfg.codebook_size
        params["codebook"] = rng.uniform(-lim, lim, (cfg.codebook_size, cfg.code_dim)).astype(dtype)
        outs = list(cfg.channels[::-1][1:]) + [cfg.voices]
        cin = cfg.code_dim
        for i, cout in enumerate(outs):
            # transpose kernels are (kh, kw, Cout, Cin)
            params[f"dec{i}.w"] = T.glorot_uniform(rng, (k, k, cout, cin), k * k * cin, k * k * cout, dtype)
            params[f"dec{i}.b"] = np.zeros(cout, dtype)
            if i < n - 1:
                params[f"dec{i}.gamma"] = np.ones(cout, dtype)
                params[f"dec{i}.beta"] = np.zeros(cout, dtype)
                bn[f"dec{i}"] = BatchNormState(cout)
            cin = cout
        return cls(cfg, params, bn)

    def set_mode(self, mode: str) -> None:
        for st in self.bn.values():
            st.mode = mode

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            if st.initialized:
                out[f"{name}.running_mean"] = st.running_mean
                out[f"{name}.running_var"] = st.running_var
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for name, st in self.bn.items():
            if f"{name}.running_mean" in buffers:
                st.running_mean = np.asarray(buffers[f"{name}.running_mean"], dtype=np.float64)
                st.running_var = np.asarray(buffers[f"{name}.running_var"], dtype=np.float64)
            else:
                st.running_mean = st.running_var = None

    # -- forward pieces ------------------------------------------------------

    def encode(self, x, P: dict[str, Tensor] | None = None) -> Tensor:
        cfg = self.config
        P = P or self.tensors()
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.params["codebook"].dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.height, cfg.width, cfg.voices):
            raise DimensionError(f"encode expects (N, {cfg.height}, {cfg.width}, {cfg.voices}), got {x.shape}")
        h = x
        n = len(cfg.channels)
        for i, s in enumerate(cfg.strides):
            h = T.conv2d(h, P[f"enc{i}.w"], P[f"enc{i}.b"], stride=(s, s))
            if i < n - 1:
                h = T.batch_norm(h, P[f"enc{i}.gamma"], P[f"enc{i}.beta"], self.bn[f"enc{i}"])
                h = T.relu(h)
        return h

    def decode(self, z_q: Tensor, P: dict[str, Tensor] | None = None) -> Tensor:
        cfg = self.config
        P = P or self.tensors()
        lh, lw = cfg.latent_shape
        if z_q.ndim != 4 or z_q.shape[1:] != (lh, lw, cfg.code_dim):
            raise DimensionError(f"decode expects (N, {lh}, {lw}, {cfg.code_dim}), got {z_q.shape}")
        h = z_q
        n = len(cfg.channels)
        for i, s in enumerate(cfg.strides[::-1]):
            h = T.conv2d_transpose(h, P[f"dec{i}.w"], P[f"dec{i}.b"], stride=(s, s))
            if i < n - 1:
                h = T.batch_norm(h, P[f"dec{i}.gamma"], P[f"dec{i}.beta"], self.bn[f"dec{i}"])
                h = T.relu(h)
        return T.clip(T.sigmoid(h), PROB_CLAMP, 1 - PROB_CLAMP)

    def reconstruct_probs(self, grids) -> np.ndarray:
        """Decode index grids (N, h, w) in eval mode to probabilities."""
        grids = np.asarray(grids, dtype=np.int64)
        if grids.ndim == 2:
            grids = grids[None]
        cb = self.params["codebook"]
        if grids.size and (grids.min() < 0 or grids.max() >= cb.shape[0]):
            raise IndexError(f"code out of range [0, {cb.shape[0]})")
        self.set_mode("eval")
        return self.decode(Tensor(cb[grids])).data


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row for each vector in ``z[..., D]``; ties go low."""
    flat = np.asarray(z, dtype=np.float64).reshape(-1, codebook.shape[1])
    cb = np.asarray(codebook, dtype=np.float64)
    d = (flat * flat).sum(1, keepdims=True) - 2.0 * flat @ cb.T + (cb * cb).sum(1)
    return np.argmin(d, axis=1).reshape(np.shape(z)[:-1])


def quantize(z_e: Tensor, codebook: Tensor) -> Quantized:
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    if z_e.shape[-1] != codebook.shape[1]:
        raise DimensionError(f"z_e {z_e.shape} vs codebook {codebook.shape}")
    idx = nearest_codes(z_e.data, codebook.data)
    codes = T.embedding(codebook, idx)
    return Quantized(T.straight_through(z_e, codes), codes, idx)


def vqvae_loss(x, probabilities: Tensor, z_e: Tensor, z_q: Tensor, beta: float = 0.25):
    """BCE + codebook + beta * commitment; squared terms are elementwise means.

    ``z_q`` is the raw codebook lookup (not the straight-through output).
    Returns ``(total, VqLosses)``.
    """
    recon = T.bce(probabilities, x)
    codebook = T.mean_all(T.square(T.stop_gradient(z_e) - z_q))
    commit = T.mean_all(T.square(z_e - T.stop_gradient(z_q)))
    total = recon + codebook
    if beta != 0:
        total = total + beta * commit
    return total, VqLosses(recon.item(), codebook.item(), commit.item())


def forward_loss(model: VqVae, x: np.ndarray, P: dict[str, Tensor]):
    z_e = model.encode(Tensor(x), P)
    q = quantize(z_e, P["codebook"])
    probs = model.decode(q.z_q, P)
    return vqvae_loss(x, probs, z_e, q.codes, model.config.beta)


@dataclass
class TrainConfig:
    steps: int = 50000
    batch: int = 64
    seed: int = 0
    lr: float = ADAM_LR
    log_every: int = 100


@dataclass
class TrainResult:
    model: VqVae
    optimizer: Adam
    losses: list[tuple[int, float]]


def batch_schedule(indices: np.ndarray, batch: int, rng: SplitMix64):
    """Endless stream of batches: a fresh seeded shuffle every epoch, short tail dropped."""
    indices = np.asarray(indices)
    batch = min(batch, len(indices))
    while True:
        perm = indices[rng.permutation(len(indices))]
        for start in range(0, len(perm) - batch + 1, batch):
            yield perm[start:start + batch]


def train_vqvae(model: VqVae, rolls: np.ndarray, config: TrainConfig,
                train_indices: Sequence[int] | None = None,
                on_batch: Callable[[int, np.ndarray], None] | None = None,
                stop: Callable[[int, VqVae], bool] | None = None,
                optimizer: Adam | None = None) -> TrainResult:
    """Adam training on binary rolls ``(N, H, W, V)``.

    ``stop(step, model)`` is polled every ``log_every`` steps for early exit.
    Batch-norm running statistics are recalibrated on the training set at the end.
    """
    rolls = np.asarray(rolls)
    idx = np.arange(len(rolls)) if train_indices is None else np.asarray(train_indices)
    if len(idx) == 0:
        raise ValueError("empty training set")
    dtype = model.params["codebook"].dtype
    opt = optimizer or Adam(model.params, lr=config.lr)
    rng = SplitMix64(config.seed)
    batches = batch_schedule(idx, config.batch, rng)
    losses: list[tuple[int, float]] = []
    model.set_mode("train")
    for step in range(1, config.steps + 1):
        b = next(batches)
        if on_batch is not None:
            on_batch(step, b)
        x = rolls[b].astype(dtype)
        P = model.tensors(requires_grad=True)
        try:
            with Tape() as tape:
                loss, parts = forward_loss(model, x, P)
            names = sorted(P)
            grads = tape.backward(loss, [P[n] for n in names])
            opt.step(dict(zip(names, grads)))
        except NonFiniteError as exc:
            raise TrainingHalted(step, str(exc)) from exc
        losses.append((step, loss.item()))
        if step % config.log_every == 0 or step == config.steps:
            log.info("vqvae step %d loss %.6f (bce %.6f cb %.6f commit %.6f)", step, loss.item(),
                     parts.reconstruction, parts.codebook, parts.commitment)
            if stop is not None:
                calibrate_batch_norm(model, rolls[idx])
                done = stop(step, model)
                model.set_mode("train")
                if done:
                    break
    calibrate_batch_norm(model, rolls[idx])
    return TrainResult(model, opt, losses)


def calibrate_batch_norm(model: VqVae, rolls: np.ndarray, chunk: int = 512) -> None:
    """Set running statistics to the average batch statistics over ``rolls``.

    Parameters are untouched.  With at most ``chunk`` measures the result
    equals a single full-batch train-mode pass exactly.
    """
    if len(rolls) < 1:
        return
    dtype = model.params["codebook"].dtype
    for st in model.bn.values():
        st.running_mean = st.running_var = None
        st.mode = "train"
    saved = {k: st.momentum for k, st in model.bn.items()}
    for k, start in enumerate(range(0, len(rolls), chunk)):
        for st in model.bn.values():
            st.momentum = k / (k + 1)
        x = rolls[start:start + chunk].astype(dtype)
        z_e = model.encode(Tensor(x))
        q = quantize(z_e, Tensor(model.params["codebook"]))
        model.decode(q.z_q)
    for k, st in model.bn.items():
        st.momentum = saved[k]
        # keep only what a checkpoint can hold so a reload evaluates identically
        st.running_mean = st.running_mean.astype(dtype).astype(np.float64)
        st.running_var = st.running_var.astype(dtype).astype(np.float64)
    model.set_mode("eval")


def encode_grids(model: VqVae, rolls: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Eval-mode encode + quantize; returns (N, h, w) int64 code grids in order."""
    model.set_mode("eval")
    dtype = model.params["codebook"].dtype
    out = []
    for start in range(0, len(rolls), chunk):
        z_e = model.encode(Tensor(np.asarray(rolls[start:start + chunk], dtype=dtype)))
        out.append(nearest_codes(z_e.data, model.params["codebook"]))
    lh, lw = model.config.latent_shape
    return np.concatenate(out) if out else np.zeros((0, lh, lw), np.int64)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Cells with probability >= ``threshold`` become 1."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def reconstruct(model: VqVae, grids, threshold: float = 0.5) -> np.ndarray:
    """Decode code grids and binarise at ``threshold`` -> uint8 rolls."""
    return binarize(model.reconstruct_probs(grids), threshold)


def hamming_errors(model: VqVae, rolls: np.ndarray) -> np.ndarray:
    """Per-measure count of wrong cells after encode -> quantize -> decode -> threshold."""
    rec = reconstruct(model, encode_grids(model, rolls))
    return (rec != np.asarray(rolls, dtype=np.uint8)).reshape(len(rolls), -1).sum(1)
