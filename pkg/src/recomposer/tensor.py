"""Minimal reverse-mode autodiff over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  :meth:`Tape.backward` replays the
records in reverse creation order, which is a valid topological order
because an op can only consume tensors that already exist.

All image tensors are NHWC.  Convolution kernels are ``(kh, kw, Cin, Cout)``;
transpose-convolution kernels are stored as ``(kh, kw, Cout, Cin)`` so that
a shared kernel makes :func:`conv2d` and :func:`conv2d_transpose` adjoint.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered op log for one forward/backward pass.

    Use as a context manager; tapes are thread-local and single-owner.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None):
        """Reverse-mode sweep from a scalar ``loss``.

        With ``wrt`` given, returns a list of gradients aligned with it
        (zeros for leaves the loss does not reach).  Otherwise returns a dict
        from every ``requires_grad`` leaf on the tape to its gradient.  Leaf
        ``.grad`` attributes are set either way.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(r.out) for r in self.records}
        if loss.requires_grad and id(loss) not in produced:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) not in produced:
                    leaves[id(inp)] = inp
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi

        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
            out[leaf] = leaf.grad
        if wrt is None:
            return out
        result = []
        for t in wrt:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
                t.grad = g
            result.append(g)
        return result


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None):
    return tape.backward(loss, wrt)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.records.append(_Record(op, out, tuple(inputs), bw))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _emit("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    inside = (a.data >= low) & (a.data <= high)
    out = np.clip(a.data, low, high).astype(a.dtype)
    return _emit("clip", out, (a,), lambda g: (g * inside,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), bw)


def take_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("take_channels", a.data[..., start:stop].copy(), (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape ``ids.shape + (dim,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range [0, {rows}): min {ids.min()}, max {ids.max()}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward value of ``z_q``; the incoming gradient is copied to ``z_e``."""
    if z_e.shape != z_q.shape:
        raise DimensionError(f"straight-through shapes differ: {z_e.shape} vs {z_q.shape}")
    return _emit("straight_through", z_q.data.copy(), (z_e, z_q), lambda g: (g, None))


def gated_unit(pre_f: Tensor, pre_g: Tensor) -> Tensor:
    """``tanh(pre_f) * sigmoid(pre_g)``."""
    if pre_f.shape != pre_g.shape:
        raise DimensionError(f"gated_unit halves differ: {pre_f.shape} vs {pre_g.shape}")
    t = np.tanh(pre_f.data)
    s = _sigmoid(pre_g.data)

    def bw(g):
        return g * s * (1 - t * t), g * t * s * (1 - s)

    return _emit("gated_unit", t * s, (pre_f, pre_g), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_categorical(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax at ``targets`` over all leading positions."""
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target out of range [0, {k})")
    flat = logits.data.reshape(-1, k)
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    m = flat.shape[0]
    rows = np.arange(m)
    loss = -(z[rows, t] - np.log(denom[:, 0])).mean()
    shape = logits.shape

    def bw(g):
        p = ez / denom
        p[rows, t] -= 1
        return ((g / m) * p).reshape(shape).astype(logits.dtype, copy=False),

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def bce(probabilities: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} targets."""
    t = np.asarray(targets, dtype=probabilities.dtype)
    p = probabilities.data
    if t.shape != p.shape:
        raise DimensionError(f"bce shapes differ: {p.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce targets must be 0 or 1")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("bce probabilities must lie strictly inside (0, 1)")
    n = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()

    def bw(g):
        return ((g / n) * ((1 - t) / (1 - p) - t / p)).astype(p.dtype, copy=False),

    return _emit("bce", np.asarray(loss, dtype=p.dtype), (probabilities,), bw)


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """Output size and (before, after) pads; odd totals pad more after."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (s0, s1 * sh, s2 * sw, s1, s2, s3),
                      writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    n, hp, wp, c = shape
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += cols[:, :, :, i, j, :]
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


@dataclass(frozen=True)
class MaskSpec:
    """Raster-causal kernel mask.  Kind ``A`` drops the centre tap, ``B`` keeps it."""

    kind: str
    kh: int
    kw: int

    def __post_init__(self):
        if self.kind not in ("A", "B"):
            raise ValueError(f"mask kind must be 'A' or 'B', got {self.kind!r}")
        if self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValueError(f"masked kernels need odd dims, got ({self.kh}, {self.kw})")

    def array(self) -> np.ndarray:
        m = np.zeros((self.kh, self.kw))
        ci, cj = self.kh // 2, self.kw // 2
        m[:ci, :] = 1
        m[ci, :cj] = 1
        if self.kind == "B":
            m[ci, cj] = 1
        return m


def build_mask(kind: str, kh: int, kw: int) -> np.ndarray:
    return MaskSpec(kind, kh, kw).array()


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=(1, 1),
           padding: str = "same", mask: MaskSpec | None = None) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise DimensionError(f"conv2d input {x.shape} incompatible with kernel {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias {bias.shape} vs kernel {kernel.shape}")
    sh, sw = _pair(stride)
    if mask is not None:
        if (sh, sw) != (1, 1):
            raise ValueError("masked convolution requires stride (1, 1)")
        if (mask.kh, mask.kw) != (kh, kw):
            raise DimensionError(f"mask ({mask.kh}, {mask.kw}) vs kernel {kernel.shape}")
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, sh)
        wo, pl, pr = same_padding(w, kw, sw)
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kernel.shape} larger than input {x.shape}")
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    m = None if mask is None else mask.array().astype(kernel.dtype)[:, :, None, None]
    keff = kernel.data if m is None else kernel.data * m
    kmat = keff.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        dk = (cols.T @ g2).reshape(kernel.shape)
        if m is not None:
            dk = dk * m
        dcols = g2 @ kmat.T
        dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, ho, wo)
        dx = dxp[:, pt:pt + h, pl:pl + w, :]
        db = None if bias is None else g2.sum(axis=0)
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", out, inputs, bw)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride=(1, 1), padding: str = "same") -> Tensor:
    """Adjoint of a same-padded :func:`conv2d`; output is exactly ``stride * input`` size.

    ``kernel`` has shape ``(kh, kw, Cout, Cin)``.
    """
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[3]:
        raise DimensionError(f"conv2d_transpose input {x.shape} incompatible with kernel {kernel.shape}")
    if padding != "same":
        raise ValueError("conv2d_transpose supports only same padding")
    sh, sw = _pair(stride)
    if (sh, sw) not in ((1, 1), (2, 2)):
        raise ValueError(f"conv2d_transpose stride must be (1,1) or (2,2), got {(sh, sw)}")
    n, h, w, cin = x.shape
    kh, kw, cout, _ = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d_transpose bias {bias.shape} vs kernel {kernel.shape}")
    hout, wout = h * sh, w * sw
    _, pt, pb = same_padding(hout, kh, sh)
    _, pl, pr = same_padding(wout, kw, sw)
    padded = (n, hout + pt + pb, wout + pl + pr, cout)
    kmat = kernel.data.reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(-1, cin)
    yp = _col2im(x2 @ kmat.T, padded, kh, kw, sh, sw, h, w)
    out = yp[:, pt:pt + hout, pl:pl + wout, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        gcols = _im2col(gp, kh, kw, sh, sw, h, w)
        dx = (gcols @ kmat).reshape(x.shape)
        dk = (gcols.T @ x2).reshape(kernel.shape)
        db = None if bias is None else g.sum(axis=(0, 1, 2))
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d_transpose", out, inputs, bw)


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (scale/shift live with the params)."""

    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    mode: str = "train"
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if self.running_mean is None:
            self.running_mean = mean.copy()
            self.running_var = var.copy()
        else:
            mo = self.momentum
            self.running_mean = mo * self.running_mean + (1 - mo) * mean
            self.running_var = mo * self.running_var + (1 - mo) * var

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               update_stats: bool = True) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Train mode uses batch statistics and (unless ``update_stats`` is False)
    folds them into the running averages; eval mode is a fixed affine map.
    """
    c = x.shape[-1]
    if c != state.channels or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm input {x.shape}, gamma {gamma.shape}, "
                             f"beta {beta.shape}, state channels {state.channels}")
    xd = x.data
    gd = gamma.data
    if state.mode == "train":
        m = xd.size // c
        if m < 2:
            raise ValueError("train-mode batch_norm needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        if update_stats:
            state.update(mean, var)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean) * inv
        out = gd * xhat + beta.data

        def bw(g):
            dxhat = g * gd
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2))
                              - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            return dx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))
    elif state.mode == "eval":
        if not state.initialized:
            raise RuntimeError("batch_norm in eval mode before any train step: running stats uninitialized")
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv
        out = gd * xhat + beta.data

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))
    else:
        raise ValueError(f"unknown batch_norm mode {state.mode!r}")
    return _emit("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(_scalar(f(x)))
        flat[i] = orig - h
        fm = float(_scalar(f(x)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(-1)[0])


def glorot_uniform(rng, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)
