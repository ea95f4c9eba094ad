"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError

ADAM_LR = 0.0002
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One in-place bias-corrected Adam update; returns ``param``."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"adam shapes disagree: param {param.shape}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param


@dataclass
class Adam:
    """Adam over a dict of named numpy parameters (updated in place)."""

    params: dict[str, np.ndarray]
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    @property
    def step_count(self) -> int:
        return max((s.t for s in self.states.values()), default=0)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name in sorted(self.params):
            adam_step(self.params[name], grads[name], self.states[name])

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, s in self.states.items():
            out[f"adam.m/{name}"] = s.m
            out[f"adam.v/{name}"] = s.v
        out["adam.t"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        t = int(tensors["adam.t"][0]) if "adam.t" in tensors else 0
        for name, s in self.states.items():
            if f"adam.m/{name}" in tensors:
                s.m = tensors[f"adam.m/{name}"].astype(self.params[name].dtype)
                s.v = tensors[f"adam.v/{name}"].astype(self.params[name].dtype)
            s.t = t
