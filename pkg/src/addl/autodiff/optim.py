from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class StepDecay:
    """Piecewise-constant schedule: initial * decay**(step // interval), floored."""

    initial: float = 1e-4
    decay: float = 0.5
    interval: int = 40_000
    floor: float = 1.25e-5

    def __call__(self, step: int) -> float:
        return max(self.floor, self.initial * self.decay ** (step // self.interval))


@dataclass
class AdamState:
    schedule: StepDecay = field(default_factory=StepDecay)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> float:
    """Apply one Adam update in place and return the learning rate used.

    Parameters are visited in sorted-name order. Missing gradients count as
    zero, which leaves that parameter unchanged apart from moment decay.
    """
    lr = state.schedule(state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.isfinite(new).all():
            raise NonFiniteError(f"adam update made {name} non-finite")
        p.data = new
    return lr


class Adam:
    def __init__(self, params: dict[str, Tensor], schedule: StepDecay | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(schedule or StepDecay(), betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        return adam_step(self.params, grads, self.state)
