"""Adam optimizer and exponential moving average of parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moments per named parameter plus the step counter."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
        )


def adam_update(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> None:
    """One bias-corrected Adam step, updating ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        params[name] -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params[name].dtype)


def ema_beta(batch_images: float, images_seen: float, halflife_images: float, rampup: float | None) -> float:
    """Per-step EMA decay for a half-life measured in images.

    With ``rampup`` set, the half-life is capped at ``rampup * images_seen`` so
    early averages are not dominated by the random initialization.
    """
    halflife = halflife_images
    if rampup is not None:
        halflife = min(halflife, images_seen * rampup)
    return 0.5 ** (batch_images / max(halflife, 1e-8))


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], beta: float) -> None:
    for name, p in params.items():
        s = shadow[name]
        s *= beta
        s += (1.0 - beta) * p
