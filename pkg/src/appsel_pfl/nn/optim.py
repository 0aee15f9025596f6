from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from appsel_pfl.nn.params import ModelParams


@dataclass
class SgdState:
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class AdamWState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stability: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: np.ndarray | None = field(default=None, repr=False)
    second_moment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def copy(self) -> AdamWState:
        return AdamWState(
            self.learning_rate, self.beta1, self.beta2, self.epsilon_stability,
            self.weight_decay, self.step_count,
            None if self.first_moment is None else self.first_moment.copy(),
            None if self.second_moment is None else self.second_moment.copy(),
        )


def sgd_step(params: ModelParams, grads, state: SgdState) -> ModelParams:
    g = params.flatten_grads(grads)
    mask = params.trainable_mask()
    flat = params.flat.copy()
    flat[mask] -= state.learning_rate * g[mask]
    return params.with_flat(flat)


def adamw_step(params: ModelParams, grads, state: AdamWState) -> ModelParams:
    """One AdamW step with decoupled weight decay; mutates ``state``.

    Frozen tensors are never touched and their moments stay at zero.
    """
    g = params.flatten_grads(grads)
    mask = params.trainable_mask()
    gm = g[mask]
    if not np.all(np.isfinite(gm)):
        raise FloatingPointError("adamw_step received non-finite gradients")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(params.flat)
        state.second_moment = np.zeros_like(params.flat)
    if state.first_moment.shape != params.flat.shape:
        raise ValueError("optimizer moments do not match the parameters")

    m, v = state.first_moment, state.second_moment
    b1, b2 = state.beta1, state.beta2
    m[mask] = b1 * m[mask] + (1.0 - b1) * gm
    v[mask] = b2 * v[mask] + (1.0 - b2) * gm * gm
    state.step_count += 1
    t = state.step_count
    m_hat = m[mask] / (1.0 - b1**t)
    v_hat = v[mask] / (1.0 - b2**t)

    flat = params.flat.copy()
    theta = flat[mask]
    flat[mask] = theta - state.learning_rate * (
        m_hat / (np.sqrt(v_hat) + state.epsilon_stability) + state.weight_decay * theta
    )
    return params.with_flat(flat)
