"""Adam over named parameter groups with per-group learning rates."""

from __future__ import annotations

import numpy as np


class AdamState:
    """Step count, moment buffers and learning rate for one parameter array.

    Holds a reference to the parameter array it updates (shared with the
    caller); updates happen in place.
    """

    def __init__(self, params: np.ndarray, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)


def adam_step(state: AdamState, grad: np.ndarray, block: str = "params") -> np.ndarray:
    """One bias-corrected Adam update; deterministic, mutates state.params.

    Raises on non-finite gradient components, naming the parameter block.
    """
    grad = np.asarray(grad)
    if grad.shape != state.params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError(f"non-finite gradient in parameter block {block!r}")
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    state.params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state.params


class Adam:
    """Named parameter groups stepped together; groups never perturb each other."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups: dict[str, AdamState] = {}

    def add_group(self, name: str, params: np.ndarray, lr: float) -> None:
        if name in self.groups:
            raise ValueError(f"duplicate parameter group {name!r}")
        self.groups[name] = AdamState(params, lr, self.beta1, self.beta2, self.eps)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.groups:
                raise KeyError(f"unknown parameter group {name!r}")
            adam_step(self.groups[name], g, block=name)
