"""Adam with bias correction and a reduce-on-plateau learning-rate scheduler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "Adam", "LRPlateauState", "ReduceLROnPlateau", "TrainingError", "adam_step"]


class TrainingError(RuntimeError):
    """Raised when optimization hits a non-finite loss or gradient."""


@dataclass
class AdamState:
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-3


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update; moment buffers are lazily initialized."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            name = p.name or f"param[{i}]"
            raise TrainingError(f"non-finite gradient in {name} (shape {p.shape})")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Optimizer over a fixed parameter list.

    A parameter whose ``grad`` is None after backward (e.g. decoder weights
    during a supervised encoder step) is treated as a zero gradient so its
    moments decay consistently with the shared step counter.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps, learning_rate=lr)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class LRPlateauState:
    best_metric: float = float("inf")
    patience: int = 10
    epochs_since_improvement: int = 0
    decay_factor: float = 0.5
    minimum_lr: float = 1e-6


class ReduceLROnPlateau:
    """Decay the learning rate of the attached optimizers when a metric stalls.

    The metric is minimized; the rate never increases and never drops below
    ``minimum_lr``.
    """

    def __init__(self, optimizers: list[Adam], factor: float = 0.5, patience: int = 10, min_lr: float = 1e-6):
        if not 0.0 < factor < 1.0:
            raise ValueError("decay factor must lie in (0, 1)")
        self.optimizers = list(optimizers)
        self.state = LRPlateauState(patience=patience, decay_factor=factor, minimum_lr=min_lr)

    def update(self, metric: float) -> bool:
        """Record an epoch metric; returns True when a decay was applied."""
        s = self.state
        if metric < s.best_metric:
            s.best_metric = metric
            s.epochs_since_improvement = 0
            return False
        s.epochs_since_improvement += 1
        if s.epochs_since_improvement <= s.patience:
            return False
        s.epochs_since_improvement = 0
        decayed = False
        for opt in self.optimizers:
            new_lr = max(opt.lr * s.decay_factor, s.minimum_lr)
            if new_lr < opt.lr:
                opt.lr = new_lr
                decayed = True
        return decayed
