"""Probability primitives used by the latent space.

Everything here is a pure function of Tensor-valued parameters plus an
explicit RNG handle, so gradients flow to distribution parameters and
concurrent callers just need distinct RNG streams. Distributions are
diagonal Gaussians (as mean/log-variance pairs) and categoricals (as
logits); KL divergences, entropy and the Gaussian overlap coefficient all
come in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax, softmax

__all__ = [
    "DiagonalGaussian",
    "CategoricalParams",
    "GumbelConfig",
    "sample_gaussian",
    "kl_gaussian_gaussian",
    "kl_gaussian_standard",
    "kl_categorical",
    "entropy_categorical",
    "gumbel_softmax_sample",
    "bhattacharyya_distance",
    "bhattacharyya_coefficient",
]

# capacity pressure drives prior variances toward zero; the floor keeps
# log-determinants (and their gradients) bounded
LOG_VAR_FLOOR = -20.0


@dataclass
class DiagonalGaussian:
    """Mean / log-variance pair over the last axis; may carry a batch dim."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = Tensor._lift(self.mean)
        self.log_var = Tensor._lift(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ValueError("mean and log_var must have identical shapes")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class CategoricalParams:
    """Categorical over L >= 2 classes, parameterized by logits."""

    logits: Tensor

    def __post_init__(self):
        self.logits = Tensor._lift(self.logits)
        if self.logits.shape[-1] < 2:
            raise ValueError("a categorical needs at least 2 classes")

    @classmethod
    def from_probs(cls, probs) -> "CategoricalParams":
        p = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(Tensor(np.log(p)))

    @property
    def num_classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> Tensor:
        return softmax(self.logits)

    @property
    def log_probs(self) -> Tensor:
        return log_softmax(self.logits)


@dataclass
class GumbelConfig:
    """Relaxed categorical sampling: temperature plus the straight-through
    switch (one-hot forward value, relaxed gradient)."""

    temperature: float = 0.67
    hard_forward: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("Gumbel temperature must be positive")


def sample_gaussian(g: DiagonalGaussian, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw: mean + exp(log_var / 2) * eps."""
    eps = rng.standard_normal(g.mean.shape).astype(g.mean.dtype, copy=False)
    return g.mean + (g.log_var * 0.5).exp() * Tensor(eps)


def _check_finite(g: DiagonalGaussian, what: str) -> None:
    if not (np.all(np.isfinite(g.mean.data)) and np.all(np.isfinite(g.log_var.data))):
        raise ValueError(f"{what}: parameters must be finite")


def kl_gaussian_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    var_ratio = (q.log_var - p.log_var).exp()
    delta = q.mean - p.mean
    mahal = delta * delta * (-p.log_var).exp()
    per_dim = var_ratio + mahal - 1.0 + p.log_var - q.log_var
    return per_dim.sum(axis=-1) * 0.5


def kl_gaussian_standard(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)), summed over the last axis."""
    per_dim = q.log_var.exp() + q.mean * q.mean - 1.0 - q.log_var
    return per_dim.sum(axis=-1) * 0.5


def kl_categorical(q: CategoricalParams, p: CategoricalParams) -> Tensor:
    """Sum_i q_i log(q_i / p_i) over the last axis, with 0 log 0 = 0."""
    if q.num_classes != p.num_classes:
        raise ValueError("categoricals must have the same number of classes")
    q_probs = q.probs
    p_log = p.log_probs
    support_violated = (p_log.data == -np.inf) & (q_probs.data > 0)
    if np.any(support_violated):
        raise ValueError("KL divergence undefined: q puts mass where p has none")
    # floor the logs so that zero-probability classes contribute exactly
    # 0 * finite = 0 instead of 0 * -inf; any probability below exp(-1e4)
    # is already a hard zero in float64
    q_log = q.log_probs.maximum(-1e4)
    return (q_probs * (q_log - p_log.maximum(-1e4))).sum(axis=-1)


def entropy_categorical(q: CategoricalParams) -> Tensor:
    """Shannon entropy in nats, in [0, log L]; differentiable through logits."""
    return -(q.probs * q.log_probs.maximum(-1e4)).sum(axis=-1)


def gumbel_softmax_sample(q: CategoricalParams, cfg: GumbelConfig, rng: np.random.Generator) -> Tensor:
    """A point on the simplex whose argmax is distributed as q.

    Soft mode returns softmax((logits + Gumbel) / temperature). Hard mode
    returns the exact one-hot argmax on the forward value while gradients
    follow the relaxed sample (straight-through).
    """
    u = rng.random(q.logits.shape)
    gumbel = -np.log(-np.log(u)).astype(q.logits.dtype, copy=False)
    soft = softmax((q.logits + Tensor(gumbel)) * (1.0 / cfg.temperature))
    if not cfg.hard_forward:
        return soft
    hard = np.zeros_like(soft.data)
    idx = soft.data.argmax(axis=-1)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return soft + Tensor(hard - soft.data)


def bhattacharyya_distance(p1: DiagonalGaussian, p2: DiagonalGaussian) -> Tensor:
    """Closed-form overlap distance between two diagonal Gaussians.

    Quadratic term through the averaged covariance plus the log-determinant
    ratio, both computed per-dimension as sums of logs.
    """
    if p1.dim != p2.dim:
        raise ValueError(f"dimension mismatch: {p1.dim} vs {p2.dim}")
    _check_finite(p1, "bhattacharyya")
    _check_finite(p2, "bhattacharyya")
    lv1 = p1.log_var.maximum(LOG_VAR_FLOOR)
    lv2 = p2.log_var.maximum(LOG_VAR_FLOOR)
    var_avg = (lv1.exp() + lv2.exp()) * 0.5
    delta = p1.mean - p2.mean
    quad = (delta * delta / var_avg).sum(axis=-1) * 0.125
    log_det = (var_avg.log() - (lv1 + lv2) * 0.5).sum(axis=-1) * 0.5
    return quad + log_det


def bhattacharyya_coefficient(p1: DiagonalGaussian, p2: DiagonalGaussian) -> Tensor:
    """exp(-distance): in (0, 1], equal to 1 iff the Gaussians coincide."""
    return (-bhattacharyya_distance(p1, p2)).exp()
