"""The training objective.

Minimized total =
    reconstruction loss
  + gamma_u  * E_batch | sum_k E_{q(c_k|x)} KL(q(u_k|c_k,x) || prior mode) - C_u(t) |
  + gamma_h  * E_batch sum_k H(q(c_k|x))
  + gamma_c  * sum_k KL(batch-aggregate q(c_k) || p(c_k))
  + gamma_z  * E_batch | KL(q(z|x) || N(0,I)) - C_z(t) |
  + gamma_bc * sum_k sum_{i<j} max(BC(mode_i, mode_j) - delta, 0)

The capacities C_u and C_z ramp linearly over training so the information
rate of each continuous channel grows gradually. The aggregate class
posterior is estimated from the current minibatch and differentiated
through, since it is exactly the term that pulls the aggregate toward the
class prior. The overlap penalty sums strictly over i < j: the diagonal
would add the constant L * max(1 - delta, 0) with zero gradient, distorting
logged values for nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    CategoricalParams,
    DiagonalGaussian,
    GumbelConfig,
    bhattacharyya_coefficient,
    entropy_categorical,
    kl_gaussian_gaussian,
    kl_gaussian_standard,
    sample_gaussian,
)
from .model import EncodeResult, PartedModel
from .optim import TrainingError
from .tensor import Tensor, log_softmax, no_grad, relu, sigmoid, softplus

__all__ = [
    "CapacitySchedule",
    "ObjectiveConfig",
    "LossBreakdown",
    "capacity_at",
    "reconstruction_loss",
    "expected_u_kl",
    "aggregate_class_kl",
    "overlap_penalty",
    "compute_objective",
    "semi_supervised_loss",
]


@dataclass(frozen=True)
class CapacitySchedule:
    start: float
    end: float
    ramp_iters: int

    def __post_init__(self):
        if self.ramp_iters <= 0:
            raise ValueError("capacity ramp needs at least one iteration")
        if self.end < self.start:
            raise ValueError("capacity must be non-decreasing along the ramp")


def capacity_at(schedule: CapacitySchedule, iteration: int) -> float:
    """Linear interpolation from start to end, then constant."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    frac = min(iteration / schedule.ramp_iters, 1.0)
    return schedule.start + (schedule.end - schedule.start) * frac


@dataclass
class ObjectiveConfig:
    gamma_c: float = 100.0
    gamma_h: float = 10.0
    gamma_u: float = 50.0
    gamma_z: float = 50.0
    gamma_bc: float = 10.0
    delta: float = 0.1
    capacity_u: CapacitySchedule = CapacitySchedule(0.0, 5.0, 300_000)
    capacity_z: CapacitySchedule = CapacitySchedule(0.0, 30.0, 300_000)
    reconstruction: str = "bce"
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    u_kl_mode: str = "sample"

    def __post_init__(self):
        for name in ("gamma_c", "gamma_h", "gamma_u", "gamma_z", "gamma_bc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.reconstruction not in ("bce", "mae"):
            raise ValueError(f"unknown reconstruction loss {self.reconstruction!r}")
        if self.u_kl_mode not in ("sample", "enumerate"):
            raise ValueError(f"unknown u KL mode {self.u_kl_mode!r}")


@dataclass
class LossBreakdown:
    """Raw (unweighted) term values plus the weighted total used for the
    gradient step. ``total`` is a graph node until detached by the caller."""

    reconstruction: float
    u_capacity: float
    entropy: float
    aggregate: float
    z_capacity: float
    bc_penalty: float
    c_u: float
    c_z: float
    total: Tensor

    COLUMNS = ("reconstruction", "u_capacity", "entropy", "aggregate", "z_capacity", "bc_penalty", "c_u", "c_z")

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in self.COLUMNS)


def reconstruction_loss(logits: Tensor, x: Tensor, kind: str) -> Tensor:
    """Per-pixel loss summed over pixels, averaged over the batch.

    ``bce`` is the Bernoulli cross-entropy computed from logits
    (softplus(l) - l*x, exact and overflow-safe); ``mae`` is the absolute
    error of the sigmoid output.
    """
    b = logits.shape[0]
    if kind == "bce":
        per_pixel = softplus(logits) - logits * x
    else:
        per_pixel = (sigmoid(logits) - x).abs()
    return per_pixel.sum() * (1.0 / b)


def expected_u_kl(enc: EncodeResult, model: PartedModel, k: int, mode: str) -> Tensor:
    """Per-datum E_{q(c_k|x)} KL(q(u_k|c_k,x) || prior mode), shape [B].

    enumerate: exact expectation; one attention-gated posterior per class
    value, each scored against its own prior mode, weighted by q(c_k=i|x).
    sample: single-sample estimate; the posterior produced by the relaxed
    class sample is scored against the bank parameters mixed by that same
    sample.
    """
    if mode == "enumerate":
        total = None
        q = enc.c_posteriors[k].probs
        for i in range(model.shape.L[k]):
            post_i = model.u_posterior_for_class(enc.h, k, i)
            kl_i = kl_gaussian_gaussian(post_i, model.prior_mode(k, i))
            contrib = q[:, i] * kl_i
            total = contrib if total is None else total + contrib
        return total
    bank = model.prior_bank(k)
    c_tilde = enc.c_samples[k]
    mixed = DiagonalGaussian(c_tilde @ bank.mean, c_tilde @ bank.log_var)
    return kl_gaussian_gaussian(enc.u_posteriors[k], mixed)


def aggregate_class_kl(enc: EncodeResult, model: PartedModel, k: int) -> Tensor:
    """KL(batch-mean posterior || p(c_k)); the minibatch estimate of the
    aggregate-posterior term, kept in the graph."""
    q_hat = enc.c_posteriors[k].probs.mean(axis=0)
    log_p = np.log(model.prior_c[k])
    return (q_hat * (q_hat.log() - Tensor(log_p))).sum()


def overlap_penalty(model: PartedModel, k: int, delta: float) -> Tensor:
    """sum_{i<j} max(BC(mode_i, mode_j) - delta, 0) for variable k."""
    total = None
    for i in range(model.shape.L[k]):
        for j in range(i + 1, model.shape.L[k]):
            bc = bhattacharyya_coefficient(model.prior_mode(k, i), model.prior_mode(k, j))
            term = relu(bc - delta)
            total = term if total is None else total + term
    return total


def compute_objective(
    x,
    model: PartedModel,
    cfg: ObjectiveConfig,
    iteration: int,
    rng: np.random.Generator,
) -> LossBreakdown:
    """One full forward pass of the objective on a minibatch.

    Terms with a zero weight are excluded from the gradient graph (their raw
    values are still computed, without grad, for the log).
    """
    x = model._as_input(x)
    if x.shape[0] < 2:
        raise ValueError("objective needs a batch of at least 2 (aggregate estimate)")
    enc = model.encode(x, cfg.gumbel, rng)
    u_samples = [sample_gaussian(p, rng) for p in enc.u_posteriors]
    z_sample = sample_gaussian(enc.z_posterior, rng)
    logits = model.decode_logits(u_samples, z_sample)
    recon = reconstruction_loss(logits, x, cfg.reconstruction)

    c_u = capacity_at(cfg.capacity_u, iteration)
    c_z = capacity_at(cfg.capacity_z, iteration)

    def u_capacity_term():
        per_datum = None
        for k in range(model.shape.K):
            kl_k = expected_u_kl(enc, model, k, cfg.u_kl_mode)
            per_datum = kl_k if per_datum is None else per_datum + kl_k
        return (per_datum - c_u).abs().mean()

    def entropy_term():
        total = None
        for k in range(model.shape.K):
            h_k = entropy_categorical(enc.c_posteriors[k]).mean()
            total = h_k if total is None else total + h_k
        return total

    def aggregate_term():
        total = None
        for k in range(model.shape.K):
            t = aggregate_class_kl(enc, model, k)
            total = t if total is None else total + t
        return total

    def z_capacity_term():
        return (kl_gaussian_standard(enc.z_posterior) - c_z).abs().mean()

    def bc_term():
        total = None
        for k in range(model.shape.K):
            t = overlap_penalty(model, k, cfg.delta)
            total = t if total is None else total + t
        return total

    total = recon
    raw = {}
    for name, gamma, fn in (
        ("u_capacity", cfg.gamma_u, u_capacity_term),
        ("entropy", cfg.gamma_h, entropy_term),
        ("aggregate", cfg.gamma_c, aggregate_term),
        ("z_capacity", cfg.gamma_z, z_capacity_term),
        ("bc_penalty", cfg.gamma_bc, bc_term),
    ):
        if gamma > 0:
            term = fn()
            total = total + term * gamma
            raw[name] = term.item()
        else:
            with no_grad():
                raw[name] = fn().item()

    raw["reconstruction"] = recon.item()
    for name, value in raw.items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} term at iteration {iteration}")
    return LossBreakdown(
        reconstruction=raw["reconstruction"],
        u_capacity=raw["u_capacity"],
        entropy=raw["entropy"],
        aggregate=raw["aggregate"],
        z_capacity=raw["z_capacity"],
        bc_penalty=raw["bc_penalty"],
        c_u=c_u,
        c_z=c_z,
        total=total,
    )


def semi_supervised_loss(x, labels, model: PartedModel) -> Tensor:
    """Cross-entropy of the class posteriors at the true labels, averaged
    over the batch: touches only encoder parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    x = model._as_input(x)
    b = x.shape[0]
    if labels.shape != (b, model.shape.K):
        raise ValueError(f"labels must be [{b}, {model.shape.K}], got {labels.shape}")
    h = model.features(x)
    total = None
    for k in range(model.shape.K):
        y_k = labels[:, k]
        if y_k.min() < 0 or y_k.max() >= model.shape.L[k]:
            raise ValueError(f"label out of range for variable {k}")
        log_q = log_softmax(model.class_logits(h, k))
        picked = log_q[np.arange(b), y_k]
        total = picked if total is None else total + picked
    return -total.mean()
