"""Quantitative evaluation.

The disentanglement score follows the majority-vote protocol: fix one
ground-truth factor, sample a batch, and ask which (std-normalized) latent
dimension has the smallest variance; a majority-vote classifier from such
votes is then scored on fresh votes. Collapsed dimensions are pruned first,
so the score is invariant to per-dimension affine rescaling of the code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import DiagonalGaussian, bhattacharyya_coefficient
from .model import PartedModel
from .tensor import no_grad

__all__ = [
    "FactorScoreConfig",
    "LatentRepresentation",
    "MetricError",
    "encode_dataset",
    "representation_fn",
    "factor_score",
    "classification_accuracy",
    "prior_separation_report",
]


class MetricError(RuntimeError):
    """The metric cannot be computed on this input (e.g. collapsed code)."""


@dataclass(frozen=True)
class FactorScoreConfig:
    num_votes: int = 800
    num_eval_votes: int = 800
    samples_per_vote: int = 64
    prune_ratio: float = 0.05  # drop dims with std below this fraction of the median std
    std_sample: int = 10_000  # items used for the global std estimate
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_vote < 2:
            raise ValueError("need at least 2 samples per vote")
        if self.num_votes < 1 or self.num_eval_votes < 1:
            raise ValueError("vote counts must be positive")


@dataclass(frozen=True)
class LatentRepresentation:
    """Dimension bookkeeping for a concatenated latent code."""

    blocks: tuple  # ((name, lo, hi), ...)

    @property
    def dim(self) -> int:
        return self.blocks[-1][2]

    def block_of(self, dim: int) -> str:
        for name, lo, hi in self.blocks:
            if lo <= dim < hi:
                return name
        raise IndexError(dim)


def representation_fn(model: PartedModel, include_class_probs: bool = False):
    """Image batch -> latent code matrix, plus the block layout.

    The code concatenates posterior means of z and of every u_k (computed
    under the argmax class); optionally the class probabilities are appended
    so the discrete variable can itself be scored.
    """
    blocks = [("z", 0, model.shape.d_z)]
    off = model.shape.d_z
    for k in range(model.shape.K):
        blocks.append((f"u{k}", off, off + model.shape.d_u))
        off += model.shape.d_u
    if include_class_probs:
        for k, l in enumerate(model.shape.L):
            blocks.append((f"c{k}", off, off + l))
            off += l
    layout = LatentRepresentation(tuple(blocks))

    def fn(images: np.ndarray) -> np.ndarray:
        with no_grad():
            parts = [model.latent_means(images)]
            if include_class_probs:
                for k in range(model.shape.K):
                    parts.append(model.class_probabilities(images, k))
            return np.concatenate(parts, axis=1)

    return fn, layout


def encode_dataset(fn, dataset, indices, chunk: int = 512) -> np.ndarray:
    rows = []
    indices = np.asarray(indices)
    for lo in range(0, len(indices), chunk):
        rows.append(fn(dataset.image_batch(indices[lo : lo + chunk])))
    return np.concatenate(rows, axis=0)


def factor_score(repr_fn, dataset, cfg: FactorScoreConfig = FactorScoreConfig()) -> float:
    """Majority-vote disentanglement score in [0, 1].

    ``dataset`` must expose factor structure (``factor_sizes`` and
    ``sample_fixed_factor_batch``); ``repr_fn`` maps an image batch to a
    code matrix. Deterministic given (repr_fn, dataset, cfg.seed).
    """
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    take = min(n, cfg.std_sample)
    idx = rng.choice(n, size=take, replace=False)
    codes = encode_dataset(repr_fn, dataset, idx)
    global_std = codes.std(axis=0)
    threshold = cfg.prune_ratio * np.median(global_std)
    kept = np.flatnonzero(global_std >= max(threshold, 1e-12))
    if kept.size == 0:
        raise MetricError("all latent dimensions are collapsed; nothing to score")
    scale = global_std[kept]

    eligible = [f for f, size in enumerate(dataset.factor_sizes) if size >= 2]
    if not eligible:
        raise MetricError("dataset has no factor with at least 2 levels")

    def collect(num: int) -> np.ndarray:
        votes = np.zeros((len(dataset.factor_sizes), kept.size), dtype=np.int64)
        for _ in range(num):
            f = eligible[rng.integers(len(eligible))]
            images, _ = dataset.sample_fixed_factor_batch(f, cfg.samples_per_vote, rng)
            code = repr_fn(images)[:, kept] / scale
            votes[f, np.argmin(code.var(axis=0))] += 1
        return votes

    train_votes = collect(cfg.num_votes)
    classifier = np.argmax(train_votes, axis=0)  # latent dim -> factor
    eval_votes = collect(cfg.num_eval_votes)
    correct = eval_votes[classifier, np.arange(kept.size)].sum()
    return float(correct / eval_votes.sum())


def classification_accuracy(model: PartedModel, dataset, indices=None, k: int = 0, chunk: int = 512) -> float:
    """Fraction of items whose argmax class posterior equals the label."""
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices)
    labels = np.asarray(dataset.labels)[indices]
    hits = 0
    with no_grad():
        for lo in range(0, len(indices), chunk):
            sub = indices[lo : lo + chunk]
            pred = model.predict_classes(dataset.image_batch(sub), k)
            hits += int((pred == labels[lo : lo + chunk]).sum())
    return hits / len(indices)


def prior_separation_report(model: PartedModel, delta: float) -> dict:
    """Per-variable matrix of pairwise prior-mode overlap coefficients.

    Returns {k: {"matrix": [L,L] symmetric with unit diagonal,
    "exceeding": count of i<j pairs above delta, "max_offdiag": float}}.
    """
    report = {}
    with no_grad():
        for k in range(model.shape.K):
            l = model.shape.L[k]
            mat = np.eye(l)
            exceeding = 0
            for i in range(l):
                for j in range(i + 1, l):
                    bc = bhattacharyya_coefficient(model.prior_mode(k, i), model.prior_mode(k, j)).item()
                    mat[i, j] = mat[j, i] = bc
                    if bc > delta:
                        exceeding += 1
            report[k] = {
                "matrix": mat,
                "exceeding": exceeding,
                "max_offdiag": float(mat[~np.eye(l, dtype=bool)].max()) if l > 1 else 0.0,
            }
    return report
