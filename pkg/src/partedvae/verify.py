"""Release-gate oracle suite.

Each check recomputes a quantity along an independent route (finite
differences, adaptive quadrature, grid integration, inner products) and
compares it with the implementation under a pinned tolerance. The suite is
what `pvae verify` runs; a fresh build must pass every check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from .distributions import DiagonalGaussian, GumbelConfig, bhattacharyya_coefficient
from .gradcheck import finite_difference_check
from .model import ModelShape, PartedModel
from .objective import CapacitySchedule, ObjectiveConfig, compute_objective
from .tensor import Tensor, conv2d, conv2d_transpose, make_rng

__all__ = ["CheckResult", "run_all_checks", "CHECK_NAMES"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:34s} measured={self.measured:.3e}  tolerance={self.tolerance:.0e}  {self.detail}"


CHECK_NAMES = (
    "objective_gradient_fd",
    "bhattacharyya_quadrature",
    "aggregate_decomposition",
    "mi_bound_z",
    "mi_bound_u",
    "conv_adjoint",
)


def check_objective_gradient(seed: int = 0) -> CheckResult:
    """Reverse-mode gradient of the complete objective vs central finite
    differences on a two-image batch of a tiny float64 model."""
    shape = ModelShape(K=1, L=(2,), d_u=1, d_z=2, image_shape=(1, 8, 8), h_dim=8)
    model = PartedModel(shape, make_rng(seed), arch="mlp", mlp_hidden=(10,), dtype=np.float64, attention_init="random")
    x = make_rng(seed + 1).random((2, 1, 8, 8))
    cfg = ObjectiveConfig(
        gamma_c=1.0,
        gamma_h=1.0,
        gamma_u=1.0,
        gamma_z=1.0,
        gamma_bc=1.0,
        delta=0.1,
        capacity_u=CapacitySchedule(0.0, 2.0, 100),
        capacity_z=CapacitySchedule(0.0, 3.0, 100),
        gumbel=GumbelConfig(temperature=0.67),
        u_kl_mode="enumerate",
    )

    def loss():
        return compute_objective(x, model, cfg, 13, make_rng(seed + 2)).total

    err = finite_difference_check(loss, model.parameters(), max_entries_per_param=5, rng=make_rng(seed + 3))
    return CheckResult("objective_gradient_fd", err < 1e-4, err, 1e-4, "full objective, 2-image batch")


def check_bhattacharyya_quadrature(seed: int = 0, pairs: int = 200, bc_fn=bhattacharyya_coefficient) -> CheckResult:
    """Closed form vs adaptive quadrature of the overlap integral on random
    1-d Gaussian pairs. ``bc_fn`` is injectable so a corrupted formula can be
    shown to trip this check."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        m1, m2 = rng.normal(scale=2.0, size=2)
        lv1, lv2 = rng.uniform(-2.0, 2.0, size=2)
        got = bc_fn(DiagonalGaussian(Tensor([m1]), Tensor([lv1])), DiagonalGaussian(Tensor([m2]), Tensor([lv2]))).item()
        s1, s2 = np.sqrt(np.exp(lv1)), np.sqrt(np.exp(lv2))
        want, _ = integrate.quad(lambda z: np.sqrt(stats.norm.pdf(z, m1, s1) * stats.norm.pdf(z, m2, s2)), -np.inf, np.inf)
        worst = max(worst, abs(got - want))
    return CheckResult("bhattacharyya_quadrature", worst < 1e-6, worst, 1e-6, f"{pairs} random 1-d pairs")


def check_aggregate_decomposition(seed: int = 0, batches: int = 50) -> CheckResult:
    """E_batch KL(q(c|x)||p) must equal E_batch KL(q(c|x)||q_hat) +
    KL(q_hat||p) for the batch aggregate q_hat."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(batches):
        b, l = int(rng.integers(2, 40)), int(rng.integers(2, 9))
        logits = rng.normal(size=(b, l)) * 3.0
        p = rng.dirichlet(np.ones(l))
        q = np.exp(logits - logits.max(axis=1, keepdims=True))
        q /= q.sum(axis=1, keepdims=True)
        q_hat = q.mean(axis=0)
        lhs = (q * (np.log(q) - np.log(p))).sum(axis=1).mean()
        rhs = (q * (np.log(q) - np.log(q_hat))).sum(axis=1).mean() + (q_hat * (np.log(q_hat) - np.log(p))).sum()
        worst = max(worst, abs(lhs - rhs))
    return CheckResult("aggregate_decomposition", worst < 1e-8, worst, 1e-8, f"{batches} random batches")


def _grid_mi(weights: np.ndarray, densities: np.ndarray, grid: np.ndarray) -> float:
    """I(x; latent) for finitely many x: weights[i] = p(x_i), densities[i] =
    conditional pdf on the grid. Trapezoidal integration."""
    marginal = (weights[:, None] * densities).sum(axis=0)
    total = 0.0
    for w, d in zip(weights, densities):
        mask = d > 1e-300
        ratio = np.zeros_like(d)
        ratio[mask] = d[mask] * (np.log(d[mask]) - np.log(marginal[mask]))
        total += w * np.trapezoid(ratio, grid)
    return total


def check_mi_bound_z(seed: int = 0) -> CheckResult:
    """On a discretized toy model, the batch-mean KL to the prior must upper
    bound the mutual information (estimated by grid quadrature)."""
    rng = make_rng(seed)
    n = 6
    means = rng.normal(scale=1.5, size=n)
    log_vars = rng.uniform(-1.5, 0.5, size=n)
    weights = np.full(n, 1.0 / n)
    grid = np.linspace(-12.0, 12.0, 24001)
    densities = np.stack([stats.norm.pdf(grid, m, np.sqrt(np.exp(lv))) for m, lv in zip(means, log_vars)])
    mi = _grid_mi(weights, densities, grid)
    kl_mean = float(np.mean([0.5 * (np.exp(lv) + m * m - 1.0 - lv) for m, lv in zip(means, log_vars)]))
    gap = kl_mean - mi
    return CheckResult("mi_bound_z", gap >= -1e-3, gap, 1e-3, f"KL={kl_mean:.4f} >= MI={mi:.4f}")


def check_mi_bound_u(seed: int = 0) -> CheckResult:
    """Same bound for the class-conditional term: E_x E_{q(c|x)} KL of the u
    posterior to its prior mode upper-bounds E_{q(c)} I(x; u | c)."""
    rng = make_rng(seed + 100)
    n, classes = 6, 2
    q_c = rng.dirichlet(np.ones(classes), size=n)  # q(c|x_i)
    post_means = rng.normal(scale=1.2, size=(n, classes))
    post_lvs = rng.uniform(-1.5, 0.0, size=(n, classes))
    prior_means = rng.normal(scale=0.5, size=classes)
    prior_lvs = rng.uniform(-0.5, 0.5, size=classes)
    p_x = np.full(n, 1.0 / n)

    lhs = 0.0
    for i in range(n):
        for j in range(classes):
            m, lv = post_means[i, j], post_lvs[i, j]
            pm, plv = prior_means[j], prior_lvs[j]
            kl = 0.5 * (np.exp(lv - plv) + (m - pm) ** 2 / np.exp(plv) - 1.0 + plv - lv)
            lhs += p_x[i] * q_c[i, j] * kl

    grid = np.linspace(-12.0, 12.0, 24001)
    rhs = 0.0
    marginal_c = (p_x[:, None] * q_c).sum(axis=0)  # q(c)
    for j in range(classes):
        x_given_c = p_x * q_c[:, j] / marginal_c[j]
        densities = np.stack(
            [stats.norm.pdf(grid, post_means[i, j], np.sqrt(np.exp(post_lvs[i, j]))) for i in range(n)]
        )
        rhs += marginal_c[j] * _grid_mi(x_given_c, densities, grid)
    gap = lhs - rhs
    return CheckResult("mi_bound_u", gap >= -1e-3, gap, 1e-3, f"KL={lhs:.4f} >= E[MI|c]={rhs:.4f}")


def check_conv_adjoint(seed: int = 0, instances: int = 20) -> CheckResult:
    """<conv(x,k), y> must equal <x, conv_transpose(y,k)> exactly (as linear
    adjoints) on random small instances, float64."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(instances):
        b, c, f = (int(v) for v in rng.integers(1, 4, size=3))
        h = int(rng.integers(4, 10)) * 2
        x = Tensor(rng.normal(size=(b, c, h, h)))
        k = Tensor(rng.normal(size=(f, c, 4, 4)))
        y = Tensor(rng.normal(size=(b, f, h // 2, h // 2)))
        lhs = float((conv2d(x, k).data * y.data).sum())
        rhs = float((x.data * conv2d_transpose(y, k).data).sum())
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return CheckResult("conv_adjoint", worst < 1e-10, worst, 1e-10, f"{instances} random instances")


def run_all_checks(seed: int = 0, bc_fn=bhattacharyya_coefficient) -> list:
    return [
        check_objective_gradient(seed),
        check_bhattacharyya_quadrature(seed, bc_fn=bc_fn),
        check_aggregate_decomposition(seed),
        check_mi_bound_z(seed),
        check_mi_bound_u(seed),
        check_conv_adjoint(seed),
    ]
