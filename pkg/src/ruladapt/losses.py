"""Domain-alignment and regularization losses.

The discrepancy term is the biased squared-MMD estimator with an RBF kernel
k(x, y) = exp(-||x - y||^2 / (2 sigma^2)); in median-heuristic mode
2 sigma^2 is set to the median of the pooled pairwise squared distances of
the concatenated batch, recomputed per call and treated as a constant with
respect to gradients.  Baseline alternatives (covariance alignment, an
adversarial domain classifier behind a gradient-reversal layer) share the
same calling conventions so the trainer can swap them per variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    bandwidth_mode: str = "median_heuristic"  # or "fixed"
    bandwidth: float | None = None  # sigma, used in fixed mode

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.bandwidth_mode not in ("median_heuristic", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.bandwidth_mode == "fixed":
            if self.bandwidth is None or self.bandwidth <= 0:
                raise ValueError("fixed mode requires a positive bandwidth")


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.35
    lambda_r: float = 0.2
    lambda_s: float = 0.35
    gamma_noise: float = 0.1
    da_start_iteration: int = 200

    def __post_init__(self):
        for name in ("lambda_m", "lambda_r", "lambda_s", "gamma_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.da_start_iteration < 0:
            raise ValueError("da_start_iteration must be non-negative")


def rul_mse(y_hat: Tensor, y: Tensor) -> Tensor:
    """(1/N) sum of squared label errors over the source batch."""
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y_hat.data.size == 0:
        raise ValueError("empty batch")
    return ad.tmean(ad.square(ad.sub(y_hat, y)))


def _sigma_sq(sqdists: np.ndarray, n_total: int, spec: KernelSpec) -> float:
    if spec.bandwidth_mode == "fixed":
        return float(spec.bandwidth) ** 2
    off_diag = sqdists[~np.eye(n_total, dtype=bool)]
    median = float(np.median(off_diag)) if off_diag.size else 0.0
    if median <= 0.0:
        return 0.5  # degenerate batch (all rows identical); 2 sigma^2 = 1
    return 0.5 * median


def mmd2(a: Tensor, b: Tensor, spec: KernelSpec) -> Tensor:
    """Biased squared-MMD estimate between row sets a (n, d) and b (m, d).

    Computed from a single pairwise-squared-distance matrix over the
    concatenated batch:
      (1/n^2) sum k(a_i, a_j) + (1/m^2) sum k(b_i, b_j) - (2/nm) sum k(a_i, b_j).
    Differentiable w.r.t. both inputs; the bandwidth is a constant.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"row sets must share width, got {a.shape} and {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n < 1 or m < 1:
        raise ValueError("both sample sets must be non-empty")
    z = ad.concat([a, b], axis=0)
    sqd = ad.pairwise_sqdist(z, z)
    sigma_sq = _sigma_sq(sqd.data, n + m, spec)
    k = ad.exp(ad.scale(sqd, -0.5 / sigma_sq))
    k_aa = ad.tsum(k[:n, :n])
    k_bb = ad.tsum(k[n:, n:])
    k_ab = ad.tsum(k[:n, n:])
    return ad.add(
        ad.add(ad.scale(k_aa, 1.0 / (n * n)), ad.scale(k_bb, 1.0 / (m * m))),
        ad.scale(k_ab, -2.0 / (n * m)),
    )


def latent_mmd(c_s: Tensor, c_t: Tensor, o_s: Tensor, o_t: Tensor, spec: KernelSpec) -> Tensor:
    """Sum of the bottleneck-level and pre-head-level discrepancies."""
    if c_s.shape[1] != c_t.shape[1] or o_s.shape[1] != o_t.shape[1]:
        raise ValueError("latent widths differ between the two streams")
    return ad.add(mmd2(c_s, c_t, spec), mmd2(o_s, o_t, spec))


def recon_loss(x_s: Tensor, x_hat_s: Tensor, x_t: Tensor, x_hat_t: Tensor) -> Tensor:
    """Elementwise MSE over source windows plus the same over target windows."""
    if x_s.shape != x_hat_s.shape or x_t.shape != x_hat_t.shape:
        raise ValueError("reconstruction shapes do not match inputs")
    return ad.add(
        ad.tmean(ad.square(ad.sub(x_s, x_hat_s))),
        ad.tmean(ad.square(ad.sub(x_t, x_hat_t))),
    )


def smooth_loss(
    c: Tensor,
    predict_fn: Callable[[Tensor], Tensor],
    gamma_noise: float,
    rng: np.random.Generator,
) -> Tensor:
    """Per-sample squared prediction change under a Gaussian bottleneck
    perturbation: (1/N) ||F(C) - F(C + gamma * delta)||^2, fresh delta each
    call; gradients flow through both branches."""
    if gamma_noise < 0:
        raise ValueError("gamma_noise must be non-negative")
    delta = rng.standard_normal(size=c.shape)
    perturbed = ad.add(c, ad.constant(gamma_noise * delta))
    diff = ad.sub(predict_fn(c), predict_fn(perturbed))
    return ad.scale(ad.sqnorm(diff), 1.0 / c.shape[0])


def coral_loss(o_s: Tensor, o_t: Tensor) -> Tensor:
    """Frobenius gap between the two feature covariances, scaled by 1/(4 d^2)."""
    if o_s.shape[0] < 2 or o_t.shape[0] < 2:
        raise ValueError("covariance alignment needs at least 2 samples per domain")
    if o_s.shape[1] != o_t.shape[1]:
        raise ValueError("feature widths differ")
    d = o_s.shape[1]

    def cov(x: Tensor) -> Tensor:
        centered = ad.sub(x, ad.tmean(x, axis=0, keepdims=True))
        return ad.scale(ad.matmul(ad.transpose(centered), centered), 1.0 / (x.shape[0] - 1))

    gap = ad.sub(cov(o_s), cov(o_t))
    return ad.scale(ad.sqnorm(gap), 1.0 / (4.0 * d * d))


class DomainDiscriminator:
    """Two-layer feed-forward binary domain classifier on the bottleneck."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        def xavier(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        self.params = {
            "disc.1.W": Tensor(xavier(in_dim, hidden), requires_grad=True),
            "disc.1.b": Tensor(np.zeros(hidden), requires_grad=True),
            "disc.2.W": Tensor(xavier(hidden, 1), requires_grad=True),
            "disc.2.b": Tensor(np.zeros(1), requires_grad=True),
        }

    def logits(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.params["disc.1.W"]), self.params["disc.1.b"]))
        return ad.add(ad.matmul(h, self.params["disc.2.W"]), self.params["disc.2.b"])

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def dann_loss(
    c_s: Tensor,
    c_t: Tensor,
    discriminator: DomainDiscriminator,
    reversal_weight: float,
) -> Tensor:
    """Binary cross-entropy of domain prediction (source=1, target=0).

    The bottleneck inputs pass through a gradient-reversal layer, so the
    discriminator trains to separate domains while the feature path receives
    the sign-flipped gradient scaled by `reversal_weight`.
    """
    z_s = discriminator.logits(ad.grad_reverse(c_s, reversal_weight))
    z_t = discriminator.logits(ad.grad_reverse(c_t, reversal_weight))
    n_total = c_s.shape[0] + c_t.shape[0]
    nll_s = ad.scale(ad.tsum(ad.log(ad.sigmoid(z_s))), -1.0)
    nll_t = ad.scale(ad.tsum(ad.log(ad.sigmoid(ad.scale(z_t, -1.0)))), -1.0)
    return ad.scale(ad.add(nll_s, nll_t), 1.0 / n_total)


@dataclass
class LossParts:
    """Composite-loss inputs; the optional terms are thunks so that gated
    terms are never evaluated before their start iteration."""

    rul: Tensor
    discrepancy: Callable[[], Tensor] | None = None
    recon: Callable[[], Tensor] | None = None
    smooth: Callable[[], Tensor] | None = None
    adversarial: Callable[[], Tensor] | None = None
    terms: dict = field(default_factory=dict)


def composite_loss(parts: LossParts, weights: LossWeights, iteration: int) -> Tensor:
    """Supervised label loss plus gated, weighted adaptation terms.

    Before `weights.da_start_iteration` the label loss tensor is returned
    unchanged.  Afterwards each provided term is evaluated once, scaled, and
    added (the adversarial term carries its weight inside the reversal
    layer, so it enters with coefficient 1).  Evaluated values are recorded
    in `parts.terms` for logging.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    parts.terms = {"rul": float(parts.rul.data)}
    total = parts.rul
    if iteration < weights.da_start_iteration:
        return total
    if parts.discrepancy is not None and weights.lambda_m > 0:
        term = parts.discrepancy()
        parts.terms["discrepancy"] = float(term.data)
        total = ad.add(total, ad.scale(term, weights.lambda_m))
    if parts.recon is not None and weights.lambda_r > 0:
        term = parts.recon()
        parts.terms["recon"] = float(term.data)
        total = ad.add(total, ad.scale(term, weights.lambda_r))
    if parts.smooth is not None and weights.lambda_s > 0:
        term = parts.smooth()
        parts.terms["smooth"] = float(term.data)
        total = ad.add(total, ad.scale(term, weights.lambda_s))
    if parts.adversarial is not None:
        term = parts.adversarial()
        parts.terms["adversarial"] = float(term.data)
        total = ad.add(total, term)
    return total
