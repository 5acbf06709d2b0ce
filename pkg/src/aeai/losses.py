"""The four training loss terms and their weighted sum.

For an endpoint pair the objective is

    total = recon + lambda1 * adversarial + lambda2 * cycle + lambda3 * smooth

where recon is per-pixel MSE at the two endpoints, adversarial is the sum of
-log D over the decoded interpolants, cycle is the squared latent round-trip
error at the interpolants, and smooth penalizes squared image-space velocity
along the interpolation parameter (forward differences on the alpha grid).
Batched variants average over pairs so the scale is independent of batch
size. The discriminator trains against its own binary cross-entropy, with
probabilities clamped so every loss value is finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "mse",
    "loss_reconstruction",
    "loss_adversarial_gen",
    "loss_discriminator",
    "loss_cycle",
    "loss_smoothness",
    "loss_smoothness_irregular",
    "loss_total",
]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 0.01
    lambda3: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_r: float = 0.0
    l_a: float = 0.0
    l_c: float = 0.0
    l_s: float = 0.0
    total: float = 0.0
    per_alpha: dict = field(default_factory=dict)


def mse(x: Tensor, xhat: Tensor) -> Tensor:
    """Per-pixel mean squared error over everything passed in."""
    diff = ad.sub(xhat, x)
    return ad.scalar_mul(ad.sum_squares(diff), 1.0 / diff.size)


def loss_reconstruction(x_i, x_j, xhat_i, xhat_j) -> Tensor:
    """MSE(x_i, xhat_i) + MSE(x_j, xhat_j); symmetric in endpoint order."""
    return ad.add(mse(x_i, xhat_i), mse(x_j, xhat_j))


def loss_adversarial_gen(d, interpolants: Tensor, num_pairs: int = 1) -> Tensor:
    """Sum of -log D over decoded interpolants, averaged over pairs.

    D's parameters are frozen: gradient flows only through D's input back
    into the decoder and encoder.
    """
    probs = d.forward(interpolants, mode="eval", frozen=True)
    loss = ad.binary_cross_entropy(probs, 1.0, reduction="sum")
    if num_pairs != 1:
        loss = ad.scalar_mul(loss, 1.0 / num_pairs)
    return loss


def loss_discriminator(d, real, fake, mode: str = "train") -> Tensor:
    """mean(-log D(real)) + mean(-log(1 - D(fake))).

    Real and fake batches must be the same size; they are scored in a single
    forward pass so batch normalization sees both populations. ``fake`` must
    already be detached from the generator graph.
    """
    real_data = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float32)
    fake_data = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=np.float32)
    if real_data.shape != fake_data.shape:
        raise ad.ShapeError("loss-discriminator", real_data.shape, fake_data.shape)
    n = real_data.shape[0]
    batch = Tensor(np.concatenate([real_data, fake_data], axis=0))
    targets = np.zeros((2 * n, 1), dtype=batch.dtype)
    targets[:n] = 1.0
    probs = d.forward(batch, mode=mode)
    return ad.scalar_mul(ad.binary_cross_entropy(probs, targets, reduction="mean"), 2.0)


def loss_cycle(z_targets, z_hats: Tensor, num_pairs: int = 1) -> Tensor:
    """Sum of squared latent round-trip errors; targets are constants."""
    targets = z_targets.data if isinstance(z_targets, Tensor) else np.asarray(z_targets)
    if tuple(targets.shape) != tuple(z_hats.shape):
        raise ad.ShapeError("loss-cycle", targets.shape, z_hats.shape)
    loss = ad.sum_squares(ad.sub(z_hats, Tensor(targets.astype(z_hats.data.dtype, copy=False))))
    if num_pairs != 1:
        loss = ad.scalar_mul(loss, 1.0 / num_pairs)
    return loss


def loss_smoothness(interpolants: Tensor, M: int, num_pairs: int = 1) -> Tensor:
    """Discrete squared-velocity penalty on a uniform alpha grid.

    ``interpolants`` stacks the M+1 grid points along axis 0, alpha-major,
    with ``num_pairs`` rows per grid point: sum over the M forward
    differences of ||M * (x(n+1) - x(n))||^2, averaged over pairs.
    """
    if M < 1 or interpolants.shape[0] != (M + 1) * num_pairs:
        raise ad.ShapeError("loss-smoothness", interpolants.shape, (M + 1, num_pairs))
    total = None
    p = num_pairs
    for n in range(M):
        a = ad.narrow(interpolants, n * p, (n + 1) * p)
        b = ad.narrow(interpolants, (n + 1) * p, (n + 2) * p)
        term = ad.sum_squares(ad.scalar_mul(ad.sub(b, a), float(M)))
        total = term if total is None else ad.add(total, term)
    if num_pairs != 1:
        total = ad.scalar_mul(total, 1.0 / num_pairs)
    return total


def loss_smoothness_irregular(interpolants: Tensor, inv_deltas, num_pairs: int) -> Tensor:
    """Squared-velocity penalty for a non-uniform, per-pair alpha grid.

    ``inv_deltas`` holds one (num_pairs,) array of 1/delta-alpha per
    consecutive segment, in grid order.
    """
    k = len(inv_deltas) + 1
    if interpolants.shape[0] != k * num_pairs:
        raise ad.ShapeError("loss-smoothness", interpolants.shape, (k, num_pairs))
    extra = (1,) * (len(interpolants.shape) - 1)
    total = None
    p = num_pairs
    for n, inv in enumerate(inv_deltas):
        a = ad.narrow(interpolants, n * p, (n + 1) * p)
        b = ad.narrow(interpolants, (n + 1) * p, (n + 2) * p)
        scaled = ad.const_mul(ad.sub(b, a), np.asarray(inv).reshape(p, *extra))
        term = ad.sum_squares(scaled)
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(total, 1.0 / num_pairs)


def loss_total(l_r, l_a, l_c, l_s, weights: LossWeights):
    """Weighted sum; skipped terms may be passed as None.

    Returns (total tensor, LossBreakdown of floats). The breakdown satisfies
    total == l_r + lambda1*l_a + lambda2*l_c + lambda3*l_s up to float
    rounding, with skipped terms reading 0.
    """
    total = l_r
    for term, lam in ((l_a, weights.lambda1), (l_c, weights.lambda2), (l_s, weights.lambda3)):
        if term is not None:
            total = ad.add(total, ad.scalar_mul(term, lam))
    breakdown = LossBreakdown(
        l_r=float(l_r.data),
        l_a=float(l_a.data) if l_a is not None else 0.0,
        l_c=float(l_c.data) if l_c is not None else 0.0,
        l_s=float(l_s.data) if l_s is not None else 0.0,
        total=float(total.data),
    )
    return total, breakdown
