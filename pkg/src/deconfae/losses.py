"""Objective terms for the deconfounding autoencoder family and baselines.

All functions take graph tensors and return a differentiable scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class LossWeights:
    alpha: float = 1.0        # embedding difference coefficient
    beta: float = 1.0         # MMD coefficient
    lambda_gp: float = 10.0   # gradient-penalty coefficient
    lambda_gen: float = 1.0   # generator coefficient

    def __post_init__(self):
        for name in ("alpha", "beta", "lambda_gp", "lambda_gen"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class KernelConfig:
    """Sum of Gaussian RBF kernels; base bandwidth is the median pairwise
    squared distance of the joined batch, scaled by each multiplier."""
    multipliers: tuple = DEFAULT_BANDWIDTH_MULTIPLIERS

    def __post_init__(self):
        if not self.multipliers:
            raise ValueError("kernel needs at least one bandwidth multiplier")
        if any(m <= 0 for m in self.multipliers):
            raise ValueError("kernel bandwidth multipliers must be positive")


def recon_loss(x_c, xhat_c, x_t, xhat_t):
    """Per-domain mean squared reconstruction error, summed over domains."""
    if x_c.shape != xhat_c.shape:
        raise ValueError(f"cell-line shapes differ: {x_c.shape} vs {xhat_c.shape}")
    if x_t.shape != xhat_t.shape:
        raise ValueError(f"tissue shapes differ: {x_t.shape} vs {xhat_t.shape}")
    term_c = ad.scale(ad.frobenius_sq(ad.sub(x_c, xhat_c)), 1.0 / x_c.shape[0])
    term_t = ad.scale(ad.frobenius_sq(ad.sub(x_t, xhat_t)), 1.0 / x_t.shape[0])
    return ad.add(term_c, term_t)


def diff_loss(z_cs, z_cp, z_ts, z_tp):
    """Soft subspace orthogonality between shared and private embeddings."""
    if z_cs.shape[0] != z_cp.shape[0]:
        raise ValueError(
            f"cell-line row counts differ: {z_cs.shape[0]} vs {z_cp.shape[0]}")
    if z_ts.shape[0] != z_tp.shape[0]:
        raise ValueError(
            f"tissue row counts differ: {z_ts.shape[0]} vs {z_tp.shape[0]}")
    term_c = ad.frobenius_sq(ad.matmul(ad.transpose(z_cs), z_cp))
    term_t = ad.frobenius_sq(ad.matmul(ad.transpose(z_ts), z_tp))
    return ad.add(term_c, term_t)


def base_loss(batch_c, batch_t, model, weights):
    """Reconstruction plus alpha-weighted orthogonality, through the model's
    encode/decode path."""
    from . import models  # local import to avoid a cycle

    pair_c = models.encode(model, batch_c, "cell_line")
    pair_t = models.encode(model, batch_t, "tissue")
    xhat_c = models.reconstruct(model, pair_c)
    xhat_t = models.reconstruct(model, pair_t)
    loss = recon_loss(batch_c, xhat_c, batch_t, xhat_t)
    if weights.alpha > 0 and pair_c.private is not None:
        d = diff_loss(pair_c.shared, pair_c.private, pair_t.shared, pair_t.private)
        loss = ad.add(loss, ad.scale(d, weights.alpha))
    return loss


def _pairwise_sq_dists(a, b):
    ra = ad.tsum(ad.square(a), axis=1, keepdims=True)          # (n,1)
    rb = ad.reshape(ad.tsum(ad.square(b), axis=1, keepdims=True), (1, b.shape[0]))
    cross = ad.matmul(a, ad.transpose(b))
    d2 = ad.sub(ad.add(ra, rb), ad.scale(cross, 2.0))
    return ad.relu(d2)  # clamp float noise below zero


def mmd_loss(z_c, z_t, kernel=None):
    """Biased multi-bandwidth RBF MMD estimator between equal-size batches."""
    kernel = kernel or KernelConfig()
    if z_c.shape != z_t.shape:
        raise ValueError(f"batch shapes differ: {z_c.shape} vs {z_t.shape}")
    n = z_c.shape[0]
    if n < 2:
        raise ValueError(f"mmd_loss needs at least 2 rows per batch, got {n}")
    joined = np.concatenate([z_c.data, z_t.data], axis=0)
    sq = np.sum(joined ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * joined @ joined.T
    off_diag = d2[~np.eye(d2.shape[0], dtype=bool)]
    base_bw = max(float(np.median(off_diag)), 1e-12)

    d_cc = _pairwise_sq_dists(z_c, z_c)
    d_tt = _pairwise_sq_dists(z_t, z_t)
    d_ct = _pairwise_sq_dists(z_c, z_t)
    total = None
    for mult in kernel.multipliers:
        bw = base_bw * mult
        k_cc = ad.tmean(ad.texp(ad.scale(d_cc, -1.0 / bw)))
        k_tt = ad.tmean(ad.texp(ad.scale(d_tt, -1.0 / bw)))
        k_ct = ad.tmean(ad.texp(ad.scale(d_ct, -1.0 / bw)))
        term = ad.sub(ad.add(k_cc, k_tt), ad.scale(k_ct, 2.0))
        total = term if total is None else ad.add(total, term)
    return total


def critic_loss(critic, z_c, z_t, lambda_gp, rng):
    """Wasserstein critic objective with row-wise interpolated gradient
    penalty.  ``z_c``/``z_t`` are treated as constants (critic update)."""
    if z_c.shape[1] != z_t.shape[1]:
        raise ValueError(f"embedding widths differ: {z_c.shape} vs {z_t.shape}")
    if z_c.shape[0] < 1 or z_t.shape[0] < 1:
        raise ValueError("critic_loss needs non-empty batches")
    score_t = ad.tmean(critic(z_t))
    score_c = ad.tmean(critic(z_c))
    loss = ad.sub(score_t, score_c)
    if lambda_gp > 0:
        n = min(z_c.shape[0], z_t.shape[0])
        eps = rng.uniform(0.0, 1.0, size=(n, 1)).astype(z_c.dtype)
        interp = eps * z_c.data[:n] + (1.0 - eps) * z_t.data[:n]
        z_interp = Tensor(interp, requires_grad=True)
        penalty = ad.grad_norm_penalty(critic, z_interp, target=1.0)
        loss = ad.add(loss, ad.scale(penalty, lambda_gp))
    return loss


def gen_loss(critic, z_t):
    """Negated mean critic score on tissue embeddings."""
    if z_t.shape[0] < 1:
        raise ValueError("gen_loss needs a non-empty batch")
    return ad.scale(ad.tmean(critic(z_t)), -1.0)


def coral_loss(z_c, z_t):
    """Squared Frobenius distance between domain covariances, / (4 d^2)."""
    if z_c.shape[0] < 2 or z_t.shape[0] < 2:
        raise ValueError("coral_loss needs at least 2 rows per domain")
    if z_c.shape[1] != z_t.shape[1]:
        raise ValueError(f"widths differ: {z_c.shape} vs {z_t.shape}")
    d = z_c.shape[1]

    def cov(z):
        centered = ad.sub(z, ad.tmean(z, axis=0, keepdims=True))
        return ad.scale(ad.matmul(ad.transpose(centered), centered),
                        1.0 / (z.shape[0] - 1))

    return ad.scale(ad.frobenius_sq(ad.sub(cov(z_c), cov(z_t))), 1.0 / (4.0 * d * d))


def vae_kl(mu, logvar):
    """KL divergence of a diagonal Gaussian posterior to the standard normal,
    averaged over the batch."""
    if mu.shape != logvar.shape:
        raise ValueError(f"mu/logvar shapes differ: {mu.shape} vs {logvar.shape}")
    one = Tensor(np.asarray(1.0, dtype=mu.dtype))
    inner = ad.sub(ad.add(one, logvar), ad.add(ad.square(mu), ad.texp(logvar)))
    per_sample = ad.tsum(inner, axis=1)
    return ad.scale(ad.tmean(per_sample), -0.5)


def dae_corrupt(x, noise, rng, mode="gaussian"):
    """Corrupt an input batch for denoising training.  Gaussian additive by
    default; ``mode='mask'`` zeroes entries with probability ``noise``."""
    if noise < 0:
        raise ValueError("noise level must be >= 0")
    if noise == 0:
        return Tensor(x.data.copy())
    if mode == "gaussian":
        return Tensor(x.data + rng.normal(0.0, noise, size=x.shape).astype(x.dtype))
    if mode == "mask":
        keep = (rng.uniform(size=x.shape) >= noise).astype(x.dtype)
        return Tensor(x.data * keep)
    raise ValueError(f"unknown corruption mode {mode!r}")


def bce_loss(probabilities, labels, clamp=1e-7):
    """Mean binary cross-entropy with probability clamping."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if probabilities.shape != y.shape:
        raise ValueError(
            f"shapes differ: {probabilities.shape} vs {tuple(y.shape)}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    y = Tensor(y.astype(probabilities.dtype))
    one = Tensor(np.asarray(1.0, dtype=probabilities.dtype))
    p = ad.clip(probabilities, clamp, 1.0 - clamp)
    pos = ad.mul(y, ad.tlog(p))
    neg = ad.mul(ad.sub(one, y), ad.tlog(ad.sub(one, p)))
    return ad.scale(ad.tmean(ad.add(pos, neg)), -1.0)
