"""Gaussian posteriors, reparameterized sampling and likelihood terms.

All log-densities here return *per-row* values (one entry per sample) so the
callers can average over Monte Carlo draws or sum over a minibatch as they
need. Variances are always carried as log-variances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrid as ng
from .numgrid import DimensionError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
PROB_FLOOR = 1e-6


@dataclass
class LatentGaussian:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = ng.as_tensor(self.mu)
        self.log_var = ng.as_tensor(self.log_var)
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class NoiseDraw:
    eps: np.ndarray  # (L, B, K) or (L, K)
    seed: int | None = None

    @classmethod
    def draw(cls, n_samples: int, shape, seed=None, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(seed)
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return cls(rng.standard_normal((n_samples, *shape)), seed)

    @property
    def n_samples(self) -> int:
        return self.eps.shape[0]


def _as_2d(q: LatentGaussian) -> tuple[Tensor, Tensor]:
    mu, lv = q.mu, q.log_var
    if mu.value.ndim == 1:
        mu = ng.reshape(mu, (1, -1))
        lv = ng.reshape(lv, (1, -1))
    return mu, lv


def reparameterize(q: LatentGaussian, noise: NoiseDraw) -> Tensor:
    """Draw ``z = mu + exp(log_var / 2) * eps`` for every noise sample.

    For a batch posterior with ``mu`` of shape (B, K) and ``eps`` of shape
    (L, B, K) the result has shape (L*B, K), sample-major: rows
    ``l*B .. (l+1)*B`` hold draw ``l`` for the whole batch. A single posterior
    (``mu`` of shape (K,)) with ``eps`` of shape (L, K) gives (L, K).
    """
    mu, lv = _as_2d(q)
    B, K = mu.shape
    eps = np.asarray(noise.eps)
    L = eps.shape[0]
    if eps.shape[-1] != K or eps.size != L * B * K:
        raise DimensionError(f"noise {eps.shape} does not match posterior {mu.shape}")
    eps = eps.reshape(L * B, K)
    sigma = ng.exp(ng.mul(lv, 0.5))
    return ng.add(ng.tile_rows(mu, L), ng.mul(ng.tile_rows(sigma, L), Tensor(eps, dtype=mu.value.dtype)))


def kl_to_std_normal(q: LatentGaussian) -> Tensor:
    """KL(q || N(0, I)) per row; a scalar for a single posterior."""
    mu, lv = q.mu, q.log_var
    axis = mu.value.ndim - 1
    # expm1 keeps the log-variance part non-negative in floating point
    terms = ng.square(mu) + ng.sub(ng.expm1(lv), lv)
    return ng.mul(ng.reduce_sum(terms, axis=axis), 0.5)


def gaussian_log_density(z, q: LatentGaussian) -> Tensor:
    """Diagonal Gaussian log-density of ``z`` under ``q``, summed over the last axis."""
    z = ng.as_tensor(z)
    mu, lv = q.mu, q.log_var
    if z.shape != mu.shape:
        raise DimensionError(f"z {z.shape} vs mu {mu.shape}")
    diff = ng.sub(z, mu)
    quad = ng.mul(ng.square(diff), ng.exp(ng.neg(lv)))
    axis = z.value.ndim - 1
    return ng.mul(ng.reduce_sum(quad + lv + LOG_2PI, axis=axis), -0.5)


def std_normal_log_density(z) -> Tensor:
    z = ng.as_tensor(z)
    axis = z.value.ndim - 1
    return ng.mul(ng.reduce_sum(ng.square(z) + LOG_2PI, axis=axis), -0.5)


def bernoulli_log_lik(x, p) -> Tensor:
    """``sum_d x log p + (1 - x) log(1 - p)`` with ``p`` clamped away from 0 and 1.

    Fractional ``x`` in [0, 1] is allowed (cross-entropy against gray values).
    """
    xv = x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if np.any(xv < 0) or np.any(xv > 1):
        raise ValueError("bernoulli_log_lik: x must lie in [0, 1]")
    p = ng.as_tensor(p)
    if xv.shape != p.shape:
        raise DimensionError(f"x {xv.shape} vs p {p.shape}")
    pc = ng.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    xt = Tensor(xv, dtype=p.value.dtype)
    terms = ng.mul(xt, ng.log(pc)) + ng.mul(1.0 - xt, ng.log(1.0 - pc))
    return ng.reduce_sum(terms, axis=xv.ndim - 1)


def gaussian_log_lik(x, mean, log_var) -> Tensor:
    x = ng.as_tensor(x)
    return gaussian_log_density(x, LatentGaussian(mean, log_var))
