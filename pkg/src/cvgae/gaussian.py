"""Factorized diagonal Gaussians over per-node vectors, their log-density and KL terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class GaussianSet:
    """Per-node diagonal Gaussians; variance is held as log-variance."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ad.ShapeError(f"mean/variance shape mismatch {self.mean.shape} vs {self.logvar.shape}")

    @property
    def variance(self) -> Tensor:
        return ad.exp(self.logvar)

    @property
    def shape(self):
        return self.mean.shape

    @classmethod
    def from_arrays(cls, mean, variance) -> "GaussianSet":
        variance = np.asarray(variance, dtype=np.float64)
        if np.any(variance <= 0):
            raise ValueError("variance must be strictly positive")
        return cls(Tensor(mean), Tensor(np.log(variance)))

    @classmethod
    def standard(cls, shape) -> "GaussianSet":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def take(self, rows) -> "GaussianSet":
        return GaussianSet(ad.gather_rows(self.mean, rows), ad.gather_rows(self.logvar, rows))


def gaussian_loglik(x, g: GaussianSet) -> Tensor:
    """Sum over nodes and components of log N(x | mu, sigma^2)."""
    x = ad.const(x)
    if x.shape != g.shape:
        raise ad.ShapeError(f"gaussian_loglik: x has shape {x.shape}, distribution {g.shape}")
    resid = ad.sub(x, g.mean)
    quad = ad.mul(ad.square(resid), ad.exp(ad.scale(g.logvar, -1.0)))
    total = ad.add(ad.scale(quad, -0.5), ad.scale(g.logvar, -0.5))
    return ad.add(ad.sum(total), Tensor(-LOG_SQRT_2PI * x.value.size))


def kl_diag(q: GaussianSet, p: GaussianSet) -> Tensor:
    """KL(q || p) summed over every node and component.

    Per component: log(s_p/s_q) + (s_q^2 + (m_q - m_p)^2) / (2 s_p^2) - 1/2.
    """
    if q.shape != p.shape:
        raise ad.ShapeError(f"kl_diag: shape mismatch {q.shape} vs {p.shape}")
    log_ratio = ad.scale(ad.sub(p.logvar, q.logvar), 0.5)
    num = ad.add(ad.exp(q.logvar), ad.square(ad.sub(q.mean, p.mean)))
    frac = ad.scale(ad.mul(num, ad.exp(ad.scale(p.logvar, -1.0))), 0.5)
    per = ad.add(log_ratio, frac)
    return ad.add(ad.sum(per), Tensor(-0.5 * per.value.size))


def kl_unconditional(prior_out: GaussianSet) -> Tensor:
    """KL of the conditional prior from N(0, I) of the same shape."""
    return kl_diag(prior_out, GaussianSet.standard(prior_out.shape))
