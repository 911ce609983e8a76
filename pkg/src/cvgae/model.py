"""Conditional variational graph autoencoder: prior, posterior and likelihood networks,
the regularised lower bound and sampling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .align import kabsch_align
from .autodiff import Tensor
from .gaussian import GaussianSet, gaussian_loglik, kl_diag, kl_unconditional
from .mpnn import GraphBatch, MPNNConfig, as_tensors, gaussian_head, init_network, run_mpnn

__all__ = [
    "ElboBreakdown",
    "GaussianSet",
    "init_params",
    "prior_forward",
    "posterior_forward",
    "likelihood_forward",
    "kl_diag",
    "kl_unconditional",
    "gaussian_loglik",
    "elbo_loss",
    "sample_conformations",
]


def init_params(config: MPNNConfig, d_v: int, d_e: int, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (d_v + config.d_h))
    params = {"node_embed": rng.uniform(-bound, bound, size=(d_v, config.d_h))}
    params.update(init_network(rng, "prior", config, d_e, config.d_z))
    params.update(init_network(rng, "posterior", config, d_e + 1, config.d_z))
    # likelihood variance is fixed to 1, so it has no variance head; a mean
    # bias would be a pure translation, which the post-alignment likelihood
    # cannot see (its gradient is identically zero)
    params.update(init_network(rng, "likelihood", config, d_e, 3, with_variance=False, with_mean_bias=False))
    return params


def params_fingerprint(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _batch(graphs) -> GraphBatch:
    if isinstance(graphs, GraphBatch):
        return graphs
    if hasattr(graphs, "atoms"):
        graphs = [graphs]
    return GraphBatch.from_graphs(graphs)


def _tensors(params):
    return as_tensors(params) if not all(isinstance(v, Tensor) for v in params.values()) else params


def pair_distances(batch: GraphBatch, coords: np.ndarray) -> np.ndarray:
    """Distance of every batch pair, given the stacked coordinates of all nodes."""
    d = coords[batch.pair_i] - coords[batch.pair_j]
    return np.sqrt(np.einsum("pk,pk->p", d, d))


def _stack(references) -> np.ndarray:
    if isinstance(references, np.ndarray) and references.ndim == 2:
        return references.astype(np.float64)
    return np.concatenate([np.asarray(getattr(r, "coords", r), dtype=np.float64) for r in references])


def prior_forward(graphs, params, config: MPNNConfig, training=False, dropout=0.0, rng=None) -> GaussianSet:
    batch, params = _batch(graphs), _tensors(params)
    h = run_mpnn(batch, params, "prior", config)
    return gaussian_head(h, params, "prior", dropout, training, rng)


def posterior_forward(graphs, references, params, config: MPNNConfig, training=False, dropout=0.0, rng=None) -> GaussianSet:
    """As the prior, but every edge input carries the reference interatomic distance."""
    batch, params = _batch(graphs), _tensors(params)
    coords = _stack(references)
    if len(coords) != batch.n_nodes:
        raise ad.ShapeError(f"reference has {len(coords)} atoms, graph has {batch.n_nodes}")
    h = run_mpnn(batch, params, "posterior", config, extra_edge_input=pair_distances(batch, coords))
    return gaussian_head(h, params, "posterior", dropout, training, rng)


def likelihood_forward(graphs, latents, params, config: MPNNConfig, training=False, dropout=0.0, rng=None) -> GaussianSet:
    """Coordinate distribution given latents; the variance is always 1."""
    batch, params = _batch(graphs), _tensors(params)
    latents = ad.const(latents)
    if latents.shape != (batch.n_nodes, config.d_z):
        raise ad.ShapeError(f"latents must be {(batch.n_nodes, config.d_z)}, got {latents.shape}")
    h = run_mpnn(batch, params, "likelihood", config, extra_node_term=latents)
    return gaussian_head(h, params, "likelihood", dropout, training, rng, with_variance=False)


@dataclass
class ElboBreakdown:
    recon_loglik: float
    kl_post_prior: float
    kl_prior_uncond: float
    total: float
    alpha: float
    n_molecules: int = 1
    objective: Tensor | None = None  # differentiable ``total``

    def recomputed_total(self) -> float:
        return self.recon_loglik - self.kl_post_prior - self.alpha * self.kl_prior_uncond


def aligned_reference(batch: GraphBatch, means: np.ndarray, references: np.ndarray) -> np.ndarray:
    """Each molecule's reference superposed onto its predicted means (all atoms)."""
    out = np.empty_like(references)
    for k in range(batch.n_molecules):
        s = batch.atom_slice(k)
        out[s] = kabsch_align(references[s], means[s])[0]
    return out


def elbo_loss(graphs, references, params, config: MPNNConfig, alpha: float = 1e-5, rng=None,
              training: bool = True, dropout: float = 0.0, noise=None) -> ElboBreakdown:
    """One-sample regularised lower bound, summed over the molecules of the batch.

    ``total = log p(X_hat | Z, G) - KL(Q || P) - alpha * KL(P || N(0, I))`` with
    ``Z`` drawn from the posterior by reparameterisation. Noise comes from
    ``noise`` when given, otherwise from ``rng``; dropout masks come from ``rng``.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    batch = _batch(graphs)
    params = _tensors(params)
    refs = _stack(references)
    if noise is None:
        if rng is None:
            raise ValueError("elbo_loss needs an rng or explicit noise")
        noise = rng.standard_normal((batch.n_nodes, config.d_z))

    prior = prior_forward(batch, params, config, training, dropout, rng)
    post = posterior_forward(batch, refs, params, config, training, dropout, rng)
    z = ad.reparam_sample(post.mean, post.variance, noise)
    lik = likelihood_forward(batch, z, params, config, training, dropout, rng)

    target = aligned_reference(batch, lik.mean.value, refs)
    recon = gaussian_loglik(target, lik)
    kl_qp = kl_diag(post, prior)
    kl_p0 = kl_unconditional(prior)
    total = ad.sub(ad.sub(recon, kl_qp), ad.scale(kl_p0, alpha))
    return ElboBreakdown(recon.item(), kl_qp.item(), kl_p0.item(), total.item(), alpha, batch.n_molecules, total)


def sample_conformations(graph, params, config: MPNNConfig, S: int = 100, rng=None,
                         noise_scale: float = 1.0, max_chunk_floats: int = 4_000_000) -> list[np.ndarray]:
    """Draw ``S`` conformations: Z ~ P(Z|G), then take the likelihood means.

    ``noise_scale`` multiplies the prior standard deviation; 0 collapses every
    sample onto the prior mean, which is then decoded once and repeated.
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    if rng is None:
        raise ValueError("sample_conformations needs an rng")
    params = _tensors(params)
    m = graph.n_atoms
    prior = prior_forward(graph, params, config)
    mu, std = prior.mean.value, np.exp(0.5 * prior.logvar.value)
    noise = rng.standard_normal((S, m, config.d_z))
    z_all = mu[None] + noise_scale * std[None] * noise
    if noise_scale == 0.0:
        x = likelihood_forward(graph, mu, params, config).mean.value
        return [x.copy() for _ in range(S)]

    per_copy = max(1, graph.n_pairs * config.d_h * config.d_h + m * config.d_f)
    chunk = max(1, min(S, max_chunk_floats // per_copy))
    out = []
    for start in range(0, S, chunk):
        n = min(chunk, S - start)
        batch = GraphBatch([graph.node_features] * n, [graph.edge_features] * n)
        lik = likelihood_forward(batch, z_all[start : start + n].reshape(n * m, -1), params, config)
        out.extend(lik.mean.value.reshape(n, m, 3))
    return [np.array(x) for x in out]
