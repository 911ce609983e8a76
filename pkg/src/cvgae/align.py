"""Rigid superposition (Kabsch), RMSD and the alignment-invariant coordinate likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianSet, gaussian_loglik


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, coords) -> np.ndarray:
        return np.asarray(coords, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def _coords(x) -> np.ndarray:
    return np.asarray(getattr(x, "coords", x), dtype=np.float64)


def _mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"atom mask has shape {mask.shape}, expected ({n},)")
    return mask


def rmsd(a, b, atom_mask=None) -> float:
    """Index-matched RMSD over the masked atoms, without any superposition."""
    a, b = _coords(a), _coords(b)
    if a.shape != b.shape:
        raise ValueError(f"conformations differ in shape: {a.shape} vs {b.shape}")
    mask = _mask(atom_mask, len(a))
    if not mask.any():
        raise ValueError("empty atom mask")
    d = a[mask] - b[mask]
    return float(np.sqrt(np.sum(d * d) / mask.sum()))


def kabsch_align(reference, target, atom_mask=None):
    """Superpose ``reference`` onto ``target`` with a proper rotation and a translation.

    The fit uses the masked atoms only; the transform is applied to every atom.
    Returns ``(aligned_reference, transform, rmsd)`` where the RMSD is over the
    masked atoms. For degenerate point sets (coincident or collinear) the
    rotation is not unique and any optimal one may be returned.
    """
    ref, tgt = _coords(reference), _coords(target)
    if ref.shape != tgt.shape:
        raise ValueError(f"conformations differ in shape: {ref.shape} vs {tgt.shape}")
    mask = _mask(atom_mask, len(ref))
    if not mask.any():
        raise ValueError("kabsch_align needs at least one masked atom")
    p, q = ref[mask], tgt[mask]
    cp, cq = p.mean(axis=0), q.mean(axis=0)
    h = (p - cp).T @ (q - cq)
    if np.abs(h).max() == 0.0:
        rot = np.eye(3)
    else:
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.T @ u.T))
        if d == 0:
            d = 1.0
        rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    transform = RigidTransform(rot, cq - rot @ cp)
    aligned = transform.apply(ref)
    return aligned, transform, rmsd(aligned, tgt, mask)


def aligned_rmsd(a, b, atom_mask=None) -> float:
    """RMSD after optimally superposing ``b`` onto ``a`` over the masked atoms."""
    return kabsch_align(b, a, atom_mask)[2]


def aligned_loglik(predicted: GaussianSet, reference, atom_mask=None):
    """Log-density of the reference after superposing it onto the predicted means.

    The transform is recomputed from the current means and treated as a
    constant. With unit variances the superposition minimises exactly the
    residual the density depends on, so at the optimum the derivative through
    the transform vanishes and the gradient is exact.
    """
    mu = predicted.mean.value
    aligned, _, _ = kabsch_align(reference, mu, atom_mask)
    return gaussian_loglik(aligned, predicted)
