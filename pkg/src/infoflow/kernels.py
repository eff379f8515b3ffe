"""RBF kernel evaluations, kernel gradients, kernel matrices, and the
median-heuristic bandwidth.

The kernel is K(z, z') = exp(-||z - z'||^2 / (2 h)) with bandwidth h > 0.
Under the median heuristic h is the lower-median of the pairwise squared
distances of the current cloud, so rescaling the cloud leaves the kernel
matrix unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BandwidthPolicy, ConfigError, ParticleSet

__all__ = [
    "KernelSpec",
    "rbf",
    "grad_first",
    "kernel_matrix",
    "median_bandwidth",
    "resolve_bandwidth",
    "pairwise_sq_dists",
]


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel with bandwidth h; exponent is -||z-z'||^2 / (2 h)."""

    bandwidth: float

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ConfigError("bandwidth must be finite and > 0")


def _pair(z, zp):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    zp = np.asarray(zp, dtype=np.float64).reshape(-1)
    if z.shape != zp.shape:
        raise ValueError(f"dimension mismatch: {z.shape[0]} vs {zp.shape[0]}")
    return z, zp


def rbf(kernel: KernelSpec, z, zp) -> float:
    """K(z, z') in (0, 1]."""
    z, zp = _pair(z, zp)
    d = z - zp
    return float(np.exp(-(d @ d) / (2.0 * kernel.bandwidth)))


def grad_first(kernel: KernelSpec, zp, z) -> np.ndarray:
    """Gradient of K(z', z) with respect to its first argument z'.

    Equal to K(z', z) * (z - z') / h; antisymmetric to the gradient in the
    second argument.
    """
    zp, z = _pair(zp, z)
    d = zp - z
    k = np.exp(-(d @ d) / (2.0 * kernel.bandwidth))
    return k * (z - zp) / kernel.bandwidth


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """(M, M) matrix of squared Euclidean distances with an exactly zero diagonal."""
    pts = np.asarray(points, dtype=np.float64)
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def kernel_matrix(kernel: KernelSpec, ps: ParticleSet) -> np.ndarray:
    """(M, M) matrix with entry (i, j) = K(z_i, z_j); symmetric, unit diagonal."""
    d2 = pairwise_sq_dists(ps.points)
    return np.exp(-d2 / (2.0 * kernel.bandwidth))


def _lower_median(values: np.ndarray) -> float:
    """Element at index floor((P-1)/2) of the sorted values (no averaging)."""
    srt = np.sort(values)
    return float(srt[(srt.shape[0] - 1) // 2])


def median_bandwidth(ps: ParticleSet) -> float:
    """Lower-median of the M(M-1)/2 pairwise squared distances (pairs i < j).

    Falls back to 1.0 when all points coincide (median 0), so a freshly
    collapsed cloud never divides by zero. Needs at least two particles.
    """
    m = ps.num_particles
    if m < 2:
        raise ValueError("median bandwidth needs at least 2 particles")
    d2 = pairwise_sq_dists(ps.points)
    iu = np.triu_indices(m, k=1)
    med = _lower_median(d2[iu])
    return med if med > 0.0 else 1.0


def resolve_bandwidth(policy: BandwidthPolicy, ps: ParticleSet) -> float:
    """Bandwidth h for the current cloud under the given policy."""
    if policy.kind == "fixed":
        return float(policy.value)
    if policy.kind == "median":
        return median_bandwidth(ps)
    if policy.kind == "median_log":
        return median_bandwidth(ps) / np.log(ps.num_particles + 1.0)
    if policy.kind == "median_dist":
        m = ps.num_particles
        if m < 2:
            raise ValueError("median bandwidth needs at least 2 particles")
        d2 = pairwise_sq_dists(ps.points)
        iu = np.triu_indices(m, k=1)
        med = _lower_median(np.sqrt(d2[iu]))
        return med if med > 0.0 else 1.0
    raise ConfigError(f"unknown bandwidth policy {policy.kind!r}")
