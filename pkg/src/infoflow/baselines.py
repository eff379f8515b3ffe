"""Comparison distributions: a maximum-likelihood unimodal Gaussian and an
EM-fitted Gaussian mixture, fitted to exact target samples and scored by KSD.

These are the specification-rigid approximations the particle flow is compared
against: the fits get their best case (exact samples of the target) and still
land orders of magnitude behind on multimodal targets.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from .core import ParticleSet, Rng
from .discrepancy import ksd
from .kernels import KernelSpec
from .targets import Gaussian, Gmm, TargetDensity, _logsumexp

__all__ = ["FittedApprox", "fit_gaussian_mle", "fit_gmm_em", "sample_fitted",
           "baseline_ksd"]

# A fitted approximation is just a target density of one of these variants;
# it serializes through the same JSON layout.
FittedApprox = Union[Gaussian, Gmm]

_COV_FLOOR = 1e-6


def fit_gaussian_mle(samples) -> Gaussian:
    """Sample mean and MLE covariance (divide by n), regularized by +1e-6 I."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples of shape (n, D)")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0] + _COV_FLOOR * np.eye(x.shape[1])
    return Gaussian(mean, cov)


def _kmeanspp_seeds(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ style seeding: first center uniform, then distance-weighted."""
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            np.stack([np.sum((x - c) ** 2, axis=1) for c in centers]), axis=0)
        total = d2.sum()
        if total <= 0:  # all points sit on existing centers
            centers.append(x[int(rng.integers(n))])
            continue
        centers.append(x[int(rng.choice(n, p=d2 / total))])
    return np.stack(centers)


def fit_gmm_em(samples, k: int, iters: int, rng: Rng, *,
               tol: float = 1e-8, return_history: bool = False):
    """Standard EM for a k-component Gaussian mixture.

    Seeding is k-means++ style from rng; the E-step computes responsibilities
    through log-sum-exp; the M-step is the weighted MLE with a +1e-6 I
    covariance floor. Stops after `iters` iterations or when the mean
    log-likelihood improves by less than `tol`. A component that loses all
    responsibility mass is reseeded from a random sample (deterministic given
    rng), which can locally break the otherwise monotone likelihood ascent.

    With return_history=True also returns the per-iteration mean
    log-likelihood trace.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must have shape (n, D)")
    n, dim = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")

    floor = _COV_FLOOR * np.eye(dim)
    means = _kmeanspp_seeds(x, k, rng)
    global_cov = np.cov(x, rowvar=False, ddof=0).reshape(dim, dim) + floor
    covs = np.repeat(global_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)

    history = []
    prev_ll = -np.inf
    for _ in range(max(iters, 1)):
        # E-step: log responsibilities via normalized component densities.
        comp_logs = np.empty((n, k))
        for j in range(k):
            comp_logs[:, j] = (np.log(weights[j])
                               + Gaussian(means[j], covs[j]).log_density_norm_batch(x))
        norm = _logsumexp(comp_logs, axis=1)
        resp = np.exp(comp_logs - norm[:, None])
        ll = float(norm.mean())
        history.append(ll)

        # M-step: weighted MLE with covariance floor; reseed empty components.
        mass = resp.sum(axis=0)
        for j in range(k):
            if mass[j] < 1e-10:
                means[j] = x[int(rng.integers(n))]
                covs[j] = global_cov.copy()
                mass[j] = 1.0
                resp[:, j] = 0.0
                continue
            means[j] = resp[:, j] @ x / mass[j]
            centered = x - means[j]
            covs[j] = (resp[:, j, None] * centered).T @ centered / mass[j] + floor
        weights = mass / mass.sum()

        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    fitted = Gmm(weights, tuple(Gaussian(means[j], covs[j]) for j in range(k)))
    if return_history:
        return fitted, np.asarray(history)
    return fitted


def sample_fitted(f: FittedApprox, n: int, rng: Rng) -> np.ndarray:
    """n i.i.d. draws from the fitted approximation -> (n, D)."""
    return f.sample_exact(n, rng)


def baseline_ksd(target: TargetDensity, f: FittedApprox, m: int,
                 kernel: KernelSpec, rng: Rng) -> float:
    """KSD between m fresh draws of the fitted approximation and the target."""
    cloud = ParticleSet(sample_fitted(f, m, rng), time_step=0)
    return ksd(cloud, target, kernel)
