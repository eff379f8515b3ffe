"""The particle-flow inference algorithm: score + kernel-ansatz drift,
forward-Euler updates, and full recorded runs.

Each particle moves along

    drift_i = s(z_i) + (1/M) sum_j [ K(z_j, z_i) s(z_j) + grad_{z_j} K(z_j, z_i) ]

where s is the target score. The first term pulls particles toward high
density; the bracketed empirical expectation is the tractable stand-in for
the entropy-driving control term: a kernel-smoothed score plus a repulsion
term that keeps the cloud spread out. The self term j = i is included (its
kernel gradient is zero anyway).
"""

from __future__ import annotations

import numpy as np

from .core import (DivergedRunError, NumericError, ParticleSet, Rng, RunConfig,
                   RunRecord, init_particles, record_snapshot)
from .discrepancy import ksd
from .kernels import KernelSpec, kernel_matrix, resolve_bandwidth
from .targets import TargetDensity

__all__ = ["ansatz", "drift", "step", "run_info"]

# Any coordinate beyond this magnitude counts as a diverged run.
_DIVERGENCE_LIMIT = 1e8


def _checked_scores(ps: ParticleSet, target: TargetDensity) -> np.ndarray:
    scores = target.score_batch(ps.points)
    bad = ~np.isfinite(scores).all(axis=1)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NumericError(f"non-finite score at particle {idx}")
    return scores


def ansatz(ps: ParticleSet, target: TargetDensity, kernel: KernelSpec, i: int) -> np.ndarray:
    """Empirical-expectation ansatz evaluated at particle i:
    (1/M) sum_j [ K(z_j, z_i) s(z_j) + K(z_j, z_i) (z_i - z_j) / h ].
    """
    if not 0 <= i < ps.num_particles:
        raise ValueError(f"particle index {i} out of range for M={ps.num_particles}")
    z = ps.points
    zi = z[i]
    scores = _checked_scores(ps, target)
    h = kernel.bandwidth
    diff = zi - z                                   # (M, D)
    k = np.exp(-np.sum(diff * diff, axis=1) / (2.0 * h))
    m = ps.num_particles
    return (k[:, None] * scores).sum(axis=0) / m + (k[:, None] * diff).sum(axis=0) / (m * h)


def drift(ps: ParticleSet, target: TargetDensity, kernel: KernelSpec) -> np.ndarray:
    """(M, D) drift field: row i = score(z_i) + ansatz at particle i."""
    scores = _checked_scores(ps, target)
    k = kernel_matrix(kernel, ps)
    m = ps.num_particles
    h = kernel.bandwidth
    smoothed = k @ scores / m
    repulsion = (ps.points * k.sum(axis=1)[:, None] - k @ ps.points) / (m * h)
    return scores + smoothed + repulsion


def step(ps: ParticleSet, field: np.ndarray, eps: float) -> ParticleSet:
    """Forward-Euler update z_i <- z_i + eps * field_i; time step increments."""
    if not eps > 0:
        raise ValueError("step size must be > 0")
    field = np.asarray(field, dtype=np.float64)
    if field.shape != ps.points.shape:
        raise ValueError(f"field shape {field.shape} does not match cloud {ps.points.shape}")
    return ParticleSet(ps.points + eps * field, time_step=ps.time_step + 1)


def run_info(config: RunConfig, target: TargetDensity,
             init: ParticleSet | None = None) -> tuple[ParticleSet, RunRecord]:
    """Run the full particle flow for config.horizon steps.

    Before each step the bandwidth is resolved under the configured policy
    (recomputed as the cloud moves under the median policies). Snapshots plus
    the KSD and bandwidth series are recorded every config.snapshot_stride
    steps and always at the final state. Returns the final cloud and the
    trajectory record.

    Raises DivergedRunError (with the offending step index) if any coordinate
    leaves [-1e8, 1e8]; a smaller step size usually fixes that.
    """
    if init is None:
        init = init_particles(config.num_particles, target.dim, Rng(config.seed))
    if init.dim != target.dim:
        raise ValueError(f"initial cloud dimension {init.dim} does not match target {target.dim}")

    cloud = init
    record = RunRecord()
    for t in range(config.horizon):
        h = resolve_bandwidth(config.bandwidth, cloud)
        kernel = KernelSpec(h)
        if (cloud.time_step - init.time_step) % config.snapshot_stride == 0:
            record = record_snapshot(
                record, cloud, {"ksd": ksd(cloud, target, kernel), "bandwidth": h})
        field = drift(cloud, target, kernel)
        try:
            cloud = step(cloud, field, config.step_size)
        except ValueError as exc:
            raise DivergedRunError(
                f"particles left the finite range at step {t} (try a smaller step size)",
                step=t) from exc
        if np.abs(cloud.points).max() > _DIVERGENCE_LIMIT:
            raise DivergedRunError(
                f"particle coordinates exceeded {_DIVERGENCE_LIMIT:g} at step {t} "
                "(try a smaller step size)", step=t)
    h = resolve_bandwidth(config.bandwidth, cloud)
    record = record_snapshot(
        record, cloud, {"ksd": ksd(cloud, target, KernelSpec(h)), "bandwidth": h})
    return cloud, record
