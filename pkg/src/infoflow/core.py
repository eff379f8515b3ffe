"""Fundamental numeric state: particle clouds, run configuration, seeded
randomness, and trajectory recording.

Everything here is an immutable snapshot; "mutation" means constructing a new
value. That makes every type safe to share across threads and keeps whole
pipeline runs reproducible from a single seed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

__all__ = [
    "ConfigError",
    "RecordingError",
    "NumericError",
    "DivergedRunError",
    "SamplerError",
    "Rng",
    "ParticleSet",
    "BandwidthPolicy",
    "RunConfig",
    "RunRecord",
    "init_particles",
    "cloud_moments",
    "record_snapshot",
    "record_scalars",
    "SCALAR_SCHEMA",
]


class ConfigError(ValueError):
    """Invalid configuration value (bad particle count, step size, ...)."""


class RecordingError(ValueError):
    """Trajectory recording violated (duplicate time step, unknown scalar)."""


class NumericError(RuntimeError):
    """A computation produced a non-finite value."""


class DivergedRunError(NumericError):
    """A particle run blew up; carries the step index where it happened."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class SamplerError(RuntimeError):
    """A rejection sampler could not reach a workable acceptance rate."""


_SEED_MASK = (1 << 64) - 1


class Rng:
    """Deterministic random stream with a recoverable seed.

    Backed by numpy's PCG64 generator: the algorithm is documented and the
    draw sequence for a given seed is identical on every platform. Keeping
    the integer seed around lets derived streams be spawned as ``seed ^ k``,
    which is how bootstrap replicates and per-datapoint runs get independent
    but reproducible randomness.
    """

    __slots__ = ("seed", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & _SEED_MASK
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, offset: int) -> "Rng":
        """Independent child stream for sub-task `offset` (seed XOR offset)."""
        return Rng(self.seed ^ (int(offset) & _SEED_MASK))

    # Thin passthroughs to the underlying generator, so call sites read the
    # same as plain numpy code.
    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def standard_t(self, df, size=None):
        return self._gen.standard_t(df, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, p=None):
        return self._gen.choice(a, size=size, p=p)


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """M particle positions in a D-dimensional latent space at one time step.

    The row order is the particle identity: operations that move the cloud
    keep particle i at row i. All entries must be finite.
    """

    points: np.ndarray  # (M, D), float64, read-only
    time_step: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D (M, D), got shape {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"need at least one particle and one dimension, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("particle coordinates must be finite")
        if self.time_step < 0:
            raise ValueError("time_step must be nonnegative")
        object.__setattr__(self, "points", _as_readonly(pts))

    @property
    def num_particles(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class BandwidthPolicy:
    """How the RBF bandwidth h is chosen before each update.

    kinds:
      - "median":      lower-median of pairwise squared distances (default)
      - "median_dist": lower-median of plain pairwise distances
      - "median_log":  median of squared distances divided by log(M+1)
      - "fixed":       constant h = value
    """

    kind: str = "median"
    value: Optional[float] = None

    _KINDS = ("median", "median_dist", "median_log", "fixed")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ConfigError(f"unknown bandwidth policy {self.kind!r}; expected one of {self._KINDS}")
        if self.kind == "fixed":
            if self.value is None or not np.isfinite(self.value) or self.value <= 0:
                raise ConfigError("fixed bandwidth policy needs a finite value > 0")
        elif self.value is not None:
            raise ConfigError(f"policy {self.kind!r} takes no value")

    @classmethod
    def parse(cls, text: str) -> "BandwidthPolicy":
        """Parse the CLI form: 'median', 'median_dist', 'median_log', 'fixed:<h>'."""
        if text.startswith("fixed:"):
            try:
                h = float(text.split(":", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"cannot parse bandwidth {text!r}") from exc
            return cls("fixed", h)
        return cls(text)

    def spec(self) -> str:
        return f"fixed:{self.value!r}" if self.kind == "fixed" else self.kind


@dataclass(frozen=True)
class RunConfig:
    """Settings for one particle-flow run.

    num_particles=M, horizon=T forward-Euler steps of size step_size, seeded
    initialization, and the bandwidth policy applied before each step.
    snapshot_stride controls how often the trajectory is recorded (the final
    state is always recorded).
    """

    num_particles: int
    horizon: int
    step_size: float
    seed: int = 0
    bandwidth: BandwidthPolicy = field(default_factory=BandwidthPolicy)
    snapshot_stride: int = 10

    def __post_init__(self):
        if self.num_particles < 1:
            raise ConfigError("num_particles must be >= 1")
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise ConfigError("step_size must be finite and > 0")
        if self.snapshot_stride < 1:
            raise ConfigError("snapshot_stride must be >= 1")


# Scalar series every recorder knows how to store.
SCALAR_SCHEMA = ("ksd", "loglik", "bandwidth")


@dataclass(frozen=True, eq=False)
class RunRecord:
    """Per-step trajectory: particle snapshots plus named scalar series.

    Rows are keyed by time step and kept sorted ascending; a time step can be
    recorded at most once. Serializes to two CSV tables, see
    `snapshots_to_csv` / `scalars_to_csv`.
    """

    snapshots: tuple = ()  # ((t, points (M,D)), ...) sorted by t
    scalars: tuple = ()    # ((t, name, value), ...) sorted by (t, name)

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def snapshot_times(self) -> tuple:
        return tuple(t for t, _ in self.snapshots)

    def scalar_series(self, name: str) -> tuple:
        """(t, value) pairs for one named series, in time order."""
        return tuple((t, v) for t, n, v in self.scalars if n == name)

    def last_points(self) -> np.ndarray:
        if not self.snapshots:
            raise RecordingError("record holds no snapshots")
        return self.snapshots[-1][1]


def _check_scalar_names(scalars: Mapping[str, float]) -> None:
    for name in scalars:
        if name not in SCALAR_SCHEMA:
            raise RecordingError(f"unknown scalar {name!r}; schema is {SCALAR_SCHEMA}")


def record_snapshot(record: RunRecord, ps: ParticleSet,
                    scalars: Optional[Mapping[str, float]] = None) -> RunRecord:
    """Return a new record with the cloud (and scalars) appended at its time step.

    Raises RecordingError on a duplicate time step or a scalar name outside
    the fixed schema.
    """
    scalars = dict(scalars or {})
    _check_scalar_names(scalars)
    t = ps.time_step
    times = [s[0] for s in record.snapshots]
    if t in times:
        raise RecordingError(f"snapshot for time step {t} already recorded")
    pos = bisect.bisect_left(times, t)
    new_snaps = record.snapshots[:pos] + ((t, ps.points),) + record.snapshots[pos:]
    out = RunRecord(new_snaps, record.scalars)
    if scalars:
        out = record_scalars(out, t, scalars)
    return out


def record_scalars(record: RunRecord, t: int, scalars: Mapping[str, float]) -> RunRecord:
    """Return a new record with scalar rows appended at time step t."""
    _check_scalar_names(scalars)
    existing = {(rt, rn) for rt, rn, _ in record.scalars}
    rows = list(record.scalars)
    for name in sorted(scalars):
        if (t, name) in existing:
            raise RecordingError(f"scalar {name!r} at time step {t} already recorded")
        rows.append((t, name, float(scalars[name])))
    rows.sort(key=lambda r: (r[0], r[1]))
    return RunRecord(record.snapshots, tuple(rows))


def snapshots_to_csv(record: RunRecord) -> str:
    """CSV with header `t,particle_id,dim_0..dim_{D-1}` (LF line endings)."""
    if not record.snapshots:
        return "t,particle_id\n"
    dim = record.snapshots[0][1].shape[1]
    lines = ["t,particle_id," + ",".join(f"dim_{d}" for d in range(dim))]
    for t, pts in record.snapshots:
        for i, row in enumerate(pts):
            lines.append(f"{t},{i}," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def scalars_to_csv(record: RunRecord) -> str:
    """CSV with header `t,name,value` (LF line endings)."""
    lines = ["t,name,value"]
    for t, name, value in record.scalars:
        lines.append(f"{t},{name},{repr(float(value))}")
    return "\n".join(lines) + "\n"


def init_particles(num_particles: int, dim: int, rng: Rng, target=None) -> ParticleSet:
    """Draw an initial cloud of i.i.d. particles at time step 0.

    With target=None the initializer is the standard normal; otherwise the
    target's exact sampler is used (the target must expose ``sample_exact``).
    """
    if num_particles < 1:
        raise ConfigError("num_particles must be >= 1")
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    if target is None:
        pts = rng.standard_normal((num_particles, dim))
    else:
        pts = np.asarray(target.sample_exact(num_particles, rng), dtype=np.float64)
        if pts.shape != (num_particles, dim):
            raise ValueError(
                f"target sampler returned shape {pts.shape}, expected {(num_particles, dim)}")
    return ParticleSet(pts, time_step=0)


def cloud_moments(ps: ParticleSet):
    """Arithmetic mean and unbiased (M-1 denominator) sample covariance.

    A single particle has zero covariance by convention.
    """
    pts = ps.points
    mean = pts.mean(axis=0)
    m = ps.num_particles
    if m == 1:
        cov = np.zeros((ps.dim, ps.dim))
    else:
        centered = pts - mean
        cov = centered.T @ centered / (m - 1)
    return mean, cov
