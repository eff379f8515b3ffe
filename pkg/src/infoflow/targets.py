"""Benchmark target densities with analytic unnormalized log-density, analytic
score, and exact samplers.

Normalizing constants are never computed: every density is handled up to an
additive log-constant, which is all the particle flow and the Stein machinery
need. Mixture log-densities go through log-sum-exp so that evaluations stay
finite for ||z|| up to ~100.

Score derivations used below:
  Gaussian N(mu, Sigma):  log p = -(z-mu)' Sigma^-1 (z-mu)/2 + const,
                          score = -Sigma^-1 (z-mu).
  Student-t St(nu, mu, sigma) (1-D):
                          log p = -((nu+1)/2) log(1 + (z-mu)^2/(nu sigma^2)),
                          score = -(nu+1)(z-mu) / (nu sigma^2 + (z-mu)^2).
  Mixtures: score is the posterior-responsibility-weighted sum of component
  scores (differentiate log sum_k w_k p_k through log-sum-exp).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Rng, SamplerError

__all__ = [
    "TargetDensity",
    "Gaussian",
    "StudentT",
    "Gmm",
    "MixtureOfRings",
    "TwoMoon",
    "finite_diff_score",
    "target_from_json",
    "target_to_json",
]


def _logsumexp(a: np.ndarray, axis: int):
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


class TargetDensity(abc.ABC):
    """A density known up to a constant, with analytic score and a sampler."""

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        ...

    @abc.abstractmethod
    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        """Unnormalized log density for a (N, D) batch of points -> (N,)."""

    @abc.abstractmethod
    def score_batch(self, z: np.ndarray) -> np.ndarray:
        """Gradient of the log density for a (N, D) batch -> (N, D)."""

    @abc.abstractmethod
    def sample_exact(self, n: int, rng: Rng) -> np.ndarray:
        """n i.i.d. draws -> (n, D)."""

    def _check_point(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.dim:
            raise ValueError(f"point has dimension {z.shape[0]}, target expects {self.dim}")
        if not np.isfinite(z).all():
            raise ValueError("point must be finite")
        return z

    def log_density_unnorm(self, z) -> float:
        """Log density at a single point, up to an additive constant."""
        z = self._check_point(z)
        return float(self.log_density_batch(z[None, :])[0])

    def score(self, z) -> np.ndarray:
        """Gradient of the log density at a single point."""
        z = self._check_point(z)
        return self.score_batch(z[None, :])[0]


def finite_diff_score(target: TargetDensity, z, step: float) -> np.ndarray:
    """Central-difference estimate of the score, one coordinate at a time.

    Test oracle for the analytic `score` implementations; step must be > 0.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    out = np.empty_like(z)
    for d in range(z.shape[0]):
        zp, zm = z.copy(), z.copy()
        zp[d] += step
        zm[d] -= step
        out[d] = (target.log_density_unnorm(zp) - target.log_density_unnorm(zm)) / (2 * step)
    return out


def _spd_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance must be symmetric positive definite") from exc


@dataclass(frozen=True, eq=False)
class Gaussian(TargetDensity):
    """Multivariate normal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _prec: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.shape[0]}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        chol = _spd_factor(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", np.linalg.inv(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density_norm_batch(self, z: np.ndarray) -> np.ndarray:
        """Fully normalized log pdf; mixtures need correctly weighted components."""
        const = -0.5 * self.dim * np.log(2 * np.pi) - np.log(np.diag(self._chol)).sum()
        return const + self.log_density_batch(z)

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        diff = z - self.mean
        return -0.5 * np.einsum("nd,de,ne->n", diff, self._prec, diff)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        return -(z - self.mean) @ self._prec.T

    def sample_exact(self, n: int, rng: Rng) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self._chol.T


@dataclass(frozen=True)
class StudentT(TargetDensity):
    """One-dimensional Student's t with df degrees of freedom, location, scale."""

    df: float
    loc: float
    scale: float

    def __post_init__(self):
        if not self.df > 0:
            raise ValueError("df must be > 0")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def dim(self) -> int:
        return 1

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        u = (z[:, 0] - self.loc) / self.scale
        return -0.5 * (self.df + 1) * np.log1p(u * u / self.df)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        diff = z[:, 0] - self.loc
        s = -(self.df + 1) * diff / (self.df * self.scale**2 + diff * diff)
        return s[:, None]

    def sample_exact(self, n: int, rng: Rng) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return (self.loc + self.scale * rng.standard_t(self.df, n))[:, None]


@dataclass(frozen=True, eq=False)
class Gmm(TargetDensity):
    """Gaussian mixture with weights on the simplex and Gaussian components."""

    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        comps = tuple(self.components)
        if w.ndim != 1 or w.shape[0] != len(comps) or len(comps) < 1:
            raise ValueError("need one weight per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("all components must share one dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def _component_logs(self, z: np.ndarray) -> np.ndarray:
        # (N, K): log w_k + normalized component log pdf; -inf for zero weights
        cols = []
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        for k, comp in enumerate(self.components):
            cols.append(logw[k] + comp.log_density_norm_batch(z))
        return np.stack(cols, axis=1)

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        return _logsumexp(self._component_logs(z), axis=1)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        logs = self._component_logs(z)
        resp = np.exp(logs - _logsumexp(logs, axis=1)[:, None])  # (N, K)
        out = np.zeros_like(z)
        for k, comp in enumerate(self.components):
            out += resp[:, k : k + 1] * comp.score_batch(z)
        return out

    def sample_exact(self, n: int, rng: Rng) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        means = np.stack([c.mean for c in self.components])
        chols = np.stack([c._chol for c in self.components])
        return means[idx] + np.einsum("nde,ne->nd", chols[idx], eps)


class _BoxSampled(TargetDensity):
    """Shared rejection sampler over a square bounding box.

    The proposal is uniform on [box_lo, box_hi]^D; acceptance probability is
    exp(log_density - log_box_max) where the box maximum is found once by a
    400x400 grid search. An acceptance rate that stays below 1e-4 after a
    generous number of proposals means the box is misconfigured and raises
    SamplerError.
    """

    box_lo: float = -5.0
    box_hi: float = 5.0
    _GRID = 400
    _MIN_RATE = 1e-4

    def _box_log_max(self) -> float:
        cached = getattr(self, "_box_log_max_cache", None)
        if cached is None:
            axes = [np.linspace(self.box_lo, self.box_hi, self._GRID)] * self.dim
            mesh = np.meshgrid(*axes, indexing="ij")
            grid = np.stack([m.ravel() for m in mesh], axis=1)
            cached = float(self.log_density_batch(grid).max())
            object.__setattr__(self, "_box_log_max_cache", cached)
        return cached

    def sample_exact(self, n: int, rng: Rng) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        log_max = self._box_log_max()
        out = np.empty((n, self.dim))
        got = proposed = 0
        chunk = 8192
        # Enough proposals to estimate the rate reliably before giving up.
        budget = max(1_000_000, 20 * n)
        while got < n:
            props = rng.uniform(self.box_lo, self.box_hi, (chunk, self.dim))
            u = rng.random(chunk)
            keep = props[u < np.exp(self.log_density_batch(props) - log_max)]
            take = min(n - got, keep.shape[0])
            out[got : got + take] = keep[:take]
            got += take
            proposed += chunk
            if proposed >= budget and got / proposed < self._MIN_RATE:
                raise SamplerError(
                    f"rejection acceptance rate {got / proposed:.2e} below {self._MIN_RATE:g}; "
                    "bounding box is misconfigured for this target")
        return out


@dataclass(frozen=True, eq=False)
class MixtureOfRings(_BoxSampled):
    """Ring-shaped modes: density proportional to
    sum_k exp(-(||z - c_k|| - r_k)^2 / (2 width^2)).

    Defaults follow the 2-D benchmark preset: two unit-ish rings centered at
    (-2, 0) and (2, 0) with radius 1.5 and width 0.2 (parameters are not from
    any published table; they are configurable).
    """

    centers: np.ndarray = ((-2.0, 0.0), (2.0, 0.0))
    radii: np.ndarray = (1.5, 1.5)
    width: float = 0.2
    box_lo: float = -5.0
    box_hi: float = 5.0

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        radii = np.atleast_1d(np.asarray(self.radii, dtype=np.float64))
        if centers.shape[0] != radii.shape[0]:
            raise ValueError("need one radius per center")
        if np.any(radii <= 0) or not self.width > 0:
            raise ValueError("radii and width must be > 0")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _ring_terms(self, z: np.ndarray):
        diff = z[:, None, :] - self.centers[None, :, :]     # (N, K, D)
        dist = np.sqrt(np.sum(diff * diff, axis=2))         # (N, K)
        logs = -((dist - self.radii) ** 2) / (2 * self.width**2)
        return diff, dist, logs

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        _, _, logs = self._ring_terms(z)
        return _logsumexp(logs, axis=1)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        diff, dist, logs = self._ring_terms(z)
        resp = np.exp(logs - _logsumexp(logs, axis=1)[:, None])
        # d/dz of one ring term: -(dist - r)/width^2 * (z - c)/dist.
        # The unit vector is undefined exactly at a center; that single point
        # contributes zero instead.
        safe = np.where(dist > 1e-12, dist, 1.0)
        coeff = np.where(dist > 1e-12, -(dist - self.radii) / self.width**2 / safe, 0.0)
        return np.sum((resp * coeff)[:, :, None] * diff, axis=1)


@dataclass(frozen=True)
class TwoMoon(_BoxSampled):
    """Two interlocking crescents.

    Each crescent s in {+1, -1} is a ring of the given radius and radial_width
    centered at (0, s * separation), faded out on one side of the z_1 = 0 line
    by the smooth factor exp(-relu(-s * z_1 / moon_width)^2). Defaults:
    radius 2, radial_width 0.3, separation 1, moon_width 1/3.
    """

    radius: float = 2.0
    radial_width: float = 0.3
    separation: float = 1.0
    moon_width: float = 1.0 / 3.0
    box_lo: float = -5.0
    box_hi: float = 5.0

    def __post_init__(self):
        for name in ("radius", "radial_width", "separation", "moon_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def dim(self) -> int:
        return 2

    def _moon_terms(self, z: np.ndarray):
        signs = np.array([1.0, -1.0])
        centers = np.stack([np.zeros(2), np.zeros(2)])
        centers[:, 1] = signs * self.separation
        diff = z[:, None, :] - centers[None, :, :]          # (N, 2, D)
        dist = np.sqrt(np.sum(diff * diff, axis=2))         # (N, 2)
        cut = np.maximum(-signs[None, :] * z[:, 0:1] / self.moon_width, 0.0)
        logs = -((dist - self.radius) ** 2) / (2 * self.radial_width**2) - cut * cut
        return signs, diff, dist, cut, logs

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        _, _, _, _, logs = self._moon_terms(z)
        return _logsumexp(logs, axis=1)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        signs, diff, dist, cut, logs = self._moon_terms(z)
        resp = np.exp(logs - _logsumexp(logs, axis=1)[:, None])
        safe = np.where(dist > 1e-12, dist, 1.0)
        coeff = np.where(dist > 1e-12, -(dist - self.radius) / self.radial_width**2 / safe, 0.0)
        grad = (resp * coeff)[:, :, None] * diff            # ring part
        # half-plane part only moves the first coordinate:
        # d/dz1 [-relu(-s z1/w)^2] = 2 s relu(-s z1/w) / w
        grad[:, :, 0] += resp * (2.0 * signs[None, :] * cut / self.moon_width)
        return np.sum(grad, axis=1)


def target_to_json(t: TargetDensity) -> dict:
    """JSON document {variant, parameters} for any benchmark target."""
    if isinstance(t, Gaussian):
        return {"variant": "gaussian",
                "parameters": {"mean": t.mean.tolist(), "cov": t.cov.tolist()}}
    if isinstance(t, StudentT):
        return {"variant": "student_t",
                "parameters": {"df": t.df, "loc": t.loc, "scale": t.scale}}
    if isinstance(t, Gmm):
        return {"variant": "gmm",
                "parameters": {
                    "weights": t.weights.tolist(),
                    "components": [{"mean": c.mean.tolist(), "cov": c.cov.tolist()}
                                   for c in t.components]}}
    if isinstance(t, MixtureOfRings):
        return {"variant": "mixture_of_rings",
                "parameters": {"centers": t.centers.tolist(), "radii": t.radii.tolist(),
                               "width": t.width}}
    if isinstance(t, TwoMoon):
        return {"variant": "two_moon",
                "parameters": {"radius": t.radius, "radial_width": t.radial_width,
                               "separation": t.separation, "moon_width": t.moon_width}}
    raise ValueError(f"cannot serialize target of type {type(t).__name__}")


def target_from_json(doc: dict) -> TargetDensity:
    """Inverse of `target_to_json`."""
    try:
        variant = doc["variant"]
        params = doc["parameters"]
    except (KeyError, TypeError) as exc:
        raise ValueError("target document needs 'variant' and 'parameters'") from exc
    if variant == "gaussian":
        return Gaussian(np.asarray(params["mean"]), np.asarray(params["cov"]))
    if variant == "student_t":
        return StudentT(params["df"], params["loc"], params["scale"])
    if variant == "gmm":
        comps = tuple(Gaussian(np.asarray(c["mean"]), np.asarray(c["cov"]))
                      for c in params["components"])
        return Gmm(np.asarray(params["weights"]), comps)
    if variant == "mixture_of_rings":
        return MixtureOfRings(np.asarray(params["centers"]), np.asarray(params["radii"]),
                              params["width"])
    if variant == "two_moon":
        return TwoMoon(params["radius"], params["radial_width"], params["separation"],
                       params["moon_width"])
    raise ValueError(f"unknown target variant {variant!r}")
