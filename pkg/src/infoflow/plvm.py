"""Probabilistic latent variable model: decoder likelihood plus standard
Gaussian prior, posterior-score assembly, the particle-flow E-step, and the
full EM training loop with a per-epoch convergence monitor.

Two decoders are supported, both with hand-derived gradients so no external
differentiation machinery is needed:

  linear-Gaussian:  x ~ N(W z + b, sigma^2 I)
  one-hidden-layer: x ~ N(W2 tanh(W1 z + b1) + b2, sigma^2 I)

The posterior score splits as prior score (-z) plus likelihood score, so the
particle flow only ever needs unnormalized quantities. The noise scale is
optimized in log-space and floored: a collapsing sigma makes the posterior
score stiffness 1/sigma^2 unbounded, which forward Euler cannot follow.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import (ConfigError, DivergedRunError, ParticleSet, Rng, RunConfig,
                   RunRecord, init_particles, record_scalars)
from .inference import run_info
from .targets import TargetDensity

__all__ = [
    "LinearGaussianDecoder",
    "MlpDecoder",
    "PlvmModel",
    "EmConfig",
    "Dataset",
    "DataFileError",
    "PosteriorTarget",
    "loglik",
    "posterior_score",
    "grad_theta_loglik",
    "e_step",
    "m_step",
    "run_info_em",
    "predict",
    "expected_loglik",
    "decode",
    "model_to_json",
    "model_from_json",
    "load_dataset_csv",
    "synthesize_dataset",
    "make_linear_model",
    "make_mlp_model",
]


class DataFileError(OSError):
    """A dataset file is missing, unreadable, or empty."""


def _finite_array(value, shape_hint: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{shape_hint} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class LinearGaussianDecoder:
    """x ~ N(weight @ z + bias, noise_scale^2 I)."""

    weight: np.ndarray   # (D_obs, D_LV)
    bias: np.ndarray     # (D_obs,)
    noise_scale: float

    def __post_init__(self):
        w = _finite_array(self.weight, "weight")
        b = _finite_array(self.bias, "bias").reshape(-1)
        if w.ndim != 2 or w.shape[0] != b.shape[0]:
            raise ValueError("weight must be (D_obs, D_LV) with matching bias")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be > 0")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def latent_dim(self):
        return self.weight.shape[1]

    @property
    def obs_dim(self):
        return self.weight.shape[0]

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias


@dataclass(frozen=True, eq=False)
class MlpDecoder:
    """x ~ N(w2 @ tanh(w1 @ z + b1) + b2, noise_scale^2 I)."""

    w1: np.ndarray   # (H, D_LV)
    b1: np.ndarray   # (H,)
    w2: np.ndarray   # (D_obs, H)
    b2: np.ndarray   # (D_obs,)
    noise_scale: float

    def __post_init__(self):
        w1 = _finite_array(self.w1, "w1")
        b1 = _finite_array(self.b1, "b1").reshape(-1)
        w2 = _finite_array(self.w2, "w2")
        b2 = _finite_array(self.b2, "b2").reshape(-1)
        if w1.ndim != 2 or w2.ndim != 2 or w1.shape[0] != b1.shape[0] \
                or w2.shape[0] != b2.shape[0] or w2.shape[1] != w1.shape[0]:
            raise ValueError("inconsistent MLP decoder shapes")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be > 0")
        for name, val in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            object.__setattr__(self, name, val)

    @property
    def latent_dim(self):
        return self.w1.shape[1]

    @property
    def obs_dim(self):
        return self.w2.shape[0]

    def hidden_batch(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.w1.T + self.b1)

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        return self.hidden_batch(z) @ self.w2.T + self.b2


@dataclass(frozen=True, eq=False)
class PlvmModel:
    """Decoder parameters plus an implicit standard Gaussian prior on z."""

    decoder: LinearGaussianDecoder | MlpDecoder

    @property
    def latent_dim(self):
        return self.decoder.latent_dim

    @property
    def obs_dim(self):
        return self.decoder.obs_dim


def _check_mask(mask, d_obs: int) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != d_obs:
        raise ValueError(f"mask length {mask.shape[0]} does not match D_obs={d_obs}")
    return mask


def decode(model: PlvmModel, z) -> np.ndarray:
    """Decoder mean for a single latent point."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    return model.decoder.decode_batch(z[None, :])[0]


def _loglik_batch(model: PlvmModel, x: np.ndarray, z: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> np.ndarray:
    """log N(x_obs | decode(z)_obs, sigma^2 I) for a (M, D_LV) batch -> (M,)."""
    dec = model.decoder
    mask = _check_mask(mask, dec.obs_dim)
    resid = x - dec.decode_batch(z)
    if mask is not None:
        resid = resid[:, mask]
    d_eff = resid.shape[1]
    sigma = dec.noise_scale
    return (-0.5 * d_eff * np.log(2 * np.pi) - d_eff * np.log(sigma)
            - 0.5 * np.sum(resid * resid, axis=1) / sigma**2)


def loglik(model: PlvmModel, x, z) -> float:
    """Decoder log-likelihood log p(x | z), normalization constant included."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.obs_dim or z.shape[0] != model.latent_dim:
        raise ValueError("observation or latent dimension mismatch")
    return float(_loglik_batch(model, x, z[None, :])[0])


def _likelihood_score_batch(model: PlvmModel, x: np.ndarray, z: np.ndarray,
                            mask: Optional[np.ndarray]) -> np.ndarray:
    """Gradient of the (possibly masked) decoder log-likelihood in z."""
    dec = model.decoder
    sigma2 = dec.noise_scale**2
    if isinstance(dec, LinearGaussianDecoder):
        w, b = dec.weight, dec.bias
        xv = x
        if mask is not None:
            w, b, xv = w[mask], b[mask], x[mask]
        resid = xv - z @ w.T - b
        return resid @ w / sigma2
    hidden = dec.hidden_batch(z)
    w2, b2 = dec.w2, dec.b2
    xv = x
    if mask is not None:
        w2, b2, xv = w2[mask], b2[mask], x[mask]
    resid = xv - (hidden @ w2.T + b2)
    d_hidden = (resid / sigma2) @ w2 * (1.0 - hidden * hidden)
    return d_hidden @ dec.w1


def posterior_score(model: PlvmModel, x, z, mask=None) -> np.ndarray:
    """Score of the unnormalized posterior: prior score (-z) plus the
    gradient of the decoder log-likelihood, restricted to observed dims."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.obs_dim or z.shape[0] != model.latent_dim:
        raise ValueError("observation or latent dimension mismatch")
    mask = _check_mask(mask, model.obs_dim)
    return -z + _likelihood_score_batch(model, x, z[None, :], mask)[0]


def grad_theta_loglik(model: PlvmModel, x, z) -> dict:
    """Gradient of loglik(model, x, z) in every decoder parameter.

    The noise scale is differentiated in log-space ("log_noise") so gradient
    ascent keeps it positive. Returned as a dict of arrays keyed by parameter
    name.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    dec = model.decoder
    sigma2 = dec.noise_scale**2
    if isinstance(dec, LinearGaussianDecoder):
        resid = x - dec.decode_batch(z[None, :])[0]
        return {
            "weight": np.outer(resid, z) / sigma2,
            "bias": resid / sigma2,
            "log_noise": float(-dec.obs_dim + resid @ resid / sigma2),
        }
    a = dec.w1 @ z + dec.b1
    hidden = np.tanh(a)
    resid = x - (dec.w2 @ hidden + dec.b2)
    d_out = resid / sigma2
    d_a = (dec.w2.T @ d_out) * (1.0 - hidden * hidden)
    return {
        "w2": np.outer(d_out, hidden),
        "b2": d_out,
        "w1": np.outer(d_a, z),
        "b1": d_a,
        "log_noise": float(-dec.obs_dim + resid @ resid / sigma2),
    }


@dataclass(frozen=True, eq=False)
class PosteriorTarget(TargetDensity):
    """Unnormalized posterior of a PLVM given one observation (optionally
    restricted to the observed dimensions of a mask)."""

    model: PlvmModel
    x: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        x = _finite_array(self.x, "observation").reshape(-1)
        if x.shape[0] != self.model.obs_dim:
            raise ValueError("observation dimension mismatch")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mask", _check_mask(self.mask, self.model.obs_dim))

    @property
    def dim(self):
        return self.model.latent_dim

    def log_density_batch(self, z: np.ndarray) -> np.ndarray:
        prior = -0.5 * np.sum(z * z, axis=1)
        return prior + _loglik_batch(self.model, self.x, z, self.mask)

    def score_batch(self, z: np.ndarray) -> np.ndarray:
        return -z + _likelihood_score_batch(self.model, self.x, z, self.mask)

    def sample_exact(self, n, rng):
        raise NotImplementedError("posterior targets have no direct sampler")


def e_step(model: PlvmModel, x, inner: RunConfig,
           init: Optional[ParticleSet] = None, mask=None) -> ParticleSet:
    """Particle-flow inference of the posterior of one observation.

    Runs the flow against the posterior score; with init=None the cloud
    starts from the prior using inner.seed.
    """
    target = PosteriorTarget(model, np.asarray(x, dtype=np.float64), mask)
    cloud, _ = run_info(inner, target, init=init)
    return cloud


def _stack_pairs(model: PlvmModel, pairs):
    xs, zs = [], []
    for x, cloud in pairs:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != model.obs_dim:
            raise ValueError("observation dimension mismatch in pairs")
        pts = cloud.points if isinstance(cloud, ParticleSet) else np.asarray(cloud)
        xs.append(np.broadcast_to(x, (pts.shape[0], x.shape[0])))
        zs.append(pts)
    return np.concatenate(xs, axis=0), np.concatenate(zs, axis=0)


def expected_loglik(model: PlvmModel, pairs) -> float:
    """Convergence monitor: decoder log-likelihood averaged over every
    (datapoint, particle) pair."""
    total = 0.0
    count = 0
    for x, cloud in pairs:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        pts = cloud.points if isinstance(cloud, ParticleSet) else np.asarray(cloud)
        vals = _loglik_batch(model, x, pts)
        total += float(vals.sum())
        count += vals.shape[0]
    return total / count


def _clamped_scale(sigma: float, floor: float) -> float:
    return max(float(sigma), float(floor))


def m_step(model: PlvmModel, pairs, rate: float, iters: int, *,
           mode: str = "gradient", sigma_floor: float = 1e-3) -> PlvmModel:
    """Update decoder parameters to raise the mean log-likelihood over all
    (observation, particle cloud) pairs.

    mode="gradient" does `iters` plain gradient-ascent steps with learning
    rate `rate` (the noise scale moves in log-space). mode="closed_form" is
    exact for the linear decoder: least squares for weight/bias and the
    residual MLE for the noise. The noise scale never drops below
    sigma_floor.
    """
    if not rate >= 0:
        raise ConfigError("learning rate must be >= 0")
    if mode not in ("gradient", "closed_form"):
        raise ConfigError(f"unknown m_step mode {mode!r}")
    x_big, z_big = _stack_pairs(model, pairs)
    n_total = x_big.shape[0]
    dec = model.decoder

    if mode == "closed_form":
        if not isinstance(dec, LinearGaussianDecoder):
            raise ConfigError("closed-form M-step is only available for the linear decoder")
        design = np.concatenate([z_big, np.ones((n_total, 1))], axis=1)
        coef, *_ = np.linalg.lstsq(design, x_big, rcond=None)
        weight = coef[:-1].T
        bias = coef[-1]
        resid = x_big - design @ coef
        sigma = np.sqrt(np.mean(resid * resid))
        if not np.isfinite(sigma):
            raise ConfigError("closed-form M-step produced a non-finite noise scale")
        return PlvmModel(LinearGaussianDecoder(weight, bias,
                                               _clamped_scale(sigma, sigma_floor)))

    log_floor = np.log(sigma_floor)
    if isinstance(dec, LinearGaussianDecoder):
        w, b = dec.weight.copy(), dec.bias.copy()
        log_s = np.log(dec.noise_scale)
        for _ in range(iters):
            sigma2 = np.exp(2 * log_s)
            resid = x_big - z_big @ w.T - b
            if not np.isfinite(resid).all():
                raise ConfigError("M-step objective became non-finite")
            w = w + rate * (resid.T @ z_big) / (n_total * sigma2)
            b = b + rate * resid.mean(axis=0) / sigma2
            log_s = max(log_floor,
                        log_s + rate * (-dec.obs_dim + np.mean(np.sum(resid * resid, axis=1)) / sigma2))
        return PlvmModel(LinearGaussianDecoder(w, b, float(np.exp(log_s))))

    w1, b1 = dec.w1.copy(), dec.b1.copy()
    w2, b2 = dec.w2.copy(), dec.b2.copy()
    log_s = np.log(dec.noise_scale)
    for _ in range(iters):
        sigma2 = np.exp(2 * log_s)
        a = z_big @ w1.T + b1
        hidden = np.tanh(a)
        resid = x_big - (hidden @ w2.T + b2)
        if not np.isfinite(resid).all():
            raise ConfigError("M-step objective became non-finite")
        d_out = resid / sigma2
        d_a = (d_out @ w2) * (1.0 - hidden * hidden)
        w2 = w2 + rate * (d_out.T @ hidden) / n_total
        b2 = b2 + rate * d_out.mean(axis=0)
        w1 = w1 + rate * (d_a.T @ z_big) / n_total
        b1 = b1 + rate * d_a.mean(axis=0)
        log_s = max(log_floor,
                    log_s + rate * (-dec.obs_dim + np.mean(np.sum(resid * resid, axis=1)) / sigma2))
    return PlvmModel(MlpDecoder(w1, b1, w2, b2, float(np.exp(log_s))))


@dataclass(frozen=True)
class EmConfig:
    """Training-loop settings: epochs of (E-step over datapoints, M-step).

    inner configures every E-step particle run. m_step_mode "auto" picks the
    closed form for the linear decoder and gradient ascent for the MLP.
    warm_start reuses each datapoint's previous-epoch cloud as the next
    initialization (cold starts redraw from the prior each epoch).
    """

    epochs: int
    m_step_rate: float
    m_step_iters: int
    inner: RunConfig
    m_step_mode: str = "auto"
    warm_start: bool = True
    sigma_floor: float = 0.05

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.m_step_rate > 0:
            raise ConfigError("m_step_rate must be > 0")
        if self.m_step_iters < 1:
            raise ConfigError("m_step_iters must be >= 1")
        if self.m_step_mode not in ("auto", "gradient", "closed_form"):
            raise ConfigError(f"unknown m_step_mode {self.m_step_mode!r}")
        if not self.sigma_floor > 0:
            raise ConfigError("sigma_floor must be > 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    """N observations, one row each; target_mask (True = observed at
    prediction time) marks which columns a prediction run may condition on."""

    rows: np.ndarray
    target_mask: Optional[np.ndarray] = None
    column_names: Optional[tuple] = None

    def __post_init__(self):
        rows = _finite_array(self.rows, "dataset rows")
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("dataset must be a non-empty (N, D_obs) matrix")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "target_mask", _check_mask(self.target_mask, rows.shape[1]))
        if self.column_names is not None:
            object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def num_rows(self):
        return self.rows.shape[0]

    @property
    def obs_dim(self):
        return self.rows.shape[1]


def load_dataset_csv(path) -> Dataset:
    """Read a dataset from CSV with a header row of column names."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise DataFileError(f"cannot read dataset {path}: {exc}") from exc
    if len(rows) < 2:
        raise DataFileError(f"dataset {path} is empty (need a header plus data rows)")
    header = tuple(rows[0])
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataFileError(f"dataset {path} contains non-numeric values: {exc}") from exc
    return Dataset(data, column_names=header)


def run_info_em(model: PlvmModel, data: Dataset, cfg: EmConfig) -> tuple[PlvmModel, RunRecord]:
    """Alternate particle-flow E-steps (one per datapoint) and M-steps for
    cfg.epochs epochs.

    Each datapoint i gets its own cloud; the prior initialization uses the
    derived stream seed ^ i, and with warm_start the cloud carries over to the
    next epoch. After each M-step the monitor expected_loglik is recorded at
    the (1-based) epoch index under the scalar name "loglik".
    """
    mode = cfg.m_step_mode
    if mode == "auto":
        mode = "closed_form" if isinstance(model.decoder, LinearGaussianDecoder) else "gradient"
    inner = cfg.inner
    clouds: list = [None] * data.num_rows
    record = RunRecord()
    for epoch in range(1, cfg.epochs + 1):
        pairs = []
        for idx in range(data.num_rows):
            x = data.rows[idx]
            if cfg.warm_start and clouds[idx] is not None:
                init = ParticleSet(clouds[idx].points, time_step=0)
            else:
                init = init_particles(inner.num_particles, model.latent_dim,
                                      Rng(inner.seed).derive(idx))
            try:
                cloud = e_step(model, x, inner, init=init)
            except DivergedRunError as exc:
                raise DivergedRunError(
                    f"E-step diverged at epoch {epoch}, datapoint {idx}: {exc}",
                    step=exc.step) from exc
            clouds[idx] = cloud
            pairs.append((x, cloud))
        model = m_step(model, pairs, cfg.m_step_rate, cfg.m_step_iters,
                       mode=mode, sigma_floor=cfg.sigma_floor)
        record = record_scalars(record, epoch, {"loglik": expected_loglik(model, pairs)})
    return model, record


def predict(model: PlvmModel, x_partial, mask, inner: RunConfig,
            init: Optional[ParticleSet] = None) -> np.ndarray:
    """Fill in the unobserved dimensions of a partly observed row.

    Runs the E-step conditioned on the observed dimensions only, then returns
    the mean decoded value over particles at the unobserved dimensions (in
    index order). The mask must mark at least one observed and one unobserved
    dimension.
    """
    mask = _check_mask(mask, model.obs_dim)
    if mask is None or mask.all() or not mask.any():
        raise ValueError("mask must mark at least one observed and one unobserved dimension")
    cloud = e_step(model, x_partial, inner, init=init, mask=mask)
    decoded = model.decoder.decode_batch(cloud.points)
    return decoded[:, ~mask].mean(axis=0)


def model_to_json(model: PlvmModel) -> dict:
    """JSON document for a trained model (matrices row-major)."""
    dec = model.decoder
    if isinstance(dec, LinearGaussianDecoder):
        return {"decoder": "linear_gaussian", "weight": dec.weight.tolist(),
                "bias": dec.bias.tolist(), "noise_scale": dec.noise_scale}
    return {"decoder": "mlp", "w1": dec.w1.tolist(), "b1": dec.b1.tolist(),
            "w2": dec.w2.tolist(), "b2": dec.b2.tolist(),
            "noise_scale": dec.noise_scale}


def model_from_json(doc: dict) -> PlvmModel:
    """Inverse of `model_to_json`."""
    try:
        kind = doc["decoder"]
    except (KeyError, TypeError) as exc:
        raise ValueError("model document needs a 'decoder' field") from exc
    if kind == "linear_gaussian":
        return PlvmModel(LinearGaussianDecoder(np.asarray(doc["weight"]),
                                               np.asarray(doc["bias"]),
                                               doc["noise_scale"]))
    if kind == "mlp":
        return PlvmModel(MlpDecoder(np.asarray(doc["w1"]), np.asarray(doc["b1"]),
                                    np.asarray(doc["w2"]), np.asarray(doc["b2"]),
                                    doc["noise_scale"]))
    raise ValueError(f"unknown decoder kind {kind!r}")


def make_linear_model(obs_dim: int, latent_dim: int, rng: Rng,
                      noise_scale: float = 0.1) -> PlvmModel:
    """Random linear-Gaussian model (weights ~ N(0,1), bias ~ N(0,1))."""
    return PlvmModel(LinearGaussianDecoder(rng.standard_normal((obs_dim, latent_dim)),
                                           rng.standard_normal(obs_dim), noise_scale))


def make_mlp_model(obs_dim: int, latent_dim: int, rng: Rng, hidden: int = 16,
                   noise_scale: float = 0.1) -> PlvmModel:
    """Random tanh-MLP model with one hidden layer."""
    scale1 = 1.0 / np.sqrt(latent_dim)
    scale2 = 1.0 / np.sqrt(hidden)
    return PlvmModel(MlpDecoder(rng.standard_normal((hidden, latent_dim)) * scale1,
                                rng.standard_normal(hidden) * 0.1,
                                rng.standard_normal((obs_dim, hidden)) * scale2,
                                rng.standard_normal(obs_dim) * 0.1, noise_scale))


def synthesize_dataset(model: PlvmModel, n: int, rng: Rng,
                       noise_scale: Optional[float] = None):
    """Draw a synthetic dataset: z* ~ N(0, I), x = decode(z*) + noise.

    noise_scale defaults to the model's own; pass 0.0 for noiseless data.
    Returns (Dataset, true latents) so downstream checks can compare against
    the generator.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_scale is None:
        noise_scale = model.decoder.noise_scale
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    z = rng.standard_normal((n, model.latent_dim))
    x = model.decoder.decode_batch(z)
    if noise_scale > 0:
        x = x + noise_scale * rng.standard_normal(x.shape)
    return Dataset(x), z
