"""Particle-flow variational inference toolkit.

Particle clouds are driven by a score-plus-kernel drift toward a target
density, evaluated with the kernelized Stein discrepancy and its bootstrap
goodness-of-fit test, and plugged into an EM loop for latent variable models.
"""

from .core import (BandwidthPolicy, ConfigError, DivergedRunError, NumericError,
                   ParticleSet, RecordingError, Rng, RunConfig, RunRecord,
                   SamplerError, cloud_moments, init_particles, record_snapshot)
from .discrepancy import GofResult, gof_test, ksd, stein_kernel
from .inference import ansatz, drift, run_info, step
from .kernels import KernelSpec, grad_first, kernel_matrix, median_bandwidth, rbf
from .targets import (Gaussian, Gmm, MixtureOfRings, StudentT, TargetDensity,
                      TwoMoon, finite_diff_score, target_from_json, target_to_json)

__version__ = "0.1.0"
