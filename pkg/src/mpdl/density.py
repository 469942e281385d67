"""Gaussian product-kernel density estimation with analytic log-gradients.

Each party models the marginal distribution of its own feature space
with a KDE over its local samples.  Log-densities are evaluated through
log-sum-exp so that points far from the support degrade gracefully
instead of underflowing to ``log 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .nn import as_batch

# Beyond this width the product kernel is so concentrated that
# log-densities are dominated by the nearest sample; callers are warned
# rather than stopped.
DIMENSION_WARN_LIMIT = 64


def bandwidth_rule(n_samples: int) -> float:
    """Bandwidth 1.05 * N^(-1/5) used for every fitted estimator."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    return 1.05 * float(n_samples) ** (-0.2)


@dataclass(frozen=True)
class KdeModel:
    """Fitted estimator: the support samples and a shared bandwidth."""

    support: np.ndarray
    bandwidth: float

    def __post_init__(self):
        s = as_batch(self.support)
        if not (self.bandwidth > 0.0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive and finite")
        object.__setattr__(self, "support", s)

    @property
    def dim(self) -> int:
        return self.support.shape[1]


def fit_kde(samples, bandwidth: float | None = None) -> KdeModel:
    """Fit a KDE on ``samples``; bandwidth defaults to the N^(-1/5) rule."""
    s = as_batch(samples)
    if s.shape[1] > DIMENSION_WARN_LIMIT:
        warnings.warn(
            f"KDE over {s.shape[1]} dimensions: log-densities will be "
            "dominated by nearest neighbours", RuntimeWarning)
    if bandwidth is None:
        bandwidth = bandwidth_rule(s.shape[0])
    return KdeModel(s, float(bandwidth))


def _log_kernels(model: KdeModel, x: np.ndarray) -> np.ndarray:
    """(batch, support) matrix of -||x - x_i||^2 / (2 h^2)."""
    diff = x[:, None, :] - model.support[None, :, :]
    sq = np.einsum("bnd,bnd->bn", diff, diff)
    return -sq / (2.0 * model.bandwidth ** 2)


def log_density_batch(model: KdeModel, x) -> np.ndarray:
    """Log-density of each row of ``x`` under the fitted estimator."""
    xb = as_batch(x, model.dim)
    n, d = model.support.shape
    norm = math.log(n) + d * math.log(model.bandwidth) \
        + 0.5 * d * math.log(2.0 * math.pi)
    return logsumexp(_log_kernels(model, xb), axis=1) - norm


def log_density(model: KdeModel, x) -> float:
    """Log-density of a single point (1-D vector)."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("log_density takes a single 1-D point")
    return float(log_density_batch(model, v[None, :])[0])


def grad_log_density_batch(model: KdeModel, x) -> np.ndarray:
    """Gradient of the log-density at each row of ``x``.

    Analytic form: with softmax weights w_i over the per-sample kernel
    logs, the gradient is sum_i w_i (x_i - x) / h^2.
    """
    xb = as_batch(x, model.dim)
    w = softmax(_log_kernels(model, xb), axis=1)
    return (w @ model.support - xb) / model.bandwidth ** 2


def grad_log_density(model: KdeModel, x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("grad_log_density takes a single 1-D point")
    return grad_log_density_batch(model, v[None, :])[0]
