"""Spectral mixture kernel, reparameterized spectral sampling and random Fourier features.

All inputs are scalar (one-dimensional time). Frequencies are in cycles per
input unit, so a component with mean ``mu`` oscillates as ``cos(2*pi*tau*mu)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class SmKernelParams:
    """Hyperparameters of a one-dimensional spectral mixture kernel.

    Stored in the unconstrained parameterization used for optimization:
    log mixture weights, raw frequency means and log frequency scales.

    Attributes:
        log_weights: (Q,) log of the mixture weights ``w_q``.
        means: (Q,) spectral means ``mu_q``.
        log_stds: (Q,) log of the spectral standard deviations ``sigma_q``.
    """

    log_weights: np.ndarray
    means: np.ndarray
    log_stds: np.ndarray

    def __post_init__(self):
        lw = np.atleast_1d(np.asarray(self.log_weights, dtype=float))
        mu = np.atleast_1d(np.asarray(self.means, dtype=float))
        ls = np.atleast_1d(np.asarray(self.log_stds, dtype=float))
        if not (lw.ndim == mu.ndim == ls.ndim == 1):
            raise ValueError("kernel parameters must be one-dimensional")
        if not (lw.size == mu.size == ls.size) or lw.size < 1:
            raise ValueError(
                f"component arrays disagree: {lw.size}, {mu.size}, {ls.size}"
            )
        if not (np.all(np.isfinite(lw)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(ls))):
            raise ValueError("kernel parameters must be finite")
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "log_stds", ls)

    @classmethod
    def from_natural(cls, weights, means, stds) -> "SmKernelParams":
        weights = np.asarray(weights, dtype=float)
        stds = np.asarray(stds, dtype=float)
        if np.any(weights <= 0) or np.any(stds <= 0):
            raise ValueError("weights and stds must be positive")
        return cls(np.log(weights), np.asarray(means, dtype=float), np.log(stds))

    @property
    def n_components(self) -> int:
        return self.means.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def stds(self) -> np.ndarray:
        return np.exp(self.log_stds)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[log w_1..Q, mu_1..Q, log sigma_1..Q]``."""
        return np.concatenate([self.log_weights, self.means, self.log_stds])

    @classmethod
    def from_vector(cls, vec) -> "SmKernelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.size % 3:
            raise ValueError("parameter vector length must be a multiple of 3")
        q = vec.size // 3
        return cls(vec[:q].copy(), vec[q:2 * q].copy(), vec[2 * q:].copy())


@dataclass(frozen=True)
class SpectralSample:
    """Spectral points drawn by ``mu_q + sigma_q * eps``.

    Attributes:
        points: (m,) all points, grouped by component in order.
        counts: (Q,) number of points per component.
        noise: (m,) the standard-normal draws that produced ``points``.
    """

    points: np.ndarray
    counts: np.ndarray
    noise: np.ndarray

    @property
    def component_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.counts.size), self.counts)

    def groups(self) -> list[np.ndarray]:
        edges = np.cumsum(self.counts)[:-1]
        return np.split(self.points, edges)


def sm_kernel_eval(tau, params: SmKernelParams):
    """Evaluate the SM kernel at lag(s) ``tau``.

    ``k(tau) = sum_q w_q cos(2 pi tau mu_q) exp(-2 pi^2 tau^2 sigma_q^2)``.
    Works elementwise on arrays of any shape.
    """
    tau = np.asarray(tau, dtype=float)
    t = tau[..., None]
    comp = np.cos(TWO_PI * t * params.means) * np.exp(
        -2.0 * np.pi ** 2 * t ** 2 * params.stds ** 2
    )
    return comp @ params.weights


def sm_gram(inputs, params: SmKernelParams, jitter: float = 0.0) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(x_i - x_j) + jitter * [i == j]``."""
    x = np.asarray(inputs, dtype=float).ravel()
    lags = x[:, None] - x[None, :]
    gram = sm_kernel_eval(lags, params)
    # exact symmetry regardless of rounding in the lag differences
    gram = 0.5 * (gram + gram.T)
    if jitter:
        gram[np.diag_indices_from(gram)] += jitter
    return gram


def default_counts(n_components: int, total: int) -> np.ndarray:
    """Split ``total`` spectral points evenly over components."""
    if total < n_components:
        raise ValueError(f"need at least one point per component, got {total} for {n_components}")
    base, extra = divmod(total, n_components)
    counts = np.full(n_components, base, dtype=int)
    counts[:extra] += 1
    return counts


def reparam_sample(params: SmKernelParams, counts: Sequence[int], noise) -> SpectralSample:
    """Map standard-normal ``noise`` to spectral points of each component.

    Raises:
        ValueError: if a count is not positive or the noise length differs
            from ``sum(counts)``.
    """
    counts = np.asarray(counts, dtype=int).ravel()
    noise = np.asarray(noise, dtype=float).ravel()
    if counts.size != params.n_components:
        raise ValueError(f"expected {params.n_components} counts, got {counts.size}")
    if np.any(counts < 1):
        raise ValueError("spectral counts must be positive")
    if noise.size != counts.sum():
        raise ValueError(f"noise has {noise.size} entries, counts require {counts.sum()}")
    comp = np.repeat(np.arange(counts.size), counts)
    points = params.means[comp] + params.stds[comp] * noise
    return SpectralSample(points=points, counts=counts, noise=noise.copy())


def feature_scales(params: SmKernelParams, counts) -> np.ndarray:
    """Per-point scale ``sqrt(w_q / m_q)`` of the feature columns."""
    counts = np.asarray(counts, dtype=int)
    comp = np.repeat(np.arange(counts.size), counts)
    return np.sqrt(params.weights[comp] / counts[comp])


def rff_features(inputs, sample: SpectralSample, params: SmKernelParams) -> np.ndarray:
    """Random Fourier feature matrix of shape (n, 2m).

    Columns are laid out as ``[cos block, sin block]`` over all points, where
    each point of component q carries the scale ``sqrt(w_q / m_q)``. The
    column order differs from a per-component interleaving only by a
    permutation, which leaves ``Phi @ Phi.T`` unchanged.
    """
    if sample.counts.size != params.n_components:
        raise ValueError("sample and params disagree on the number of components")
    x = np.asarray(inputs, dtype=float).ravel()
    scale = feature_scales(params, sample.counts)
    arg = TWO_PI * x[:, None] * sample.points[None, :]
    return np.concatenate([np.cos(arg) * scale, np.sin(arg) * scale], axis=1)


def spectral_kl(q_params: SmKernelParams, prior_params: SmKernelParams) -> float:
    """Sum over components of ``KL(N(mu_q, sigma_q^2) || N(mu0_q, sigma0_q^2))``.

    Components are paired by index; mixture weights do not enter.
    """
    if q_params.n_components != prior_params.n_components:
        raise ValueError(
            f"component mismatch: {q_params.n_components} vs {prior_params.n_components}"
        )
    s2 = q_params.stds ** 2
    s02 = prior_params.stds ** 2
    d = q_params.means - prior_params.means
    terms = (prior_params.log_stds - q_params.log_stds) + (s2 + d ** 2) / (2.0 * s02) - 0.5
    return float(np.sum(terms))


def spectral_kl_grad(q_params: SmKernelParams, prior_params: SmKernelParams) -> np.ndarray:
    """Gradient of :func:`spectral_kl` in the ``to_vector`` layout (zero for weights)."""
    s2 = q_params.stds ** 2
    s02 = prior_params.stds ** 2
    d_mu = (q_params.means - prior_params.means) / s02
    d_logstd = -1.0 + s2 / s02
    return np.concatenate([np.zeros(q_params.n_components), d_mu, d_logstd])
