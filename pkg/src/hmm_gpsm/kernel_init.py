"""Data-driven initialization of per-state SM kernels.

Pipeline: normalized periodogram per segment, k-means over the densities,
inverse-CDF sampling of each cluster's mean density, and a 1-D Gaussian
mixture fit whose components become the kernel's spectral components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans
from sklearn.mixture import GaussianMixture

from .data import Sequence, fill_out
from .spectral import SmKernelParams

STD_FLOOR_FRACTION = 1e-3


@dataclass(frozen=True)
class SpectralDensity:
    """Probability mass over a uniform positive-frequency grid."""

    frequencies: np.ndarray
    mass: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0]) if self.frequencies.size > 1 else 1.0


def periodogram(y, sample_rate: float):
    """One-sided power spectrum whose sum equals ``sum(y**2)``.

    Returns:
        (frequencies from 0 to Nyquist, power per bin)
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    spec = np.abs(np.fft.rfft(y)) ** 2 / n
    if n % 2 == 0:
        spec[1:-1] *= 2.0
    else:
        spec[1:] *= 2.0
    return np.fft.rfftfreq(n, d=1.0 / sample_rate), spec


def empirical_spectral_density(y, sample_rate: float, exclude_dc: bool = True) -> SpectralDensity:
    """Normalized periodogram of a mean-centered segment.

    A flat (all-zero) spectrum falls back to the uniform density.

    Raises:
        ValueError: for fewer than two points.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise ValueError("need at least two points for a spectral density")
    y = y - y.mean() if exclude_dc else y
    freqs, power = periodogram(y, sample_rate)
    if exclude_dc:
        freqs, power = freqs[1:], power[1:]
    total = power.sum()
    if not total > 1e-12 * max(float(np.sum(y ** 2)), 1e-300) or not np.isfinite(total):
        mass = np.full(freqs.size, 1.0 / freqs.size)
    else:
        mass = power / total
    return SpectralDensity(freqs, mass)


def kmeans_cluster(densities, n_clusters: int, rng: np.random.Generator, n_init: int = 5):
    """Lloyd's k-means with k-means++ seeding, best of ``n_init`` restarts.

    Args:
        densities: (T, F) array, or list of :class:`SpectralDensity` on a shared grid.

    Returns:
        (centers (K, F), 0-based cluster label per density)
    """
    data = np.asarray([d.mass if isinstance(d, SpectralDensity) else d for d in densities], dtype=float)
    if data.shape[0] < n_clusters:
        raise ValueError(f"need at least {n_clusters} densities, got {data.shape[0]}")
    km = KMeans(n_clusters=n_clusters, init="k-means++", n_init=n_init,
                random_state=int(rng.integers(2 ** 31 - 1)))
    labels = km.fit_predict(data)
    # centers as exact cluster means of the assigned densities
    centers = np.stack([
        data[labels == k].mean(axis=0) if np.any(labels == k) else km.cluster_centers_[k]
        for k in range(n_clusters)
    ])
    return centers, labels


def kmeans_inertia(data, centers, labels) -> float:
    data = np.asarray(data, dtype=float)
    return float(np.sum((data - np.asarray(centers)[labels]) ** 2))


def inverse_cdf_sample(density: SpectralDensity, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw frequencies from the piecewise-uniform density over the bins.

    Bin ``i`` spans ``[f_i - df/2, f_i + df/2)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    cdf = np.cumsum(density.mass)
    cdf /= cdf[-1]
    u = rng.uniform(size=count)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    width = density.bin_width
    return density.frequencies[idx] + (rng.uniform(size=count) - 0.5) * width


def density_cdf(density: SpectralDensity, f) -> np.ndarray:
    """CDF of the piecewise-uniform density at frequencies ``f``."""
    width = density.bin_width
    edges = np.concatenate([density.frequencies - width / 2, [density.frequencies[-1] + width / 2]])
    cum = np.concatenate([[0.0], np.cumsum(density.mass) / density.mass.sum()])
    return np.interp(f, edges, cum)


def gmm_fit(samples, n_components: int, rng: np.random.Generator, total_weight: float = 1.0,
            std_floor: float = 1e-3, n_init: int = 3) -> SmKernelParams:
    """Fit a 1-D Gaussian mixture by EM and map it to SM hyperparameters.

    The mixture proportions are scaled to sum to ``total_weight``; standard
    deviations are floored at ``std_floor``. Degenerate samples (fewer
    distinct values than components) fall back to a single component.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < n_components:
        raise ValueError(f"need at least {n_components} samples, got {s.size}")
    if np.unique(s).size < n_components:
        return SmKernelParams.from_natural([total_weight], [float(s.mean())],
                                           [max(float(s.std()), std_floor)])
    gm = GaussianMixture(n_components=n_components, covariance_type="full", n_init=n_init,
                         reg_covar=std_floor ** 2, random_state=int(rng.integers(2 ** 31 - 1)))
    gm.fit(s[:, None])
    order = np.argsort(gm.means_.ravel())
    weights = gm.weights_[order] * total_weight / gm.weights_.sum()
    means = gm.means_.ravel()[order]
    stds = np.maximum(np.sqrt(gm.covariances_.reshape(-1)[order]), std_floor)
    return SmKernelParams.from_natural(weights, means, stds)


@dataclass(frozen=True)
class KernelInit:
    """Initial kernels, frozen spectral priors and the initial noise level."""

    kernels: tuple[SmKernelParams, ...]
    priors: tuple[SmKernelParams, ...]
    noise_std: float
    cluster_labels: np.ndarray


def init_all(seq: Sequence, n_states: int, n_components: int, rng: np.random.Generator,
             samples_per_state: int = 2000, noise_fraction: float = 0.1) -> KernelInit:
    """Initialize K spectral mixture kernels from the data.

    Segments with missing values are filled by nearest observation for this
    step only. Every kernel's total weight is the output variance of all
    observed points, and the noise std starts at ``noise_fraction`` of the
    output std.
    """
    if len(seq) < n_states:
        raise ValueError(f"need at least {n_states} segments, got {len(seq)}")
    filled = seq if seq.fully_observed else fill_out(seq)
    lengths = {y.size for y in filled.y}
    if len(lengths) != 1:
        raise ValueError("segments must share a length for spectral initialization")
    densities = [empirical_spectral_density(y, filled.sample_rate) for y in filled.y]
    centers, labels = kmeans_cluster(densities, n_states, rng)

    observed = np.concatenate([y[m] for y, m in zip(seq.y, seq.mask)])
    variance = float(np.var(observed)) if observed.size > 1 else 1.0
    variance = variance if variance > 0 else 1.0
    grid = densities[0].frequencies
    floor = STD_FLOOR_FRACTION * (filled.sample_rate / 2.0)
    kernels = []
    for k in range(n_states):
        dens = SpectralDensity(grid, centers[k] / centers[k].sum())
        draws = inverse_cdf_sample(dens, samples_per_state, rng)
        kernels.append(gmm_fit(draws, n_components, rng, total_weight=variance, std_floor=floor))
    kernels = tuple(kernels)
    return KernelInit(
        kernels=kernels,
        priors=tuple(SmKernelParams(k.log_weights.copy(), k.means.copy(), k.log_stds.copy())
                     for k in kernels),
        noise_std=noise_fraction * float(np.sqrt(variance)),
        cluster_labels=labels,
    )
