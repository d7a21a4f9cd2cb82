"""GP emission log likelihoods under the spectral mixture kernel.

Three variants of ``log p(y | x, z = k)`` are provided:

* ``exact_lml``: dense Cholesky on the SM Gram matrix, O(n^3).
* ``sparse_lml``: low-rank Gram ``Phi Phi^T`` from random Fourier features,
  O(n m^2) through the matrix inversion and determinant lemmas.
* ``regularized_bound``: Monte-Carlo average of sparse likelihoods under
  reparameterized spectral points minus the spectral KL to a prior.

Gradients are analytic and reported in the unconstrained layout of
:meth:`SmKernelParams.to_vector` plus ``log sigma_eps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .spectral import (
    TWO_PI,
    SmKernelParams,
    feature_scales,
    reparam_sample,
    rff_features,
    spectral_kl,
    spectral_kl_grad,
)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_LADDER = (1e-6, 1e-4, 1e-2)


class IllConditionedError(np.linalg.LinAlgError):
    """Covariance could not be factorized even after jitter escalation."""


@dataclass(frozen=True)
class EmissionModel:
    """Per-state SM kernels with a shared observation noise.

    Attributes:
        kernels: one :class:`SmKernelParams` per hidden state.
        log_noise_std: log of the shared noise standard deviation.
    """

    kernels: tuple[SmKernelParams, ...]
    log_noise_std: float

    def __post_init__(self):
        kernels = tuple(self.kernels)
        if not kernels:
            raise ValueError("need at least one state")
        if not np.isfinite(self.log_noise_std):
            raise ValueError("noise std must be finite and positive")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "log_noise_std", float(self.log_noise_std))

    @property
    def n_states(self) -> int:
        return len(self.kernels)

    @property
    def noise_std(self) -> float:
        return float(np.exp(self.log_noise_std))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([k.to_vector() for k in self.kernels] + [[self.log_noise_std]])

    def with_vector(self, vec) -> "EmissionModel":
        """Rebuild from a flat vector with the same component counts as ``self``."""
        vec = np.asarray(vec, dtype=float)
        kernels, pos = [], 0
        for k in self.kernels:
            size = 3 * k.n_components
            kernels.append(SmKernelParams.from_vector(vec[pos:pos + size]))
            pos += size
        if pos + 1 != vec.size:
            raise ValueError("parameter vector has the wrong length")
        return EmissionModel(tuple(kernels), float(vec[pos]))


def _cholesky(cov: np.ndarray, scale: float) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[-1])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise IllConditionedError(
        f"covariance of size {cov.shape[-1]} not positive definite after jitter {JITTER_LADDER[-1]}"
    )


def _component_grams(x: np.ndarray, params: SmKernelParams):
    """Per-component Gram pieces needed for the value and gradient."""
    tau = x[:, None] - x[None, :]
    t = tau[None, :, :]
    mu = params.means[:, None, None]
    s2 = (params.stds ** 2)[:, None, None]
    w = params.weights[:, None, None]
    cos = np.cos(TWO_PI * t * mu)
    env = np.exp(-2.0 * np.pi ** 2 * t ** 2 * s2)
    return tau, w, mu, s2, cos, env


def _exact_terms(x, Y, params: SmKernelParams, noise_std: float, with_grad: bool):
    """Exact LML for several output vectors sharing inputs ``x``.

    Returns ``(values (S,), grad_theta (S, 3Q), grad_lognoise (S,))``; the
    gradients are ``None`` when ``with_grad`` is false.
    """
    n = x.size
    tau, w, mu, s2, cos, env = _component_grams(x, params)
    comp = w * cos * env
    gram = comp.sum(axis=0)
    gram = 0.5 * (gram + gram.T)
    noise_var = noise_std ** 2
    cov = gram + noise_var * np.eye(n)
    chol = _cholesky(cov, params.total_weight + noise_var)
    alpha = cho_solve((chol, True), Y.T)  # (n, S)
    quad = np.einsum("ns,ns->s", Y.T, alpha)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    values = -0.5 * quad - 0.5 * logdet - 0.5 * n * LOG_2PI
    if not with_grad:
        return values, None, None

    cov_inv = cho_solve((chol, True), np.eye(n))
    t = tau[None]
    d_logw = comp
    d_mu = -w * TWO_PI * t * np.sin(TWO_PI * t * mu) * env
    d_logstd = comp * (-4.0 * np.pi ** 2 * t ** 2 * s2)
    dcov = np.concatenate([d_logw, d_mu, d_logstd], axis=0)  # (3Q, n, n)
    # 0.5 * (a^T dC a - tr(C^-1 dC)) for every parameter and output.
    fit = np.einsum("ns,pnm,ms->sp", alpha, dcov, alpha)
    trace = np.einsum("nm,pmn->p", cov_inv, dcov)
    grad_theta = 0.5 * (fit - trace[None, :])
    grad_noise = noise_var * (np.einsum("ns,ns->s", alpha, alpha) - np.trace(cov_inv))
    return values, grad_theta, grad_noise


def exact_lml(y, x, params: SmKernelParams, noise_std: float) -> float:
    """Dense GP log marginal likelihood ``log N(y; 0, K + sigma^2 I)``.

    Raises:
        ValueError: on empty or mismatched inputs.
        IllConditionedError: if the covariance stays indefinite after jitter.
    """
    y, x = _check_xy(y, x)
    values, _, _ = _exact_terms(x, y[None, :], params, noise_std, with_grad=False)
    return float(values[0])


def exact_lml_grad(y, x, params: SmKernelParams, noise_std: float):
    """Value and gradient of :func:`exact_lml` w.r.t. ``(theta, log sigma_eps)``."""
    y, x = _check_xy(y, x)
    values, g_theta, g_noise = _exact_terms(x, y[None, :], params, noise_std, with_grad=True)
    return float(values[0]), g_theta[0], float(g_noise[0])


def _check_xy(y, x):
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if y.size < 1:
        raise ValueError("need at least one observation")
    if y.size != x.size:
        raise ValueError(f"length mismatch: {y.size} outputs, {x.size} inputs")
    return y, x


def _woodbury(Y: np.ndarray, phi: np.ndarray, noise_var: float):
    """Low-rank Gaussian log density pieces.

    Args:
        Y: (S, n) outputs.
        phi: (R, n, D) feature matrices.

    Returns:
        values (R, S), alpha = C^-1 y (R, S, n), u = Phi^T alpha (R, S, D),
        and A^-1 (R, D, D) with ``A = Phi^T Phi + sigma^2 I``.
    """
    n, d = phi.shape[-2], phi.shape[-1]
    inner = np.swapaxes(phi, -1, -2) @ phi
    inner = inner + noise_var * np.eye(d)
    chol = np.linalg.cholesky(inner)
    inner_inv = np.linalg.inv(inner)
    b = np.einsum("rnd,sn->rsd", phi, Y)
    c = np.einsum("rde,rse->rsd", inner_inv, b)
    yy = np.einsum("sn,sn->s", Y, Y)
    quad = (yy[None, :] - np.einsum("rsd,rsd->rs", b, c)) / noise_var
    logdet = (n - d) * np.log(noise_var) + 2.0 * np.sum(
        np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1
    )
    values = -0.5 * quad - 0.5 * logdet[:, None] - 0.5 * n * LOG_2PI
    alpha = (Y[None, :, :] - np.einsum("rnd,rsd->rsn", phi, c)) / noise_var
    u = np.einsum("rnd,rsn->rsd", phi, alpha)
    return values, alpha, u, inner_inv


def sparse_lml(y, phi, noise_std: float) -> float:
    """Log marginal likelihood with Gram ``Phi Phi^T`` in O(n m^2).

    Raises:
        ValueError: if ``phi`` does not have one row per output.
        numpy.linalg.LinAlgError: if the inner system is singular.
    """
    y = np.asarray(y, dtype=float).ravel()
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != y.size:
        raise ValueError(f"feature matrix shape {phi.shape} does not match {y.size} outputs")
    values, _, _, _ = _woodbury(y[None, :], phi[None], noise_std ** 2)
    return float(values[0, 0])


def _sparse_terms(x, Y, params: SmKernelParams, prior: SmKernelParams | None,
                  noise_std: float, noise: np.ndarray, counts, with_grad: bool):
    """Regularized bound for several outputs sharing ``x``.

    ``noise`` has shape (R, m): one row of standard-normal draws per
    Monte-Carlo repetition. Returns values (S,), grad_theta (S, 3Q) and
    grad_lognoise (S,), the gradients being ``None`` without ``with_grad``.
    """
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    counts = np.asarray(counts, dtype=int)
    reps = noise.shape[0]
    comp = np.repeat(np.arange(counts.size), counts)
    points = params.means[comp][None, :] + params.stds[comp][None, :] * noise  # (R, m)
    scale = feature_scales(params, counts)
    arg = TWO_PI * x[None, :, None] * points[:, None, :]  # (R, n, m)
    phi_cos = np.cos(arg) * scale
    phi_sin = np.sin(arg) * scale
    phi = np.concatenate([phi_cos, phi_sin], axis=-1)
    noise_var = noise_std ** 2
    values, alpha, u, inner_inv = _woodbury(Y, phi, noise_var)

    kl = 0.0 if prior is None else spectral_kl(params, prior)
    bound = values.mean(axis=0) - kl
    if not with_grad:
        return bound, None, None

    m = points.shape[1]
    n = x.size
    d = 2 * m
    u_cos, u_sin = u[..., :m], u[..., m:]
    wx = TWO_PI * x[None, :, None]
    dcos_ds = -wx * phi_sin  # d phi_cos / d s, (R, n, m)
    dsin_ds = wx * phi_cos
    # y-dependent part of dL/dPhi = alpha (Phi^T alpha)^T
    ds_fit = u_cos * np.einsum("rnm,rsn->rsm", dcos_ds, alpha) + u_sin * np.einsum(
        "rnm,rsn->rsm", dsin_ds, alpha
    )
    dlogw_fit = 0.5 * (u_cos ** 2 + u_sin ** 2)
    # y-independent part -Phi A^-1
    phi_ainv = phi @ inner_inv
    b_cos, b_sin = phi_ainv[..., :m], phi_ainv[..., m:]
    ds_cap = np.sum(b_cos * dcos_ds + b_sin * dsin_ds, axis=1)  # (R, m)
    dlogw_cap = 0.5 * np.sum(b_cos * phi_cos + b_sin * phi_sin, axis=1)
    ds = ds_fit - ds_cap[:, None, :]
    dlogw_pt = dlogw_fit - dlogw_cap[:, None, :]

    q = counts.size
    onehot = np.zeros((m, q))
    onehot[np.arange(m), comp] = 1.0
    g_logw = dlogw_pt.mean(axis=0) @ onehot
    g_mu = ds.mean(axis=0) @ onehot
    g_logstd = (ds * (params.stds[comp] * noise)[:, None, :]).mean(axis=0) @ onehot
    grad_theta = np.concatenate([g_logw, g_mu, g_logstd], axis=1)
    if prior is not None:
        grad_theta = grad_theta - spectral_kl_grad(params, prior)[None, :]

    tr_inner = np.trace(inner_inv, axis1=-2, axis2=-1)  # (R,)
    tr_cov_inv = (n - d + noise_var * tr_inner) / noise_var
    d_var = 0.5 * (np.einsum("rsn,rsn->rs", alpha, alpha) - tr_cov_inv[:, None])
    grad_noise = (2.0 * noise_var * d_var).mean(axis=0)
    return bound, grad_theta, grad_noise


def _noise_matrix(noise, counts) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 1:
        noise = noise[None, :]
    if noise.ndim != 2 or noise.shape[0] < 1:
        raise ValueError("noise must have shape (mc_reps, m)")
    if noise.shape[1] != int(np.sum(counts)):
        raise ValueError(f"noise rows have {noise.shape[1]} draws, counts require {np.sum(counts)}")
    return noise


def regularized_bound(y, x, params: SmKernelParams, prior: SmKernelParams,
                      noise_std: float, noise, counts) -> float:
    """Monte-Carlo regularized lower bound on the segment log likelihood.

    Args:
        noise: (mc_reps, m) standard-normal draws, one row per repetition.
        counts: spectral points per component, summing to m.
    """
    y, x = _check_xy(y, x)
    noise = _noise_matrix(noise, counts)
    values, _, _ = _sparse_terms(x, y[None, :], params, prior, noise_std, noise, counts, False)
    return float(values[0])


def bound_gradient(y, x, params: SmKernelParams, prior: SmKernelParams,
                   noise_std: float, noise, counts):
    """Pathwise gradient of :func:`regularized_bound` at fixed noise draws.

    Returns:
        (value, grad_theta in ``to_vector`` layout, grad w.r.t. log sigma_eps)
    """
    y, x = _check_xy(y, x)
    noise = _noise_matrix(noise, counts)
    values, g_theta, g_noise = _sparse_terms(
        x, y[None, :], params, prior, noise_std, noise, counts, True
    )
    return float(values[0]), g_theta[0], float(g_noise[0])


def sparse_features(x, params: SmKernelParams, noise, counts) -> np.ndarray:
    """Feature matrix for one noise row; convenience around :func:`rff_features`."""
    return rff_features(x, reparam_sample(params, counts, noise), params)


@dataclass
class LogLikGrid:
    """Per-segment, per-state emission log likelihoods.

    Attributes:
        values: (T, K) ``log p(y_t | z_t = k, x_t)`` (or its bound).
        grad_theta: per state k, an array (T, 3Q_k) of gradients, if requested.
        grad_noise: (T, K) gradients w.r.t. ``log sigma_eps``, if requested.
    """

    values: np.ndarray
    grad_theta: list[np.ndarray] | None = None
    grad_noise: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape


def _group_by_inputs(xs: Sequence[np.ndarray]) -> dict[bytes, list[int]]:
    groups: dict[bytes, list[int]] = {}
    for t, x in enumerate(xs):
        groups.setdefault(np.ascontiguousarray(x, dtype=float).tobytes(), []).append(t)
    return groups


def emission_loglik_grid(
    segments: Iterable[tuple[np.ndarray, np.ndarray]],
    model: EmissionModel,
    mode: str = "exact",
    *,
    noise: Sequence[np.ndarray] | None = None,
    counts: Sequence[Sequence[int]] | None = None,
    priors: Sequence[SmKernelParams] | None = None,
    with_grad: bool = False,
) -> LogLikGrid:
    """Evaluate the emission likelihood of every segment under every state.

    Args:
        segments: ``(x, y)`` pairs of observed inputs and outputs.
        model: emission model with K states.
        mode: ``"exact"`` or ``"sparse"``.
        noise: sparse mode only; per state an (R, m_k) noise array. Every
            segment uses the same spectral sample of its state.
        counts: sparse mode only; per state the spectral points per component.
        priors: sparse mode only; per state spectral prior for the KL term.
            ``None`` drops the regularizer.
        with_grad: also return gradients per (t, k).
    """
    segments = [(np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel())
                for x, y in segments]
    n_seg, n_states = len(segments), model.n_states
    if mode not in ("exact", "sparse"):
        raise ValueError(f"unknown emission mode {mode!r}")
    if mode == "sparse" and (noise is None or counts is None):
        raise ValueError("sparse mode needs noise draws and spectral counts")
    for t, (x, y) in enumerate(segments):
        if x.size != y.size or x.size < 1:
            raise ValueError(f"segment {t}: invalid lengths {x.size}/{y.size}")

    values = np.empty((n_seg, n_states))
    grad_theta = [np.empty((n_seg, 3 * k.n_components)) for k in model.kernels] if with_grad else None
    grad_noise = np.empty((n_seg, n_states)) if with_grad else None
    noise_std = model.noise_std
    groups = _group_by_inputs([x for x, _ in segments])
    for idx in groups.values():
        x = segments[idx[0]][0]
        Y = np.stack([segments[t][1] for t in idx])
        for k, params in enumerate(model.kernels):
            if mode == "exact":
                v, gt, gn = _exact_terms(x, Y, params, noise_std, with_grad)
            else:
                prior = None if priors is None else priors[k]
                nz = _noise_matrix(noise[k], counts[k])
                v, gt, gn = _sparse_terms(x, Y, params, prior, noise_std, nz, counts[k], with_grad)
            values[idx, k] = v
            if with_grad:
                grad_theta[k][idx] = gt
                grad_noise[idx, k] = gn
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise FloatingPointError(f"non-finite emission likelihood at segment {bad[0]}, state {bad[1]}")
    return LogLikGrid(values, grad_theta, grad_noise)
