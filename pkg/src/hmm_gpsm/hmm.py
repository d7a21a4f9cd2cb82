"""Bayesian HMM machinery: Dirichlet globals, forward-backward, ELBO and VBEM.

The first emitting segment carries the initial-state distribution, i.e. the
chain is ``z_0 -> z_1 -> ... -> z_{T-1}`` with one emission per state.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .emission import EmissionModel, LogLikGrid, emission_loglik_grid
from .optim import AdamSettings, AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirichletPriors:
    """Dirichlet concentrations for the initial distribution and transition rows."""

    pi: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        A = np.asarray(self.A, dtype=float)
        if pi.ndim != 1 or A.shape != (pi.size, pi.size):
            raise ValueError(f"inconsistent shapes {pi.shape} and {A.shape}")
        if np.any(pi <= 0) or np.any(A <= 0):
            raise ValueError("Dirichlet parameters must be strictly positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "A", A)

    @classmethod
    def symmetric(cls, n_states: int, alpha_pi: float = 1.0, alpha_A: float = 1.0) -> "DirichletPriors":
        return cls(np.full(n_states, alpha_pi), np.full((n_states, n_states), alpha_A))

    @property
    def n_states(self) -> int:
        return self.pi.size


# Variational posteriors share the prior's layout and positivity checks.
DirichletPosterior = DirichletPriors


@dataclass(frozen=True)
class StatePosterior:
    """Smoothed chain posterior.

    Attributes:
        gamma: (T, K) marginals ``q(z_t = k)``.
        xi: (T-1, K, K) pairwise marginals ``q(z_{t-1} = j, z_t = k)``.
        log_normalizer: log of the chain partition function.
        log_pi: (K,) log initial potentials used to build this posterior.
        log_A: (K, K) log transition potentials used to build it.
    """

    gamma: np.ndarray
    xi: np.ndarray
    log_normalizer: float
    log_pi: np.ndarray
    log_A: np.ndarray

    @property
    def initial_counts(self) -> np.ndarray:
        return self.gamma[0]

    @property
    def transition_counts(self) -> np.ndarray:
        return self.xi.sum(axis=0)

    def hard_assignments(self) -> np.ndarray:
        """0-based argmax states; ties go to the lowest index."""
        return np.argmax(self.gamma, axis=1)


def expected_log_dirichlet(w: np.ndarray) -> np.ndarray:
    """``E[log p]`` under ``Dir(w)`` along the last axis."""
    return digamma(w) - digamma(np.sum(w, axis=-1, keepdims=True))


def auxiliary_params(post: DirichletPosterior):
    """Sub-normalized potentials ``exp(E_q[log pi])`` and ``exp(E_q[log A])``."""
    return np.exp(expected_log_dirichlet(post.pi)), np.exp(expected_log_dirichlet(post.A))


def forward_backward(loglik, pi_tilde, A_tilde) -> StatePosterior:
    """Exact marginals of the chain with the given (unnormalized) potentials.

    Runs in log space so emission log likelihoods of any magnitude are safe.
    """
    if isinstance(loglik, LogLikGrid):
        loglik = loglik.values
    loglik = np.asarray(loglik, dtype=float)
    n_steps, n_states = loglik.shape
    log_pi = np.log(np.asarray(pi_tilde, dtype=float))
    log_A = np.log(np.asarray(A_tilde, dtype=float))
    if log_pi.shape != (n_states,) or log_A.shape != (n_states, n_states):
        raise ValueError("potential shapes do not match the likelihood grid")

    log_alpha = np.empty((n_steps, n_states))
    log_beta = np.zeros((n_steps, n_states))
    log_alpha[0] = log_pi + loglik[0]
    for t in range(1, n_steps):
        log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + log_A, axis=0) + loglik[t]
    for t in range(n_steps - 2, -1, -1):
        log_beta[t] = logsumexp(log_A + (loglik[t + 1] + log_beta[t + 1])[None, :], axis=1)
    log_z = float(logsumexp(log_alpha[-1]))

    gamma = np.exp(log_alpha + log_beta - log_z)
    gamma /= gamma.sum(axis=1, keepdims=True)
    if n_steps > 1:
        log_xi = (
            log_alpha[:-1, :, None]
            + log_A[None, :, :]
            + (loglik[1:] + log_beta[1:])[:, None, :]
            - log_z
        )
        xi = np.exp(log_xi)
        xi /= xi.sum(axis=(1, 2), keepdims=True)
    else:
        xi = np.zeros((0, n_states, n_states))
    return StatePosterior(gamma, xi, log_z, log_pi, log_A)


def vbem_global_update(state_post: StatePosterior | None, priors: DirichletPriors) -> DirichletPosterior:
    """Conjugate update ``w = alpha + expected sufficient statistics``.

    ``None`` (an empty chain) returns the priors.
    """
    if state_post is None or state_post.gamma.shape[0] == 0:
        return DirichletPosterior(priors.pi.copy(), priors.A.copy())
    return DirichletPosterior(
        priors.pi + state_post.initial_counts,
        priors.A + state_post.transition_counts,
    )


def expected_kernel_objective(loglik, gamma) -> float:
    """``sum_t sum_k loglik[t, k] * gamma[t, k]``."""
    loglik = np.asarray(loglik, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if loglik.shape != gamma.shape:
        raise ValueError(f"shape mismatch {loglik.shape} vs {gamma.shape}")
    return float(np.sum(loglik * gamma))


def dirichlet_kl(w, alpha) -> float:
    """``KL(Dir(w) || Dir(alpha))`` summed over rows of the last axis."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    w0 = w.sum(axis=-1)
    a0 = alpha.sum(axis=-1)
    kl = (
        gammaln(w0) - np.sum(gammaln(w), axis=-1)
        - gammaln(a0) + np.sum(gammaln(alpha), axis=-1)
        + np.sum((w - alpha) * expected_log_dirichlet(w), axis=-1)
    )
    return float(np.sum(kl))


def elbo(loglik, state_post: StatePosterior, dir_post: DirichletPosterior,
         priors: DirichletPriors) -> float:
    """Evidence lower bound of the chain for the given variational factors.

    The entropy of ``q(Z)`` is taken from the forward-backward normalizer:
    ``E_q[log q(Z)] = E_q[log potentials] - log Z``. When ``dir_post`` is
    the posterior that produced ``state_post`` the first bracket is exactly
    ``log Z``; otherwise the potential mismatch is added back.
    """
    e_log_pi = expected_log_dirichlet(dir_post.pi)
    e_log_A = expected_log_dirichlet(dir_post.A)
    chain = state_post.log_normalizer
    chain += float(np.sum(state_post.initial_counts * (e_log_pi - state_post.log_pi)))
    if state_post.xi.shape[0]:
        chain += float(np.sum(state_post.transition_counts * (e_log_A - state_post.log_A)))
    return chain - dirichlet_kl(dir_post.pi, priors.pi) - dirichlet_kl(dir_post.A, priors.A)


@dataclass
class VbemResult:
    posterior: DirichletPosterior
    model: EmissionModel
    state_posterior: StatePosterior
    elbo_trace: list[float] = field(default_factory=list)
    gamma_trace: list[np.ndarray] = field(default_factory=list)
    converged: bool = False


def _weighted_theta_grad(grid, weights: np.ndarray, model: EmissionModel) -> np.ndarray:
    """Gradient of ``sum_{t,k} weights[t,k] * grid[t,k]`` in the model layout."""
    parts = [weights[:, k] @ grid.grad_theta[k] for k in range(model.n_states)]
    parts.append([np.sum(weights * grid.grad_noise)])
    return np.concatenate(parts)


def _converged(trace: Sequence[float], tol: float, window: int = 3) -> bool:
    if tol <= 0 or len(trace) <= window:
        return False
    old, new = trace[-1 - window], trace[-1]
    return abs(new - old) <= tol * max(abs(old), 1.0)


def vbem_fit(
    segments: Sequence[tuple[np.ndarray, np.ndarray]],
    model: EmissionModel,
    priors: DirichletPriors,
    *,
    max_iters: int = 50,
    tol: float = 1e-5,
    adam: AdamSettings = AdamSettings(),
    theta_steps: int = 1,
    freeze_theta: bool = False,
    init_posterior: DirichletPosterior | None = None,
    callback: Callable[[dict], None] | None = None,
) -> VbemResult:
    """Variational Bayes EM with exact GP emissions.

    Each iteration evaluates the exact likelihood grid, runs forward-backward
    under the auxiliary potentials, applies the conjugate Dirichlet update and
    then takes ``theta_steps`` Adam steps uphill on the expected emission
    log likelihood. Stops when the relative ELBO change over three iterations
    drops below ``tol`` (``tol <= 0`` runs all iterations). ``callback`` receives a diagnostics row per iteration.

    Raises:
        FloatingPointError: if the ELBO becomes non-finite.
    """
    if model.n_states != priors.n_states:
        raise ValueError("model and priors disagree on the number of states")
    post = init_posterior if init_posterior is not None else vbem_global_update(None, priors)
    adam_state = AdamState.zeros(model.to_vector().size)
    result = VbemResult(post, model, None)  # type: ignore[arg-type]
    need_grad = not freeze_theta
    t0 = time.perf_counter()
    for it in range(max_iters):
        grid = emission_loglik_grid(segments, model, "exact", with_grad=need_grad)
        pi_t, A_t = auxiliary_params(post)
        state_post = forward_backward(grid.values, pi_t, A_t)
        post = vbem_global_update(state_post, priors)
        value = elbo(grid.values, state_post, post, priors)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite ELBO at iteration {it}")
        result.elbo_trace.append(value)
        result.gamma_trace.append(state_post.gamma)
        result.state_posterior = state_post
        if need_grad:
            for step in range(theta_steps):
                if step:
                    grid = emission_loglik_grid(segments, model, "exact", with_grad=True)
                grad = _weighted_theta_grad(grid, state_post.gamma, model)
                adam_state, vec = adam_step(adam_state, -grad, model.to_vector(), adam)
                model = model.with_vector(vec)
        if callback is not None:
            callback({"iteration": it, "objective": value, "train_accuracy": float("nan"),
                      "wall_ms": 1000.0 * (time.perf_counter() - t0)})
        log.debug("vbem iter %d elbo %.6f", it, value)
        if _converged(result.elbo_trace, tol):
            result.converged = True
            break
    result.posterior = post
    result.model = model
    return result
