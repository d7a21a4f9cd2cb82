"""Stochastic variational inference over sub-sequences.

Each iteration samples M windows of L consecutive segments, runs
forward-backward on each window under the current auxiliary potentials,
takes a stochastic natural-gradient step on the Dirichlet globals and one
Adam step on the kernel hyperparameters. Emissions are either exact GP
likelihoods or the regularized random-Fourier-feature bound.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .emission import EmissionModel, LogLikGrid, emission_loglik_grid
from .hmm import (
    DirichletPosterior,
    DirichletPriors,
    StatePosterior,
    auxiliary_params,
    forward_backward,
    vbem_global_update,
)
from .optim import AdamSettings, AdamState, adam_step
from .spectral import SmKernelParams, default_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SviConfig:
    """Settings of the stochastic trainer.

    ``spectral_points`` is the number of spectral points per mixture
    component and ``mc_reps`` the number of Monte-Carlo repetitions of the
    spectral sample. ``fixed_rate`` replaces the ``(n + n0)^-kappa``
    schedule by a constant, and ``factor_override`` replaces the batch factor.
    """

    batch_len: int = 10
    batch_count: int = 3
    mc_reps: int = 4
    spectral_points: int = 10
    rate_offset: float = 10.0
    rate_exponent: float = 0.7
    fixed_rate: float | None = None
    factor_override: float | None = None
    adam: AdamSettings = AdamSettings()
    iterations: int = 80
    seed: int = 0
    emission: str = "sparse"
    accuracy_every: int = 1

    def __post_init__(self):
        if self.batch_len < 1 or self.batch_count < 1:
            raise ValueError("batch length and count must be at least 1")
        if self.mc_reps < 1 or self.spectral_points < 1:
            raise ValueError("mc_reps and spectral_points must be at least 1")
        if self.fixed_rate is None and not 0.5 < self.rate_exponent <= 1.0:
            raise ValueError("rate exponent must lie in (0.5, 1]")
        if self.fixed_rate is not None and not 0.0 < self.fixed_rate <= 1.0:
            raise ValueError("fixed rate must lie in (0, 1]")
        if self.emission not in ("exact", "sparse"):
            raise ValueError(f"unknown emission mode {self.emission!r}")

    def rate(self, n: int) -> float:
        if self.fixed_rate is not None:
            return self.fixed_rate
        return float((n + self.rate_offset) ** (-self.rate_exponent))


@dataclass(frozen=True)
class BatchSample:
    start: int
    length: int

    @property
    def indices(self) -> range:
        return range(self.start, self.start + self.length)


def sample_batches(T: int, L: int, M: int, rng: np.random.Generator) -> list[BatchSample]:
    """Draw ``M`` window starts uniformly from ``0..T-L`` with replacement (0-based)."""
    if not 1 <= L <= T:
        raise ValueError(f"batch length {L} must lie in [1, {T}]")
    starts = rng.integers(0, T - L + 1, size=M)
    return [BatchSample(int(s), L) for s in starts]


def batch_factor(T: int, L: int) -> float:
    """Scale ``(T - L + 1) / L`` lifting window statistics to the full chain."""
    if not 1 <= L <= T:
        raise ValueError(f"batch length {L} must lie in [1, {T}]")
    return (T - L + 1) / L


def svi_global_step(post: DirichletPosterior, batch_posteriors: Sequence[StatePosterior],
                    priors: DirichletPriors, rate: float, factor: float) -> DirichletPosterior:
    """Stochastic natural-gradient step on the Dirichlet parameters.

    The initial-state target uses the window's first-state marginal without
    a batch factor; the transition target scales window counts by ``factor``.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate {rate} outside (0, 1]")
    if not batch_posteriors:
        raise ValueError("need at least one batch")
    tau = np.mean([bp.initial_counts for bp in batch_posteriors], axis=0)
    psi = np.mean([factor * bp.transition_counts for bp in batch_posteriors], axis=0)
    pi = (1.0 - rate) * post.pi + rate * (priors.pi + tau)
    A = (1.0 - rate) * post.A + rate * (priors.A + psi)
    return DirichletPosterior(pi, A)


def batch_kernel_objective(batch_grids: Sequence, batch_gammas: Sequence[np.ndarray], factor: float) -> float:
    """Average over batches of ``factor * sum_{t,k} grid[t,k] * gamma[t,k]``."""
    if len(batch_grids) != len(batch_gammas) or not batch_grids:
        raise ValueError("need matching, non-empty lists of grids and gammas")
    vals = []
    for grid, gamma in zip(batch_grids, batch_gammas):
        values = grid.values if isinstance(grid, LogLikGrid) else np.asarray(grid, dtype=float)
        vals.append(factor * float(np.sum(values * gamma)))
    return float(np.mean(vals))


def _objective_grad(grids: Sequence[LogLikGrid], gammas: Sequence[np.ndarray],
                    factor: float, model: EmissionModel) -> np.ndarray:
    total = np.zeros(model.to_vector().size)
    for grid, gamma in zip(grids, gammas):
        parts = [gamma[:, k] @ grid.grad_theta[k] for k in range(model.n_states)]
        parts.append([np.sum(gamma * grid.grad_noise)])
        total += factor * np.concatenate(parts)
    return total / len(grids)


@dataclass
class SviResult:
    posterior: DirichletPosterior
    model: EmissionModel
    trace: list[dict] = field(default_factory=list)
    gamma_trace: list[list[np.ndarray]] = field(default_factory=list)


TRACE_FIELDS = ("iteration", "objective", "train_accuracy", "wall_ms")


def svi_fit(
    segments: Sequence[tuple[np.ndarray, np.ndarray]],
    model: EmissionModel,
    priors: DirichletPriors,
    config: SviConfig,
    *,
    spectral_priors: Sequence[SmKernelParams] | None = None,
    init_posterior: DirichletPosterior | None = None,
    rng: np.random.Generator | None = None,
    accuracy_fn: Callable[[np.ndarray], float] | None = None,
    keep_gammas: bool = False,
    callback: Callable[[dict], None] | None = None,
) -> SviResult:
    """Train globals and kernel hyperparameters with stochastic updates.

    Args:
        segments: observed ``(x, y)`` per segment, in chain order.
        spectral_priors: per-state prior for the spectral KL (sparse mode).
        rng: overrides the generator seeded from ``config.seed``.
        accuracy_fn: maps 0-based hard labels of the full chain to a training
            accuracy; evaluated every ``config.accuracy_every`` iterations.
        callback: receives each diagnostics row as soon as it is recorded.

    Raises:
        FloatingPointError: if an objective is non-finite; the message names
            the iteration and batch.
    """
    T = len(segments)
    if model.n_states != priors.n_states:
        raise ValueError("model and priors disagree on the number of states")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    post = init_posterior if init_posterior is not None else vbem_global_update(None, priors)
    factor = config.factor_override if config.factor_override is not None else batch_factor(T, config.batch_len)
    counts = [default_counts(k.n_components, config.spectral_points * k.n_components)
              for k in model.kernels]
    sparse = config.emission == "sparse"
    adam_state = AdamState.zeros(model.to_vector().size)
    result = SviResult(post, model)
    t0 = time.perf_counter()

    for it in range(config.iterations):
        batches = sample_batches(T, config.batch_len, config.batch_count, rng)
        # one spectral sample per state and iteration, shared by every batch
        noise = [rng.standard_normal((config.mc_reps, int(c.sum()))) for c in counts] if sparse else None
        pi_t, A_t = auxiliary_params(post)
        grids, posts = [], []
        for b, batch in enumerate(batches):
            window = [segments[i] for i in batch.indices]
            try:
                grid = emission_loglik_grid(
                    window, model, config.emission,
                    noise=noise, counts=counts, priors=spectral_priors, with_grad=True,
                )
            except FloatingPointError as err:
                raise FloatingPointError(f"iteration {it}, batch {b}: {err}") from err
            grids.append(grid)
            posts.append(forward_backward(grid.values, pi_t, A_t))
        gammas = [p.gamma for p in posts]
        objective = batch_kernel_objective(grids, gammas, factor)

        post = svi_global_step(post, posts, priors, config.rate(it), factor)
        grad = _objective_grad(grids, gammas, factor, model)
        adam_state, vec = adam_step(adam_state, -grad, model.to_vector(), config.adam)
        model = model.with_vector(vec)

        acc = float("nan")
        if accuracy_fn is not None and config.accuracy_every > 0 and (
            it % config.accuracy_every == 0 or it == config.iterations - 1
        ):
            acc = accuracy_fn(predict_states(segments, model, post))
        if keep_gammas:
            result.gamma_trace.append(gammas)
        result.trace.append({
            "iteration": it,
            "objective": objective,
            "train_accuracy": acc,
            "wall_ms": 1000.0 * (time.perf_counter() - t0),
        })
        if callback is not None:
            callback(result.trace[-1])
        log.debug("svi iter %d objective %.4f acc %.3f", it, objective, acc)

    result.posterior = post
    result.model = model
    return result


def predict_states(segments, model: EmissionModel, post: DirichletPosterior,
                   mode: str = "exact", **grid_kwargs) -> np.ndarray:
    """0-based argmax state per segment under frozen globals."""
    grid = emission_loglik_grid(segments, model, mode, **grid_kwargs)
    pi_t, A_t = auxiliary_params(post)
    return forward_backward(grid.values, pi_t, A_t).hard_assignments()
