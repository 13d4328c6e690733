"""Particle filter and smoother mirroring the discrete-chain recursions on
sampled support.

Sampling enters in exactly one half-update, the time update, which draws
ancestors from the filter weights (multinomial, matching the mixture-sampling
description) and propagates them through the transition sampler.  The
measurement update and the entire backward smoothing pass are the exact
categorical recursions on the particle support.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import PreconditionError, UnderflowError

logger = logging.getLogger(__name__)

DEGENERACY_THRESHOLD = 1.0 - 1e-12


@dataclass
class ParticleCloud:
    """Particles with filter weights; smoother weights appear after the
    backward pass."""

    particles: np.ndarray
    filter_weights: np.ndarray
    smoother_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        weights = np.asarray(self.filter_weights, dtype=float)
        if not np.all(np.isfinite(particles)):
            raise PreconditionError("particles must be finite")
        if weights.shape[0] != particles.shape[0]:
            raise PreconditionError("one weight per particle required")
        if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-9:
            raise PreconditionError("filter weights must form a simplex")
        self.particles = particles
        self.filter_weights = np.clip(weights, 0.0, None)

    @property
    def n(self):
        return self.particles.shape[0]

    def effective_sample_size(self):
        """1 / sum w^2: a purely observational degeneracy diagnostic."""
        return float(1.0 / np.sum(self.filter_weights ** 2))


def _multinomial_ancestors(weights, n, rng):
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(n), side="right")


def _systematic_ancestors(weights, n, rng):
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(cdf, positions, side="right")


def pf_time_update(cloud, dynamics, rng, systematic=False):
    """Resample ancestors from the filter weights, propagate, reset weights.

    `dynamics(particles, rng)` draws one transition per row.  Multinomial
    resampling is the default; systematic resampling sits behind a flag.
    A near-degenerate weight vector is logged, not raised.
    """
    if np.max(cloud.filter_weights) > DEGENERACY_THRESHOLD:
        logger.warning("particle weights are degenerate (max weight %.3g)",
                       float(np.max(cloud.filter_weights)))
    picker = _systematic_ancestors if systematic else _multinomial_ancestors
    ancestors = picker(cloud.filter_weights, cloud.n, rng)
    propagated = dynamics(cloud.particles[ancestors], rng)
    propagated = np.atleast_2d(np.asarray(propagated, dtype=float))
    return ParticleCloud(
        particles=propagated,
        filter_weights=np.full(cloud.n, 1.0 / cloud.n),
    )


def pf_measurement_update(cloud, log_likelihood, obs):
    """Reweight by observation consistency, normalized by log-sum-exp.

    Incoming weights multiply in, so the standard flow (uniform after a time
    update) matches the mixture-inversion weights, while an exact-support
    embedding can carry its predicted masses explicitly.
    """
    log_liks = np.asarray(log_likelihood(cloud.particles, obs), dtype=float)
    if log_liks.shape[0] != cloud.n:
        raise PreconditionError("likelihood evaluator must return one value per particle")
    with np.errstate(divide="ignore"):
        log_w = log_liks + np.log(np.where(cloud.filter_weights > 0,
                                           cloud.filter_weights, 0.0))
    norm = logsumexp(log_w)
    if not np.isfinite(norm):
        raise UnderflowError("all particle likelihoods underflowed to zero")
    return ParticleCloud(
        particles=cloud.particles,
        filter_weights=np.exp(log_w - norm),
    )


def particle_smoother(clouds, transition_density):
    """Backward reweighting of the existing particles.

    v_T = w_T; then
    v_{t-1}(j) = sum_k v_t(k) w_{t-1}(j) f(z_t^k | z_{t-1}^j)
                 / sum_i w_{t-1}(i) f(z_t^k | z_{t-1}^i).
    `transition_density(next_particles, prev_particles)` returns the
    [k, j] table of transition densities.  Weight rows remain simplices.
    """
    if not clouds:
        return clouds
    clouds[-1].smoother_weights = clouds[-1].filter_weights.copy()
    for t in range(len(clouds) - 1, 0, -1):
        nxt, prev = clouds[t], clouds[t - 1]
        dens = np.asarray(transition_density(nxt.particles, prev.particles),
                          dtype=float)
        mixture = dens @ prev.filter_weights  # denominator per next-particle k
        zero = mixture <= 0.0
        if np.any(zero & (nxt.smoother_weights > 0.0)):
            k = int(np.flatnonzero(zero & (nxt.smoother_weights > 0.0))[0])
            raise UnderflowError(
                f"zero future-conditioning denominator at (t={t}, k={k})",
                step=(t, k))
        safe = np.where(zero, 1.0, mixture)
        back = (nxt.smoother_weights / safe) @ dens  # sum over k
        v = prev.filter_weights * back
        total = v.sum()
        if total <= 0.0:
            raise UnderflowError(f"smoother weights underflowed at t={t - 1}",
                                 step=t - 1)
        prev.smoother_weights = v / total
    return clouds


def run_particle_filter(initial_sampler, dynamics, log_likelihood, observations,
                        n_particles, rng, systematic=False):
    """Bootstrap filter: init draw, then measurement/time update pairs.

    Returns the list of per-step clouds (filter weights set; smoother weights
    empty until `particle_smoother`).
    """
    particles = np.atleast_2d(np.asarray(initial_sampler(n_particles, rng),
                                         dtype=float))
    cloud = ParticleCloud(particles=particles,
                          filter_weights=np.full(n_particles, 1.0 / n_particles))
    clouds = []
    for t, obs in enumerate(observations):
        cloud = pf_measurement_update(cloud, log_likelihood, obs)
        clouds.append(cloud)
        if t + 1 < len(observations):
            cloud = pf_time_update(cloud, dynamics, rng, systematic=systematic)
    return clouds


def enumerate_time_update(cloud, transition_matrix):
    """Exact-support counterpart of the time update: no sampling.

    For particles that enumerate a finite state space, the predicted mass is
    transition_matrix @ filter_weights, carried explicitly instead of being
    folded into resampled particle multiplicities.
    """
    predicted = np.asarray(transition_matrix, dtype=float) @ cloud.filter_weights
    return ParticleCloud(particles=cloud.particles, filter_weights=predicted)
