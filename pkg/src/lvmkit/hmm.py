"""Hidden Markov model with Gaussian emissions: scaled filter, smoother with
pairwise tables, the unnormalized alpha recursion, and Baum-Welch EM.

Convention: trans[i, j] = P(next = i | prev = j), so columns are source
states and prediction is a left-multiplication, A @ filter_row.  The scaled
filter is the default inference path; `hmm_alpha` keeps the historical
unnormalized recursion for cross-checks at short horizons.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import logsumexp, xlogy

from . import sequential
from .data import SequenceDataset
from .exceptions import (
    DimensionError,
    EmptyComponentError,
    PreconditionError,
    SingularityError,
    UnderflowError,
)
from .gmm import _floor_covariance
from .gaussian import symmetrize

_LOG_TAU = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class HmmParams:
    """Initial distribution, column-stochastic transitions, and Gaussian
    emissions (one mean/covariance pair per state)."""

    init: np.ndarray
    trans: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.init, dtype=float)
        trans = np.atleast_2d(np.asarray(self.trans, dtype=float))
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None, :, :]
        K = init.shape[0]
        if trans.shape != (K, K):
            raise DimensionError("transition matrix must be K x K")
        if abs(init.sum() - 1.0) > 1e-9 or np.any(init < 0):
            raise PreconditionError("init must be a probability vector")
        col_sums = trans.sum(axis=0)
        if np.max(np.abs(col_sums - 1.0)) > 1e-9 or np.any(trans < 0):
            raise PreconditionError("each transition column must sum to 1")
        if means.shape[0] != K or covs.shape[0] != K:
            raise DimensionError("need one emission per state")
        covs = np.stack([symmetrize(c) for c in covs])
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def n_states(self):
        return self.init.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass(frozen=True)
class HmmPosteriors:
    """Filter rows, smoother rows, pairwise smoother tables, and the sequence
    log likelihood.

    pairwise[t][i, j] = P(z_{t+1} = i, z_t = j | all observations); summing a
    table over its first index recovers the smoother row at t.
    """

    filter: np.ndarray
    smoother: np.ndarray
    pairwise: list
    loglik: float


def _single_sequence(obs):
    if isinstance(obs, SequenceDataset):
        if obs.n_sequences != 1:
            raise PreconditionError("this operation expects exactly one sequence")
        return obs.sequences[0][1]
    return np.atleast_2d(np.asarray(obs, dtype=float))


def emission_log_likelihoods(params, obs):
    """T x K table of log N(x_t; mu_k, Sigma_k).

    The emission family is Gaussian, but the filter below consumes only this
    table, so other likelihoods can be plugged in.
    """
    X = _single_sequence(obs)
    if X.shape[1] != params.dim:
        raise DimensionError(f"observation dim {X.shape[1]} != model dim {params.dim}")
    T, D = X.shape
    out = np.empty((T, params.n_states))
    for k in range(params.n_states):
        try:
            factor = cho_factor(params.covs[k], lower=True, check_finite=False)
        except LinAlgError as exc:
            raise SingularityError(f"state {k} emission covariance is singular") from exc
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        diff = X - params.means[k]
        solved = cho_solve(factor, diff.T, check_finite=False)
        quad = np.einsum("dn,dn->n", diff.T, solved)
        out[:, k] = -0.5 * (D * _LOG_TAU + logdet + quad)
    return out


class _HmmSteps:
    """The four half-updates on categorical beliefs, in probability space."""

    def __init__(self, params, log_liks):
        self.params = params
        self.log_liks = log_liks

    def initial_belief(self):
        return self.params.init.copy()

    def time_update(self, belief, t):
        """Predict through the chain: marginalize the transition mixture."""
        return self.params.trans @ belief

    def measurement_update(self, belief, obs, t):
        """Bayes-invert the emission against the predicted belief.

        Works on log scores to keep long sequences from underflowing.
        """
        with np.errstate(divide="ignore"):
            log_posterior = self.log_liks[t] + np.log(
                np.where(belief > 0.0, belief, 0.0))
        norm = logsumexp(log_posterior)
        if not np.isfinite(norm):
            raise UnderflowError(f"filter row underflowed at step {t}", step=t)
        return np.exp(log_posterior - norm), float(norm)

    def future_conditioning(self, filtered_prev, predicted_next, t):
        """Reverse-transition table B[i, j] = P(z_{t-1}=j | z_t=i, x_{<t})."""
        joint = self.params.trans * filtered_prev[None, :]
        denom = joint.sum(axis=1)
        if np.any(denom <= 0.0):
            bad = int(np.flatnonzero(denom <= 0.0)[0])
            raise UnderflowError(
                f"zero predictive mass for state {bad} at step {t}", step=t)
        return joint / denom[:, None]

    def backward_step(self, smoothed_next, reverse, filtered_prev,
                      predicted_next, t):
        """Marginalize the future-conditioned joint over the later state."""
        pairwise = smoothed_next[:, None] * reverse
        return pairwise.sum(axis=0), pairwise


def hmm_filter(params, obs):
    """Scaled forward recursion.

    Returns (filter rows, per-step log normalizers); the normalizers sum to
    the sequence log likelihood.
    """
    X = _single_sequence(obs)
    log_liks = emission_log_likelihoods(params, X)
    steps = _HmmSteps(params, log_liks)
    filtered = []
    log_norms = []
    predicted = steps.initial_belief()
    for t in range(X.shape[0]):
        belief, increment = steps.measurement_update(predicted, X[t], t)
        filtered.append(belief)
        log_norms.append(increment)
        predicted = steps.time_update(belief, t)
    return np.asarray(filtered), np.asarray(log_norms)


def hmm_smoother(params, obs):
    """Filter plus backward pass; consumes filter rows and transitions only."""
    X = _single_sequence(obs)
    log_liks = emission_log_likelihoods(params, X)
    steps = _HmmSteps(params, log_liks)
    filtered, predicted, loglik = sequential.run_filter(steps, X)
    smoothed, pairwise = sequential.run_smoother(steps, filtered, predicted)
    return HmmPosteriors(
        filter=np.asarray(filtered),
        smoother=np.asarray(smoothed),
        pairwise=pairwise,
        loglik=float(loglik),
    )


def hmm_alpha(params, obs):
    """Unnormalized alpha recursion: alpha_t(k) = p(z_t = k, x_{1:t}).

    Prone to underflow for long sequences; prefer the scaled filter.  The
    alphas normalize to the filter rows, and their final sum equals
    exp(loglik).
    """
    X = _single_sequence(obs)
    log_liks = emission_log_likelihoods(params, X)
    T = X.shape[0]
    alphas = np.empty((T, params.n_states))
    alphas[0] = params.init * np.exp(log_liks[0])
    for t in range(1, T):
        alphas[t] = np.exp(log_liks[t]) * (params.trans @ alphas[t - 1])
        total = alphas[t].sum()
        if total == 0.0 or not np.isfinite(total):
            raise UnderflowError(
                f"alpha recursion left floating-point range at step {t}; "
                "use the scaled filter", step=t)
    loglik = float(np.log(alphas[-1].sum()))
    return alphas, loglik


@dataclass
class HmmStats:
    """Accumulated expected statistics across sequences."""

    initial: np.ndarray        # sum over sequences of smoother row at t=1
    pair_counts: np.ndarray    # K x K, [i, j] = expected j -> i transitions
    prev_occupancy: np.ndarray  # sum_t gamma_{t-1}(j), t = 2..T
    occupancy: np.ndarray      # sum_t gamma_t(k), all t
    obs_sum: np.ndarray        # K x D, sum_t gamma_t(k) x_t
    obs_outer: np.ndarray      # K x D x D, sum_t gamma_t(k) x_t x_t'
    n_sequences: int


def hmm_e_step(params, sequences):
    """Expectations under the smoother, summed across sequences.

    Initial-state statistics use the smoother at t=1 (the recursion runs to
    the end and back), not the filter.
    """
    if isinstance(sequences, SequenceDataset):
        seqs = [mat for _, mat in sequences.sequences]
    else:
        seqs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sequences]
    K, D = params.n_states, params.dim
    stats = HmmStats(
        initial=np.zeros(K),
        pair_counts=np.zeros((K, K)),
        prev_occupancy=np.zeros(K),
        occupancy=np.zeros(K),
        obs_sum=np.zeros((K, D)),
        obs_outer=np.zeros((K, D, D)),
        n_sequences=len(seqs),
    )
    loglik = 0.0
    for seq in seqs:
        post = hmm_smoother(params, seq)
        gamma = post.smoother
        stats.initial += gamma[0]
        for table in post.pairwise:
            stats.pair_counts += table
        stats.prev_occupancy += gamma[:-1].sum(axis=0)
        stats.occupancy += gamma.sum(axis=0)
        stats.obs_sum += gamma.T @ seq
        stats.obs_outer += np.einsum("tk,td,te->kde", gamma, seq, seq)
        loglik += post.loglik
    return stats, loglik


def hmm_m_step(stats):
    """Closed-form updates: normalized counts and weighted Gaussian moments."""
    K = stats.initial.shape[0]
    if np.any(stats.occupancy < 1e-12):
        dead = int(np.flatnonzero(stats.occupancy < 1e-12)[0])
        raise EmptyComponentError(f"state {dead} is never visited", component=dead)
    init = stats.initial / stats.initial.sum()
    trans = stats.pair_counts / stats.prev_occupancy[None, :]
    trans = trans / trans.sum(axis=0, keepdims=True)
    means = stats.obs_sum / stats.occupancy[:, None]
    covs = np.empty_like(stats.obs_outer)
    for k in range(K):
        covs[k] = _floor_covariance(
            stats.obs_outer[k] / stats.occupancy[k] - np.outer(means[k], means[k]))
    return HmmParams(init=init, trans=trans, means=means, covs=covs)


def hmm_free_energy(params, sequences, posteriors):
    """Free energy per time step under frozen path posteriors.

    E_q[log q] uses the chain factorization q(z_1) prod_t q(z_t | z_{t-1});
    E_q[-log joint] pairs the smoother and pairwise tables with the model
    terms.  After an exact E step this equals -loglik / total_steps.
    """
    if isinstance(sequences, SequenceDataset):
        seqs = [mat for _, mat in sequences.sequences]
    else:
        seqs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sequences]
    if not isinstance(posteriors, list):
        posteriors = [posteriors]
    with np.errstate(divide="ignore"):
        log_init = np.log(np.where(params.init > 0, params.init, 1.0))
        log_trans = np.log(np.where(params.trans > 0, params.trans, 1.0))
    total = 0.0
    total_steps = 0
    for seq, post in zip(seqs, posteriors):
        gamma = post.smoother
        log_liks = emission_log_likelihoods(params, seq)
        # Proxy log-probability (negative path entropy).
        e_log_q = float(np.sum(xlogy(gamma[0], gamma[0])))
        for t, table in enumerate(post.pairwise):
            cond = table / np.where(gamma[t] > 0, gamma[t], 1.0)[None, :]
            e_log_q += float(np.sum(xlogy(table, np.where(cond > 0, cond, 1.0))))
        # Expected model log-joint under the same posterior.
        e_log_joint = float(gamma[0] @ log_init)
        for table in post.pairwise:
            e_log_joint += float(np.sum(table * log_trans))
        e_log_joint += float(np.sum(gamma * log_liks))
        total += e_log_q - e_log_joint
        total_steps += seq.shape[0]
    return total / total_steps


def sample_hmm(params, T, rng):
    """Ancestral draw of one sequence of length T: (states, observations)."""
    states = np.empty(T, dtype=int)
    obs = np.empty((T, params.dim))
    chols = [np.linalg.cholesky(c + 1e-12 * np.eye(params.dim)) for c in params.covs]
    state = rng.choice(params.n_states, p=params.init)
    for t in range(T):
        states[t] = state
        obs[t] = params.means[state] + chols[state] @ rng.standard_normal(params.dim)
        state = rng.choice(params.n_states, p=params.trans[:, state])
    return states, obs


class HmmEmHandle:
    """EM driver adapter over a SequenceDataset."""

    def __init__(self, n_states):
        self.n_states = n_states

    def init_params(self, data, rng):
        seqs = [mat for _, mat in data.sequences]
        X = np.vstack(seqs)
        idx = rng.choice(X.shape[0], size=self.n_states, replace=False)
        D = X.shape[1]
        global_cov = _floor_covariance(np.cov(X.T, bias=True).reshape(D, D))
        K = self.n_states
        trans = np.full((K, K), 1.0 / (K + 1.0)) + (1.0 / (K + 1.0)) * np.eye(K)
        trans = trans / trans.sum(axis=0, keepdims=True)
        return HmmParams(
            init=np.full(K, 1.0 / K),
            trans=trans,
            means=X[idx].copy(),
            covs=np.repeat(global_cov[None, :, :], K, axis=0),
        )

    def e_step(self, params, data):
        return [hmm_smoother(params, mat) for _, mat in data.sequences]

    def m_step(self, data, posterior):
        K, D = self.n_states, data.dim
        stats = HmmStats(
            initial=np.zeros(K), pair_counts=np.zeros((K, K)),
            prev_occupancy=np.zeros(K), occupancy=np.zeros(K),
            obs_sum=np.zeros((K, D)), obs_outer=np.zeros((K, D, D)),
            n_sequences=data.n_sequences)
        for (_, seq), post in zip(data.sequences, posterior):
            gamma = post.smoother
            stats.initial += gamma[0]
            for table in post.pairwise:
                stats.pair_counts += table
            stats.prev_occupancy += gamma[:-1].sum(axis=0)
            stats.occupancy += gamma.sum(axis=0)
            stats.obs_sum += gamma.T @ seq
            stats.obs_outer += np.einsum("tk,td,te->kde", gamma, seq, seq)
        return hmm_m_step(stats)

    def free_energy(self, params, data, posterior):
        return hmm_free_energy(params, data, posterior)
