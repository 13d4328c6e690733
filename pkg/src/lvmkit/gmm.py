"""Gaussian mixture model: softmax recognition, exact EM, equiprobability
boundaries, and the hard-assignment K-means limit.

Recognition scores are kept in log space throughout; the softmax drops
shared constants, and the marginal likelihood uses log-sum-exp so that
points far from every component stay finite.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import logsumexp, softmax

from .data import Dataset
from .exceptions import (
    DimensionError,
    EmptyComponentError,
    PreconditionError,
    SingularityError,
)
from .gaussian import symmetrize

_LOG_TAU = float(np.log(2.0 * np.pi))
COV_FLOOR_FRACTION = 1e-6


@dataclass(frozen=True)
class GmmParams:
    """Mixing weights, per-class means, and per-class covariances."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None, :, :]
        if abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
            raise PreconditionError("mixing weights must be a probability vector")
        if means.shape[0] != weights.shape[0] or covs.shape[0] != weights.shape[0]:
            raise DimensionError("weights, means, covs disagree on K")
        if covs.shape[1:] != (means.shape[1], means.shape[1]):
            raise DimensionError("covariances must be K x D x D")
        covs = np.stack([symmetrize(c) for c in covs])
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass(frozen=True)
class Responsibilities:
    """N x K table of per-sample recognition distributions."""

    table: np.ndarray

    def __post_init__(self):
        table = np.atleast_2d(np.asarray(self.table, dtype=float))
        if np.any(table < -1e-12):
            raise PreconditionError("responsibilities must be non-negative")
        if np.max(np.abs(table.sum(axis=1) - 1.0)) > 1e-9:
            raise PreconditionError("every responsibility row must sum to 1")
        object.__setattr__(self, "table", np.clip(table, 0.0, None))


def _as_matrix(data):
    if isinstance(data, Dataset):
        return data.rows
    return np.atleast_2d(np.asarray(data, dtype=float))


def _chol_factors(params):
    factors = []
    for k, cov in enumerate(params.covs):
        try:
            factors.append(cho_factor(cov, lower=True, check_finite=False))
        except LinAlgError as exc:
            raise SingularityError(f"component {k} covariance is singular") from exc
    return factors


def _log_scores(params, X, full_constants=False):
    """a[n, k] = -1/2 log|Sigma_k| - 1/2 (x - mu_k)' Sigma_k^-1 (x - mu_k) + log pi_k.

    With `full_constants`, adds the -D/2 log(tau) term so that
    a[n, k] = log(pi_k N(x_n; mu_k, Sigma_k)).
    """
    X = np.atleast_2d(X)
    factors = _chol_factors(params)
    N, D = X.shape
    scores = np.empty((N, params.n_components))
    for k in range(params.n_components):
        lower = factors[k][0]
        logdet = 2.0 * np.sum(np.log(np.diag(lower)))
        diff = X - params.means[k]
        solved = cho_solve(factors[k], diff.T, check_finite=False)
        quad = np.einsum("dn,dn->n", diff.T, solved)
        with np.errstate(divide="ignore"):
            log_pi = np.log(params.weights[k]) if params.weights[k] > 0 else -np.inf
        scores[:, k] = -0.5 * logdet - 0.5 * quad + log_pi
    if full_constants:
        scores -= 0.5 * D * _LOG_TAU
    return scores


def gmm_recognize(params, x):
    """Class posterior at x: softmax over the per-class log scores."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != params.dim:
        raise DimensionError(f"x has dim {x.shape[0]}, model expects {params.dim}")
    scores = _log_scores(params, x[None, :])[0]
    return softmax(scores)


def gmm_log_marginal(params, x):
    """log sum_k pi_k N(x; mu_k, Sigma_k) via log-sum-exp."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != params.dim:
        raise DimensionError(f"x has dim {x.shape[0]}, model expects {params.dim}")
    return float(logsumexp(_log_scores(params, x[None, :], full_constants=True)[0]))


def gmm_e_step(params, data):
    """One recognition row per sample."""
    X = _as_matrix(data)
    if X.shape[1] != params.dim:
        raise DimensionError(f"data dim {X.shape[1]} != model dim {params.dim}")
    scores = _log_scores(params, X)
    return Responsibilities(softmax(scores, axis=1))


def _floor_covariance(cov):
    """Eigenvalue floor at a small fraction of the average variance.

    EM can collapse a component onto a single point; the floor keeps every
    covariance invertible without visibly biasing healthy components.
    """
    cov = symmetrize(cov)
    floor = COV_FLOOR_FRACTION * max(np.trace(cov), 1e-300) / cov.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] >= floor:
        return cov
    return symmetrize(eigvecs @ np.diag(np.maximum(eigvals, floor)) @ eigvecs.T)


def gmm_m_step(data, resp):
    """Responsibility-weighted sample proportions, means, and covariances."""
    X = _as_matrix(data)
    R = resp.table
    if R.shape[0] != X.shape[0]:
        raise DimensionError("responsibility rows must match sample count")
    N, D = X.shape
    K = R.shape[1]
    counts = R.sum(axis=0)
    for k in range(K):
        if counts[k] < 1e-12:
            raise EmptyComponentError(f"component {k} has no responsibility mass",
                                      component=k)
    weights = counts / N
    means = (R.T @ X) / counts[:, None]
    covs = np.empty((K, D, D))
    for k in range(K):
        second = (R[:, k][:, None] * X).T @ X / counts[k]
        covs[k] = _floor_covariance(second - np.outer(means[k], means[k]))
    return GmmParams(weights=weights, means=means, covs=covs)


def gmm_equiprob_score(params, x, i, j):
    """Linear decision score between classes i and j under a shared covariance.

    Zero iff the classes are equiprobable at x; positive iff class i is the
    more probable of the two.
    """
    covs = params.covs
    if not all(np.allclose(covs[0], c, atol=1e-12) for c in covs[1:]):
        raise PreconditionError("equiprobability score requires a shared covariance")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu_i, mu_j = params.means[i], params.means[j]
    centered = x - 0.5 * (mu_i + mu_j)
    try:
        factor = cho_factor(covs[0], lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError("shared covariance is singular") from exc
    solved = cho_solve(factor, mu_i - mu_j, check_finite=False)
    return float(centered @ solved - np.log(params.weights[j] / params.weights[i]))


def gmm_free_energy(params, data, resp):
    """Mean per-sample free energy E_q[log q - log joint] in nats.

    After an exact E step this equals the marginal cross entropy
    -(1/N) sum_n log p(x_n).
    """
    X = _as_matrix(data)
    R = resp.table
    log_joint = _log_scores(params, X, full_constants=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_r = np.where(R > 0, np.log(np.where(R > 0, R, 1.0)), 0.0)
    return float(np.sum(R * (log_r - log_joint)) / X.shape[0])


def sample_gmm(params, n, rng):
    """Ancestral draws: class from the weights, then the class Gaussian."""
    ks = rng.choice(params.n_components, size=n, p=params.weights)
    chols = [np.linalg.cholesky(c + 1e-12 * np.eye(params.dim)) for c in params.covs]
    out = np.empty((n, params.dim))
    for idx, k in enumerate(ks):
        out[idx] = params.means[k] + chols[k] @ rng.standard_normal(params.dim)
    return out, ks


def kmeans(data, K, max_iter=300, seed=0):
    """Hard-assignment limit of GMM-EM: nearest-mean labels, per-cluster means.

    Ties between equidistant means break toward the lowest index; an empty
    cluster is re-seeded at the point farthest from its nearest mean.
    """
    X = _as_matrix(data)
    N = X.shape[0]
    if N < K:
        raise PreconditionError(f"need at least K={K} samples, got {N}")
    rng = np.random.default_rng(seed)
    means = X[rng.choice(N, size=K, replace=False)].copy()
    assignments = np.full(N, -1, dtype=int)
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - means[None, :, :]) ** 2, axis=2)
        new_assignments = np.argmin(d2, axis=1)
        for k in range(K):
            mask = new_assignments == k
            if not np.any(mask):
                farthest = int(np.argmax(np.min(d2, axis=1)))
                means[k] = X[farthest]
                new_assignments[farthest] = k
                mask = new_assignments == k
            means[k] = X[mask].mean(axis=0)
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
    return means, assignments


class GmmEmHandle:
    """EM driver adapter (init / e_step / m_step / free_energy) for the GMM."""

    def __init__(self, n_components):
        self.n_components = n_components

    def init_params(self, data, rng):
        """Means at K distinct data points, shared global covariance, uniform
        weights."""
        X = _as_matrix(data)
        N, D = X.shape
        idx = rng.choice(N, size=self.n_components, replace=False)
        global_cov = _floor_covariance(np.cov(X.T, bias=True).reshape(D, D))
        return GmmParams(
            weights=np.full(self.n_components, 1.0 / self.n_components),
            means=X[idx].copy(),
            covs=np.repeat(global_cov[None, :, :], self.n_components, axis=0),
        )

    def e_step(self, params, data):
        return gmm_e_step(params, data)

    def m_step(self, data, posterior):
        return gmm_m_step(data, posterior)

    def free_energy(self, params, data, posterior):
        return gmm_free_energy(params, data, posterior)

    def handle_empty_component(self, params, data, posterior, rng):
        """Re-initialize a dead component at the worst-explained sample."""
        X = _as_matrix(data)
        R = posterior.table.copy()
        counts = R.sum(axis=0)
        log_marg = logsumexp(_log_scores(params, X, full_constants=True), axis=1)
        for k in np.flatnonzero(counts < 1e-12):
            worst = int(np.argmin(log_marg))
            R[worst] = 0.0
            R[worst, k] = 1.0
            log_marg[worst] = np.inf
        posterior = Responsibilities(R)
        return gmm_m_step(data, posterior), posterior
