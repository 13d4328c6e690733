"""Factor analyzer: closed-form Gaussian recognition and marginal, EM on
expected sufficient statistics, and the zero-noise iterative-PCA limit.

Model: z ~ N(0, I_K), x | z ~ N(C z + c, diag(D)).  Offsets are handled by
centering the data once; the source mean is zero without loss of generality.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError, qr

from .data import Dataset
from .exceptions import DimensionError, PreconditionError, RankError, SingularityError
from .gaussian import (
    AffineGaussianChannel,
    GaussianBelief,
    chol_logdet,
    chol_solve_psd,
    symmetrize,
)

_LOG_TAU = float(np.log(2.0 * np.pi))
NOISE_FLOOR = 1e-10


@dataclass(frozen=True)
class FaParams:
    """Loading matrix, offset, and diagonal emission noise variances."""

    loading: np.ndarray
    offset: np.ndarray
    diag_noise: np.ndarray

    def __post_init__(self):
        loading = np.atleast_2d(np.asarray(self.loading, dtype=float))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        diag_noise = np.atleast_1d(np.asarray(self.diag_noise, dtype=float))
        if loading.shape[0] != offset.shape[0] or diag_noise.shape[0] != offset.shape[0]:
            raise DimensionError("loading rows, offset, and noise must share D")
        if np.any(diag_noise < NOISE_FLOOR):
            raise PreconditionError(f"noise variances must be >= {NOISE_FLOOR}")
        if loading.shape[1] > loading.shape[0]:
            warnings.warn("more factors than observed dimensions (K > D)",
                          stacklevel=2)
        object.__setattr__(self, "loading", loading)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "diag_noise", diag_noise)

    @property
    def dim(self):
        return self.loading.shape[0]

    @property
    def n_factors(self):
        return self.loading.shape[1]

    def as_channel(self):
        return AffineGaussianChannel(self.loading, self.offset,
                                     np.diag(self.diag_noise))


@dataclass(frozen=True)
class FaExpectedStats:
    """Sufficient statistics of the E step: sum x E[z|x]', sum E[z z'|x],
    the diagonal of sum x x', and the sample count."""

    sum_x_z: np.ndarray
    sum_zz: np.ndarray
    sum_xx_diag: np.ndarray
    n: int


def _as_matrix(data):
    if isinstance(data, Dataset):
        return data.rows
    return np.atleast_2d(np.asarray(data, dtype=float))


def _recognition_cov(params):
    """(C' D^-1 C + I)^-1, the shared posterior covariance."""
    C = params.loading
    ratio = C / params.diag_noise[:, None]
    precision = symmetrize(C.T @ ratio + np.eye(params.n_factors))
    cov = chol_solve_psd(precision, np.eye(params.n_factors),
                         name="recognition precision")
    return symmetrize(cov), ratio


def fa_recognize(params, x):
    """Posterior over factors: N(cov C' D^-1 (x - c), (C' D^-1 C + I)^-1)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != params.dim:
        raise DimensionError(f"x has dim {x.shape[0]}, model expects {params.dim}")
    cov, ratio = _recognition_cov(params)
    mean = cov @ (ratio.T @ (x - params.offset))
    return GaussianBelief(mean, cov)


def fa_log_marginal(params, x):
    """log N(x; c, C C' + diag(D))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != params.dim:
        raise DimensionError(f"x has dim {x.shape[0]}, model expects {params.dim}")
    C = params.loading
    cov = C @ C.T + np.diag(params.diag_noise)
    diff = x - params.offset
    solved = chol_solve_psd(cov, diff, name="marginal covariance")
    return float(-0.5 * (params.dim * _LOG_TAU
                         + chol_logdet(cov, name="marginal covariance")
                         + diff @ solved))


def fa_e_step(params, data):
    """Expected sufficient statistics, sharing one posterior covariance.

    The posterior covariance does not depend on x, so the sums reduce to
    matrix products against the centered data moments.
    """
    X = _as_matrix(data)
    if X.shape[1] != params.dim:
        raise DimensionError(f"data dim {X.shape[1]} != model dim {params.dim}")
    Xc = X - params.offset
    cov, ratio = _recognition_cov(params)
    means = Xc @ ratio @ cov  # N x K, row n = E[z | x_n]
    n = X.shape[0]
    sum_x_z = Xc.T @ means
    sum_zz = symmetrize(n * cov + means.T @ means)
    sum_xx_diag = np.einsum("nd,nd->d", Xc, Xc)
    return FaExpectedStats(sum_x_z=sum_x_z, sum_zz=sum_zz,
                           sum_xx_diag=sum_xx_diag, n=n)


def fa_m_step(stats, offset=None):
    """Loading by regression of x on z; noise from the residual diagonal.

    C = (sum x z') (sum z z')^-1 and D = diag(sum x x' - C sum z x') / n,
    floored to keep every variance positive.
    """
    try:
        factor = cho_factor(symmetrize(stats.sum_zz), lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError("sum_zz is singular") from exc
    loading = cho_solve(factor, stats.sum_x_z.T, check_finite=False).T
    diag_noise = (stats.sum_xx_diag
                  - np.einsum("dk,dk->d", loading, stats.sum_x_z)) / stats.n
    diag_noise = np.maximum(diag_noise, NOISE_FLOOR)
    if offset is None:
        offset = np.zeros(loading.shape[0])
    return FaParams(loading=loading, offset=offset, diag_noise=diag_noise)


def fa_free_energy(params, data, posterior):
    """Mean per-sample free energy under per-sample Gaussian posteriors.

    `posterior` is (means, cov): the N x K posterior means and the shared
    posterior covariance.  Equals the marginal cross entropy after an exact
    E step.
    """
    X = _as_matrix(data)
    means, cov = posterior
    n, D = X.shape
    K = params.n_factors
    Xc = X - params.offset
    C = params.loading
    Dn = params.diag_noise

    sign, logdet_cov = np.linalg.slogdet(cov)
    if sign <= 0:
        raise SingularityError("posterior covariance is singular")
    neg_entropy = -0.5 * (K * _LOG_TAU + K + logdet_cov)

    # E[-log p(z)] = (K log tau + tr(cov) + |mean|^2) / 2 per sample.
    source_term = 0.5 * (K * _LOG_TAU + float(np.trace(cov))
                         + float(np.sum(means ** 2)) / n)

    # E[-log p(x|z)] with the shared covariance correction tr(D^-1 C cov C').
    resid = Xc - means @ C.T
    quad = float(np.sum((resid ** 2) / Dn)) / n
    trace_corr = float(np.trace((C / Dn[:, None]).T @ C @ cov))
    emission_term = 0.5 * (D * _LOG_TAU + float(np.sum(np.log(Dn)))
                           + quad + trace_corr)

    return neg_entropy + source_term + emission_term


def pca_iterate(W, data, iters=200, tol=1e-10):
    """Zero-noise EM limit: alternate latent projection and regression.

    E: Zbar = (W'W)^-1 W' x per sample;  M: W = <x zbar'> <zbar zbar'>^-1.
    At convergence the column span of W is the top-K principal subspace.
    """
    X = _as_matrix(data)
    W = np.atleast_2d(np.asarray(W, dtype=float)).copy()
    if W.shape[0] != X.shape[1]:
        raise DimensionError("W rows must match the data dimension")
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise RankError("W must have full column rank")
    Xc = X - X.mean(axis=0)
    for _ in range(iters):
        gram = W.T @ W
        try:
            factor = cho_factor(gram, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise RankError("W lost full column rank during iteration") from exc
        Z = cho_solve(factor, (Xc @ W).T, check_finite=False).T  # N x K
        zz = Z.T @ Z
        try:
            zz_factor = cho_factor(zz, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise RankError("latent second moment is singular") from exc
        W_new = cho_solve(zz_factor, (Xc.T @ Z).T, check_finite=False).T
        delta = np.linalg.norm(W_new - W) / max(np.linalg.norm(W), 1e-300)
        W = W_new
        if delta < tol:
            break
    return W


class FaEmHandle:
    """EM driver adapter for the factor analyzer.

    The offset is fixed at the data mean (centering once); the E-step
    posterior is carried as (means, shared covariance).
    """

    def __init__(self, n_factors):
        self.n_factors = n_factors

    def init_params(self, data, rng):
        X = _as_matrix(data)
        D = X.shape[1]
        raw = rng.standard_normal((D, self.n_factors))
        q, _ = qr(raw, mode="economic")
        scale = float(np.sqrt(np.mean(np.var(X, axis=0))))
        return FaParams(loading=q * scale, offset=X.mean(axis=0),
                        diag_noise=np.full(D, max(scale ** 2, 1e-6)))

    def e_step(self, params, data):
        X = _as_matrix(data)
        cov, ratio = _recognition_cov(params)
        means = (X - params.offset) @ ratio @ cov
        return means, cov

    def m_step(self, data, posterior):
        X = _as_matrix(data)
        means, cov = posterior
        n = X.shape[0]
        Xc = X - X.mean(axis=0)
        sum_x_z = Xc.T @ means
        sum_zz = symmetrize(n * cov + means.T @ means)
        sum_xx_diag = np.einsum("nd,nd->d", Xc, Xc)
        stats = FaExpectedStats(sum_x_z, sum_zz, sum_xx_diag, n)
        return fa_m_step(stats, offset=X.mean(axis=0))

    def free_energy(self, params, data, posterior):
        return fa_free_energy(params, data, posterior)
