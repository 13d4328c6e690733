"""Closed-form cumulant algebra for jointly Gaussian source-emission pairs.

A source N(mu, Sigma) observed through an affine channel z -> N(W z + b, Q)
admits closed forms for the emission marginal, the Bayes-inverted posterior
(in both a precision form and a gain/Woodbury form), the gain matrix, and the
source-emission cross covariance.  Everything here is a pure function; all
returned covariances are symmetrized and checked positive semi-definite.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .exceptions import DimensionError, PreconditionError, SingularityError

SYM_TOL = 1e-12
PSD_TOL = 1e-10
JITTER_SCALE = 1e-9


def symmetrize(matrix):
    """Return (S + S') / 2."""
    matrix = np.asarray(matrix, dtype=float)
    return 0.5 * (matrix + matrix.T)


def _jitter(matrix):
    """Diagonal jitter proportional to the mean diagonal magnitude.

    Guards Cholesky factorizations against low-rank covariances (a single
    observed trajectory can produce one for the initial-state estimate).
    """
    scale = float(np.mean(np.abs(np.diag(matrix)))) if matrix.shape[0] else 0.0
    if scale == 0.0:
        scale = 1.0
    return matrix + JITTER_SCALE * scale * np.eye(matrix.shape[0])


def _factor(matrix, name):
    """Cholesky factor, falling back to a jittered retry on failure.

    Jitter is applied only when the plain factorization fails: an
    unconditional perturbation would push the direct and Woodbury inversion
    routes apart by more than their agreement tolerance.
    """
    matrix = symmetrize(matrix)
    try:
        return cho_factor(matrix, lower=True, check_finite=False)
    except LinAlgError:
        pass
    try:
        return cho_factor(_jitter(matrix), lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError(f"{name} is singular") from exc


def chol_solve_psd(matrix, rhs, name="matrix"):
    """Solve matrix @ x = rhs via Cholesky; never forms explicit inverses."""
    return cho_solve(_factor(matrix, name), rhs, check_finite=False)


def chol_logdet(matrix, name="matrix"):
    """log |matrix| for symmetric positive-definite input, via Cholesky."""
    factor, _ = _factor(matrix, name)
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def gaussian_logpdf(x, mean, cov, name="covariance"):
    """Log density of N(mean, cov) at x, computed with Cholesky solves."""
    x = np.asarray(x, dtype=float)
    diff = x - np.asarray(mean, dtype=float)
    solved = chol_solve_psd(cov, diff, name=name)
    d = diff.shape[-1] if diff.ndim else 1
    return -0.5 * (d * np.log(2.0 * np.pi) + chol_logdet(cov, name=name)
                   + float(diff @ solved))


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector and covariance of a multivariate normal.

    The covariance is symmetrized on construction and must be positive
    semi-definite (eigenvalues >= -1e-10).
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise DimensionError(f"covariance must be square, got {cov.shape}")
        if mean.shape[0] != cov.shape[0]:
            raise DimensionError(
                f"mean length {mean.shape[0]} != covariance size {cov.shape[0]}")
        if np.max(np.abs(cov - cov.T)) > max(SYM_TOL, SYM_TOL * np.max(np.abs(cov), initial=1.0)):
            cov = symmetrize(cov)
        else:
            cov = symmetrize(cov)
        min_eig = float(np.min(np.linalg.eigvalsh(cov))) if cov.size else 0.0
        if min_eig < -PSD_TOL:
            raise PreconditionError(
                f"covariance not PSD: min eigenvalue {min_eig:.3e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class AffineGaussianChannel:
    """Conditional N(W z + b, Q): an emission or transition distribution."""

    weights: np.ndarray
    offset: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        noise_cov = symmetrize(np.atleast_2d(np.asarray(self.noise_cov, dtype=float)))
        if weights.shape[0] != offset.shape[0]:
            raise DimensionError(
                f"weights rows {weights.shape[0]} != offset length {offset.shape[0]}")
        if noise_cov.shape[0] != weights.shape[0]:
            raise DimensionError(
                f"noise covariance size {noise_cov.shape[0]} != output dim {weights.shape[0]}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "noise_cov", noise_cov)

    @property
    def out_dim(self):
        return self.weights.shape[0]

    @property
    def in_dim(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class GainMatrix:
    """Normalized precision of the emission: Sigma_z W' (W Sigma_z W' + Q)^-1."""

    gain: np.ndarray


def _check_channel_source(source, channel):
    if channel.in_dim != source.dim:
        raise DimensionError(
            f"channel expects input dim {channel.in_dim}, source has {source.dim}")


def marginal_cumulants(source, channel):
    """Marginal of the channel output when the input follows `source`.

    mean = W mu + b, cov = W Sigma W' + Q.
    """
    _check_channel_source(source, channel)
    W = channel.weights
    mean = W @ source.mean + channel.offset
    cov = symmetrize(W @ source.cov @ W.T + channel.noise_cov)
    return GaussianBelief(mean, cov)


def cross_covariance(source, channel):
    """Covariance between source and channel output: Sigma_z W'."""
    _check_channel_source(source, channel)
    return source.cov @ channel.weights.T


def gain(source, channel):
    """Gain K = Sigma_z W' (W Sigma_z W' + Q)^-1.

    Equals Sigma_rec W' Q^-1 whenever Q is invertible; a certain prior
    (Sigma_z = 0) yields a zero gain.
    """
    _check_channel_source(source, channel)
    marg_cov = symmetrize(
        channel.weights @ source.cov @ channel.weights.T + channel.noise_cov)
    cross = cross_covariance(source, channel)
    gain_t = chol_solve_psd(marg_cov, cross.T, name="marginal covariance")
    return GainMatrix(gain=gain_t.T)


def bayes_invert(source, channel, obs, form=None):
    """Posterior over the source given an observed channel output.

    The "direct" form works in source space:
        cov  = (W' Q^-1 W + Sigma_z^-1)^-1
        mean = cov (W' Q^-1 (y - b) + Sigma_z^-1 mu).
    The "woodbury" form works in emission space:
        K    = Sigma_z W' (W Sigma_z W' + Q)^-1
        mean = mu + K (y - (W mu + b))
        cov  = Sigma_z - K Sigma_marg K'.
    The two agree to high precision whenever both are defined; the default
    picks woodbury when the emission is lower-dimensional than the source
    (moving the inversion into emission space), direct otherwise.  A singular
    prior is handled only by the woodbury form.
    """
    _check_channel_source(source, channel)
    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    if obs.shape[0] != channel.out_dim:
        raise DimensionError(
            f"observation length {obs.shape[0]} != channel output dim {channel.out_dim}")
    if form is None:
        # Woodbury moves the inversion into emission space; prefer it when
        # the emission is smaller, and fall back to it whenever the prior is
        # not invertible (the direct form needs the prior precision).
        if channel.out_dim < source.dim:
            form = "woodbury"
        else:
            try:
                cho_factor(source.cov, lower=True, check_finite=False)
                form = "direct"
            except LinAlgError:
                form = "woodbury"
    if form not in ("direct", "woodbury"):
        raise PreconditionError(f"unknown bayes_invert form: {form!r}")

    W = channel.weights
    if form == "direct":
        wt_qinv = chol_solve_psd(channel.noise_cov, W, name="channel noise covariance").T
        prior_prec = chol_solve_psd(source.cov, np.eye(source.dim),
                                    name="source covariance")
        post_prec = symmetrize(wt_qinv @ W + prior_prec)
        rhs = wt_qinv @ (obs - channel.offset) + prior_prec @ source.mean
        cov = symmetrize(chol_solve_psd(post_prec, np.eye(source.dim),
                                        name="posterior precision"))
        mean = chol_solve_psd(post_prec, rhs, name="posterior precision")
        return GaussianBelief(mean, cov)

    marg = marginal_cumulants(source, channel)
    K = gain(source, channel).gain
    mean = source.mean + K @ (obs - marg.mean)
    cov = symmetrize(source.cov - K @ marg.cov @ K.T)
    # Clip the tiny negative eigenvalues that the subtraction can introduce.
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.size and eigvals[0] < 0.0:
        if eigvals[0] < -PSD_TOL:
            raise SingularityError("posterior covariance lost positive semi-definiteness")
        cov = symmetrize(eigvecs @ np.diag(np.maximum(eigvals, 0.0)) @ eigvecs.T)
    return GaussianBelief(mean, cov)


def woodbury_inverse(A, U, C, V):
    """(A + U C V)^-1 via the matrix-inversion lemma.

    Returns A^-1 - A^-1 U (C^-1 + V A^-1 U)^-1 V A^-1.  A and C must be
    square and invertible; U and V need only conform.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = A.shape[0]
    if A.shape[0] != A.shape[1] or C.shape[0] != C.shape[1]:
        raise DimensionError("A and C must be square")
    if U.shape != (n, C.shape[0]) or V.shape != (C.shape[0], n):
        raise DimensionError(
            f"U must be {n}x{C.shape[0]} and V {C.shape[0]}x{n}, "
            f"got {U.shape} and {V.shape}")
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("A is singular") from exc
    try:
        C_inv = np.linalg.inv(C)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("C is singular") from exc
    inner = C_inv + V @ A_inv @ U
    try:
        inner_inv = np.linalg.inv(inner)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("inner matrix C^-1 + V A^-1 U is singular") from exc
    return A_inv - A_inv @ U @ inner_inv @ V @ A_inv


def sherman_morrison(A, u, v):
    """Rank-1 special case: (A + u v')^-1 = A^-1 - A^-1 u v' A^-1 / (1 + v' A^-1 u)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if u.shape[0] != A.shape[0] or v.shape[0] != A.shape[0]:
        raise DimensionError("u and v must match A")
    try:
        A_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("A is singular") from exc
    denom = 1.0 + v @ A_inv @ u
    if abs(denom) < 1e-14:
        raise SingularityError("inner scalar 1 + v' A^-1 u is (numerically) zero")
    return A_inv - np.outer(A_inv @ u, v @ A_inv) / denom


def expected_quadratic(belief, W, A, b):
    """E[(b - W z)' A (b - W z)] for z ~ belief.

    Equals trace(A W Sigma W') + (b - W mu)' A (b - W mu): the quadratic at
    the mean plus a covariance correction.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if W.shape[1] != belief.dim:
        raise DimensionError(
            f"W columns {W.shape[1]} != belief dim {belief.dim}")
    if A.shape[0] != A.shape[1] or A.shape[0] != W.shape[0] or b.shape[0] != W.shape[0]:
        raise DimensionError("A and b must match the output dimension of W")
    resid = b - W @ belief.mean
    return float(np.trace(A @ W @ belief.cov @ W.T) + resid @ A @ resid)
