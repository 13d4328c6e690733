"""Discriminative estimators: normal equations (plain, ridge, weighted),
Newton-Raphson / IRLS for canonical-link GLiMs, and InfoMax ICA.

Inputs and outputs are assumed centered for the least-squares fits.  IRLS
uses step halving to tame Newton overshoot; the gaussian family converges in
exactly one step.  The ICA loss is the relative entropy between the data and
the Jacobian-determinant density of the unmixing transform, so its gradient
carries the -W^-T volume term.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import expit, gammaln, polygamma, psi

from .data import Dataset
from .exceptions import (
    DimensionError,
    HessianError,
    PreconditionError,
    SeparationError,
    SingularityError,
)

SEPARATION_NORM = 1e6


@dataclass(frozen=True)
class LinearMap:
    """K x D coefficient matrix of a linear read-out."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if not np.all(np.isfinite(weights)):
            raise PreconditionError("weights must be finite")
        object.__setattr__(self, "weights", weights)

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.weights.T


def _as_matrix(data):
    if isinstance(data, Dataset):
        return data.rows
    mat = np.asarray(data, dtype=float)
    if mat.ndim == 1:
        mat = mat[:, None]
    return mat


def ols_fit(inputs, outputs):
    """Normal equations: W = <z x'> <x x'>^-1."""
    X = _as_matrix(inputs)
    Z = _as_matrix(outputs)
    if X.shape[0] != Z.shape[0]:
        raise DimensionError("inputs and outputs must have matching sample counts")
    gram = X.T @ X / X.shape[0]
    cross = Z.T @ X / X.shape[0]
    try:
        factor = cho_factor(gram, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError(
            "input Gram matrix is singular; consider ridge_fit") from exc
    return LinearMap(cho_solve(factor, cross.T, check_finite=False).T)


def ridge_fit(inputs, outputs, regularizer):
    """Regularized normal equations: W = <z x'> (<x x'> + Sigma)^-1.

    A scalar regularizer expands to lambda I; a full SPD matrix is the
    emission-covariance form.  lambda = 0 with an invertible Gram recovers
    ols_fit.
    """
    X = _as_matrix(inputs)
    Z = _as_matrix(outputs)
    D = X.shape[1]
    if np.isscalar(regularizer):
        reg = float(regularizer) * np.eye(D)
    else:
        reg = np.atleast_2d(np.asarray(regularizer, dtype=float))
        if reg.shape != (D, D):
            raise DimensionError("regularizer must be scalar or D x D")
    gram = X.T @ X / X.shape[0] + reg
    cross = Z.T @ X / X.shape[0]
    try:
        factor = cho_factor(gram, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError("regularized Gram matrix is singular") from exc
    return LinearMap(cho_solve(factor, cross.T, check_finite=False).T)


def wls_fit(inputs, outputs, weight_matrix):
    """Weighted least squares on data matrices: W = Z U^-1 X' (X U^-1 X')^-1.

    `weight_matrix` is the N x N sample covariance U; whitening both data
    matrices by U^-1/2 and running OLS gives the same answer.
    """
    X = _as_matrix(inputs).T  # D x N
    Z = _as_matrix(outputs).T  # K x N
    U = np.atleast_2d(np.asarray(weight_matrix, dtype=float))
    n = X.shape[1]
    if U.shape != (n, n):
        raise DimensionError("weight matrix must be N x N")
    try:
        u_factor = cho_factor(U, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError("weight matrix is singular") from exc
    Xw = cho_solve(u_factor, X.T, check_finite=False)  # U^-1 X'
    gram = X @ Xw
    cross = Z @ Xw
    try:
        factor = cho_factor(gram, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularityError("weighted Gram matrix is singular") from exc
    return LinearMap(cho_solve(factor, cross.T, check_finite=False).T)


@dataclass(frozen=True)
class GlimFamily:
    """Exponential-family response with its link-specific callables.

    `mean_fn(eta)` is the expected sufficient statistic given eta = w'x;
    `variance_fn(eta)` its variance; `sufficient_stat(z)` maps the response
    to its sufficient statistic; `grad_weight(eta)` and `hess_weight(eta)`
    are the per-sample multipliers in the gradient and expected Hessian; and
    `nll(z, eta)` the per-sample negative log likelihood (up to z-only
    constants) used for step halving.
    """

    name: str
    mean_fn: callable
    variance_fn: callable
    sufficient_stat: callable = field(default=lambda z: z)
    grad_weight: callable = field(default=lambda eta: np.ones_like(eta))
    hess_weight: callable = None
    nll: callable = None
    support_check: callable = field(default=lambda z: True)

    def __post_init__(self):
        if self.hess_weight is None:
            object.__setattr__(self, "hess_weight", self.variance_fn)


def _gamma_known_scale(theta=1.0):
    """Gamma response with known scale; the shape follows k = exp(w'x).

    The sufficient statistic is log z with mean psi0(k) + log theta and
    variance psi1(k); the expected Hessian weights are k^2 psi1(k), and the
    gradient carries the extra factor k from the non-canonical link.
    """

    def mean_fn(eta):
        return psi(np.exp(eta)) + np.log(theta)

    def variance_fn(eta):
        return polygamma(1, np.exp(eta))

    def grad_weight(eta):
        return np.exp(eta)

    def hess_weight(eta):
        k = np.exp(eta)
        return k ** 2 * polygamma(1, k)

    def nll(z, eta):
        k = np.exp(eta)
        return -(k - 1.0) * np.log(z) + gammaln(k) + k * np.log(theta) + z / theta

    return GlimFamily(
        name="gamma-shape-log",
        mean_fn=mean_fn, variance_fn=variance_fn,
        sufficient_stat=lambda z: np.log(z),
        grad_weight=grad_weight, hess_weight=hess_weight, nll=nll,
        support_check=lambda z: np.all(z > 0),
    )


FAMILIES = {
    "gaussian": GlimFamily(
        name="gaussian",
        mean_fn=lambda eta: eta,
        variance_fn=lambda eta: np.ones_like(eta),
        nll=lambda z, eta: 0.5 * (z - eta) ** 2,
    ),
    "bernoulli-logit": GlimFamily(
        name="bernoulli-logit",
        mean_fn=expit,
        variance_fn=lambda eta: expit(eta) * (1.0 - expit(eta)),
        nll=lambda z, eta: np.logaddexp(0.0, eta) - z * eta,
        support_check=lambda z: np.all((z == 0) | (z == 1)),
    ),
    "poisson-log": GlimFamily(
        name="poisson-log",
        mean_fn=np.exp,
        variance_fn=np.exp,
        nll=lambda z, eta: np.exp(eta) - z * eta,
        support_check=lambda z: np.all((z >= 0) & (z == np.round(z))),
    ),
    "gamma-shape-log": _gamma_known_scale(),
}


def irls_fit(inputs, outputs, family, max_iter=100, tol=1e-10):
    """Newton-Raphson with the expected Hessian; each step is a weighted
    least-squares solve.

    Halves the step (up to 30 times) whenever the family cross entropy would
    increase.  Returns (weights, objective trace).  Logistic weights running
    past norm 1e6 raise SeparationError; a non-PD working Hessian raises
    HessianError.
    """
    if isinstance(family, str):
        try:
            family = FAMILIES[family]
        except KeyError:
            raise PreconditionError(f"unknown GLiM family {family!r}") from None
    X = _as_matrix(inputs)
    z = np.asarray(outputs, dtype=float).reshape(-1)
    if X.shape[0] != z.shape[0]:
        raise DimensionError("inputs and outputs must have matching sample counts")
    if not family.support_check(z):
        raise PreconditionError(f"outputs outside the {family.name} support")
    t = family.sufficient_stat(z)
    w = np.zeros(X.shape[1])

    def objective(weights):
        return float(np.mean(family.nll(z, X @ weights)))

    trace = [objective(w)]
    for _ in range(max_iter):
        eta = X @ w
        grad = ((t - family.mean_fn(eta)) * family.grad_weight(eta)) @ X / X.shape[0]
        hess = (X * family.hess_weight(eta)[:, None]).T @ X / X.shape[0]
        try:
            factor = cho_factor(hess, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise HessianError("working Hessian is not positive definite") from exc
        step = cho_solve(factor, grad, check_finite=False)
        scale = 1.0
        for _ in range(30):
            candidate = w + scale * step
            if objective(candidate) <= trace[-1] + 1e-15:
                break
            scale *= 0.5
        else:
            candidate = w
        w = candidate
        trace.append(objective(w))
        if np.linalg.norm(w) > SEPARATION_NORM:
            raise SeparationError(
                "weights diverged; classes are likely linearly separable")
        if family.name == "bernoulli-logit":
            # Complete-separation certificate: in float64 the objective
            # saturates long before the weight norm can diverge, so detect
            # the margin blow-up directly.
            # With every margin beyond 20 the gradient vanishes only by
            # underflow, so a finite stationary point cannot exist.
            margins = (2.0 * z - 1.0) * (X @ w)
            if np.all(margins > 20.0):
                raise SeparationError(
                    "all samples perfectly separated; weights diverge")
        grad_norm = np.linalg.norm(
            ((t - family.mean_fn(X @ w)) * family.grad_weight(X @ w)) @ X / X.shape[0])
        if grad_norm < tol:
            break
    return w, np.asarray(trace)


@dataclass(frozen=True)
class IcaModel:
    """Square unmixing matrix plus the elementwise output nonlinearity."""

    unmixing: np.ndarray
    nonlinearity: str = "logistic-cdf"

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.unmixing, dtype=float))
        if W.shape[0] != W.shape[1]:
            raise DimensionError("unmixing matrix must be square")
        if abs(np.linalg.det(W)) <= 1e-12:
            raise PreconditionError("unmixing matrix must be invertible")
        if self.nonlinearity not in ("logistic-cdf", "gaussian-cdf"):
            raise PreconditionError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "unmixing", W)


def _log_cdf_slope(nonlinearity, s):
    """log f'(s) for the output nonlinearity f."""
    if nonlinearity == "logistic-cdf":
        # f' = sigma(s) (1 - sigma(s)); log f' = -softplus(s) - softplus(-s)
        return -(np.logaddexp(0.0, s) + np.logaddexp(0.0, -s))
    return -0.5 * s ** 2 - 0.5 * np.log(2.0 * np.pi)


def _dlog_cdf_slope(nonlinearity, s):
    """d/ds of -log f'(s)."""
    if nonlinearity == "logistic-cdf":
        return 2.0 * expit(s) - 1.0
    return s


def ica_loss(model, batch):
    """Mean negative log of the Jacobian-determinant density.

    <-sum_k log f'((W x)_k)> - log |det W|: minimizing it maximizes the
    output entropy of the unmixing transform.
    """
    X = _as_matrix(batch)
    S = X @ model.unmixing.T
    _, logdet = np.linalg.slogdet(model.unmixing)
    return float(-np.mean(np.sum(_log_cdf_slope(model.nonlinearity, S), axis=1))
                 - logdet)


def ica_gradient(model, batch):
    """Gradient of ica_loss: <phi(W x) x'> - W^-T with phi = -d log f' / ds."""
    X = _as_matrix(batch)
    W = model.unmixing
    if X.shape[1] != W.shape[0]:
        raise DimensionError("batch dimension must match the unmixing size")
    S = X @ W.T
    phi = _dlog_cdf_slope(model.nonlinearity, S)
    data_term = phi.T @ X / X.shape[0]
    try:
        w_inv_t = np.linalg.inv(W).T
    except np.linalg.LinAlgError as exc:
        raise SingularityError("unmixing matrix is singular") from exc
    return data_term - w_inv_t


def ica_fit(batch, lr=0.1, iters=500, seed=0, nonlinearity="logistic-cdf",
            init=None):
    """Gradient descent on the ICA loss with backtracking line search.

    The loss trace is non-increasing by construction; iters = 0 returns the
    initialization.
    """
    X = _as_matrix(batch)
    K = X.shape[1]
    rng = np.random.default_rng(seed)
    if init is None:
        W = np.eye(K) + 0.01 * rng.standard_normal((K, K))
    else:
        W = np.atleast_2d(np.asarray(init, dtype=float)).copy()
    model = IcaModel(W, nonlinearity)
    losses = [ica_loss(model, X)]
    for _ in range(iters):
        grad = ica_gradient(model, X)
        step = lr
        for _ in range(40):
            candidate = model.unmixing - step * grad
            if abs(np.linalg.det(candidate)) > 1e-12:
                cand_model = IcaModel(candidate, nonlinearity)
                cand_loss = ica_loss(cand_model, X)
                if cand_loss <= losses[-1]:
                    break
            step *= 0.5
        else:
            break
        model = cand_model
        losses.append(cand_loss)
        if len(losses) > 2 and abs(losses[-2] - losses[-1]) < 1e-14 * max(1.0, abs(losses[-1])):
            break
    return model, np.asarray(losses)


def sample_ica(model, n, rng):
    """Generative dual: draw independent sources with density f', mix by W^-1.

    For the logistic cdf the source density f'(s) is the standard logistic
    distribution; for the gaussian cdf it is the standard normal.
    """
    K = model.unmixing.shape[0]
    if model.nonlinearity == "logistic-cdf":
        sources = rng.logistic(size=(n, K))
    else:
        sources = rng.standard_normal((n, K))
    mixing = np.linalg.inv(model.unmixing)
    return sources @ mixing.T, sources
