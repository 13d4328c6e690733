"""Binary-binary restricted Boltzmann machine: energies, block-Gibbs
conditionals, exact KL gradients by enumeration at desk scale, and CD-n
approximate gradients.

The conditionals are generated from one shared weight matrix (sigmoid of an
affine function of the opposite layer), the structural consistency condition
of the harmonium family.  Everything "exact" here enumerates configurations
and is guarded to V + H <= 22.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DimensionError, PreconditionError, SizeError

ENUM_GUARD = 22


@dataclass(frozen=True)
class RbmParams:
    """Visible-hidden coupling matrix plus per-layer biases."""

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def __post_init__(self):
        weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        visible_bias = np.atleast_1d(np.asarray(self.visible_bias, dtype=float))
        hidden_bias = np.atleast_1d(np.asarray(self.hidden_bias, dtype=float))
        if weights.shape != (visible_bias.shape[0], hidden_bias.shape[0]):
            raise DimensionError("weights must be V x H matching the biases")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(visible_bias))
                and np.all(np.isfinite(hidden_bias))):
            raise PreconditionError("parameters must be finite")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "visible_bias", visible_bias)
        object.__setattr__(self, "hidden_bias", hidden_bias)

    @property
    def n_visible(self):
        return self.weights.shape[0]

    @property
    def n_hidden(self):
        return self.weights.shape[1]


@dataclass(frozen=True)
class BinaryBatch:
    """N x V matrix with entries in {0, 1}."""

    states: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if not np.all((states == 0.0) | (states == 1.0)):
            raise PreconditionError("batch entries must be 0 or 1")
        object.__setattr__(self, "states", states)

    @property
    def n(self):
        return self.states.shape[0]


@dataclass
class GradientBundle:
    """Gradient of the data cross entropy -<log p(x)> w.r.t. (W, b_v, b_h)."""

    d_weights: np.ndarray
    d_visible_bias: np.ndarray
    d_hidden_bias: np.ndarray

    def __iter__(self):
        return iter((self.d_weights, self.d_visible_bias, self.d_hidden_bias))


def rbm_energy(params, v, h):
    """E(v, h) = -b_v' v - b_h' h - v' W h."""
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    return float(-params.visible_bias @ v - params.hidden_bias @ h
                 - v @ params.weights @ h)


def rbm_conditionals(params, visible=None, hidden=None):
    """Bernoulli means of one layer given the other.

    p(h=1 | v) = sigmoid(b_h + W' v);  p(v=1 | h) = sigmoid(b_v + W h).
    Exactly one of `visible` / `hidden` must be supplied; batches work too.
    """
    if (visible is None) == (hidden is None):
        raise PreconditionError("supply exactly one of visible= or hidden=")
    if visible is not None:
        v = np.asarray(visible, dtype=float)
        return expit(params.hidden_bias + v @ params.weights)
    h = np.asarray(hidden, dtype=float)
    return expit(params.visible_bias + h @ params.weights.T)


def _guard(params):
    if params.n_visible + params.n_hidden > ENUM_GUARD:
        raise SizeError(
            f"enumeration guard exceeded: V + H = "
            f"{params.n_visible + params.n_hidden} > {ENUM_GUARD}")


def all_configurations(n):
    """All 2^n binary vectors, lexicographic, as an (2^n, n) float matrix."""
    grid = np.indices((2,) * n).reshape(n, -1).T
    return grid.astype(float)


def _visible_free_energies(params, V_states):
    """-log unnormalized marginal of each visible state (hidden summed out).

    F(v) = -b_v' v - sum_j softplus(b_h_j + (W' v)_j).
    """
    activation = params.hidden_bias + V_states @ params.weights
    softplus = np.logaddexp(0.0, activation)
    return -(V_states @ params.visible_bias) - softplus.sum(axis=1)


def log_partition_bruteforce(params):
    """log Z by streaming log-sum-exp over all visible configurations."""
    _guard(params)
    V_states = all_configurations(params.n_visible)
    return float(logsumexp(-_visible_free_energies(params, V_states)))


def model_visible_marginal(params):
    """Enumerated p(v) for every visible configuration, in lexicographic order."""
    _guard(params)
    V_states = all_configurations(params.n_visible)
    log_p = -_visible_free_energies(params, V_states)
    log_p -= logsumexp(log_p)
    return V_states, np.exp(log_p)


def data_log_likelihood(params, data):
    """Mean log p(x) over the batch, via the enumerated partition function."""
    log_z = log_partition_bruteforce(params)
    return float(np.mean(-_visible_free_energies(params, data.states)) - log_z)


def exact_kl_gradient(params, data):
    """Gradient of -<log p(x)>_data: model expectations minus data-clamped.

    The model term enumerates the visible marginal and takes conditional
    hidden means; the data term clamps visibles and uses exact conditionals.
    """
    _guard(params)
    V_states, p_v = model_visible_marginal(params)
    h_model = rbm_conditionals(params, visible=V_states)
    model_vh = (V_states * p_v[:, None]).T @ h_model
    model_v = p_v @ V_states
    model_h = p_v @ h_model

    X = data.states
    h_data = rbm_conditionals(params, visible=X)
    data_vh = X.T @ h_data / data.n
    data_v = X.mean(axis=0)
    data_h = h_data.mean(axis=0)
    return GradientBundle(
        d_weights=model_vh - data_vh,
        d_visible_bias=model_v - data_v,
        d_hidden_bias=model_h - data_h,
    )


def cd_n_gradient(params, data, n, rng):
    """CD-n estimate of the same gradient: the model expectation is replaced
    by the statistics after n alternating block-Gibbs steps started at the
    data.

    Positive phase uses data-clamped conditional means; the chain samples h
    then v at every step; the final half-step uses conditional means rather
    than samples (standard variance reduction, allowed by the nested-average
    form of the update rule).  `n = 0` returns an all-zero bundle.
    """
    shape = params.weights.shape
    if n == 0:
        return GradientBundle(np.zeros(shape), np.zeros(shape[0]),
                              np.zeros(shape[1]))
    X = data.states
    h_data = rbm_conditionals(params, visible=X)
    v = X
    h_mean = h_data
    for _ in range(n):
        h = (rng.random(h_mean.shape) < h_mean).astype(float)
        v_mean = rbm_conditionals(params, hidden=h)
        v = (rng.random(v_mean.shape) < v_mean).astype(float)
        h_mean = rbm_conditionals(params, visible=v)
    return GradientBundle(
        d_weights=(v.T @ h_mean - X.T @ h_data) / data.n,
        d_visible_bias=(v - X).mean(axis=0),
        d_hidden_bias=(h_mean - h_data).mean(axis=0),
    )


def train_cd(params, data, n, learning_rate, steps, rng):
    """Plain CD-n descent with a constant learning rate, no momentum."""
    W = params.weights.copy()
    bv = params.visible_bias.copy()
    bh = params.hidden_bias.copy()
    current = params
    for _ in range(steps):
        grad = cd_n_gradient(current, data, n, rng)
        W -= learning_rate * grad.d_weights
        bv -= learning_rate * grad.d_visible_bias
        bh -= learning_rate * grad.d_hidden_bias
        current = RbmParams(W.copy(), bv.copy(), bh.copy())
    return current


def enumerated_joint(params):
    """Full joint p(v, h) over all configurations, as a (2^V, 2^H) table."""
    _guard(params)
    V_states = all_configurations(params.n_visible)
    H_states = all_configurations(params.n_hidden)
    neg_energy = (V_states @ params.visible_bias)[:, None] \
        + (H_states @ params.hidden_bias)[None, :] \
        + V_states @ params.weights @ H_states.T
    log_p = neg_energy - logsumexp(neg_energy)
    return V_states, H_states, np.exp(log_p)


def _conditional_tables(params):
    """Exact block-conditional tables on the enumerated configuration grids.

    Returns (p_h_given_v, p_v_given_h), both shaped (2^V, 2^H): entry [v, h]
    is p(h | v) and p(v | h) respectively.
    """
    V_states = all_configurations(params.n_visible)
    H_states = all_configurations(params.n_hidden)
    h_mean = rbm_conditionals(params, visible=V_states)  # (2^V, H)
    log_h = np.log(np.clip(h_mean, 1e-300, 1.0))
    log_1mh = np.log(np.clip(1.0 - h_mean, 1e-300, 1.0))
    p_h_given_v = np.exp(log_h @ H_states.T + log_1mh @ (1.0 - H_states).T)
    v_mean = rbm_conditionals(params, hidden=H_states)  # (2^H, V)
    log_v = np.log(np.clip(v_mean, 1e-300, 1.0))
    log_1mv = np.log(np.clip(1.0 - v_mean, 1e-300, 1.0))
    p_v_given_h = np.exp(V_states @ log_v.T + (1.0 - V_states) @ log_1mv.T)
    return p_h_given_v, p_v_given_h


def gibbs_sweep_operator(params, joint):
    """Apply one exact block-Gibbs sweep (resample h | v, then v | h) to a
    distribution over the full state space, as a transition operator.

    The model joint is invariant under this operator.
    """
    _guard(params)
    p_h_given_v, p_v_given_h = _conditional_tables(params)
    v_marginal = joint.sum(axis=1)
    after_h = v_marginal[:, None] * p_h_given_v
    h_marginal = after_h.sum(axis=0)
    return p_v_given_h * h_marginal[None, :]


def enumerated_kl_to_data(params, data_probs):
    """KL(data distribution over visibles || enumerated model marginal)."""
    _, p_v = model_visible_marginal(params)
    d = np.asarray(data_probs, dtype=float)
    mask = d > 0
    return float(np.sum(d[mask] * (np.log(d[mask]) - np.log(p_v[mask]))))


def contrastive_divergence_value(params, data_probs, n=1):
    """Enumerated CD objective: KL(p0 || model) - KL(pn || model) where pn is
    the data visible distribution pushed through n exact Gibbs sweeps."""
    _guard(params)
    _, p_v = model_visible_marginal(params)
    p_h_given_v, p_v_given_h = _conditional_tables(params)

    def _kl(q):
        mask = q > 0
        return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p_v[mask]))))

    d = np.asarray(data_probs, dtype=float)
    kl0 = _kl(d)
    marginal = d
    for _ in range(n):
        h_marg = p_h_given_v.T @ marginal
        marginal = p_v_given_h @ h_marg
    return kl0 - _kl(marginal)


def cd_alignment_diagnostic(params, data, rng, n=1, n_chains=1000):
    """Cosine between the CD-n weight update and the exact gradient.

    Purely observational: estimates how far the neglected CD remainder term
    tilts the update direction.
    """
    reps = int(np.ceil(n_chains / data.n))
    big = BinaryBatch(np.tile(data.states, (reps, 1)))
    approx = cd_n_gradient(params, big, n, rng)
    exact = exact_kl_gradient(params, data)
    a = approx.d_weights.ravel()
    b = exact.d_weights.ravel()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 1.0
    return float(a @ b / denom)


def sample_rbm(params, n, rng):
    """Exact draws from the enumerated visible marginal (desk scale only)."""
    V_states, p_v = model_visible_marginal(params)
    idx = rng.choice(V_states.shape[0], size=n, p=p_v)
    return V_states[idx]
