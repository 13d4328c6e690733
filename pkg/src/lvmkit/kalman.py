"""Linear-Gaussian state-space model: Kalman filter, RTS smoother with
cross-covariances, and EM over all parameters.

The filter alternates the same two half-updates as the HMM (time update =
marginalization, measurement update = Bayes inversion) and the smoother the
same two (future conditioning, backward step), composed through the shared
sequential driver; only the algebra differs, and here it is the closed-form
Gaussian algebra of the `gaussian` module.
"""

from dataclasses import dataclass

import numpy as np

from . import sequential
from .data import SequenceDataset
from .exceptions import DimensionError, PreconditionError, SingularityError
from .gaussian import (
    AffineGaussianChannel,
    GaussianBelief,
    bayes_invert,
    chol_logdet,
    chol_solve_psd,
    expected_quadratic,
    marginal_cumulants,
    symmetrize,
)

_LOG_TAU = float(np.log(2.0 * np.pi))
COV_FLOOR = 1e-10


@dataclass(frozen=True)
class SsmParams:
    """Transition channel, optional control gain, emission channel, and the
    initial-state belief."""

    trans: AffineGaussianChannel
    emission: AffineGaussianChannel
    init: GaussianBelief
    control_gain: np.ndarray = None

    def __post_init__(self):
        if self.trans.in_dim != self.trans.out_dim:
            raise DimensionError("transition channel must map K -> K")
        if self.emission.in_dim != self.trans.out_dim:
            raise DimensionError("emission input dim must match the state dim")
        if self.init.dim != self.trans.out_dim:
            raise DimensionError("initial belief must live in state space")
        if self.control_gain is not None:
            gain = np.atleast_2d(np.asarray(self.control_gain, dtype=float))
            if gain.shape[0] != self.trans.out_dim:
                raise DimensionError("control gain rows must match the state dim")
            object.__setattr__(self, "control_gain", gain)

    @property
    def state_dim(self):
        return self.trans.out_dim

    @property
    def obs_dim(self):
        return self.emission.out_dim


@dataclass(frozen=True)
class SsmPosteriors:
    """Filtered, predicted, and smoothed beliefs, the smoothed lag-one cross
    covariances Cov[z_t, z_{t-1} | x_{1:T}], and the sequence log likelihood."""

    filtered: list
    predicted: list
    smoothed: list
    cross_cov: list
    loglik: float


def kf_time_update(belief, params, control=None):
    """Predict: mean = A mu + B u + a, cov = A V A' + Q."""
    offset = params.trans.offset
    if control is not None:
        if params.control_gain is None:
            raise PreconditionError("model has no control gain but controls were given")
        offset = offset + params.control_gain @ np.asarray(control, dtype=float)
    channel = AffineGaussianChannel(params.trans.weights, offset,
                                    params.trans.noise_cov)
    return marginal_cumulants(belief, channel)


def kf_measurement_update(belief, params, obs):
    """Condition on one observation; also return the innovation log evidence.

    Gain K = V C' (C V C' + R)^-1; the covariance update V - K C V is
    symmetrized, and the evidence increment is log N(y; C mu + c, C V C' + R).
    """
    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    if obs.shape[0] != params.obs_dim:
        raise DimensionError("observation length must match the emission dim")
    innovation = marginal_cumulants(belief, params.emission)
    posterior = bayes_invert(belief, params.emission, obs, form="woodbury")
    diff = obs - innovation.mean
    solved = chol_solve_psd(innovation.cov, diff, name="innovation covariance")
    increment = -0.5 * (obs.shape[0] * _LOG_TAU
                        + chol_logdet(innovation.cov, name="innovation covariance")
                        + float(diff @ solved))
    return posterior, float(increment)


class _SsmSteps:
    """The four half-updates on Gaussian beliefs."""

    def __init__(self, params, controls=None):
        self.params = params
        self.controls = controls

    def initial_belief(self):
        return self.params.init

    def _control(self, t):
        return None if self.controls is None else self.controls[t]

    def time_update(self, belief, t):
        return kf_time_update(belief, self.params, self._control(t))

    def measurement_update(self, belief, obs, t):
        return kf_measurement_update(belief, self.params, obs)

    def future_conditioning(self, filtered_prev, predicted_next, t):
        """Smoother gain J_{t-1} = V_{t-1|t-1} A' V_{t|t-1}^-1."""
        A = self.params.trans.weights
        cross = filtered_prev.cov @ A.T
        gain_t = chol_solve_psd(predicted_next.cov, cross.T,
                                name="predicted covariance")
        return gain_t.T

    def backward_step(self, smoothed_next, gain, filtered_prev,
                      predicted_next, t):
        """Update the smoother-filter disparity through the gain.

        mean_{t-1|T} = mean_{t-1|t-1} + J (mean_{t|T} - mean_{t|t-1});
        cov_{t-1|T}  = cov_{t-1|t-1} + J (cov_{t|T} - cov_{t|t-1}) J';
        the pairwise statistic is Cov[z_t, z_{t-1} | x] = cov_{t|T} J'.
        """
        mean = filtered_prev.mean + gain @ (smoothed_next.mean - predicted_next.mean)
        cov = symmetrize(filtered_prev.cov
                         + gain @ (smoothed_next.cov - predicted_next.cov) @ gain.T)
        cross = smoothed_next.cov @ gain.T
        return GaussianBelief(mean, cov), cross


def kalman_filter(params, obs_seq, controls=None):
    """Run the filter over one sequence.

    Returns (filtered, predicted, loglik) where predicted[0] is the initial
    belief and loglik sums the per-step innovation evidence.
    """
    obs_seq = np.atleast_2d(np.asarray(obs_seq, dtype=float))
    steps = _SsmSteps(params, controls)
    return sequential.run_filter(steps, obs_seq)


def rts_smoother(params, filtered, predicted, controls=None):
    """Backward pass over filter output; consumes no observations.

    Returns (smoothed, cross_cov) with cross_cov[t-1] = Cov[z_t, z_{t-1}|x].
    """
    steps = _SsmSteps(params, controls)
    return sequential.run_smoother(steps, filtered, predicted)


def ssm_infer(params, obs_seq, controls=None):
    """Filter plus smoother, packaged as SsmPosteriors."""
    filtered, predicted, loglik = kalman_filter(params, obs_seq, controls)
    smoothed, cross_cov = rts_smoother(params, filtered, predicted, controls)
    return SsmPosteriors(filtered=filtered, predicted=predicted,
                         smoothed=smoothed, cross_cov=cross_cov,
                         loglik=float(loglik))


@dataclass
class LdsStats:
    """Expected sufficient statistics for the M step.

    Transition moments average over t = 2..T (normalizer T-1 per sequence);
    emission moments over all T.  The latent vector is augmented with a
    constant 1 so offsets come out of the same regression.
    """

    trans_cross: np.ndarray   # <z_t [z_{t-1}; u_{t-1}; 1]'>
    trans_gram: np.ndarray    # <[z_{t-1}; u; 1] [z_{t-1}; u; 1]'>
    trans_second: np.ndarray  # <z_t z_t'> over t = 2..T
    emit_cross: np.ndarray    # <x_t [z_t; 1]'>
    emit_gram: np.ndarray     # <[z_t; 1] [z_t; 1]'>
    emit_second: np.ndarray   # <x_t x_t'>
    init_mean: np.ndarray
    init_second: np.ndarray
    n_transitions: int
    n_steps: int
    n_sequences: int
    control_dim: int = 0


def _belief_moment(belief):
    return belief.cov + np.outer(belief.mean, belief.mean)


def lds_e_step(params, sequences, controls=None):
    """Assemble the bracketed moments of the M-step equations from smoother
    means, covariances, and lag-one cross covariances."""
    if isinstance(sequences, SequenceDataset):
        seqs = [mat for _, mat in sequences.sequences]
    else:
        seqs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sequences]
    if controls is None:
        ctrl_seqs = [None] * len(seqs)
        U = 0
    else:
        ctrl_seqs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in controls]
        U = ctrl_seqs[0].shape[1]
    K = params.state_dim
    D = params.obs_dim
    aug = K + U + 1

    stats = LdsStats(
        trans_cross=np.zeros((K, aug)), trans_gram=np.zeros((aug, aug)),
        trans_second=np.zeros((K, K)),
        emit_cross=np.zeros((D, K + 1)), emit_gram=np.zeros((K + 1, K + 1)),
        emit_second=np.zeros((D, D)),
        init_mean=np.zeros(K), init_second=np.zeros((K, K)),
        n_transitions=0, n_steps=0, n_sequences=len(seqs), control_dim=U)
    loglik = 0.0
    for seq, ctrl in zip(seqs, ctrl_seqs):
        post = ssm_infer(params, seq, ctrl)
        T = seq.shape[0]
        loglik += post.loglik
        for t in range(1, T):
            prev, curr = post.smoothed[t - 1], post.smoothed[t]
            cross = post.cross_cov[t - 1]  # Cov[z_t, z_{t-1} | x]
            u = np.zeros(0) if ctrl is None else ctrl[t - 1]
            prev_aug = np.concatenate([prev.mean, u, [1.0]])
            stats.trans_second += _belief_moment(curr)
            cross_moment = cross + np.outer(curr.mean, prev.mean)
            stats.trans_cross[:, :K] += cross_moment
            stats.trans_cross[:, K:] += np.outer(curr.mean, prev_aug[K:])
            gram = np.outer(prev_aug, prev_aug)
            gram[:K, :K] += prev.cov
            stats.trans_gram += gram
        for t in range(T):
            curr = post.smoothed[t]
            aug_mean = np.concatenate([curr.mean, [1.0]])
            stats.emit_cross += np.outer(seq[t], aug_mean)
            gram = np.outer(aug_mean, aug_mean)
            gram[:K, :K] += curr.cov
            stats.emit_gram += gram
            stats.emit_second += np.outer(seq[t], seq[t])
        stats.init_mean += post.smoothed[0].mean
        stats.init_second += _belief_moment(post.smoothed[0])
        stats.n_transitions += T - 1
        stats.n_steps += T
    return stats, loglik


def _floor_cov(cov):
    cov = symmetrize(cov)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] >= COV_FLOOR:
        return cov
    return symmetrize(eigvecs @ np.diag(np.maximum(eigvals, COV_FLOOR)) @ eigvecs.T)


def lds_m_step(stats):
    """Closed-form regressions for (A, B, a), Q, (C, c), R, mu_1, Sigma_1.

    The residual covariances <z z'> - AB <prev z'> are asymmetric in finite
    samples; they are symmetrized and floored.
    """
    K = stats.trans_second.shape[0]
    U = stats.control_dim
    try:
        trans_coef = np.linalg.solve(stats.trans_gram, stats.trans_cross.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularityError("transition second-moment matrix is singular") from exc
    A = trans_coef[:, :K]
    B = trans_coef[:, K:K + U] if U else None
    a = trans_coef[:, -1]
    Q = _floor_cov((stats.trans_second - trans_coef @ stats.trans_cross.T)
                   / stats.n_transitions)

    try:
        emit_coef = np.linalg.solve(stats.emit_gram, stats.emit_cross.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularityError("emission second-moment matrix is singular") from exc
    C = emit_coef[:, :K]
    c = emit_coef[:, -1]
    R = _floor_cov((stats.emit_second - emit_coef @ stats.emit_cross.T)
                   / stats.n_steps)

    mu1 = stats.init_mean / stats.n_sequences
    V1 = _floor_cov(stats.init_second / stats.n_sequences - np.outer(mu1, mu1))
    return SsmParams(
        trans=AffineGaussianChannel(A, a, Q),
        emission=AffineGaussianChannel(C, c, R),
        init=GaussianBelief(mu1, V1),
        control_gain=B,
    )


def lds_free_energy(params, sequences, posteriors, controls=None):
    """Free energy per time step under frozen Gaussian path posteriors.

    E_q[-log joint] uses expected quadratic forms over the stacked
    (z_t, z_{t-1}) posteriors; E_q[log q] is the negative entropy of the
    Gauss-Markov posterior chain.  Equals -loglik/steps after an exact E step.
    """
    if isinstance(sequences, SequenceDataset):
        seqs = [mat for _, mat in sequences.sequences]
    else:
        seqs = [np.atleast_2d(np.asarray(s, dtype=float)) for s in sequences]
    if not isinstance(posteriors, list):
        posteriors = [posteriors]
    if controls is None:
        ctrl_seqs = [None] * len(seqs)
    else:
        ctrl_seqs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in controls]

    K = params.state_dim
    D = params.obs_dim
    A = params.trans.weights
    Q = params.trans.noise_cov
    C = params.emission.weights
    R = params.emission.noise_cov
    Q_logdet = chol_logdet(Q, name="transition noise")
    R_logdet = chol_logdet(R, name="emission noise")
    Q_inv = chol_solve_psd(Q, np.eye(K), name="transition noise")
    R_inv = chol_solve_psd(R, np.eye(D), name="emission noise")
    V1_logdet = chol_logdet(params.init.cov, name="initial covariance")
    V1_inv = chol_solve_psd(params.init.cov, np.eye(K), name="initial covariance")

    total = 0.0
    total_steps = 0
    for seq, post, ctrl in zip(seqs, posteriors, ctrl_seqs):
        T = seq.shape[0]
        # Initial-state term.
        total += 0.5 * (K * _LOG_TAU + V1_logdet + expected_quadratic(
            post.smoothed[0], np.eye(K), V1_inv, params.init.mean))
        # Transition terms via the stacked pair posterior.
        for t in range(1, T):
            prev, curr = post.smoothed[t - 1], post.smoothed[t]
            cross = post.cross_cov[t - 1]
            stacked_mean = np.concatenate([curr.mean, prev.mean])
            stacked_cov = np.block([[curr.cov, cross], [cross.T, prev.cov]])
            pair = GaussianBelief(stacked_mean, symmetrize(stacked_cov))
            offset = params.trans.offset.copy()
            if ctrl is not None:
                offset = offset + params.control_gain @ ctrl[t - 1]
            # (z_t - A z_{t-1} - offset)' Q^-1 (...) as a quadratic in the
            # stacked pair: W [z_t; z_{t-1}] = z_t - A z_{t-1}, b = offset.
            W = np.hstack([np.eye(K), -A])
            total += 0.5 * (K * _LOG_TAU + Q_logdet
                            + expected_quadratic(pair, W, Q_inv, offset))
        # Emission terms.
        for t in range(T):
            total += 0.5 * (D * _LOG_TAU + R_logdet + expected_quadratic(
                post.smoothed[t], C, R_inv, seq[t] - params.emission.offset))
        # Negative entropy of the posterior chain.
        sign, logdet = np.linalg.slogdet(post.smoothed[0].cov)
        entropy = 0.5 * (K * _LOG_TAU + K + logdet)
        for t in range(1, T):
            prev, curr = post.smoothed[t - 1], post.smoothed[t]
            cross = post.cross_cov[t - 1]  # Cov[z_t, z_{t-1}]
            cond_cov = curr.cov - cross @ chol_solve_psd(
                prev.cov, cross.T, name="smoothed covariance")
            sign, logdet = np.linalg.slogdet(symmetrize(cond_cov))
            entropy += 0.5 * (K * _LOG_TAU + K + logdet)
        total -= entropy
        total_steps += T
    return total / total_steps


def sample_ssm(params, T, rng, controls=None):
    """Ancestral draw of one sequence: (states, observations)."""
    K, D = params.state_dim, params.obs_dim
    chol_q = np.linalg.cholesky(params.trans.noise_cov + 1e-12 * np.eye(K))
    chol_r = np.linalg.cholesky(params.emission.noise_cov + 1e-12 * np.eye(D))
    chol_1 = np.linalg.cholesky(params.init.cov + 1e-12 * np.eye(K))
    states = np.empty((T, K))
    obs = np.empty((T, D))
    z = params.init.mean + chol_1 @ rng.standard_normal(K)
    for t in range(T):
        states[t] = z
        obs[t] = (params.emission.weights @ z + params.emission.offset
                  + chol_r @ rng.standard_normal(D))
        if t + 1 < T:
            drift = params.trans.weights @ z + params.trans.offset
            if controls is not None:
                drift = drift + params.control_gain @ controls[t]
            z = drift + chol_q @ rng.standard_normal(K)
    return states, obs


class SsmEmHandle:
    """EM driver adapter over a SequenceDataset (no controls)."""

    def __init__(self, state_dim):
        self.state_dim = state_dim

    def init_params(self, data, rng):
        X = np.vstack([mat for _, mat in data.sequences])
        D = X.shape[1]
        K = self.state_dim
        scale = float(np.sqrt(np.mean(np.var(X, axis=0)))) or 1.0
        A = 0.5 * np.eye(K)
        C = rng.standard_normal((D, K)) * scale / np.sqrt(K)
        return SsmParams(
            trans=AffineGaussianChannel(A, np.zeros(K), np.eye(K)),
            emission=AffineGaussianChannel(C, X.mean(axis=0),
                                           np.eye(D) * max(scale ** 2, 1e-3)),
            init=GaussianBelief(np.zeros(K), np.eye(K)),
        )

    def e_step(self, params, data):
        return [ssm_infer(params, mat) for _, mat in data.sequences]

    def m_step(self, data, posterior):
        K = self.state_dim
        D = data.dim
        aug = K + 1
        stats = LdsStats(
            trans_cross=np.zeros((K, aug)), trans_gram=np.zeros((aug, aug)),
            trans_second=np.zeros((K, K)),
            emit_cross=np.zeros((D, K + 1)), emit_gram=np.zeros((K + 1, K + 1)),
            emit_second=np.zeros((D, D)),
            init_mean=np.zeros(K), init_second=np.zeros((K, K)),
            n_transitions=0, n_steps=0, n_sequences=data.n_sequences)
        for (_, seq), post in zip(data.sequences, posterior):
            T = seq.shape[0]
            for t in range(1, T):
                prev, curr = post.smoothed[t - 1], post.smoothed[t]
                cross = post.cross_cov[t - 1]
                prev_aug = np.concatenate([prev.mean, [1.0]])
                stats.trans_second += _belief_moment(curr)
                stats.trans_cross[:, :K] += cross + np.outer(curr.mean, prev.mean)
                stats.trans_cross[:, K:] += curr.mean[:, None]
                gram = np.outer(prev_aug, prev_aug)
                gram[:K, :K] += prev.cov
                stats.trans_gram += gram
            for t in range(T):
                curr = post.smoothed[t]
                aug_mean = np.concatenate([curr.mean, [1.0]])
                stats.emit_cross += np.outer(seq[t], aug_mean)
                gram = np.outer(aug_mean, aug_mean)
                gram[:K, :K] += curr.cov
                stats.emit_gram += gram
                stats.emit_second += np.outer(seq[t], seq[t])
            stats.init_mean += post.smoothed[0].mean
            stats.init_second += _belief_moment(post.smoothed[0])
            stats.n_transitions += T - 1
            stats.n_steps += T
        return lds_m_step(stats)

    def free_energy(self, params, data, posterior):
        return lds_free_energy(params, data, posterior)
