"""Shared driver for Markov-chain inference.

Filtering is a repeated (time update, measurement update) pair; smoothing is
a repeated (future conditioning, backward step) pair.  The HMM and the
linear-Gaussian SSM provide different algebra for the four half-updates but
compose them identically, so both run through this driver.
"""


def run_filter(steps, observations):
    """Forward pass: alternate measurement and time updates.

    `steps` must provide `initial_belief()`, `time_update(belief, t)` and
    `measurement_update(belief, obs, t) -> (belief, log_evidence_increment)`.
    Returns (filtered, predicted, loglik): predicted[t] is the belief before
    the measurement at t, with predicted[0] the prior on the initial state.
    """
    predicted = [steps.initial_belief()]
    filtered = []
    loglik = 0.0
    for t, obs in enumerate(observations):
        belief, increment = steps.measurement_update(predicted[-1], obs, t)
        filtered.append(belief)
        loglik += increment
        if t + 1 < len(observations):
            predicted.append(steps.time_update(belief, t))
    return filtered, predicted, loglik


def run_smoother(steps, filtered, predicted):
    """Backward pass: future conditioning then the backward step, per t.

    `steps` must provide `future_conditioning(filtered_prev, predicted_next,
    t)` returning the reverse-transition statistic, and
    `backward_step(smoothed_next, reverse, filtered_prev, predicted_next, t)`
    returning (smoothed_prev, pairwise).  Consumes filter statistics only;
    never re-reads the observations.
    """
    T = len(filtered)
    smoothed = [None] * T
    pairwise = [None] * (T - 1)
    smoothed[T - 1] = filtered[T - 1]
    for t in range(T - 1, 0, -1):
        reverse = steps.future_conditioning(filtered[t - 1], predicted[t], t)
        smoothed[t - 1], pairwise[t - 1] = steps.backward_step(
            smoothed[t], reverse, filtered[t - 1], predicted[t], t)
    return smoothed, pairwise
