"""Structural parity: the HMM and the state-space model run their four
half-updates through the same driver code path."""

import numpy as np

import lvmkit.sequential as sequential
from lvmkit.hmm import HmmParams, hmm_smoother
from lvmkit.kalman import sample_ssm, ssm_infer

from conftest import random_simplex
from test_kalman import _random_params as _random_ssm


def test_both_models_use_the_shared_driver(rng, monkeypatch):
    calls = {"filter": [], "smoother": []}
    real_filter = sequential.run_filter
    real_smoother = sequential.run_smoother

    def spy_filter(steps, observations):
        calls["filter"].append(type(steps).__name__)
        return real_filter(steps, observations)

    def spy_smoother(steps, filtered, predicted):
        calls["smoother"].append(type(steps).__name__)
        return real_smoother(steps, filtered, predicted)

    monkeypatch.setattr(sequential, "run_filter", spy_filter)
    monkeypatch.setattr(sequential, "run_smoother", spy_smoother)

    hmm_params = HmmParams(
        init=random_simplex(rng, 2),
        trans=np.stack([random_simplex(rng, 2) for _ in range(2)], axis=1),
        means=np.array([[-2.0], [2.0]]),
        covs=np.stack([np.eye(1)] * 2))
    hmm_smoother(hmm_params, rng.standard_normal((5, 1)))

    ssm_params = _random_ssm(rng, k=2, d=2)
    _, obs = sample_ssm(ssm_params, 5, rng)
    ssm_infer(ssm_params, obs)

    assert calls["filter"] == ["_HmmSteps", "_SsmSteps"]
    assert calls["smoother"] == ["_HmmSteps", "_SsmSteps"]


def test_driver_composition_is_identical(rng):
    """Same sequence of half-updates in both models: the driver composes
    measurement/time updates forward and future-conditioning/backward steps
    backward, regardless of the belief algebra."""
    events = []

    class Probe:
        def initial_belief(self):
            return "b0"

        def time_update(self, belief, t):
            events.append(("time", t))
            return f"p{t + 1}"

        def measurement_update(self, belief, obs, t):
            events.append(("measure", t))
            return f"f{t}", 0.0

        def future_conditioning(self, filtered_prev, predicted_next, t):
            events.append(("condition", t))
            return None

        def backward_step(self, smoothed_next, reverse, filtered_prev,
                          predicted_next, t):
            events.append(("backward", t))
            return f"s{t - 1}", None

    filtered, predicted, _ = sequential.run_filter(Probe(), [0, 1, 2])
    sequential.run_smoother(Probe(), filtered, predicted)
    assert events == [
        ("measure", 0), ("time", 0), ("measure", 1), ("time", 1),
        ("measure", 2),
        ("condition", 2), ("backward", 2), ("condition", 1), ("backward", 1),
    ]
