"""Particle filter/smoother against the exact discrete-chain recursions and a
Kalman moment oracle."""

import numpy as np
import pytest

from lvmkit.exceptions import UnderflowError
from lvmkit.hmm import HmmParams, emission_log_likelihoods, hmm_smoother
from lvmkit.particle import (
    ParticleCloud,
    enumerate_time_update,
    particle_smoother,
    pf_measurement_update,
    pf_time_update,
    run_particle_filter,
)

from conftest import random_simplex


def _toy_hmm(rng, k=3):
    trans = np.stack([random_simplex(rng, k) for _ in range(k)], axis=1)
    means = np.linspace(-3, 3, k)[:, None]
    return HmmParams(init=random_simplex(rng, k), trans=trans, means=means,
                     covs=np.stack([np.eye(1)] * k))


class TestTimeUpdate:
    def test_single_particle(self, rng):
        cloud = ParticleCloud(particles=np.array([[2.0]]),
                              filter_weights=np.array([1.0]))
        out = pf_time_update(cloud, lambda p, r: p + 1.0, rng)
        np.testing.assert_allclose(out.particles, [[3.0]])
        np.testing.assert_allclose(out.filter_weights, [1.0])

    def test_identity_dynamics_is_bootstrap_resample(self, rng):
        particles = rng.standard_normal((50, 2))
        cloud = ParticleCloud(particles=particles,
                              filter_weights=np.full(50, 0.02))
        out = pf_time_update(cloud, lambda p, r: p, rng)
        # Every output row is one of the input rows; weights uniform.
        for row in out.particles:
            assert np.any(np.all(np.isclose(particles, row), axis=1))
        np.testing.assert_allclose(out.filter_weights, 0.02)

    def test_linear_gaussian_matches_kalman_moment(self, rng):
        """Propagated cloud mean tracks the time-update mean within MC error."""
        n = 100_000
        A = np.array([[0.8]])
        q = 0.3
        mean0, var0 = 1.5, 0.49
        particles = (mean0 + np.sqrt(var0) * rng.standard_normal(n))[:, None]
        cloud = ParticleCloud(particles=particles,
                              filter_weights=np.full(n, 1.0 / n))

        def dynamics(p, r):
            return p @ A.T + np.sqrt(q) * r.standard_normal((p.shape[0], 1))

        out = pf_time_update(cloud, dynamics, rng)
        want_mean = 0.8 * mean0
        want_var = 0.64 * var0 + q
        se = np.sqrt(want_var / n)
        assert abs(out.particles.mean() - want_mean) < 3 * se


class TestMeasurementUpdate:
    def test_constant_likelihood_keeps_uniform(self, rng):
        cloud = ParticleCloud(particles=rng.standard_normal((10, 1)),
                              filter_weights=np.full(10, 0.1))
        out = pf_measurement_update(cloud, lambda p, y: np.zeros(p.shape[0]), 0.0)
        np.testing.assert_allclose(out.filter_weights, 0.1, atol=1e-15)

    def test_sharp_likelihood_concentrates(self, rng):
        particles = np.vstack([np.zeros((1, 1)), rng.standard_normal((9, 1)) + 5])
        cloud = ParticleCloud(particles=particles,
                              filter_weights=np.full(10, 0.1))

        def log_lik(p, y):
            return -0.5 * ((p[:, 0] - y) ** 2) / 1e-6

        out = pf_measurement_update(cloud, log_lik, 0.0)
        assert out.filter_weights[0] > 1 - 1e-9

    def test_matches_exact_hmm_measurement_update(self, rng):
        params = _toy_hmm(rng)
        y = np.array([0.4])
        log_liks = emission_log_likelihoods(params, y[None, :])[0]
        predicted = params.trans @ params.init
        cloud = ParticleCloud(particles=params.means,
                              filter_weights=predicted)
        out = pf_measurement_update(
            cloud, lambda p, obs: log_liks, y)
        want = predicted * np.exp(log_liks)
        want /= want.sum()
        np.testing.assert_allclose(out.filter_weights, want, atol=1e-12)

    def test_all_zero_likelihood_raises(self, rng):
        cloud = ParticleCloud(particles=rng.standard_normal((5, 1)),
                              filter_weights=np.full(5, 0.2))
        with pytest.raises(UnderflowError):
            pf_measurement_update(cloud,
                                  lambda p, y: np.full(5, -np.inf), 0.0)


class TestSmoother:
    def test_t1_smoother_is_filter(self, rng):
        cloud = ParticleCloud(particles=rng.standard_normal((4, 1)),
                              filter_weights=random_simplex(rng, 4))
        out = particle_smoother([cloud], lambda nxt, prev: np.ones((4, 4)))
        np.testing.assert_allclose(out[0].smoother_weights,
                                   out[0].filter_weights)

    def test_uninformative_transitions_keep_filter(self, rng):
        clouds = [ParticleCloud(particles=rng.standard_normal((5, 1)),
                                filter_weights=random_simplex(rng, 5))
                  for _ in range(4)]
        out = particle_smoother(clouds,
                                lambda nxt, prev: np.ones((nxt.shape[0],
                                                           prev.shape[0])))
        for cloud in out:
            np.testing.assert_allclose(cloud.smoother_weights,
                                       cloud.filter_weights, atol=1e-12)

    def test_exact_support_reproduces_hmm(self, rng):
        """Particles enumerating the states with exact filter weights give
        back the gamma tables exactly."""
        params = _toy_hmm(rng)
        gen = np.random.default_rng(5)
        obs = gen.standard_normal((6, 1)) * 2
        post = hmm_smoother(params, obs)
        state_particles = np.arange(3, dtype=float)[:, None]
        clouds = [ParticleCloud(particles=state_particles,
                                filter_weights=post.filter[t])
                  for t in range(6)]

        def transition_density(nxt, prev):
            nxt_idx = nxt[:, 0].astype(int)
            prev_idx = prev[:, 0].astype(int)
            return params.trans[np.ix_(nxt_idx, prev_idx)]

        out = particle_smoother(clouds, transition_density)
        for t in range(6):
            np.testing.assert_allclose(out[t].smoother_weights,
                                       post.smoother[t], atol=1e-12)

    def test_weights_stay_simplices(self, rng):
        clouds = [ParticleCloud(particles=rng.standard_normal((8, 1)),
                                filter_weights=random_simplex(rng, 8))
                  for _ in range(5)]

        def dens(nxt, prev):
            d = nxt[:, 0][:, None] - prev[:, 0][None, :]
            return np.exp(-0.5 * d ** 2)

        out = particle_smoother(clouds, dens)
        for cloud in out:
            assert abs(cloud.smoother_weights.sum() - 1.0) < 1e-12
            assert np.all(cloud.smoother_weights >= 0)


class TestExactSupportFilter:
    def test_full_filter_loop_on_exact_support(self, rng):
        """Measurement update + enumerated time update reproduce the scaled
        HMM filter on the state support."""
        params = _toy_hmm(rng)
        gen = np.random.default_rng(11)
        obs = gen.standard_normal((10, 1)) * 2
        from lvmkit.hmm import hmm_filter
        rows, _ = hmm_filter(params, obs)
        log_liks = emission_log_likelihoods(params, obs)
        state_particles = np.arange(3, dtype=float)[:, None]
        cloud = ParticleCloud(particles=state_particles,
                              filter_weights=params.init)
        for t in range(10):
            cloud = pf_measurement_update(
                cloud, lambda p, y, t=t: log_liks[t], obs[t])
            np.testing.assert_allclose(cloud.filter_weights, rows[t],
                                       atol=1e-12)
            if t + 1 < 10:
                cloud = enumerate_time_update(cloud, params.trans)

    def test_effective_sample_size(self):
        cloud = ParticleCloud(particles=np.zeros((4, 1)),
                              filter_weights=np.full(4, 0.25))
        assert cloud.effective_sample_size() == pytest.approx(4.0)


class TestStochasticConvergence:
    def test_hmm_filter_tv_convergence_single_seed(self, rng):
        """One seed of the acceptance-scale check: TV < 0.01 at N = 1e5."""
        params = _toy_hmm(rng)
        gen = np.random.default_rng(99)
        T = 10
        # Sample a state/observation sequence from the model.
        states = [gen.choice(3, p=params.init)]
        for _ in range(T - 1):
            states.append(gen.choice(3, p=params.trans[:, states[-1]]))
        obs = np.array([[params.means[s, 0] + gen.standard_normal()]
                        for s in states])
        from lvmkit.hmm import hmm_filter
        rows, _ = hmm_filter(params, obs)

        def initial(n, r):
            return r.choice(3, size=n, p=params.init).astype(float)[:, None]

        def dynamics(p, r):
            idx = p[:, 0].astype(int)
            u = r.random(idx.shape[0])
            cdf = np.cumsum(params.trans, axis=0)
            return np.array([np.searchsorted(cdf[:, i], ui) for i, ui
                             in zip(idx, u)], dtype=float)[:, None]

        def log_lik(p, y):
            return -0.5 * (y[0] - params.means[p[:, 0].astype(int), 0]) ** 2

        clouds = run_particle_filter(initial, dynamics, log_lik, obs,
                                     100_000, np.random.default_rng(1))
        for t in (0, T - 1):
            mass = np.zeros(3)
            idx = clouds[t].particles[:, 0].astype(int)
            np.add.at(mass, idx, clouds[t].filter_weights)
            tv = 0.5 * np.abs(mass - rows[t]).sum()
            assert tv < 0.01
