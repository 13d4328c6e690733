"""HMM filter/smoother/EM against brute-force path enumeration."""

import itertools

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from lvmkit.data import SequenceDataset
from lvmkit.exceptions import EmptyComponentError
from lvmkit.hmm import (
    HmmEmHandle,
    HmmParams,
    emission_log_likelihoods,
    hmm_alpha,
    hmm_e_step,
    hmm_filter,
    hmm_free_energy,
    hmm_m_step,
    hmm_smoother,
    sample_hmm,
)
from lvmkit.information import EmConfig, run_em

from conftest import random_cov, random_simplex


def _random_params(rng, k=3, d=2, spread=2.0):
    trans = np.stack([random_simplex(rng, k) for _ in range(k)], axis=1)
    return HmmParams(
        init=random_simplex(rng, k),
        trans=trans,
        means=rng.standard_normal((k, d)) * spread,
        covs=np.stack([random_cov(rng, d) for _ in range(k)]),
    )


def enumerate_posteriors(params, obs):
    """Brute force: weight every state path by its joint probability.

    Returns (filter table, smoother table, pairwise list, loglik); the
    filter at t enumerates prefixes, the smoother full paths.
    """
    T = obs.shape[0]
    K = params.n_states
    liks = np.exp(emission_log_likelihoods(params, obs))

    # Smoother and pairwise from full paths.
    path_probs = {}
    for path in itertools.product(range(K), repeat=T):
        p = params.init[path[0]] * liks[0, path[0]]
        for t in range(1, T):
            p *= params.trans[path[t], path[t - 1]] * liks[t, path[t]]
        path_probs[path] = p
    total = sum(path_probs.values())
    smoother = np.zeros((T, K))
    pairwise = [np.zeros((K, K)) for _ in range(T - 1)]
    for path, p in path_probs.items():
        for t in range(T):
            smoother[t, path[t]] += p
        for t in range(1, T):
            pairwise[t - 1][path[t], path[t - 1]] += p
    smoother /= total
    pairwise = [table / total for table in pairwise]

    # Filter at t: enumerate prefixes of length t+1.
    filt = np.zeros((T, K))
    for t in range(T):
        probs = np.zeros(K)
        for prefix in itertools.product(range(K), repeat=t + 1):
            p = params.init[prefix[0]] * liks[0, prefix[0]]
            for s in range(1, t + 1):
                p *= params.trans[prefix[s], prefix[s - 1]] * liks[s, prefix[s]]
            probs[prefix[t]] += p
        filt[t] = probs / probs.sum()
    return filt, smoother, pairwise, float(np.log(total))


class TestFilter:
    def test_single_state(self, rng):
        params = _random_params(rng, k=1)
        obs = rng.standard_normal((5, 2))
        rows, log_norms = hmm_filter(params, obs)
        np.testing.assert_allclose(rows, 1.0)
        want = sum(multivariate_normal.logpdf(x, params.means[0], params.covs[0])
                   for x in obs)
        assert log_norms.sum() == pytest.approx(want, abs=1e-10)

    def test_identity_transitions_concentrate(self, rng):
        K, T = 3, 8
        means = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
        params = HmmParams(init=np.full(K, 1 / K), trans=np.eye(K),
                           means=means, covs=np.stack([np.eye(2)] * K))
        gen = np.random.default_rng(0)
        obs = means[1] + gen.standard_normal((T, 2))
        rows, _ = hmm_filter(params, obs)
        mass = rows[:, 1]
        assert np.all(np.diff(mass) >= -1e-12)
        assert mass[-1] > 0.999
        filt, _, _, _ = enumerate_posteriors(params, obs)
        np.testing.assert_allclose(rows, filt, atol=1e-10)

    def test_uninformative_observations_follow_chain(self, rng):
        K = 3
        trans = np.stack([random_simplex(rng, K) for _ in range(K)], axis=1)
        shared_mean = np.zeros(2)
        params = HmmParams(init=np.full(K, 1 / K), trans=trans,
                           means=np.tile(shared_mean, (K, 1)),
                           covs=np.stack([np.eye(2)] * K))
        obs = rng.standard_normal((6, 2))
        rows, _ = hmm_filter(params, obs)
        predicted = np.full(K, 1 / K)
        for t in range(6):
            np.testing.assert_allclose(rows[t], predicted, atol=1e-12)
            predicted = trans @ predicted


class TestSmoother:
    def test_t1_smoother_equals_filter(self, rng):
        params = _random_params(rng)
        obs = rng.standard_normal((1, 2))
        post = hmm_smoother(params, obs)
        np.testing.assert_allclose(post.smoother, post.filter)

    def test_single_state_degenerate(self, rng):
        params = _random_params(rng, k=1)
        post = hmm_smoother(params, rng.standard_normal((4, 2)))
        np.testing.assert_allclose(post.smoother, 1.0)
        for table in post.pairwise:
            np.testing.assert_allclose(table, 1.0)

    def test_path_enumeration_oracle(self, rng):
        params = _random_params(rng, k=3)
        obs = rng.standard_normal((6, 2)) * 2
        post = hmm_smoother(params, obs)
        filt, smooth, pairwise, loglik = enumerate_posteriors(params, obs)
        np.testing.assert_allclose(post.filter, filt, atol=1e-10)
        np.testing.assert_allclose(post.smoother, smooth, atol=1e-10)
        for got, want in zip(post.pairwise, pairwise):
            np.testing.assert_allclose(got, want, atol=1e-10)
        assert post.loglik == pytest.approx(loglik, abs=1e-10)

    def test_posterior_tables_normalize(self, rng):
        params = _random_params(rng, k=4)
        post = hmm_smoother(params, rng.standard_normal((7, 2)))
        np.testing.assert_allclose(post.filter.sum(axis=1), 1.0, atol=1e-10)
        np.testing.assert_allclose(post.smoother.sum(axis=1), 1.0, atol=1e-10)
        for t, table in enumerate(post.pairwise):
            assert table.sum() == pytest.approx(1.0, abs=1e-10)
            np.testing.assert_allclose(table.sum(axis=0), post.smoother[t],
                                       atol=1e-10)

    def test_future_revises_initial_state(self):
        """A surprising later observation shifts the smoothed initial row by
        a visible margin."""
        means = np.array([[0.0], [4.0]])
        params = HmmParams(
            init=np.array([0.5, 0.5]),
            trans=np.array([[0.95, 0.05], [0.05, 0.95]]),
            means=means, covs=np.stack([np.eye(1) * 4.0] * 2))
        obs = np.array([[2.0], [4.0], [4.0], [4.0]])
        post = hmm_smoother(params, obs)
        tv = 0.5 * np.abs(post.smoother[0] - post.filter[0]).sum()
        assert tv >= 0.05


class TestAlpha:
    def test_first_row(self, rng):
        params = _random_params(rng)
        obs = rng.standard_normal((1, 2))
        alphas, _ = hmm_alpha(params, obs)
        liks = np.exp(emission_log_likelihoods(params, obs))
        np.testing.assert_allclose(alphas[0], params.init * liks[0], atol=1e-12)

    def test_normalized_alphas_match_filter(self, rng):
        params = _random_params(rng)
        obs = rng.standard_normal((6, 2))
        alphas, loglik = hmm_alpha(params, obs)
        rows, log_norms = hmm_filter(params, obs)
        np.testing.assert_allclose(alphas / alphas.sum(axis=1, keepdims=True),
                                   rows, atol=1e-10)
        assert loglik == pytest.approx(log_norms.sum(), abs=1e-10)
        assert alphas[-1].sum() == pytest.approx(np.exp(loglik), rel=1e-10)

    def test_k2_t3_hand_enumeration(self, rng):
        params = _random_params(rng, k=2, d=1)
        obs = rng.standard_normal((3, 1))
        liks = np.exp(emission_log_likelihoods(params, obs))
        want = np.zeros(2)
        for path in itertools.product(range(2), repeat=3):
            p = params.init[path[0]] * liks[0, path[0]]
            p *= params.trans[path[1], path[0]] * liks[1, path[1]]
            p *= params.trans[path[2], path[1]] * liks[2, path[2]]
            want[path[2]] += p
        alphas, _ = hmm_alpha(params, obs)
        np.testing.assert_allclose(alphas[2], want, atol=1e-12)


class TestEm:
    def test_fully_observed_counts(self, rng):
        """Degenerate posteriors turn the M step into raw counting."""
        params = _random_params(rng, k=2, d=1, spread=8.0)
        # Tight emissions make the smoother effectively one-hot.
        params = HmmParams(params.init, params.trans, params.means,
                           np.stack([np.eye(1) * 1e-4] * 2))
        gen = np.random.default_rng(3)
        states, obs = sample_hmm(params, 200, gen)
        stats, _ = hmm_e_step(params, [obs])
        fitted = hmm_m_step(stats)
        counts = np.zeros((2, 2))
        for t in range(1, 200):
            counts[states[t], states[t - 1]] += 1
        want_trans = counts / counts.sum(axis=0, keepdims=True)
        np.testing.assert_allclose(fitted.trans, want_trans, atol=1e-6)

    def test_single_state_occupancy(self, rng):
        params = _random_params(rng, k=1)
        obs = rng.standard_normal((9, 2))
        stats, _ = hmm_e_step(params, [obs])
        assert stats.occupancy[0] == pytest.approx(9.0, abs=1e-12)

    def test_m_step_loop_oracle(self, rng):
        params = _random_params(rng, k=3)
        seqs = [rng.standard_normal((5, 2)), rng.standard_normal((7, 2))]
        stats, _ = hmm_e_step(params, seqs)
        fitted = hmm_m_step(stats)
        # Loop oracle over enumerated posteriors.
        gammas = []
        pairs_total = np.zeros((3, 3))
        for seq in seqs:
            _, smooth, pairwise, _ = enumerate_posteriors(params, seq)
            gammas.append(smooth)
            for table in pairwise:
                pairs_total += table
        init_want = (gammas[0][0] + gammas[1][0]) / 2.0
        np.testing.assert_allclose(fitted.init, init_want, atol=1e-10)
        denom = sum(g[:-1].sum(axis=0) for g in gammas)
        np.testing.assert_allclose(fitted.trans, pairs_total / denom[None, :],
                                   atol=1e-10)
        occupancy = sum(g.sum(axis=0) for g in gammas)
        means_want = sum(g.T @ seq for g, seq in zip(gammas, seqs)) \
            / occupancy[:, None]
        np.testing.assert_allclose(fitted.means, means_want, atol=1e-10)

    def test_column_stochastic_preserved(self, rng):
        params = _random_params(rng, k=4)
        seqs = [rng.standard_normal((6, 2)) for _ in range(3)]
        stats, _ = hmm_e_step(params, seqs)
        fitted = hmm_m_step(stats)
        np.testing.assert_allclose(fitted.trans.sum(axis=0), 1.0, atol=1e-12)

    def test_zero_visit_state_raises(self, rng):
        from lvmkit.hmm import HmmStats
        stats = HmmStats(
            initial=np.array([1.0, 0.0]), pair_counts=np.zeros((2, 2)),
            prev_occupancy=np.array([3.0, 0.0]),
            occupancy=np.array([4.0, 0.0]),
            obs_sum=np.zeros((2, 1)), obs_outer=np.zeros((2, 1, 1)),
            n_sequences=1)
        with pytest.raises(EmptyComponentError):
            hmm_m_step(stats)

    def test_em_monotonic_and_bound_tight(self):
        for seed in range(6):
            gen = np.random.default_rng(seed)
            true = _random_params(gen, k=2, d=1, spread=4.0)
            seqs = [sample_hmm(true, 30, gen)[1] for _ in range(3)]
            data = SequenceDataset([(str(i), s) for i, s in enumerate(seqs)])
            report = run_em(HmmEmHandle(2), data,
                            EmConfig(max_iter=15, tol=1e-12, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-9)
            # Bound tightness: F after final E step = -loglik per step.
            params = report.final_params
            posteriors = [hmm_smoother(params, s) for s in seqs]
            fe = hmm_free_energy(params, seqs, posteriors)
            total_ll = sum(p.loglik for p in posteriors)
            total_T = sum(s.shape[0] for s in seqs)
            assert fe == pytest.approx(-total_ll / total_T, abs=1e-9)
