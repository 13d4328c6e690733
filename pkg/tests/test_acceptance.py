"""Acceptance suite: one test per criterion, each printing a pass/fail line
and enforcing both the stated numerical tolerance and the runtime budget.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
"""

import itertools
import time

import numpy as np
import pytest

from lvmkit.data import SequenceDataset
from lvmkit.factor_analysis import FaEmHandle, fa_free_energy, fa_log_marginal, pca_iterate
from lvmkit.gaussian import GaussianBelief, expected_quadratic, sherman_morrison, woodbury_inverse
from lvmkit.gmm import GmmEmHandle, GmmParams, gmm_e_step, gmm_free_energy, gmm_log_marginal, kmeans
from lvmkit.hmm import (
    HmmEmHandle,
    HmmParams,
    hmm_free_energy,
    hmm_smoother,
    sample_hmm,
)
from lvmkit.information import (
    DiscreteLatentModel,
    EmConfig,
    bits_back_costs,
    cross_entropy,
    entropy,
    kl,
    run_em,
)
from lvmkit.kalman import SsmEmHandle, lds_free_energy, sample_ssm, ssm_infer
from lvmkit.particle import ParticleCloud, particle_smoother, pf_measurement_update, run_particle_filter
from lvmkit.rbm import (
    BinaryBatch,
    RbmParams,
    cd_n_gradient,
    data_log_likelihood,
    enumerated_kl_to_data,
    exact_kl_gradient,
    train_cd,
)
from lvmkit.regression import FAMILIES, IcaModel, ica_fit, ica_gradient, ica_loss, irls_fit, ols_fit
from lvmkit.sparse_coding import (
    SparseCodingEmHandle,
    SparseCodingParams,
    bpdn_solve,
    bpdn_subgradient_residual,
    sc_log_marginal,
    sc_recognition,
    sample_sparse_coding,
)

from conftest import random_cov, random_simplex
from test_hmm import enumerate_posteriors
from test_kalman import _condition_joint, _random_params as _random_ssm, _sequence_joint
from test_sparse_coding import _sign_pattern_oracle


def _report(number, description, budget_s, started):
    elapsed = time.perf_counter() - started
    print(f"[PASS] criterion {number}: {description} ({elapsed:.3f}s)")
    assert elapsed < budget_s, (
        f"criterion {number} exceeded its {budget_s}s budget: {elapsed:.3f}s")


class TestAcceptance:
    def test_criterion_1_guessing_game(self):
        started = time.perf_counter()
        game = np.array([0.5, 0.25, 0.125, 0.125])
        uniform = np.full(4, 0.25)
        assert abs(entropy(game, base=2) - 1.75) < 1e-12
        assert abs(cross_entropy(game, uniform, base=2) - 2.0) < 1e-12
        assert abs(cross_entropy(uniform, game, base=2) - 2.25) < 1e-12
        assert abs(kl(uniform, game, base=2) - 0.25) < 1e-12
        _report(1, "guessing-game entropies exact to 1e-12", 1e-3, started)

    def test_criterion_2_bits_back_identity(self):
        started = time.perf_counter()
        rng = np.random.default_rng(2024)
        for _ in range(50):
            emission = np.stack([random_simplex(rng, 6) for _ in range(3)])
            model = DiscreteLatentModel(source=random_simplex(rng, 3),
                                        emission=emission)
            data = random_simplex(rng, 6)
            exact = bits_back_costs(model, data, proxy="exact")
            # H_x = H(Z) + H(X|Z) - H(Z|X), all enumerated.
            assert abs(exact.stochastic_cost_before_refund - exact.refund
                       - exact.marginal_cross_entropy) < 1e-10
            assert abs(exact.proxy_kl) < 1e-10
            hard = bits_back_costs(model, data, proxy="hard")
            assert abs(hard.hard_assignment_cost
                       - exact.marginal_cross_entropy - hard.proxy_kl) < 1e-10
        _report(2, "bits-back identity and hard-assignment excess to 1e-10",
                1.0, started)

    def test_criterion_3_em_monotonicity_and_tightness(self):
        started = time.perf_counter()
        checked = 0
        for seed in range(25):  # GMM, K <= 5, D <= 3
            gen = np.random.default_rng(seed)
            K = int(gen.integers(2, 6))
            D = int(gen.integers(1, 4))
            X = gen.standard_normal((50, D)) + gen.integers(-3, 4, size=(50, D))
            report = run_em(GmmEmHandle(K), X,
                            EmConfig(max_iter=8, tol=0.0, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-9)
            params = report.final_params
            resp = gmm_e_step(params, X)
            tight = gmm_free_energy(params, X, resp)
            marginal = -np.mean([gmm_log_marginal(params, x) for x in X])
            assert abs(tight - marginal) < 1e-9
            checked += 1
        for seed in range(25):  # FA, K <= 3, D <= 6
            gen = np.random.default_rng(100 + seed)
            K = int(gen.integers(1, 4))
            D = int(gen.integers(K + 1, 7))
            X = gen.standard_normal((60, D)) @ np.diag(gen.uniform(0.5, 2.0, D))
            handle = FaEmHandle(K)
            report = run_em(handle, X, EmConfig(max_iter=8, tol=0.0, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-9)
            params = report.final_params
            posterior = handle.e_step(params, X)
            tight = fa_free_energy(params, X, posterior)
            marginal = -np.mean([fa_log_marginal(params, x) for x in X])
            assert abs(tight - marginal) < 1e-9
            checked += 1
        for seed in range(25):  # HMM, K <= 4
            gen = np.random.default_rng(200 + seed)
            K = int(gen.integers(2, 5))
            true = HmmParams(
                init=random_simplex(gen, K),
                trans=np.stack([random_simplex(gen, K) for _ in range(K)], axis=1),
                means=gen.standard_normal((K, 1)) * 3,
                covs=np.stack([np.eye(1)] * K))
            seqs = [sample_hmm(true, 20, gen)[1] for _ in range(3)]
            data = SequenceDataset([(str(i), s) for i, s in enumerate(seqs)])
            report = run_em(HmmEmHandle(K), data,
                            EmConfig(max_iter=6, tol=0.0, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-9)
            params = report.final_params
            posts = [hmm_smoother(params, s) for s in seqs]
            tight = hmm_free_energy(params, seqs, posts)
            marginal = -sum(p.loglik for p in posts) / sum(s.shape[0] for s in seqs)
            assert abs(tight - marginal) < 1e-9
            checked += 1
        for seed in range(25):  # LDS, K <= 3
            gen = np.random.default_rng(300 + seed)
            K = int(gen.integers(1, 4))
            true = _random_ssm(gen, k=K, d=2)
            seqs = [sample_ssm(true, 15, gen)[1] for _ in range(2)]
            data = SequenceDataset([(str(i), s) for i, s in enumerate(seqs)])
            report = run_em(SsmEmHandle(K), data,
                            EmConfig(max_iter=5, tol=0.0, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-9)
            params = report.final_params
            posts = [ssm_infer(params, s) for s in seqs]
            tight = lds_free_energy(params, seqs, posts)
            marginal = -sum(p.loglik for p in posts) / sum(s.shape[0] for s in seqs)
            assert abs(tight - marginal) < 1e-9
            checked += 1
        assert checked == 100
        _report(3, "EM monotone (1e-9/step) and bound tight over 100 instances",
                60.0, started)

    def test_criterion_4_inference_exactness(self):
        started = time.perf_counter()
        rng = np.random.default_rng(4)
        for _ in range(5):  # HMM vs path enumeration, K <= 4, T <= 8
            K = int(rng.integers(2, 5))
            T = int(rng.integers(3, 9))
            params = HmmParams(
                init=random_simplex(rng, K),
                trans=np.stack([random_simplex(rng, K) for _ in range(K)], axis=1),
                means=rng.standard_normal((K, 2)) * 2,
                covs=np.stack([random_cov(rng, 2) for _ in range(K)]))
            obs = rng.standard_normal((T, 2)) * 2
            post = hmm_smoother(params, obs)
            filt, smooth, pairwise, loglik = enumerate_posteriors(params, obs)
            assert np.max(np.abs(post.filter - filt)) < 1e-10
            assert np.max(np.abs(post.smoother - smooth)) < 1e-10
            for got, want in zip(post.pairwise, pairwise):
                assert np.max(np.abs(got - want)) < 1e-10
            assert abs(post.loglik - loglik) < 1e-10
        for _ in range(5):  # Kalman/RTS vs full-joint conditioning
            K = int(rng.integers(1, 4))
            D = int(rng.integers(1, 4))
            T = int(rng.integers(2, 7))
            params = _random_ssm(rng, k=K, d=D)
            obs = rng.standard_normal((T, D))
            post = ssm_infer(params, obs)
            mean, cov = _sequence_joint(params, T)
            cmean, ccov = _condition_joint(mean, cov, obs.ravel(), T * K)
            for t in range(T):
                sl = slice(t * K, (t + 1) * K)
                assert np.max(np.abs(post.smoothed[t].mean - cmean[sl])) < 1e-9
                assert np.max(np.abs(post.smoothed[t].cov - ccov[sl, sl])) < 1e-9
            for t in range(1, T):
                want = ccov[t * K:(t + 1) * K, (t - 1) * K:t * K]
                assert np.max(np.abs(post.cross_cov[t - 1] - want)) < 1e-9
        _report(4, "HMM enumeration (1e-10) and Kalman/RTS joint-conditioning (1e-9)",
                30.0, started)

    def test_criterion_5_limits(self):
        started = time.perf_counter()
        rng = np.random.default_rng(5)
        # K-means limit of GMM recognition.
        X = rng.standard_normal((600, 2)) * 3
        means, _ = kmeans(X, 4, seed=0)
        test_points = rng.standard_normal((1000, 2)) * 3
        d2 = ((test_points[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        ordered = np.sort(d2, axis=1)
        distinct = (ordered[:, 1] - ordered[:, 0]) > 1e-9
        nearest = np.argmin(d2, axis=1)
        params = GmmParams(weights=np.full(4, 0.25), means=means,
                           covs=np.stack([1e-6 * np.eye(2)] * 4))
        resp = gmm_e_step(params, test_points)
        hard = np.argmax(resp.table, axis=1)
        assert np.all(hard[distinct] == nearest[distinct])
        assert distinct.sum() >= 990
        # Iterative PCA subspace.
        spectrum = np.diag([5.0, 3.0, 1.0, 0.4, 0.1])
        data = rng.standard_normal((500, 5)) @ spectrum
        centered = data - data.mean(axis=0)
        evals, evecs = np.linalg.eigh(np.cov(centered.T, bias=True))
        top = evecs[:, ::-1][:, :2]
        W = pca_iterate(rng.standard_normal((5, 2)), data, iters=500)
        q = np.linalg.qr(W)[0]
        sv = np.linalg.svd(q.T @ top, compute_uv=False)
        angles = np.arccos(np.clip(sv, -1, 1))
        assert np.max(angles) < 1e-6
        _report(5, "K-means argmax limit at eps=1e-6 and PCA span to 1e-6",
                30.0, started)

    def test_criterion_6_matrix_identities(self):
        started = time.perf_counter()
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 7))
            r = int(rng.integers(1, n + 1))
            A = random_cov(rng, n)
            U = rng.standard_normal((n, r))
            C = random_cov(rng, r)
            V = rng.standard_normal((r, n))
            got = woodbury_inverse(A, U, C, V)
            assert np.max(np.abs(got @ (A + U @ C @ V) - np.eye(n))) < 1e-9
        for _ in range(100):
            n = int(rng.integers(2, 7))
            A = random_cov(rng, n)
            u = rng.standard_normal(n)
            v = rng.standard_normal(n)
            got = sherman_morrison(A, u, v)
            want = np.linalg.inv(A + np.outer(u, v))
            assert np.max(np.abs(got - want)) < 1e-9
        for _ in range(100):
            k = int(rng.integers(1, 5))
            m = int(rng.integers(1, 5))
            belief = GaussianBelief(rng.standard_normal(k), random_cov(rng, k))
            W = rng.standard_normal((m, k))
            A = random_cov(rng, m)
            b = rng.standard_normal(m)
            got = expected_quadratic(belief, W, A, b)
            resid = b - W @ belief.mean
            want = np.trace(A @ W @ belief.cov @ W.T) + resid @ A @ resid
            assert abs(got - want) < 1e-9 * max(1.0, abs(want))
        _report(6, "Woodbury / Sherman-Morrison / expected-quadratic on 100 each",
                5.0, started)

    def test_criterion_7_rbm_gradients(self):
        started = time.perf_counter()
        rng = np.random.default_rng(7)
        params = RbmParams(weights=0.5 * rng.standard_normal((5, 3)),
                           visible_bias=0.3 * rng.standard_normal(5),
                           hidden_bias=0.3 * rng.standard_normal(3))
        data = BinaryBatch((rng.random((25, 5)) < 0.5).astype(float))
        # (a) exact gradient vs central finite differences at 1e-5.
        grad = exact_kl_gradient(params, data)
        eps = 1e-5
        for i in range(5):
            for j in range(3):
                dw = np.zeros((5, 3))
                dw[i, j] = eps
                up = -data_log_likelihood(
                    RbmParams(params.weights + dw, params.visible_bias,
                              params.hidden_bias), data)
                dn = -data_log_likelihood(
                    RbmParams(params.weights - dw, params.visible_bias,
                              params.hidden_bias), data)
                assert abs(grad.d_weights[i, j] - (up - dn) / (2 * eps)) < 1e-6
        # (b) CD-50 over 10^4 seeded chains within 3 SE of exact.
        chunks = 20
        chains_per_chunk = 500
        reps = chains_per_chunk // data.n
        big = BinaryBatch(np.tile(data.states, (reps, 1)))
        estimates = np.array([
            cd_n_gradient(params, big, 50, np.random.default_rng(1000 + c)
                          ).d_weights
            for c in range(chunks)])
        mean = estimates.mean(axis=0)
        se = estimates.std(axis=0, ddof=1) / np.sqrt(chunks)
        assert np.all(np.abs(mean - grad.d_weights) <= 3 * se + 1e-12)
        # (c) 2000 CD-1 steps cut the enumerated KL by at least 30%.
        gen = np.random.default_rng(77)
        patterns = np.array([
            [1, 1, 1, 0, 0, 0],
            [0, 0, 0, 1, 1, 1],
            [1, 0, 1, 1, 0, 1],
            [0, 1, 0, 0, 1, 0],
        ], dtype=float)
        toy = BinaryBatch(np.repeat(patterns, 10, axis=0))
        counts = np.zeros(64)
        np.add.at(counts, (toy.states @ (2 ** np.arange(5, -1, -1))).astype(int),
                  1.0)
        d = counts / counts.sum()
        init = RbmParams(0.01 * gen.standard_normal((6, 4)), np.zeros(6),
                         np.zeros(4))
        before = enumerated_kl_to_data(init, d)
        fitted = train_cd(init, toy, n=1, learning_rate=0.05, steps=2000,
                          rng=gen)
        after = enumerated_kl_to_data(fitted, d)
        assert after <= 0.7 * before
        _report(7, "RBM exact grad vs FD (1e-6), CD-50 within 3 SE, CD-1 cuts KL 30%",
                300.0, started)

    def test_criterion_8_particle_convergence(self):
        started = time.perf_counter()
        rng = np.random.default_rng(8)
        K, T, N = 3, 10, 100_000
        params = HmmParams(
            init=random_simplex(rng, K),
            trans=np.stack([random_simplex(rng, K) for _ in range(K)], axis=1),
            means=np.array([[-3.0], [0.0], [3.0]]),
            covs=np.stack([np.eye(1)] * K))
        _, obs = sample_hmm(params, T, rng)
        exact_post = hmm_smoother(params, obs)
        rows = exact_post.filter
        cdf = np.cumsum(params.trans, axis=0)

        def initial(n, r):
            return r.choice(K, size=n, p=params.init).astype(float)[:, None]

        def dynamics(p, r):
            idx = p[:, 0].astype(int)
            u = r.random(idx.shape[0])
            nxt = (u[:, None] > cdf.T[idx]).sum(axis=1)
            return nxt.astype(float)[:, None]

        def log_lik(p, y):
            return -0.5 * (y[0] - params.means[p[:, 0].astype(int), 0]) ** 2

        hits = 0
        for seed in range(100):
            clouds = run_particle_filter(initial, dynamics, log_lik, obs, N,
                                         np.random.default_rng(seed))
            ok = True
            for t in range(T):
                mass = np.zeros(K)
                idx = clouds[t].particles[:, 0].astype(int)
                np.add.at(mass, idx, clouds[t].filter_weights)
                if 0.5 * np.abs(mass - rows[t]).sum() >= 0.01:
                    ok = False
                    break
            hits += ok
        assert hits >= 95
        # Exact-support embedding reproduces the HMM tables to 1e-12.
        post = exact_post
        state_particles = np.arange(K, dtype=float)[:, None]
        clouds = [ParticleCloud(particles=state_particles,
                                filter_weights=post.filter[t])
                  for t in range(T)]
        out = particle_smoother(
            clouds,
            lambda nxt, prev: params.trans[
                np.ix_(nxt[:, 0].astype(int), prev[:, 0].astype(int))])
        for t in range(T):
            assert np.max(np.abs(out[t].smoother_weights - post.smoother[t])) \
                < 1e-12
        _report(8, f"particle filter TV < 0.01 for {hits}/100 seeds; exact support 1e-12",
                120.0, started)

    def test_criterion_9_discriminative(self):
        started = time.perf_counter()
        rng = np.random.default_rng(9)
        # Gaussian IRLS equals OLS after exactly one iteration.
        X = rng.standard_normal((80, 3))
        X -= X.mean(axis=0)
        z = X @ np.array([1.0, -0.5, 0.2]) + 0.2 * rng.standard_normal(80)
        w, trace = irls_fit(X, z, "gaussian", max_iter=1)
        assert np.max(np.abs(w - ols_fit(X, z[:, None]).weights[0])) < 1e-10
        # Poisson / logistic IRLS vs slow gradient descent.
        from test_regression import _gradient_descent_oracle
        Xp = rng.standard_normal((70, 2)) * 0.5
        zp = rng.poisson(np.exp(Xp @ [0.6, -0.4])).astype(float)
        wp, _ = irls_fit(Xp, zp, "poisson-log")
        assert np.max(np.abs(wp - _gradient_descent_oracle(
            Xp, zp, FAMILIES["poisson-log"]))) < 1e-6
        Xl = rng.standard_normal((90, 2))
        zl = (rng.random(90) < 1 / (1 + np.exp(-Xl @ [0.8, -0.6]))).astype(float)
        wl, _ = irls_fit(Xl, zl, "bernoulli-logit")
        assert np.max(np.abs(wl - _gradient_descent_oracle(
            Xl, zl, FAMILIES["bernoulli-logit"], lr=5e-3))) < 1e-6
        # ICA gradient vs finite differences.
        Xi = rng.logistic(size=(300, 2))
        W = np.eye(2) + 0.2 * rng.standard_normal((2, 2))
        model = IcaModel(W, "logistic-cdf")
        grad = ica_gradient(model, Xi)
        h = 1e-6
        for i in range(2):
            for j in range(2):
                dW = np.zeros((2, 2))
                dW[i, j] = h
                fd = (ica_loss(IcaModel(W + dW, "logistic-cdf"), Xi)
                      - ica_loss(IcaModel(W - dW, "logistic-cdf"), Xi)) / (2 * h)
                assert abs(grad[i, j] - fd) < 1e-6
        # Two-source Laplace unmixing.
        S = rng.laplace(size=(8000, 2))
        theta = 0.6
        mix = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        fitted, _ = ica_fit(S @ mix.T, lr=0.2, iters=400, seed=0)
        rec = S @ mix.T @ fitted.unmixing.T
        corr = np.corrcoef(np.hstack([rec, S]).T)[:2, 2:]
        assert np.all(np.abs(corr).max(axis=1) > 0.95)
        _report(9, "IRLS one-step/GD oracles, ICA FD gradient, unmixing r > 0.95",
                120.0, started)

    def test_criterion_10_sparse_coding(self):
        started = time.perf_counter()
        rng = np.random.default_rng(10)
        # BPDN subgradient certificates on random instances.
        for _ in range(30):
            D, K = int(rng.integers(2, 5)), int(rng.integers(2, 7))
            C = rng.standard_normal((D, K))
            C /= np.linalg.norm(C, axis=0, keepdims=True)
            x = rng.standard_normal(D)
            alpha = rng.uniform(0.3, 1.5, K)
            z = bpdn_solve(C, x, 8.0, alpha)
            assert bpdn_subgradient_residual(C, x, 8.0, alpha, z) <= 1e-8
        # D=2, K=3 against the sign-pattern enumeration oracle.
        for _ in range(20):
            C = rng.standard_normal((2, 3))
            C /= np.linalg.norm(C, axis=0, keepdims=True)
            x = rng.standard_normal(2) * 1.5
            alpha = rng.uniform(0.3, 1.5, 3)
            z = bpdn_solve(C, x, 5.0, alpha)
            want = _sign_pattern_oracle(C, x, 5.0, alpha)
            assert np.max(np.abs(z - want)) < 1e-8
        # Laplace recognition/marginal exact on the quadratic control.
        from scipy.stats import multivariate_normal
        from lvmkit.gaussian import AffineGaussianChannel, bayes_invert
        params = SparseCodingParams(
            dict=rng.standard_normal((4, 2)), lam=6.0,
            alpha=np.ones(2), beta=100.0)
        x = rng.standard_normal(4)
        recog = sc_recognition(params, x, source="quadratic")
        want = bayes_invert(GaussianBelief(np.zeros(2), np.eye(2)),
                            AffineGaussianChannel(params.dict, np.zeros(4),
                                                  np.eye(4) / params.lam),
                            x, form="direct")
        assert np.max(np.abs(recog.mode - want.mean)) < 1e-8
        assert np.max(np.abs(np.linalg.inv(recog.precision) - want.cov)) < 1e-8
        got = sc_log_marginal(params, x, source="quadratic")
        dense = multivariate_normal.logpdf(
            x, np.zeros(4), params.dict @ params.dict.T + np.eye(4) / params.lam)
        assert abs(got - dense) < 1e-8
        # Free energy non-increasing within 1e-7/step.
        for seed in range(5):
            gen = np.random.default_rng(seed)
            td = gen.standard_normal((4, 3))
            td /= np.linalg.norm(td, axis=0, keepdims=True)
            true = SparseCodingParams(dict=td, lam=10.0, alpha=np.ones(3),
                                      beta=100.0)
            X, _ = sample_sparse_coding(true, 40, gen)
            report = run_em(SparseCodingEmHandle(3, lam=10.0, alpha=1.0), X,
                            EmConfig(max_iter=8, tol=0.0, seed=seed))
            assert np.all(np.diff(report.free_energy_trace) <= 1e-7)
        _report(10, "BPDN certificates/oracle (1e-8), quadratic control exact, F monotone",
                120.0, started)
