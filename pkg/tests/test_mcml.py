import math

import numpy as np
import pytest
from scipy.linalg import cho_solve
from scipy.integrate import quad

from prevmap.errors import (
    DegenerateWeightsError,
    InvalidParamError,
    SingularHessianError,
    ValidationError,
)
from prevmap.exploratory import expit, _glm_beta
from prevmap.kernels import CorrelationParams, covariance_matrix, cholesky_with_jitter, simulate_gaussian_field
from prevmap.mcml import (
    FittedModel,
    McmlControl,
    McmlObjective,
    _mala_propose,
    fit_mcml,
    init_latent_state,
    laplace_mode,
    latent_loglik_grad,
    mala_sample,
    mle_sampling_distribution,
    parametric_bootstrap,
    profile_deviance_xi,
    simulate_counts,
)
from prevmap.rng import substream, substream_seed
from prevmap.surveys import SurveyDataset, SurveyRecord, build_design


def dataset_from(coords, y, n_trials, covs=None):
    records = [SurveyRecord(id=str(k), x=float(coords[k, 0]), y=float(coords[k, 1]),
                            t=float(coords[k, 2]), n_tested=int(n_trials[k]), n_positive=int(y[k]),
                            covariates={} if covs is None else {c: covs[c][k] for c in covs})
               for k in range(len(y))]
    return SurveyDataset(records=records, design_columns=tuple(covs or ()),
                         region_bbox=(0.0, 0.0, 300.0, 300.0))


def simulate_dataset(truth, beta, seed, n_sites=50, n_times=2, n_trials=50, covs=None,
                     domain=300.0):
    rng = substream(seed, "sim-layout")
    sites = np.column_stack([rng.uniform(0, domain, n_sites), rng.uniform(0, domain, n_sites)])
    coords = np.column_stack([np.tile(sites, (n_times, 1)),
                              np.repeat(np.arange(float(n_times)), n_sites)])
    m = coords.shape[0]
    w = simulate_gaussian_field(coords, truth, rng_seed=substream_seed(seed, "sim-field"))
    design_cols = {}
    eta = np.full(m, beta[0]) + w
    if covs:
        for j, name in enumerate(covs):
            design_cols[name] = rng.uniform(-1, 1, m)
            eta += beta[j + 1] * design_cols[name]
    n = np.full(m, n_trials)
    y = rng.binomial(n, expit(eta)).astype(float)
    return dataset_from(coords, y, n, covs=design_cols if covs else None)


def latent_setup(dataset, design, beta, params):
    coords = dataset.coords
    sigma = covariance_matrix(coords, params)
    chol = cholesky_with_jitter(sigma)
    sigma_inv = cho_solve((chol, True), np.eye(coords.shape[0]))
    return design.rows @ beta, sigma_inv


class TestLaplaceMode:
    def test_symmetric_single_record(self):
        sigma_inv = np.array([[1.0]])  # sigma2 + tau2 = 1
        mode, neg_hess = laplace_mode(np.array([5.0]), np.array([10.0]), np.array([0.0]), sigma_inv)
        assert abs(mode[0]) < 1e-10
        assert neg_hess[0, 0] == pytest.approx(1.0 + 10 * 0.25, abs=1e-9)

    def test_single_record_grid_search_oracle(self):
        y, n = np.array([3.0]), np.array([10.0])
        sigma_inv = np.array([[1.0]])
        mode, _ = laplace_mode(y, n, np.array([0.0]), sigma_inv)
        grid = np.linspace(-5, 5, 2000001)
        dens = 3.0 * grid - 10.0 * np.logaddexp(0, grid) - 0.5 * grid ** 2
        assert mode[0] == pytest.approx(grid[np.argmax(dens)], abs=1e-6)

    def test_latent_gradient_matches_finite_differences(self):
        truth = CorrelationParams(sigma2=1.1, tau2=0.2, phi=70.0, psi=2.0)
        ds = simulate_dataset(truth, [-0.5], seed=4, n_sites=15, n_times=2, n_trials=30)
        design = build_design(ds, [])
        mu, sigma_inv = latent_setup(ds, design, np.array([-0.5]), truth)
        y, n = ds.y, ds.n
        rng = np.random.default_rng(3)
        for _ in range(20):
            w = mu + rng.normal(0, 0.7, mu.size)
            _, g = latent_loglik_grad(w, y, n, mu, sigma_inv)
            fd = np.empty(mu.size)
            for k in range(mu.size):
                e = np.zeros(mu.size)
                e[k] = 1e-6
                fd[k] = (latent_loglik_grad(w + e, y, n, mu, sigma_inv)[0]
                         - latent_loglik_grad(w - e, y, n, mu, sigma_inv)[0]) / 2e-6
            assert np.max(np.abs(g - fd) / (1.0 + np.abs(fd))) < 1e-6


class TestMala:
    def test_proposal_mean_at_zero_gradient(self):
        rng = np.random.default_rng(0)
        state = rng.normal(size=4)
        prop, mean = _mala_propose(rng, state, np.zeros(4), h=0.5)
        assert np.array_equal(mean, state)

    def test_acceptance_rate_tuned(self):
        truth = CorrelationParams(sigma2=1.0, tau2=0.15, phi=60.0, psi=2.0)
        ds = simulate_dataset(truth, [-0.6], seed=8, n_sites=25, n_times=2, n_trials=60)
        design = build_design(ds, [])
        mu, sigma_inv = latent_setup(ds, design, np.array([-0.6]), truth)
        state = init_latent_state(ds.y, ds.n, mu, sigma_inv)
        _, _, rate = mala_sample(ds.y, ds.n, mu, sigma_inv, state,
                                 n_samples=4000, burn_in=2000, thin=2, seed=5)
        assert abs(rate - 0.574) < 0.05

    def test_acceptance_monotone_in_step_size(self):
        truth = CorrelationParams(sigma2=1.0, tau2=0.15, phi=60.0, psi=2.0)
        ds = simulate_dataset(truth, [-0.6], seed=8, n_sites=10, n_times=1, n_trials=40)
        design = build_design(ds, [])
        mu, sigma_inv = latent_setup(ds, design, np.array([-0.6]), truth)
        rates = {}
        for h in (1e-6, 1e2):
            state = init_latent_state(ds.y, ds.n, mu, sigma_inv, h=h)
            _, _, rates[h] = mala_sample(ds.y, ds.n, mu, sigma_inv, state,
                                         n_samples=400, burn_in=0, thin=1, seed=2)
        assert rates[1e-6] > 0.99
        assert rates[1e2] < 0.05

    def test_single_record_mean_matches_quadrature(self):
        y = np.array([7.0])
        n = np.array([20.0])
        mu = np.array([-0.3])
        sigma_inv = np.array([[1.0 / 0.8]])
        state = init_latent_state(y, n, mu, sigma_inv)
        samples, _, _ = mala_sample(y, n, mu, sigma_inv, state,
                                    n_samples=4000, burn_in=1000, thin=10, seed=3)
        w = samples[:, 0]

        def dens(x):
            return math.exp(7.0 * x - 20.0 * np.logaddexp(0, x) - (x - mu[0]) ** 2 / (2 * 0.8) + 10)

        top, _ = quad(lambda x: x * dens(x), -8, 8, limit=200)
        bot, _ = quad(dens, -8, 8, limit=200)
        exact = top / bot
        se = w.std() / math.sqrt(len(w) / 3.0)  # conservative for residual autocorrelation
        assert abs(w.mean() - exact) < 3 * se


class TestMcmlObjective:
    def setup_objective(self, b_samples=800):
        truth = CorrelationParams(sigma2=1.0, tau2=0.2, phi=70.0, psi=2.0)
        ds = simulate_dataset(truth, [-0.6], seed=12, n_sites=20, n_times=2, n_trials=50)
        design = build_design(ds, [])
        beta = _glm_beta(ds.y, ds.n, design.rows)
        mu, sigma_inv = latent_setup(ds, design, beta, truth)
        state = init_latent_state(ds.y, ds.n, mu, sigma_inv)
        samples, _, _ = mala_sample(ds.y, ds.n, mu, sigma_inv, state,
                                    n_samples=b_samples, burn_in=500, thin=2, seed=9)
        return McmlObjective(samples, design.rows, ds.coords, beta, truth), beta, truth

    def test_exactly_zero_at_anchor(self):
        obj, _, _ = self.setup_objective()
        assert obj.value(obj.anchor_vector()) == 0.0

    def test_single_sample_equals_density_difference(self):
        obj, beta, params = self.setup_objective(b_samples=1)
        x = obj.anchor_vector() + 0.04
        from prevmap.mcml import _unpack
        beta_t, params_t = _unpack(x, obj.p, obj.params0, obj.free)
        direct = float(obj._value_logdens(beta_t, params_t)[0] - obj._anchor_logdens[0])
        assert obj.value(x) == pytest.approx(direct, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        obj, _, _ = self.setup_objective()
        rng = np.random.default_rng(1)
        x0 = obj.anchor_vector()
        for _ in range(10):
            x = x0 + 0.05 * rng.standard_normal(x0.size)
            _, g = obj.value_and_grad(x)
            fd = np.empty(x.size)
            for k in range(x.size):
                e = np.zeros(x.size)
                e[k] = 1e-6
                fd[k] = (obj.value(x + e) - obj.value(x - e)) / 2e-6
            assert np.max(np.abs(g - fd) / (1.0 + np.abs(fd))) < 1e-5

    def test_degenerate_weights_error(self):
        obj, _, _ = self.setup_objective()
        x = obj.anchor_vector()
        x[-4:] += 3.0  # move all covariance parameters far from the anchor
        with pytest.raises(DegenerateWeightsError):
            obj.value(x)


TRUTH = CorrelationParams(sigma2=1.0, tau2=0.2, phi=100.0, psi=2.0)
LIGHT = McmlControl(n_samples=1200, burn_in=600, thin=2, outer_iters=8)


class TestFitMcml:
    def test_deterministic_bit_for_bit(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=31, n_sites=30, n_times=2, n_trials=60)
        design = build_design(ds, [])
        init = CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5)
        a = fit_mcml(ds, design, init_params=init, control=LIGHT, seed=7)
        b = fit_mcml(ds, design, init_params=init, control=LIGHT, seed=7)
        assert np.array_equal(a.lambda_vector, b.lambda_vector)
        assert np.array_equal(a.hessian_log_scale, b.hessian_log_scale)

    def test_tiny_variances_reduce_to_logistic_regression(self):
        rng = np.random.default_rng(9)
        coords = np.column_stack([rng.uniform(0, 300, 60), rng.uniform(0, 300, 60),
                                  rng.choice([0.0, 1.0], 60)])
        x_cov = rng.uniform(-1, 1, 60)
        n = np.full(60, 50)
        y = rng.binomial(n, expit(-0.5 + 0.8 * x_cov)).astype(float)
        ds = dataset_from(coords, y, n, covs={"x": x_cov})
        design = build_design(ds, ["x"])
        tiny = CorrelationParams(sigma2=1e-8, tau2=1e-8, phi=60.0, psi=1.0)
        fit = fit_mcml(ds, design, init_params=tiny, seed=1, free=("phi", "psi"),
                       control=McmlControl(n_samples=500, burn_in=300, thin=2))
        beta_glm = _glm_beta(y, n.astype(float), design.rows)
        assert np.max(np.abs(fit.beta - beta_glm)) < 1e-3

    def test_requires_positive_variance_init(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=3, n_sites=10, n_times=1)
        design = build_design(ds, [])
        with pytest.raises(InvalidParamError):
            fit_mcml(ds, design, init_params=CorrelationParams(sigma2=0.0, tau2=0.1, phi=1.0, psi=1.0))

    def test_requires_two_distinct_locations(self):
        coords = np.array([[5.0, 5.0, 0.0], [5.0, 5.0, 1.0], [5.0, 5.0, 2.0]])
        ds = dataset_from(coords, y=[3, 4, 5], n_trials=[10, 10, 10])
        design = build_design(ds, [])
        with pytest.raises(ValidationError):
            fit_mcml(ds, design, init_params=TRUTH, control=LIGHT)

    def test_refit_recovers_estimate_within_three_se(self):
        # joint sanity: simulate at the estimate, refit, compare on the fitting scale
        ds = simulate_dataset(TRUTH, [-0.8], seed=55, n_sites=40, n_times=2, n_trials=80)
        design = build_design(ds, [])
        init = CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5)
        fit = fit_mcml(ds, design, init_params=init, control=LIGHT, seed=11)
        se = fit.standard_errors()
        ok = 0
        n_rep = 10
        for rep in range(n_rep):
            y_sim = simulate_counts(fit.beta, fit.params, ds, design,
                                    seed=substream_seed(99, "refit", rep))
            ds_sim = dataset_from(ds.coords, y_sim, ds.n)
            refit = fit_mcml(ds_sim, design, init_params=fit.params, init_beta=fit.beta,
                             control=LIGHT, seed=substream_seed(99, "refit-fit", rep))
            ok += bool(np.all(np.abs(refit.lambda_vector - fit.lambda_vector) <= 3.0 * se))
        assert ok >= n_rep - 1

    def test_json_round_trip(self, tmp_path):
        ds = simulate_dataset(TRUTH, [-0.8], seed=31, n_sites=20, n_times=2, n_trials=50)
        design = build_design(ds, [])
        fit = fit_mcml(ds, design, init_params=CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5),
                       control=LIGHT, seed=7)
        fit.save_json(tmp_path / "fit.json")
        again = FittedModel.load_json(tmp_path / "fit.json")
        assert np.array_equal(again.lambda_vector, fit.lambda_vector)
        assert again.params == fit.params
        assert again.control == fit.control


class TestSamplingDistribution:
    def make_fit(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=21, n_sites=35, n_times=2, n_trials=80)
        design = build_design(ds, [])
        return fit_mcml(ds, design, init_params=CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5),
                        control=LIGHT, seed=13)

    def test_draw_moments(self):
        fit = self.make_fit()
        ga = mle_sampling_distribution(fit)
        draws = ga.draw(10000, seed=5)
        se = np.sqrt(np.diag(ga.cov) / 10000)
        assert np.all(np.abs(draws.mean(axis=0) - ga.mean) < 3 * se)
        big = ga.draw(100000, seed=6)
        emp = np.cov(big.T)
        rel = np.linalg.norm(emp - ga.cov) / np.linalg.norm(ga.cov)
        assert rel < 0.05

    def test_interval_table_back_transforms(self):
        fit = self.make_fit()
        ga = mle_sampling_distribution(fit)
        rows = ga.marginal_intervals()
        names = [r[0] for r in rows]
        assert names == ["beta1", "sigma2", "phi", "nu2", "psi"]
        for name, est, lo, hi in rows[1:]:
            assert 0 < lo < est < hi  # natural scale after exponentiation
        summary = fit.summary_rows()
        for (n1, e1, l1, h1), (n2, e2, l2, h2) in zip(rows, summary):
            assert n1 == n2 and e1 == pytest.approx(e2)

    def test_singular_hessian_rejected(self):
        fit = self.make_fit()
        from dataclasses import replace
        bad = replace(fit, hessian_log_scale=np.eye(fit.lambda_vector.size))
        with pytest.raises(SingularHessianError):
            mle_sampling_distribution(bad)


class TestBootstrap:
    def test_zero_replicates_rejected(self):
        fit = object()
        with pytest.raises(ValidationError):
            parametric_bootstrap(fit, None, None, 0)

    def test_simulated_counts_keep_design(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=3, n_sites=15, n_times=2, n_trials=40)
        design = build_design(ds, [])
        y1 = simulate_counts(np.array([-0.8]), TRUTH, ds, design, seed=1)
        y2 = simulate_counts(np.array([-0.8]), TRUTH, ds, design, seed=1)
        y3 = simulate_counts(np.array([-0.8]), TRUTH, ds, design, seed=2)
        assert np.array_equal(y1, y2)
        assert not np.array_equal(y1, y3)
        assert np.all((0 <= y1) & (y1 <= ds.n))

    def test_parallel_bootstrap_matches_serial(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=81, n_sites=15, n_times=2, n_trials=60)
        design = build_design(ds, [])
        light = McmlControl(n_samples=400, burn_in=300, thin=2, outer_iters=3, gain_tol=0.03)
        fit = fit_mcml(ds, design, init_params=TRUTH, control=light, seed=3)
        serial = parametric_bootstrap(fit, ds, design, r_replicates=4, seed=9,
                                      parallelism=1, control=light)
        parallel = parametric_bootstrap(fit, ds, design, r_replicates=4, seed=9,
                                        parallelism=2, control=light)
        assert np.array_equal(serial.replicates, parallel.replicates)

    def test_bootstrap_mean_near_estimate(self):
        # well-identified simulation: dense information per site
        truth = CorrelationParams(sigma2=0.8, tau2=0.1, phi=80.0, psi=2.0)
        ds = simulate_dataset(truth, [-0.7, 0.9], seed=41, n_sites=25, n_times=2,
                              n_trials=200, covs=["x"])
        design = build_design(ds, ["x"])
        light = McmlControl(n_samples=600, burn_in=400, thin=2, outer_iters=5, gain_tol=0.02)
        fit = fit_mcml(ds, design, init_params=truth, control=light, seed=17)
        boot = parametric_bootstrap(fit, ds, design, r_replicates=100, seed=23, control=light)
        assert boot.replicates.shape[0] == 100
        beta2 = boot.replicates[:, 1].mean()
        assert abs(beta2 - fit.beta[1]) < 0.1
        rows = boot.percentile_intervals()
        assert rows[0][0] == "beta1" and rows[2][0] == "sigma2"


class TestKappaSelection:
    def test_candidates_compared_on_common_scale(self):
        from prevmap.mcml import fit_mcml_select_kappa
        ds = simulate_dataset(TRUTH, [-0.8], seed=71, n_sites=30, n_times=2, n_trials=80)
        design = build_design(ds, [])
        init = CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5)
        light = McmlControl(n_samples=800, burn_in=500, thin=2, outer_iters=4, gain_tol=0.02)
        best, rel = fit_mcml_select_kappa(ds, design, init_params=init, control=light,
                                          seed=77, kappas=(0.5, 1.5, 2.5))
        assert set(rel) == {0.5, 1.5, 2.5}
        assert best.params.kappa in (0.5, 1.5, 2.5)
        assert all(np.isfinite(v) for v in rel.values())
        # the winner attains the maximum comparable likelihood
        assert rel[best.params.kappa] == max(rel.values())


class TestProfileDeviance:
    def test_profile_properties(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=61, n_sites=25, n_times=3, n_trials=60)
        design = build_design(ds, [])
        init = CorrelationParams(sigma2=0.6, tau2=0.1, phi=70.0, psi=1.5)
        light = McmlControl(n_samples=800, burn_in=500, thin=2, outer_iters=5, gain_tol=0.02)
        prof = profile_deviance_xi(ds, design, xi_grid=[0.0, 0.5, 1.0],
                                   init_params=init, control=light, seed=29)
        assert prof.deviance.min() == 0.0
        assert np.all(prof.deviance >= -1e-6)
        assert prof.xi_hat in (0.0, 0.5, 1.0)
        assert prof.reference_95 == pytest.approx(3.8414588, abs=1e-6)

    def test_grid_outside_unit_interval_rejected(self):
        ds = simulate_dataset(TRUTH, [-0.8], seed=61, n_sites=10, n_times=1)
        design = build_design(ds, [])
        with pytest.raises(InvalidParamError):
            profile_deviance_xi(ds, design, xi_grid=[0.0, 1.5],
                                init_params=TRUTH, seed=1)

    def test_separable_truth_rarely_crosses_reference(self):
        # data simulated with no space-time interaction: the profile stays
        # below the chi-square reference in nearly all replicates
        init = CorrelationParams(sigma2=0.8, tau2=0.1, phi=80.0, psi=1.5)
        light = McmlControl(n_samples=700, burn_in=400, thin=2, outer_iters=4, gain_tol=0.02)
        truth = CorrelationParams(sigma2=0.8, tau2=0.15, phi=80.0, psi=2.0, xi=0.0, delta=0.3)
        flat = 0
        n_rep = 40
        for rep in range(n_rep):
            ds = simulate_dataset(truth, [-0.6], seed=7000 + rep, n_sites=25, n_times=3,
                                  n_trials=60)
            design = build_design(ds, [])
            prof = profile_deviance_xi(ds, design, xi_grid=[0.0, 0.5, 1.0],
                                       init_params=init.with_updates(delta=0.3),
                                       control=light, seed=7100 + rep)
            flat += bool(np.all(prof.deviance < prof.reference_95))
        assert flat >= int(0.85 * n_rep)
