import numpy as np
import pytest
from scipy.integrate import quad

from prevmap.errors import InvalidParamError, NotPositiveDefiniteError
from prevmap.kernels import (
    CorrelationParams,
    TVVParams,
    bessel_k,
    covariance_matrix,
    cholesky_with_jitter,
    fit_matern_to_mixture,
    gneiting,
    matern,
    simulate_gaussian_field,
    simulate_tvv_field,
    tvv_correlation,
)


def bessel_k_quadrature(nu, x):
    """Independent oracle: K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt."""
    import warnings
    from scipy.integrate import IntegrationWarning
    with warnings.catch_warnings():
        # the requested 1e-14 tolerance triggers roundoff warnings; the
        # achieved accuracy is still far beyond the 1e-10 assertions
        warnings.simplefilter("ignore", IntegrationWarning)
        val, _ = quad(lambda t: np.exp(-x * np.cosh(t)) * np.cosh(nu * t), 0.0, 30.0,
                      limit=400, epsabs=1e-14, epsrel=1e-14)
    return val


def matern_quadrature(u, phi, kappa):
    import math
    x = u / phi
    c = 1.0 / (2.0 ** (kappa - 1.0) * math.gamma(kappa))
    return c * x ** kappa * bessel_k_quadrature(kappa, x)


class TestMatern:
    def test_zero_distance_is_one(self):
        assert matern(0.0, 0.1, 2.5) == 1.0

    def test_half_kappa_exponential(self):
        assert matern(0.1, 0.1, 0.5) == pytest.approx(np.exp(-1.0), abs=1e-15)

    def test_exponential_identity_over_range(self):
        phi = 0.37
        u = np.linspace(0.0, 10 * phi, 200)
        assert np.max(np.abs(matern(u, phi, 0.5) - np.exp(-u / phi))) < 1e-12

    def test_against_bessel_quadrature(self):
        assert matern(0.05, 0.07, 2.5) == pytest.approx(matern_quadrature(0.05, 0.07, 2.5), abs=1e-10)

    def test_general_kappa_against_quadrature(self):
        # non-half-integer smoothness goes through the Bessel branch
        for u, phi, kappa in [(0.05, 0.109, 0.774), (0.3, 0.2, 1.1), (1.0, 0.5, 3.3)]:
            assert matern(u, phi, kappa) == pytest.approx(matern_quadrature(u, phi, kappa), abs=1e-10)

    def test_invalid_params(self):
        with pytest.raises(InvalidParamError):
            matern(1.0, -0.1, 0.5)
        with pytest.raises(InvalidParamError):
            matern(1.0, 0.1, 0.0)


class TestBesselK:
    def test_half_order_closed_form(self):
        expected = np.sqrt(np.pi / 2.0) * np.exp(-1.0)
        assert bessel_k(0.5, 1.0) == pytest.approx(expected, abs=1e-7)
        assert bessel_k(0.5, 1.0) == pytest.approx(0.4610685, abs=1e-7)

    def test_recurrence(self):
        for nu in (0.3, 0.774, 1.6, 2.2):
            for x in (0.2, 1.0, 5.0):
                lhs = bessel_k(nu + 1.0, x)
                rhs = bessel_k_quadrature(nu - 1.0, x) if nu <= 1.0 else bessel_k(nu - 1.0, x)
                rhs = rhs + (2.0 * nu / x) * bessel_k(nu, x)
                assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_against_quadrature(self):
        assert bessel_k(0.774, 1.0) == pytest.approx(bessel_k_quadrature(0.774, 1.0), abs=1e-10)

    def test_relative_accuracy_grid(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            nu = rng.uniform(0.05, 5.0)
            x = 10 ** rng.uniform(-6, np.log10(50.0))
            oracle = bessel_k_quadrature(nu, x)
            assert bessel_k(nu, x) == pytest.approx(oracle, rel=1e-10)

    def test_domain_error(self):
        with pytest.raises(InvalidParamError):
            bessel_k(1.0, 0.0)
        with pytest.raises(InvalidParamError):
            bessel_k(1.0, -2.0)


def params_for(sigma2=1.0, tau2=0.1, phi=100.0, psi=3.0, delta=0.0, xi=0.0, kappa=0.5):
    return CorrelationParams(sigma2=sigma2, tau2=tau2, phi=phi, psi=psi,
                             delta=delta, xi=xi, kappa=kappa)


class TestGneiting:
    def test_identity_at_origin(self):
        assert gneiting(0.0, 0.0, params_for()) == 1.0

    def test_closed_form_at_scales(self):
        p = params_for(phi=50.0, psi=2.0, delta=0.0, xi=0.0, kappa=0.5)
        # (1 + 1)^-1 * exp(-1) at u = phi, v = psi
        assert gneiting(50.0, 2.0, p) == pytest.approx(np.exp(-1.0) / 2.0, abs=1e-15)

    def test_independent_transcription(self):
        # re-derive the formula symbol by symbol, written differently
        p = params_for(phi=80.0, psi=4.0, delta=0.3, xi=1.0, kappa=1.5)
        u, v = 100.0, 3.0
        shrink = (1.0 + v / p.psi) ** (p.xi / 2.0)
        scaled = (u / shrink) / p.phi
        oracle = (1.0 + v / p.psi) ** (-(p.delta + 1.0)) * (1.0 + scaled) * np.exp(-scaled)
        assert gneiting(u, v, p) == pytest.approx(oracle, rel=1e-14)

    def test_separability_when_xi_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            p = params_for(phi=rng.uniform(5, 500), psi=rng.uniform(0.5, 20),
                           delta=rng.uniform(0, 2), xi=0.0,
                           kappa=float(rng.choice([0.5, 1.5, 2.5])))
            u = np.linspace(0, 4 * p.phi, 50)
            v = np.linspace(0, 4 * p.psi, 50)
            uu, vv = np.meshgrid(u, v)
            joint = gneiting(uu, vv, p)
            product = gneiting(uu, np.zeros_like(vv), p) * gneiting(np.zeros_like(uu), vv, p)
            assert np.max(np.abs(joint - product)) < 1e-14

    def test_monotone_and_bounded(self):
        # Monotonicity in u holds for every parameter combination. In v it
        # holds at u = 0 and whenever xi = 0; with xi > 0 the family itself
        # is non-monotone in v at large spatial lags (the effective spatial
        # distance shrinks with v), so only the true regimes are asserted.
        rng = np.random.default_rng(3)
        for _ in range(25):
            p = params_for(phi=rng.uniform(5, 500), psi=rng.uniform(0.5, 20),
                           delta=rng.uniform(0, 2), xi=rng.uniform(0, 1),
                           kappa=float(rng.choice([0.5, 1.5, 2.5])))
            u = np.linspace(0, 5 * p.phi, 40)
            v = np.linspace(0, 5 * p.psi, 40)
            grid = gneiting(u[None, :], v[:, None], p)
            assert np.all(grid > 0) and np.all(grid <= 1.0)
            assert np.all(np.diff(grid, axis=1) <= 1e-15)   # non-increasing in u
            assert np.all(np.diff(grid[:, 0]) <= 1e-15)     # non-increasing in v at u = 0
            sep = p.with_updates(xi=0.0)
            sep_grid = gneiting(u[None, :], v[:, None], sep)
            assert np.all(np.diff(sep_grid, axis=0) <= 1e-15)


class TestTVV:
    def test_zero_lag_matches_base(self):
        p = params_for()
        tvv = TVVParams(eta2=1.3, rho_B_scale=2.0)
        for u in (0.0, 10.0, 250.0):
            assert tvv_correlation(u, 0.0, p, tvv) == pytest.approx(gneiting(u, 0.0, p), abs=1e-15)

    def test_degenerate_eta_matches_base(self):
        p = params_for(xi=0.4, delta=0.7)
        tvv = TVVParams(eta2=0.0, rho_B_scale=2.0)
        rng = np.random.default_rng(5)
        for _ in range(50):
            u, v = rng.uniform(0, 300), rng.uniform(0, 10)
            assert tvv_correlation(u, v, p, tvv) == gneiting(u, v, p)

    def test_dominated_by_base(self):
        p = params_for()
        tvv = TVVParams(eta2=0.8, rho_B_scale=1.5)
        u = np.linspace(0, 400, 21)
        v = np.linspace(0, 12, 21)
        base = gneiting(u[None, :], v[:, None], p)
        damped = tvv_correlation(u[None, :], v[:, None], p, tvv)
        assert np.all(damped <= base + 1e-15)
        assert np.all(damped[1:, :] < base[1:, :])  # strict for v > 0, eta2 > 0


class TestCovarianceMatrix:
    def test_single_point(self):
        p = params_for(sigma2=2.0, tau2=0.5)
        cov = covariance_matrix(np.array([[0.0, 0.0, 2000.0]]), p)
        assert cov.shape == (1, 1)
        assert cov[0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_coincident_points_share_sigma2_only(self):
        p = params_for(sigma2=2.0, tau2=0.5)
        coords = np.array([[1.0, 2.0, 2000.0], [1.0, 2.0, 2000.0]])
        cov = covariance_matrix(coords, p)
        assert cov[0, 1] == pytest.approx(2.0, abs=1e-15)
        assert cov[0, 0] == pytest.approx(2.5, abs=1e-15)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(21)
        coords = np.column_stack([rng.uniform(0, 300, 10), rng.uniform(0, 300, 10),
                                  rng.integers(2000, 2006, 10).astype(float)])
        p = params_for(sigma2=1.7, tau2=0.3, phi=120.0, psi=4.0, delta=0.2, xi=0.5, kappa=1.5)
        cov = covariance_matrix(coords, p)
        for i in range(10):
            for j in range(10):
                dx = coords[i, 0] - coords[j, 0]
                dy = coords[i, 1] - coords[j, 1]
                u = np.sqrt(dx * dx + dy * dy)
                v = abs(coords[i, 2] - coords[j, 2])
                expected = p.sigma2 * gneiting(u, v, p) + (p.tau2 if i == j else 0.0)
                assert abs(cov[i, j] - expected) <= 1e-15

    def test_symmetric_and_near_psd(self):
        rng = np.random.default_rng(2)
        coords = np.column_stack([rng.uniform(0, 100, 40), rng.uniform(0, 100, 40),
                                  rng.uniform(2000, 2010, 40)])
        p = params_for(sigma2=3.0, tau2=0.2)
        cov = covariance_matrix(coords, p)
        assert np.array_equal(cov, cov.T)
        eigmin = float(np.linalg.eigvalsh(cov).min())
        assert eigmin >= -1e-8 * (p.sigma2 + p.tau2)

    def test_jitter_failure_raises(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(NotPositiveDefiniteError):
            cholesky_with_jitter(bad)


class TestSimulation:
    def coords(self):
        return np.array([[0.0, 0.0, 2000.0], [30.0, 40.0, 2000.0], [10.0, 5.0, 2002.0]])

    def test_deterministic(self):
        p = params_for()
        a = simulate_gaussian_field(self.coords(), p, rng_seed=42)
        b = simulate_gaussian_field(self.coords(), p, rng_seed=42)
        assert np.array_equal(a, b)

    def test_sample_covariance_matches_target(self):
        p = params_for(sigma2=1.5, tau2=0.4, phi=60.0, psi=3.0)
        coords = self.coords()
        target = covariance_matrix(coords, p)
        draws = simulate_gaussian_field(coords, p, rng_seed=7, size=5000)
        sample = np.cov(draws)
        for i in range(3):
            for j in range(3):
                se = np.sqrt((target[i, i] * target[j, j] + target[i, j] ** 2) / 5000)
                assert abs(sample[i, j] - target[i, j]) < 3 * se

    def test_degenerate_variances_give_zero_field(self):
        p = CorrelationParams(sigma2=0.0, tau2=0.0, phi=10.0, psi=1.0)
        w = simulate_gaussian_field(self.coords(), p, rng_seed=3)
        assert np.array_equal(w, np.zeros(3))

    def test_tvv_reduces_to_gaussian_when_eta_zero(self):
        p = params_for()
        tvv = TVVParams(eta2=0.0, rho_B_scale=2.0)
        a = simulate_gaussian_field(self.coords(), p, rng_seed=11)
        b = simulate_tvv_field(self.coords(), p, tvv, rng_seed=11)
        assert np.array_equal(a, b)

    def test_tvv_preserves_variance_and_fattens_tails(self):
        p = params_for(sigma2=2.0, tau2=0.0, phi=50.0, psi=2.0)
        tvv = TVVParams(eta2=1.0, rho_B_scale=2.0)
        coords = np.array([[0.0, 0.0, 2000.0]])
        draws = simulate_tvv_field(coords, p, tvv, rng_seed=5, size=50000)[0]
        var = draws.var()
        se_var = np.sqrt(np.var(draws ** 2) / draws.size)
        assert abs(var - p.sigma2) < 3 * se_var
        kurt = np.mean(draws ** 4) / var ** 2 - 3.0
        assert kurt > 0.2


class TestMaternMixtureFit:
    def test_single_component_identity(self):
        u = np.arange(0.002, 1.0001, 0.002)
        fit = fit_matern_to_mixture([1.0], [(0.13, 1.5)], u)
        assert fit.phi == pytest.approx(0.13, abs=1e-6)
        assert fit.kappa == pytest.approx(1.5, abs=1e-6)
        assert fit.max_abs_dev < 1e-8

    def test_two_component_mixture_collapses(self):
        # equal mixture of a rough and a smooth Matern is close to one Matern
        u = np.arange(0.002, 1.0001, 0.002)
        fit = fit_matern_to_mixture([0.5, 0.5], [(0.1, 0.5), (0.07, 2.5)], u)
        assert fit.phi == pytest.approx(0.109, abs=0.005)
        assert fit.kappa == pytest.approx(0.774, abs=0.005)
        # frozen bound from this implementation's own dense-grid evaluation
        assert fit.max_abs_dev < 0.027

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidParamError):
            fit_matern_to_mixture([0.5, 0.4], [(0.1, 0.5), (0.07, 2.5)], [0.1, 0.2])


class TestParams:
    def test_validation(self):
        with pytest.raises(InvalidParamError):
            CorrelationParams(sigma2=1.0, tau2=-0.1, phi=1.0, psi=1.0)
        with pytest.raises(InvalidParamError):
            CorrelationParams(sigma2=1.0, tau2=0.0, phi=0.0, psi=1.0)
        with pytest.raises(InvalidParamError):
            CorrelationParams(sigma2=1.0, tau2=0.0, phi=1.0, psi=1.0, xi=1.5)

    def test_json_round_trip(self):
        p = params_for(sigma2=2.0, tau2=0.5, phi=120.0, psi=6.0, delta=0.1, xi=0.3, kappa=1.5)
        assert CorrelationParams.from_dict(p.to_dict()) == p
        tvv = TVVParams(eta2=0.7, rho_B_scale=3.0)
        assert TVVParams.from_dict(tvv.to_dict()) == tvv
