"""Monte Carlo maximum likelihood for the binomial-logit Gaussian model.

The latent vector is the total predictor W = D beta + S + Z at the data
points, so W ~ N(D beta, Sigma) with Sigma = sigma2 (R + nu2 I) and
y_i | W ~ Binomial(n_i, expit(W_i)). The marginal likelihood integral is
approximated by importance sampling anchored at a current guess lambda0:

    log L_B(lambda) = log (1/B) sum_i N(w_i; mu(lambda), Sigma(lambda))
                                     / N(w_i; mu(lambda0), Sigma(lambda0)),

with w_i drawn from [W | y, lambda0] by a preconditioned Langevin-Hastings
(MALA) chain started at the Laplace mode. Because the binomial factor is
free of lambda given W, the ratio is purely Gaussian. The approximation is
maximized by quasi-Newton steps with the analytic gradient, the anchor is
moved to the maximizer, and the cycle repeats until the parameters settle.

Covariance parameters are fitted on the log scale as
(log sigma2, log phi, log nu2 = log tau2/sigma2, log psi); the observed
information on that scale drives the Gaussian approximation of the
sampling distribution of the estimator, and a parametric bootstrap
(simulate at the estimate, refit) is available when the Gaussian
approximation is in doubt.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from .errors import (
    DegenerateWeightsError,
    InvalidParamError,
    NonConvergenceError,
    NumericalError,
    PrevmapError,
    SingularHessianError,
    ValidationError,
)
from .exploratory import _glm_beta, expit, log1pexp
from .kernels import (
    CorrelationParams,
    cholesky_with_jitter,
    correlation_matrix,
    covariance_matrix,
    gneiting_log_scale_grads,
    pairwise_lags,
)
from .rng import substream, substream_seed

__all__ = [
    "LatentState",
    "FittedModel",
    "BootstrapSet",
    "McmlControl",
    "laplace_mode",
    "mala_sample",
    "McmlObjective",
    "fit_mcml",
    "fit_mcml_select_kappa",
    "mle_sampling_distribution",
    "GaussianSamplingDistribution",
    "parametric_bootstrap",
    "profile_deviance_xi",
    "ProfileDeviance",
]

FREE_COV_PARAMS = ("sigma2", "phi", "nu2", "psi")
CHI2_1_95 = 3.8414588206941254  # 0.95 quantile of chi-square with 1 df


# --- latent-field machinery ---------------------------------------------------


def latent_loglik_grad(w, y, n, mu, sigma_inv):
    """Log density of [W = w | y, lambda] up to a constant, and its gradient."""
    resid = w - mu
    quad = sigma_inv @ resid
    value = float(np.sum(y * w - n * log1pexp(w)) - 0.5 * resid @ quad)
    grad = y - n * expit(w) - quad
    return value, grad


@dataclass
class LatentState:
    """Preconditioning and chain state for the latent MALA sampler."""

    mode_w: np.ndarray
    hess_chol: np.ndarray  # lower Cholesky of the negated Hessian at the mode
    h: float
    w: np.ndarray          # current chain state on the W scale

    def __post_init__(self):
        if self.h <= 0:
            raise ValidationError("MALA step size must be positive")


def laplace_mode(y, n, mu, sigma_inv, tol: float = 1e-8, max_iter: int = 100,
                 w_init=None):
    """Newton-Raphson mode of [W | y, lambda] and the negated Hessian there.

    ``mu`` is the latent mean D beta and ``sigma_inv`` the covariance
    inverse. The negated Hessian is sigma_inv + diag(n p (1 - p)).
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    mu = np.asarray(mu, dtype=float)
    w = mu.copy() if w_init is None else np.asarray(w_init, dtype=float).copy()
    value, grad = latent_loglik_grad(w, y, n, mu, sigma_inv)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) < tol:
            p = expit(w)
            return w, sigma_inv + np.diag(n * p * (1.0 - p))
        p = expit(w)
        hess = sigma_inv + np.diag(n * p * (1.0 - p))
        step = np.linalg.solve(hess, grad)
        # the acceptance margin must sit above the objective's floating-point
        # resolution, or rounding noise rejects good steps near the optimum
        margin = 1e-10 * max(1.0, abs(value))
        scale = 1.0
        for _ in range(50):
            w_new = w + scale * step
            value_new, grad_new = latent_loglik_grad(w_new, y, n, mu, sigma_inv)
            if value_new >= value - margin:
                break
            scale *= 0.5
        else:
            raise NonConvergenceError("step halving exhausted while locating the latent mode")
        w, value, grad = w_new, value_new, grad_new
    raise NonConvergenceError(f"latent mode not found in {max_iter} Newton iterations")


def _mala_propose(rng, state, grad, h):
    """One Langevin proposal: mean = state + (h/2) grad, covariance h I."""
    mean = state + 0.5 * h * grad
    return mean + math.sqrt(h) * rng.standard_normal(state.size), mean


def init_latent_state(y, n, mu, sigma_inv, h: float | None = None) -> LatentState:
    mode, neg_hess = laplace_mode(y, n, mu, sigma_inv)
    chol = cholesky_with_jitter(neg_hess, scale=float(np.mean(np.diag(neg_hess))))
    if h is None:
        h = 1.65 ** 2 / mode.size ** (1.0 / 3.0)
    return LatentState(mode_w=mode, hess_chol=chol, h=h, w=mode.copy())


def mala_sample(y, n, mu, sigma_inv, state: LatentState, n_samples: int,
                burn_in: int, thin: int, seed: int, target_accept: float = 0.574):
    """Langevin-Hastings samples from [W | y, lambda].

    The chain runs on the standardized variable wt = L' (W - w_hat), where
    L L' is the negated Hessian at the mode, so the target is close to
    N(0, I) and a single scalar step size h suffices. h adapts toward the
    0.574 acceptance target during burn-in only and is frozen afterwards.
    Returns (samples, state, realized_acceptance) with samples of shape
    (n_samples, N) on the W scale.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    mu = np.asarray(mu, dtype=float)
    rng = substream(seed, "mala")
    chol = state.hess_chol
    dim = state.mode_w.size

    def to_w(wt):
        return state.mode_w + solve_triangular(chol, wt, lower=True, trans="T")

    def loglik_grad_t(wt):
        w = to_w(wt)
        value, grad_w = latent_loglik_grad(w, y, n, mu, sigma_inv)
        return value, solve_triangular(chol, grad_w, lower=True), w

    wt = chol.T @ (state.w - state.mode_w)
    value, grad, w_nat = loglik_grad_t(wt)
    h = state.h
    samples = np.empty((n_samples, dim))
    accepted = 0
    decided = 0
    collected = 0
    step = 0
    total_steps = burn_in + n_samples * thin
    while collected < n_samples:
        step += 1
        prop, fwd_mean = _mala_propose(rng, wt, grad, h)
        value_p, grad_p, w_p = loglik_grad_t(prop)
        rev_mean = prop + 0.5 * h * grad_p
        log_fwd = -float(np.sum((prop - fwd_mean) ** 2)) / (2.0 * h)
        log_rev = -float(np.sum((wt - rev_mean) ** 2)) / (2.0 * h)
        log_alpha = value_p - value + log_rev - log_fwd
        accept = math.log(rng.uniform()) < log_alpha
        if accept:
            wt, value, grad, w_nat = prop, value_p, grad_p, w_p
        if step <= burn_in:
            # Robbins-Monro on log h toward the optimal acceptance rate
            rate = min(1.0, math.exp(min(log_alpha, 0.0)))
            h *= math.exp((rate - target_accept) / step ** 0.6)
        else:
            accepted += accept
            decided += 1
            if (step - burn_in) % thin == 0:
                samples[collected] = w_nat
                collected += 1
        if step > total_steps + 10 * thin:
            raise NumericalError("MALA failed to collect the requested samples")
    state.h = h
    state.w = w_nat.copy()
    rate = accepted / max(decided, 1)
    return samples, state, rate


# --- the importance-sampling likelihood approximation -------------------------


def _pack(beta, params: CorrelationParams, free) -> np.ndarray:
    vals = {"sigma2": params.sigma2, "phi": params.phi,
            "nu2": params.tau2 / params.sigma2, "psi": params.psi}
    logs = []
    for name in free:
        v = vals[name]
        if v <= 0:
            raise InvalidParamError(f"{name} must be positive to fit on the log scale")
        logs.append(math.log(v))
    return np.concatenate([np.asarray(beta, dtype=float), logs])


def _unpack(x, p, template: CorrelationParams, free):
    beta = np.asarray(x[:p], dtype=float)
    vals = {"sigma2": template.sigma2, "phi": template.phi,
            "nu2": template.tau2 / template.sigma2, "psi": template.psi}
    for k, name in enumerate(free):
        vals[name] = math.exp(float(x[p + k]))
    params = template.with_updates(sigma2=vals["sigma2"], phi=vals["phi"],
                                   tau2=vals["nu2"] * vals["sigma2"], psi=vals["psi"])
    return beta, params


def parameter_names(p: int, free=FREE_COV_PARAMS) -> tuple:
    return tuple([f"beta{j + 1}" for j in range(p)] + [f"log_{name}" for name in free])


class McmlObjective:
    """log L_B(lambda) and its gradient for samples drawn at the anchor.

    The anchor densities are precomputed once; each evaluation recomputes
    the numerator Gaussian log densities at the trial lambda. Weights that
    collapse below an effective sample size of 1% of B raise
    DegenerateWeightsError in strict mode; the fitting loop uses the
    non-strict mode and relies on its re-anchoring to stay local.
    """

    def __init__(self, samples, design_rows, coords, beta0, params0,
                 free=FREE_COV_PARAMS, strict_ess: bool = True):
        self.samples = np.asarray(samples, dtype=float)
        self.design = np.asarray(design_rows, dtype=float)
        self.coords = np.asarray(coords, dtype=float)
        self.free = tuple(free)
        self.strict_ess = strict_ess
        self.p = self.design.shape[1]
        self.n = self.design.shape[0]
        self.b = self.samples.shape[0]
        self.u, self.v = pairwise_lags(self.coords)
        # round-trip the anchor through the fitting scale so that evaluating
        # at anchor_vector() reproduces the denominator bit for bit and
        # log L_B(lambda0) is exactly zero
        x0 = _pack(np.asarray(beta0, dtype=float), params0, self.free)
        self.beta0, self.params0 = _unpack(x0, self.p, params0, self.free)
        self._anchor_logdens = self._value_logdens(self.beta0, self.params0)
        self.last_ess = float(self.b)

    def _sigma(self, params: CorrelationParams):
        rho, d_logphi, d_logpsi = gneiting_log_scale_grads(self.u, self.v, params)
        sigma = params.sigma2 * rho
        sigma[np.diag_indices_from(sigma)] += params.tau2
        return sigma, rho, d_logphi, d_logpsi

    def _value_logdens(self, beta, params):
        """Gaussian log density of every sample; the one code path shared by
        the anchor and trial evaluations, so identical inputs give identical
        floats."""
        sigma = self._sigma(params)[0]
        chol = cholesky_with_jitter(sigma)
        resid = (self.samples - self.design @ np.asarray(beta, dtype=float)).T  # (N, B)
        half = solve_triangular(chol, resid, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return -0.5 * logdet - 0.5 * np.sum(half * half, axis=0)

    def anchor_vector(self) -> np.ndarray:
        return _pack(self.beta0, self.params0, self.free)

    def cross_loglik(self, beta, params: CorrelationParams) -> float:
        """log L_B at an arbitrary (beta, params), possibly from a different
        (delta, xi, kappa) structure; the importance ratio only needs the two
        Gaussian densities of the shared latent samples."""
        logratio = self._value_logdens(beta, params) - self._anchor_logdens
        m = float(np.max(logratio))
        return m + math.log(float(np.mean(np.exp(logratio - m))))

    def value(self, x) -> float:
        return self.value_and_grad(x)[0]

    def value_and_grad(self, x):
        beta, params = _unpack(np.asarray(x, dtype=float), self.p, self.params0, self.free)
        sigma, rho, d_logphi, d_logpsi = self._sigma(params)
        chol = cholesky_with_jitter(sigma)
        resid = (self.samples - self.design @ np.asarray(beta, dtype=float)).T  # (N, B)
        half = solve_triangular(chol, resid, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        lognum = -0.5 * logdet - 0.5 * np.sum(half * half, axis=0)
        logratio = lognum - self._anchor_logdens
        m = float(np.max(logratio))
        shifted = np.exp(logratio - m)
        total = float(np.sum(shifted))
        value = m + math.log(total / self.b)
        weights = shifted / total
        ess = 1.0 / float(np.sum(weights * weights))
        self.last_ess = ess
        if self.strict_ess and ess < 0.01 * self.b:
            raise DegenerateWeightsError(
                f"importance weights collapsed: ESS {ess:.1f} of B={self.b}")

        # gradient: weighted average of per-sample score vectors
        u_mat = solve_triangular(chol, half, lower=True, trans="T")  # Sigma^-1 resid, (N, B)
        grad_beta = self.design.T @ (u_mat @ weights)
        sigma_inv = cho_solve((chol, True), np.eye(self.n))
        m_mat = (u_mat * weights) @ u_mat.T  # sum_i w_i u_i u_i'
        grads = [grad_beta]
        for name in self.free:
            if name == "sigma2":
                sigma_dot = sigma
            elif name == "nu2":
                sigma_dot = np.diag(np.full(self.n, params.tau2))
            elif name == "phi":
                sigma_dot = params.sigma2 * d_logphi
            elif name == "psi":
                sigma_dot = params.sigma2 * d_logpsi
            g = -0.5 * float(np.sum(sigma_inv * sigma_dot)) + 0.5 * float(np.sum(m_mat * sigma_dot))
            grads.append(np.array([g]))
        return value, np.concatenate(grads)


# --- the fitting loop ----------------------------------------------------------


@dataclass(frozen=True)
class McmlControl:
    """Monte Carlo and optimizer settings for fit_mcml.

    The outer loop stops when the relative parameter change drops below
    rel_tol or when re-anchoring improves the approximate log likelihood by
    less than gain_tol; with finite Monte Carlo samples the parameters
    jitter at the noise floor, so the likelihood-gain criterion is the one
    that normally fires.
    """

    n_samples: int = 10000
    burn_in: int = 2000
    thin: int = 8
    outer_iters: int = 10
    rel_tol: float = 1e-3
    gain_tol: float = 0.01
    max_step: float = 2.0       # per-outer-iteration box half-width on log params
    hessian_step: float = 1e-4

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "burn_in": self.burn_in, "thin": self.thin,
                "outer_iters": self.outer_iters, "rel_tol": self.rel_tol,
                "gain_tol": self.gain_tol, "max_step": self.max_step,
                "hessian_step": self.hessian_step}


@dataclass
class FittedModel:
    """Maximum likelihood estimate with log-scale observed information."""

    beta: np.ndarray
    params: CorrelationParams
    free: tuple
    lambda_vector: np.ndarray        # (beta, log-scale covariance params)
    hessian_log_scale: np.ndarray
    control: McmlControl
    seed: int
    converged: bool
    rel_change: float
    n_outer: int
    accept_rate: float
    final_loglik_gain: float
    design_spec: tuple = ()

    @property
    def names(self) -> tuple:
        return parameter_names(self.beta.size, self.free)

    def standard_errors(self) -> np.ndarray:
        cov = _invert_negated_hessian(self.hessian_log_scale)
        return np.sqrt(np.diag(cov))

    def summary_rows(self) -> list:
        """Estimate and 95% GA interval per parameter, covariance parameters
        back-transformed to their natural scale."""
        se = self.standard_errors()
        rows = []
        for k, name in enumerate(self.names):
            est = float(self.lambda_vector[k])
            lo, hi = est - 1.959964 * se[k], est + 1.959964 * se[k]
            if name.startswith("log_"):
                rows.append((name[4:], math.exp(est), math.exp(lo), math.exp(hi)))
            else:
                rows.append((name, est, lo, hi))
        return rows

    def to_json_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "params": self.params.to_dict(),
            "free": list(self.free),
            "lambda_vector": [float(x) for x in self.lambda_vector],
            "hessian_log_scale": [[float(x) for x in row] for row in self.hessian_log_scale],
            "control": self.control.to_dict(),
            "seed": self.seed,
            "converged": self.converged,
            "rel_change": self.rel_change,
            "n_outer": self.n_outer,
            "accept_rate": self.accept_rate,
            "final_loglik_gain": self.final_loglik_gain,
            "design_spec": [list(s) for s in self.design_spec],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, d: dict) -> "FittedModel":
        return cls(beta=np.asarray(d["beta"], dtype=float),
                   params=CorrelationParams.from_dict(d["params"]),
                   free=tuple(d["free"]),
                   lambda_vector=np.asarray(d["lambda_vector"], dtype=float),
                   hessian_log_scale=np.asarray(d["hessian_log_scale"], dtype=float),
                   control=McmlControl(**d["control"]), seed=int(d["seed"]),
                   converged=bool(d["converged"]), rel_change=float(d["rel_change"]),
                   n_outer=int(d["n_outer"]), accept_rate=float(d["accept_rate"]),
                   final_loglik_gain=float(d["final_loglik_gain"]),
                   design_spec=tuple(tuple(s) for s in d.get("design_spec", [])))

    @classmethod
    def load_json(cls, path) -> "FittedModel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _invert_negated_hessian(hessian: np.ndarray) -> np.ndarray:
    neg = -np.asarray(hessian, dtype=float)
    try:
        chol = cho_factor(neg)
    except np.linalg.LinAlgError as exc:
        raise SingularHessianError("observed information is not positive definite") from exc
    if not np.all(np.isfinite(neg)):
        raise SingularHessianError("observed information contains non-finite entries")
    return cho_solve(chol, np.eye(neg.shape[0]))


def fit_mcml(dataset, design, init_params: CorrelationParams, init_beta=None,
             control: McmlControl = McmlControl(), seed: int = 0,
             free=FREE_COV_PARAMS) -> FittedModel:
    """Monte Carlo maximum likelihood fit of the spatio-temporal model.

    Alternates (sample latent field at the anchor) -> (quasi-Newton
    maximization of log L_B) -> (move the anchor) until the relative
    parameter change drops below control.rel_tol. ``free`` lists which of
    (sigma2, phi, nu2, psi) are estimated; (delta, xi, kappa) are always
    taken from ``init_params``. ``init_beta`` defaults to the plain
    logistic regression estimate. A free noise ratio nu2 is floored at
    1e-3 at initialization: log nu2 -> -inf is a flat direction of the
    likelihood (the gradient scales with nu2 itself), so a hard-zero
    nugget start can never escape.
    """
    if init_params.sigma2 <= 0:
        raise InvalidParamError("fitting requires sigma2 > 0")
    if dataset.n_distinct_locations() < 2:
        raise ValidationError("spatial fitting needs at least two distinct locations")
    y, n, coords = dataset.y, dataset.n, dataset.coords
    rows = design.rows
    beta = np.asarray(init_beta, dtype=float) if init_beta is not None else _glm_beta(y, n, rows)
    params = init_params
    free = tuple(free)
    if "nu2" in free and params.tau2 < 1e-3 * params.sigma2:
        params = params.with_updates(tau2=1e-3 * params.sigma2)

    x = _pack(beta, params, free)
    converged = False
    rel_change = math.inf
    accept_rate = math.nan
    gain = 0.0
    objective = None
    outer = 0
    for outer in range(1, control.outer_iters + 1):
        mu = rows @ beta
        sigma = covariance_matrix(coords, params)
        chol = cholesky_with_jitter(sigma)
        sigma_inv = cho_solve((chol, True), np.eye(coords.shape[0]))
        state = init_latent_state(y, n, mu, sigma_inv)
        samples, state, accept_rate = mala_sample(
            y, n, mu, sigma_inv, state, n_samples=control.n_samples,
            burn_in=control.burn_in, thin=control.thin,
            seed=substream_seed(seed, "mcml-outer", outer))
        objective = McmlObjective(samples, rows, coords, beta, params,
                                  free=free, strict_ess=False)
        x0 = objective.anchor_vector()
        bounds = ([(None, None)] * beta.size
                  + [(float(x0[beta.size + k] - control.max_step),
                      float(x0[beta.size + k] + control.max_step)) for k in range(len(free))])

        def negated(xv):
            value, grad = objective.value_and_grad(xv)
            return -value, -grad

        res = minimize(negated, x0=x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-7})
        x_new = res.x
        gain = float(-res.fun)
        rel_change = float(np.max(np.abs(x_new - x) / (1.0 + np.abs(x))))
        beta, params = _unpack(x_new, beta.size, params, free)
        x = x_new
        if rel_change < control.rel_tol or gain < control.gain_tol:
            converged = True
            break

    # observed information on the fitting scale: central differences of the
    # analytic gradient, using the last anchor's samples (anchor ~= optimum)
    hessian = _fd_hessian(objective, x, control.hessian_step)
    return FittedModel(beta=beta, params=params, free=free, lambda_vector=x,
                       hessian_log_scale=hessian, control=control, seed=seed,
                       converged=converged, rel_change=rel_change, n_outer=outer,
                       accept_rate=accept_rate, final_loglik_gain=gain,
                       design_spec=tuple(design.column_spec))


def _fd_hessian(objective: McmlObjective, x: np.ndarray, step: float) -> np.ndarray:
    dim = x.size
    hess = np.empty((dim, dim))
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = step
        _, g_plus = objective.value_and_grad(x + e)
        _, g_minus = objective.value_and_grad(x - e)
        hess[k] = (g_plus - g_minus) / (2.0 * step)
    return 0.5 * (hess + hess.T)


# --- sampling distribution, bootstrap, profile ---------------------------------


@dataclass(frozen=True)
class GaussianSamplingDistribution:
    """Gaussian approximation of the estimator's sampling distribution."""

    mean: np.ndarray
    cov: np.ndarray
    names: tuple
    p: int          # number of regression coefficients
    free: tuple
    template: CorrelationParams

    def draw(self, n_draws: int, seed: int) -> np.ndarray:
        rng = substream(seed, "ga-draws")
        chol = cholesky_with_jitter(self.cov, scale=float(np.mean(np.diag(self.cov))))
        return self.mean + (chol @ rng.standard_normal((self.mean.size, n_draws))).T

    def as_model_params(self, vector: np.ndarray):
        return _unpack(np.asarray(vector, dtype=float), self.p, self.template, self.free)

    def marginal_intervals(self, level: float = 0.95) -> list:
        from scipy.stats import norm
        z = norm.ppf(0.5 + level / 2.0)
        se = np.sqrt(np.diag(self.cov))
        rows = []
        for k, name in enumerate(self.names):
            est, lo, hi = self.mean[k], self.mean[k] - z * se[k], self.mean[k] + z * se[k]
            if name.startswith("log_"):
                rows.append((name[4:], math.exp(est), math.exp(lo), math.exp(hi)))
            else:
                rows.append((name, float(est), float(lo), float(hi)))
        return rows


def mle_sampling_distribution(fit: FittedModel) -> GaussianSamplingDistribution:
    """Gaussian on (beta, log covariance params): mean at the estimate,
    covariance from the inverted negated log-likelihood Hessian."""
    if not fit.converged:
        raise ValidationError("sampling distribution requires a converged fit")
    cov = _invert_negated_hessian(fit.hessian_log_scale)
    return GaussianSamplingDistribution(mean=fit.lambda_vector.copy(), cov=cov,
                                        names=fit.names, p=fit.beta.size,
                                        free=fit.free, template=fit.params)


def simulate_counts(beta, params: CorrelationParams, dataset, design, seed: int) -> np.ndarray:
    """Draw binomial counts from the model at the data design (one dataset)."""
    rng = substream(seed, "simulate-counts")
    coords = dataset.coords
    chol = cholesky_with_jitter(correlation_matrix(coords, params), scale=1.0)
    w = (design.rows @ np.asarray(beta, dtype=float)
         + math.sqrt(params.sigma2) * (chol @ rng.standard_normal(len(dataset)))
         + math.sqrt(params.tau2) * rng.standard_normal(len(dataset)))
    return rng.binomial(dataset.n.astype(int), expit(w)).astype(float)


@dataclass(frozen=True)
class BootstrapSet:
    """Refitted estimates from datasets simulated at the plug-in MLE."""

    replicates: np.ndarray  # (R, dim) on the fitting scale
    failures: int
    names: tuple
    p: int = 1                                   # regression coefficient count
    template: CorrelationParams | None = None    # fixed (delta, xi, kappa)

    def as_model_params(self, row: np.ndarray):
        return _unpack(np.asarray(row, dtype=float), self.p, self.template,
                       tuple(n[4:] for n in self.names[self.p:]))

    def percentile_intervals(self, level: float = 0.95) -> list:
        alpha = (1.0 - level) / 2.0
        lo = np.percentile(self.replicates, 100 * alpha, axis=0)
        hi = np.percentile(self.replicates, 100 * (1 - alpha), axis=0)
        rows = []
        for k, name in enumerate(self.names):
            if name.startswith("log_"):
                rows.append((name[4:], math.exp(lo[k]), math.exp(hi[k])))
            else:
                rows.append((name, float(lo[k]), float(hi[k])))
        return rows

    def to_json_dict(self) -> dict:
        return {"names": list(self.names), "failures": self.failures,
                "p": self.p,
                "template": self.template.to_dict() if self.template else None,
                "replicates": [[float(x) for x in row] for row in self.replicates]}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, d: dict) -> "BootstrapSet":
        template = CorrelationParams.from_dict(d["template"]) if d.get("template") else None
        return cls(replicates=np.asarray(d["replicates"], dtype=float),
                   failures=int(d["failures"]), names=tuple(d["names"]),
                   p=int(d.get("p", 1)), template=template)

    @classmethod
    def load_json(cls, path) -> "BootstrapSet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _bootstrap_one(args):
    (dataset, design, beta, params, control, free, seed, r) = args
    y_sim = simulate_counts(beta, params, dataset, design, substream_seed(seed, "boot-data", r))
    sim_ds = _dataset_with_counts(dataset, y_sim)
    fit = fit_mcml(sim_ds, design, init_params=params, init_beta=beta,
                   control=control, seed=substream_seed(seed, "boot-fit", r), free=free)
    return fit.lambda_vector


def _dataset_with_counts(dataset, y_new: np.ndarray):
    from dataclasses import replace as dc_replace
    records = [dc_replace(rec, n_positive=int(y_new[k])) for k, rec in enumerate(dataset.records)]
    return dc_replace(dataset, records=records)


def parametric_bootstrap(fit: FittedModel, dataset, design, r_replicates: int,
                         seed: int = 0, parallelism: int = 1,
                         control: McmlControl | None = None) -> BootstrapSet:
    """Simulate-then-refit bootstrap of the estimator's distribution.

    Each replicate keeps the (x, t, n) design and redraws counts at the
    plug-in estimate, then refits by MCML. More than 10% failed refits is
    an error. ``control`` may lighten the per-replicate Monte Carlo effort.
    """
    if r_replicates < 1:
        raise ValidationError("need at least one bootstrap replicate")
    control = control or fit.control
    jobs = [(dataset, design, fit.beta, fit.params, control, fit.free, seed, r)
            for r in range(r_replicates)]
    rows = []
    failures = 0
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            futures = list(pool.map(_bootstrap_one_safe, jobs))
        for out in futures:
            if out is None:
                failures += 1
            else:
                rows.append(out)
    else:
        for job in jobs:
            out = _bootstrap_one_safe(job)
            if out is None:
                failures += 1
            else:
                rows.append(out)
    if failures > 0.1 * r_replicates:
        raise NumericalError(f"{failures} of {r_replicates} bootstrap refits failed")
    return BootstrapSet(replicates=np.asarray(rows), failures=failures, names=fit.names,
                        p=fit.beta.size, template=fit.params)


def _bootstrap_one_safe(args):
    try:
        return _bootstrap_one(args)
    except PrevmapError:
        return None


def fit_mcml_select_kappa(dataset, design, init_params: CorrelationParams,
                          control: McmlControl = McmlControl(), seed: int = 0,
                          kappas=(0.5, 1.5, 2.5), free=FREE_COV_PARAMS):
    """Fit at each smoothness in ``kappas`` and keep the best by likelihood.

    The candidate fits' log likelihoods are made comparable by importance
    sampling from the first candidate's fit (the latent samples are shared,
    only the Gaussian densities differ across kappa). Ties within 1e-9 go
    to the smaller kappa. Returns (best_fit, {kappa: relative log lik}).
    """
    kappas = tuple(sorted(float(k) for k in kappas))
    fits = []
    for i, kappa in enumerate(kappas):
        fit = fit_mcml(dataset, design, init_params=init_params.with_updates(kappa=kappa),
                       control=control, seed=substream_seed(seed, "kappa", i), free=free)
        fits.append(fit)

    anchor = fits[0]
    y, n, coords = dataset.y, dataset.n, dataset.coords
    mu = design.rows @ anchor.beta
    chol = cholesky_with_jitter(covariance_matrix(coords, anchor.params))
    sigma_inv = cho_solve((chol, True), np.eye(coords.shape[0]))
    state = init_latent_state(y, n, mu, sigma_inv)
    samples, _, _ = mala_sample(y, n, mu, sigma_inv, state,
                                n_samples=control.n_samples, burn_in=control.burn_in,
                                thin=control.thin, seed=substream_seed(seed, "kappa-anchor"))
    shared = McmlObjective(samples, design.rows, coords, anchor.beta, anchor.params,
                           free=free, strict_ess=False)
    rel = np.array([shared.cross_loglik(fit.beta, fit.params) for fit in fits])
    best = 0
    for k in range(1, len(fits)):
        if rel[k] > rel[best] + 1e-9:
            best = k
    return fits[best], {kappa: float(r) for kappa, r in zip(kappas, rel)}


@dataclass(frozen=True)
class ProfileDeviance:
    """Profile deviance over a grid of the space-time interaction parameter."""

    xi_grid: np.ndarray
    loglik: np.ndarray        # relative log likelihood at each grid point
    deviance: np.ndarray      # 2 {max loglik - loglik}
    xi_hat: float
    reference_95: float = CHI2_1_95

    def to_json_dict(self) -> dict:
        return {"xi_grid": [float(x) for x in self.xi_grid],
                "loglik": [float(x) for x in self.loglik],
                "deviance": [float(x) for x in self.deviance],
                "xi_hat": self.xi_hat, "reference_95": self.reference_95}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def profile_deviance_xi(dataset, design, xi_grid, init_params: CorrelationParams,
                        control: McmlControl = McmlControl(), seed: int = 0,
                        free=FREE_COV_PARAMS) -> ProfileDeviance:
    """D(xi) = 2 {max_xi log L_p - log L_p(xi)} over a grid of xi values.

    Each grid point fixes xi and re-maximizes everything else. The fitted
    log likelihoods are put on a common scale by importance sampling from
    the first grid point's fit, so the curve is comparable across xi.
    """
    xi_grid = np.asarray(xi_grid, dtype=float)
    if np.any((xi_grid < 0) | (xi_grid > 1)):
        raise InvalidParamError("xi grid must lie in [0, 1]")
    fits = []
    for k, xi in enumerate(xi_grid):
        fit = fit_mcml(dataset, design, init_params=init_params.with_updates(xi=float(xi)),
                       control=control, seed=substream_seed(seed, "profile", k), free=free)
        fits.append(fit)

    # common anchor: simulate once at the first fit, evaluate every fit there
    anchor = fits[0]
    y, n, coords = dataset.y, dataset.n, dataset.coords
    mu = design.rows @ anchor.beta
    sigma = covariance_matrix(coords, anchor.params)
    chol = cholesky_with_jitter(sigma)
    sigma_inv = cho_solve((chol, True), np.eye(coords.shape[0]))
    state = init_latent_state(y, n, mu, sigma_inv)
    samples, _, _ = mala_sample(y, n, mu, sigma_inv, state,
                                n_samples=control.n_samples, burn_in=control.burn_in,
                                thin=control.thin, seed=substream_seed(seed, "profile-anchor"))
    shared = McmlObjective(samples, design.rows, coords, anchor.beta, anchor.params,
                           free=free, strict_ess=False)
    rel = np.array([shared.cross_loglik(fit.beta, fit.params) for fit in fits])
    deviance = 2.0 * (np.max(rel) - rel)
    xi_hat = float(xi_grid[int(np.argmax(rel))])
    return ProfileDeviance(xi_grid=xi_grid, loglik=rel, deviance=deviance, xi_hat=xi_hat)
