"""Bayesian fitting of the binomial-logit spatio-temporal model by MCMC.

One sweep updates three blocks: the latent total predictor W by a
preconditioned Langevin-Hastings step (same kernel as the likelihood
machinery, so both targets share one gradient implementation), the
regression coefficients by their exact Gaussian full conditional given W,
and the covariance parameters (log sigma2, log phi, log nu2, log psi) by a
joint random-walk Metropolis step with the log-scale Jacobian and uniform
prior support enforced in the acceptance ratio. The nugget is parametrized
as the ratio nu2 = tau2/sigma2, matching the prior specification.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericalError, ValidationError
from .exploratory import _glm_beta, expit, log1pexp
from .kernels import CorrelationParams, cholesky_with_jitter, covariance_matrix
from .mcml import init_latent_state
from .rng import substream
from .surveys import DesignMatrix, SurveyDataset

__all__ = [
    "PriorSpec",
    "McmcControl",
    "PosteriorDraws",
    "fit_bayes",
    "posterior_summaries",
    "effective_sample_size",
]

COV_PARAM_NAMES = ("sigma2", "phi", "nu2", "psi")


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior for beta, independent uniforms for the covariance
    parameters (on their natural scale)."""

    beta_mean: np.ndarray
    beta_cov: np.ndarray
    sigma2: tuple
    phi: tuple
    nu2: tuple
    psi: tuple

    def __post_init__(self):
        object.__setattr__(self, "beta_mean", np.asarray(self.beta_mean, dtype=float))
        object.__setattr__(self, "beta_cov", np.asarray(self.beta_cov, dtype=float))
        for name in COV_PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValidationError(f"prior bounds for {name} must be finite with lo < hi")
        if self.beta_cov.shape != (self.beta_mean.size, self.beta_mean.size):
            raise ValidationError("beta prior covariance has the wrong shape")
        try:
            np.linalg.cholesky(self.beta_cov)
        except np.linalg.LinAlgError:
            raise ValidationError("beta prior covariance must be positive definite")

    @classmethod
    def vague(cls, p: int) -> "PriorSpec":
        """The default diffuse specification: beta ~ MVN(0, 1e4 I),
        sigma2 ~ U(0,20), phi ~ U(0,1000), tau2/sigma2 ~ U(0,20), psi ~ U(0,20)."""
        return cls(beta_mean=np.zeros(p), beta_cov=1e4 * np.eye(p),
                   sigma2=(0.0, 20.0), phi=(0.0, 1000.0), nu2=(0.0, 20.0), psi=(0.0, 20.0))

    def support_bounds(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in COV_PARAM_NAMES], dtype=float)

    def to_dict(self) -> dict:
        return {"beta_mean": self.beta_mean.tolist(),
                "beta_cov": self.beta_cov.tolist(),
                **{name: list(getattr(self, name)) for name in COV_PARAM_NAMES}}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(beta_mean=np.asarray(d["beta_mean"], dtype=float),
                   beta_cov=np.asarray(d["beta_cov"], dtype=float),
                   sigma2=tuple(d["sigma2"]), phi=tuple(d["phi"]),
                   nu2=tuple(d["nu2"]), psi=tuple(d["psi"]))


@dataclass(frozen=True)
class McmcControl:
    """Chain length and adaptation settings for fit_bayes.

    sample_latent / sample_beta / sample_covariance freeze individual
    blocks, which is useful for conditional checks and for running with
    known covariance parameters.
    """

    n_iters: int = 6000
    burn_in: int = 2000
    thin: int = 1
    latent_steps: int = 5
    rw_target_accept: float = 0.25
    mala_target_accept: float = 0.574
    sample_latent: bool = True
    sample_beta: bool = True
    sample_covariance: bool = True

    def to_dict(self) -> dict:
        return {"n_iters": self.n_iters, "burn_in": self.burn_in, "thin": self.thin,
                "latent_steps": self.latent_steps, "rw_target_accept": self.rw_target_accept,
                "mala_target_accept": self.mala_target_accept,
                "sample_latent": self.sample_latent, "sample_beta": self.sample_beta,
                "sample_covariance": self.sample_covariance}


@dataclass
class PosteriorDraws:
    """Retained posterior draws for (beta, sigma2, phi, nu2, psi) plus the
    aligned latent-field draws."""

    names: tuple
    chains: np.ndarray          # (draws, p + 4) on the natural scale
    latent_draws: np.ndarray    # (draws, N)
    acceptance: dict
    priors: PriorSpec
    control: McmcControl
    seed: int
    p: int
    template: CorrelationParams

    @property
    def n_draws(self) -> int:
        return self.chains.shape[0]

    def beta_draw(self, h: int) -> np.ndarray:
        return self.chains[h, :self.p]

    def params_draw(self, h: int) -> CorrelationParams:
        s2, phi, nu2, psi = self.chains[h, self.p:self.p + 4]
        return self.template.with_updates(sigma2=float(s2), phi=float(phi),
                                          tau2=float(nu2 * s2), psi=float(psi))

    def latent_draw(self, h: int) -> np.ndarray:
        return self.latent_draws[h]

    def column(self, name: str) -> np.ndarray:
        return self.chains[:, self.names.index(name)]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(self.names) + "\n")
            for row in self.chains:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")

    def save_meta_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"priors": self.priors.to_dict(), "control": self.control.to_dict(),
                       "seed": self.seed, "acceptance": self.acceptance,
                       "names": list(self.names),
                       "template": self.template.to_dict()},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")


def _gaussian_latent_logdens(w, mu, chol):
    half = solve_triangular(chol, w - mu, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * logdet - 0.5 * float(half @ half)


def fit_bayes(dataset: SurveyDataset, design: DesignMatrix, priors: PriorSpec,
              control: McmcControl = McmcControl(), seed: int = 0,
              init_params: CorrelationParams | None = None,
              init_beta=None) -> PosteriorDraws:
    """Posterior sampling for (beta, sigma2, phi, nu2, psi, W).

    The latent preconditioner (mode and curvature) is built once at the
    initial parameters and kept fixed; the MALA and random-walk step sizes
    adapt toward their targets during burn-in only.
    """
    y, n, coords = dataset.y, dataset.n, dataset.coords
    rows = design.rows
    p = rows.shape[1]
    if priors.beta_mean.size != p:
        raise ValidationError("prior dimension does not match the design matrix")
    if np.linalg.matrix_rank(rows) < p:
        raise ValidationError("design matrix is rank deficient")
    if dataset.n_distinct_locations() < 2:
        raise ValidationError("spatial fitting needs at least two distinct locations")
    bounds = priors.support_bounds()

    beta = (np.asarray(init_beta, dtype=float) if init_beta is not None
            else _glm_beta(y, n, rows))
    if init_params is None:
        init_params = CorrelationParams(
            sigma2=min(1.0, 0.5 * bounds[0, 1]), tau2=min(1.0, 0.5 * bounds[0, 1]) * min(0.2, 0.5 * bounds[2, 1]),
            phi=0.2 * bounds[1, 1], psi=min(1.0, 0.5 * bounds[3, 1]))
    params = init_params
    log_cov = np.log([params.sigma2, params.phi, params.tau2 / params.sigma2, params.psi])
    if np.any(np.exp(log_cov) <= bounds[:, 0]) or np.any(np.exp(log_cov) >= bounds[:, 1]):
        raise ValidationError("initial covariance parameters must lie inside the prior support")

    rng = substream(seed, "bayes")
    sigma = covariance_matrix(coords, params)
    chol = cholesky_with_jitter(sigma)
    mu = rows @ beta
    state = init_latent_state(y, n, mu, cho_solve((chol, True), np.eye(coords.shape[0])))
    pre_chol = state.hess_chol
    w = state.w.copy()
    h = state.h

    beta_prior_prec = np.linalg.inv(priors.beta_cov)
    beta_prior_term = beta_prior_prec @ priors.beta_mean

    def latent_value_grad(w_vec):
        resid = w_vec - mu
        quad = cho_solve((chol, True), resid)
        value = float(np.sum(y * w_vec - n * log1pexp(w_vec)) - 0.5 * resid @ quad)
        return value, y - n * expit(w_vec) - quad

    rw_scale = 0.1
    base_steps = np.array([1.0, 1.0, 1.0, 1.0])
    # running moments of the log covariance parameters; during burn-in the
    # proposal uses the chain's own per-coordinate spread
    run_count = 0
    run_mean = np.zeros(4)
    run_m2 = np.zeros(4)
    n_keep = (control.n_iters - control.burn_in) // control.thin
    if n_keep < 1:
        raise ValidationError("no draws retained: check n_iters, burn_in, thin")
    names = tuple([f"beta{j + 1}" for j in range(p)] + list(COV_PARAM_NAMES))
    chains = np.empty((n_keep, p + 4))
    latents = np.empty((n_keep, coords.shape[0]))
    acc = {"latent": 0, "covariance": 0}
    tries = {"latent": 0, "covariance": 0}
    kept = 0

    value, grad = latent_value_grad(w)
    for sweep in range(1, control.n_iters + 1):
        adapting = sweep <= control.burn_in
        # --- latent field: preconditioned Langevin-Hastings ---
        if control.sample_latent:
            for _ in range(control.latent_steps):
                wt = pre_chol.T @ (w - state.mode_w)
                grad_t = solve_triangular(pre_chol, grad, lower=True)
                prop_t = wt + 0.5 * h * grad_t + math.sqrt(h) * rng.standard_normal(wt.size)
                w_prop = state.mode_w + solve_triangular(pre_chol, prop_t, lower=True, trans="T")
                value_p, grad_p = latent_value_grad(w_prop)
                grad_pt = solve_triangular(pre_chol, grad_p, lower=True)
                fwd = prop_t - wt - 0.5 * h * grad_t
                rev = wt - prop_t - 0.5 * h * grad_pt
                log_alpha = value_p - value + (fwd @ fwd - rev @ rev) / (2.0 * h)
                tries["latent"] += 1
                if math.log(rng.uniform()) < log_alpha:
                    w, value, grad = w_prop, value_p, grad_p
                    acc["latent"] += 1
                if adapting:
                    rate = min(1.0, math.exp(min(log_alpha, 0.0)))
                    h *= math.exp((rate - control.mala_target_accept) / sweep ** 0.6)
        # --- beta: exact Gaussian full conditional ---
        if control.sample_beta:
            sigma_inv_rows = cho_solve((chol, True), rows)
            prec = beta_prior_prec + rows.T @ sigma_inv_rows
            mean_rhs = beta_prior_term + sigma_inv_rows.T @ w
            prec_chol = cholesky_with_jitter(prec, scale=float(np.mean(np.diag(prec))))
            mean = cho_solve((prec_chol, True), mean_rhs)
            beta = mean + solve_triangular(prec_chol, rng.standard_normal(p), lower=True, trans="T")
            mu = rows @ beta
            value, grad = latent_value_grad(w)
        # --- covariance parameters: joint random walk on the log scale ---
        if control.sample_covariance:
            current_logdens = _gaussian_latent_logdens(w, mu, chol) + float(np.sum(log_cov))
            prop_log = log_cov + rw_scale * base_steps * rng.standard_normal(4)
            prop_nat = np.exp(prop_log)
            tries["covariance"] += 1
            inside = bool(np.all(prop_nat > bounds[:, 0]) and np.all(prop_nat < bounds[:, 1]))
            accepted = False
            if inside:
                s2, phi, nu2, psi = prop_nat
                cand = params.with_updates(sigma2=float(s2), phi=float(phi),
                                           tau2=float(nu2 * s2), psi=float(psi))
                cand_sigma = covariance_matrix(coords, cand)
                try:
                    cand_chol = np.linalg.cholesky(cand_sigma)
                except np.linalg.LinAlgError:
                    cand_chol = None
                if cand_chol is not None:
                    cand_logdens = (_gaussian_latent_logdens(w, mu, cand_chol)
                                    + float(np.sum(prop_log)))
                    if not np.isfinite(cand_logdens):
                        raise NumericalError("non-finite posterior density at proposal")
                    log_alpha = cand_logdens - current_logdens
                    if math.log(rng.uniform()) < log_alpha:
                        params, log_cov, chol = cand, prop_log, cand_chol
                        value, grad = latent_value_grad(w)
                        accepted = True
            acc["covariance"] += accepted
            if adapting:
                rate = 1.0 if accepted else 0.0
                rw_scale *= math.exp((rate - control.rw_target_accept) / sweep ** 0.6)
                run_count += 1
                delta = log_cov - run_mean
                run_mean += delta / run_count
                run_m2 += delta * (log_cov - run_mean)
                if run_count >= 100 and run_count % 50 == 0:
                    spread = np.sqrt(run_m2 / run_count)
                    base_steps = np.maximum(spread / max(np.max(spread), 1e-12), 0.1)
        # re-center the latent preconditioner once mid-burn-in, after the
        # parameters have drifted toward their posterior region
        if (control.sample_latent and sweep == control.burn_in // 2
                and (control.sample_beta or control.sample_covariance)):
            refreshed = init_latent_state(y, n, mu, cho_solve((chol, True), np.eye(coords.shape[0])))
            state = refreshed
            pre_chol = state.hess_chol
            value, grad = latent_value_grad(w)
        # --- retain ---
        if sweep > control.burn_in and (sweep - control.burn_in) % control.thin == 0:
            if not np.isfinite(value):
                raise NumericalError("non-finite log posterior at a retained state")
            chains[kept, :p] = beta
            chains[kept, p:] = np.exp(log_cov)
            latents[kept] = w
            kept += 1

    acceptance = {k: (acc[k] / tries[k] if tries[k] else math.nan) for k in acc}
    for block, rate in acceptance.items():
        if tries[block] and rate < 0.05:
            warnings.warn(f"MCMC block {block!r} acceptance rate {rate:.3f} is very low; "
                          "the chain may be stuck", stacklevel=2)
    return PosteriorDraws(names=names, chains=chains[:kept], latent_draws=latents[:kept],
                          acceptance=acceptance, priors=priors, control=control,
                          seed=seed, p=p, template=params)


def effective_sample_size(x: np.ndarray) -> float:
    """ESS by the initial-positive-sequence rule on the autocorrelation."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    centered = x - x.mean()
    var = float(centered @ centered) / n
    if var == 0:
        return float(n)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size)
    acf = np.fft.irfft(f * np.conjugate(f), size)[:n]
    acf = acf / acf[0]
    # sum autocorrelations over pairs while the pair sums stay positive
    total = 0.0
    t = 1
    while t + 1 < n:
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        total += pair
        t += 2
    return float(n / (1.0 + 2.0 * total))


def posterior_summaries(draws: PosteriorDraws) -> list:
    """Rows of (name, posterior mean, lower 2.5%, upper 97.5%, ESS)."""
    if draws.n_draws < 100:
        raise ValidationError("need at least 100 retained draws to summarize")
    rows = []
    for k, name in enumerate(draws.names):
        col = draws.chains[:, k]
        lo, hi = np.percentile(col, [2.5, 97.5])
        rows.append((name, float(col.mean()), float(lo), float(hi),
                     effective_sample_size(col)))
    return rows
