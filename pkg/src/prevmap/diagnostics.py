"""Monte Carlo checks of the spatio-temporal correlation structure.

Two tests share the same variogram machinery. The permutation test breaks
any spatio-temporal arrangement of the residuals by shuffling them over
the fixed (x, t) set: if the observed empirical variogram escapes the
permutation envelope, the residuals are not exchangeable, i.e. they carry
residual spatio-temporal correlation. The goodness-of-fit test simulates
new datasets from the *fitted* model (latent field, then binomial counts,
then a fresh non-spatial refit) and asks whether the observed variogram,
and the weighted squared-distance statistic

    T = sum_k |n(u_k, v_k)| [gamma_hat_k - gamma(u_k, v_k; theta)]^2,

look like draws from that null. Under a Bayesian fit, T is averaged over
posterior parameter draws and each null replicate is simulated at a fresh
posterior draw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PrevmapError, ValidationError
from .exploratory import (
    ResidualSet,
    VariogramTable,
    expit,
    fit_nonspatial_glmm,
    pair_bin_assignments,
    theoretical_variogram,
    variogram_from_assignments,
)
from .kernels import CorrelationParams, cholesky_with_jitter, correlation_matrix
from .rng import substream

__all__ = [
    "EnvelopeResult",
    "GofResult",
    "permutation_independence_test",
    "gof_simulation_test",
    "test_statistic_T",
]


@dataclass(frozen=True)
class EnvelopeResult:
    """Per-bin 95% tolerance envelope with a calibrated global p-value."""

    table: VariogramTable       # observed ordinates on the shared bins
    lower95: np.ndarray
    upper95: np.ndarray
    b_replicates: int
    reject: np.ndarray          # per bin: observed outside the envelope
    p_value: float              # global test from the replicate distribution
    n_failures: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.lower95) > np.asarray(self.upper95)):
            raise ValidationError("envelope lower bound exceeds upper bound")

    def to_json_dict(self) -> dict:
        return {
            "u_mid": [float(x) for x in self.table.u_mid],
            "v_mid": [float(x) for x in self.table.v_mid],
            "counts": [int(c) for c in self.table.counts],
            "observed": [float(g) for g in self.table.gamma],
            "lower95": [float(x) for x in self.lower95],
            "upper95": [float(x) for x in self.upper95],
            "reject": [bool(r) for r in self.reject],
            "b_replicates": self.b_replicates,
            "n_failures": self.n_failures,
            "p_value": self.p_value,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def plot_data_csv(self, path) -> None:
        """CSV with columns u_mid,v_mid,obs,lo,hi for external plotting."""
        with open(path, "w", newline="") as fh:
            fh.write("u_mid,v_mid,obs,lo,hi\n")
            for k in range(len(self.table)):
                fh.write(f"{float(self.table.u_mid[k])!r},{float(self.table.v_mid[k])!r},"
                         f"{float(self.table.gamma[k])!r},{float(self.lower95[k])!r},"
                         f"{float(self.upper95[k])!r}\n")


@dataclass(frozen=True)
class GofResult:
    """Observed statistic, its null distribution and the Monte Carlo p-value."""

    t_observed: float
    t_null: np.ndarray
    p_value: float
    mode: str  # "plugin-MLE" or "bayesian-averaged"

    def __post_init__(self):
        object.__setattr__(self, "t_null", np.asarray(self.t_null, dtype=float))
        expected = float(np.mean(self.t_null > self.t_observed))
        if abs(expected - self.p_value) > 1e-12:
            raise ValidationError("p_value inconsistent with stored null statistics")

    def to_json_dict(self) -> dict:
        return {"t_observed": self.t_observed, "p_value": self.p_value,
                "mode": self.mode, "t_null": [float(t) for t in self.t_null]}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def test_statistic_T(table: VariogramTable, params_or_draws) -> float:
    """Count-weighted squared distance between empirical and model variogram.

    ``params_or_draws`` is a single CorrelationParams (plug-in form) or an
    iterable of them (average over posterior draws).
    """
    if len(table) == 0:
        raise ValidationError("variogram table is empty")
    if isinstance(params_or_draws, CorrelationParams):
        draws = [params_or_draws]
    else:
        draws = list(params_or_draws)
        if not draws:
            raise ValidationError("no parameter draws supplied")
    total = 0.0
    for params in draws:
        resid = table.gamma - theoretical_variogram(table.u_mid, table.v_mid, params)
        total += float(np.sum(table.counts * resid * resid))
    return total / len(draws)


def _permutation_center(z: np.ndarray) -> float:
    """E[empirical variogram ordinate] under random permutation of z."""
    n = z.size
    s1, s2 = float(z.sum()), float(np.sum(z * z))
    return (n * s2 - s1 * s1) / (n * (n - 1))


def _global_statistic(gamma: np.ndarray, counts: np.ndarray, center: float) -> float:
    d = gamma - center
    return float(np.sum(counts * d * d))


def _envelope(replicates: np.ndarray):
    lower = np.percentile(replicates, 2.5, axis=0)
    upper = np.percentile(replicates, 97.5, axis=0)
    return lower, upper


def permutation_independence_test(residuals, coords, times, u_edges, v_edges,
                                  b_replicates: int = 1000, seed: int = 0) -> EnvelopeResult:
    """Permutation envelope test of residual spatio-temporal independence.

    Residual values are shuffled over the fixed (x, t) support; each shuffle
    yields one empirical variogram. Per-bin 2.5/97.5 percentiles form the
    envelope, and a global p-value comes from comparing the count-weighted
    distance of each variogram from its permutation expectation against the
    observed one (exact under exchangeability).
    """
    if b_replicates < 100:
        raise ValidationError("need at least 100 permutation replicates")
    z = residuals.z_tilde if isinstance(residuals, ResidualSet) else np.asarray(residuals, float)
    assignments = pair_bin_assignments(coords, times, u_edges, v_edges)
    observed = variogram_from_assignments(z, *assignments)
    i_idx, j_idx, flat, n_bins, _ = assignments
    inside = flat >= 0
    bins = flat[inside]
    counts_full = np.bincount(bins, minlength=n_bins)
    occupied = counts_full > 0
    counts = counts_full[occupied]

    rng = substream(seed, "permutation")
    gammas = np.empty((b_replicates, int(occupied.sum())))
    for b in range(b_replicates):
        zp = z[rng.permutation(z.size)]
        diffs = zp[i_idx[inside]] - zp[j_idx[inside]]
        sums = np.bincount(bins, weights=diffs * diffs, minlength=n_bins)
        gammas[b] = sums[occupied] / (2.0 * counts)

    lower, upper = _envelope(gammas)
    center = _permutation_center(z)
    t_obs = _global_statistic(observed.gamma, counts, center)
    t_rep = np.array([_global_statistic(g, counts, center) for g in gammas])
    p_value = (1.0 + float(np.sum(t_rep >= t_obs))) / (b_replicates + 1.0)
    reject = (observed.gamma < lower) | (observed.gamma > upper)
    return EnvelopeResult(table=observed, lower95=lower, upper95=upper,
                          b_replicates=b_replicates, reject=reject, p_value=p_value)


def _plugin_params(fit) -> tuple[np.ndarray, CorrelationParams]:
    beta = np.asarray(fit.beta, dtype=float)
    params = fit.params
    if not isinstance(params, CorrelationParams):
        raise ValidationError("fit object does not expose CorrelationParams")
    return beta, params


def gof_simulation_test(fit, dataset, design, u_edges, v_edges,
                        b_replicates: int = 1000, seed: int = 0,
                        estimator: str = "mode", t_draws: int = 100):
    """Simulation-based check that the fitted covariance model fits the data.

    ``fit`` is either a maximum-likelihood fit (attributes ``beta`` and
    ``params``; plug-in mode) or a posterior-draw container (attributes
    ``n_draws``, ``beta_draw(h)``, ``params_draw(h)``; Bayesian mode). Each
    replicate simulates the latent field and binomial counts under the
    fitted model, refits the non-spatial residual model, and recomputes the
    empirical variogram and the statistic T. Returns (EnvelopeResult,
    GofResult). Replicates whose refit fails are redrawn; more than 5%
    failures aborts.
    """
    if b_replicates < 100:
        raise ValidationError("need at least 100 simulation replicates")
    bayesian = hasattr(fit, "params_draw")
    coords3 = dataset.coords
    xy, t = coords3[:, :2], coords3[:, 2]
    n_trials = dataset.n

    assignments = pair_bin_assignments(xy, t, u_edges, v_edges)
    observed_res = fit_nonspatial_glmm(dataset, design, estimator=estimator)
    observed = variogram_from_assignments(observed_res.z_tilde, *assignments)

    if bayesian:
        idx = np.linspace(0, fit.n_draws - 1, min(t_draws, fit.n_draws)).astype(int)
        t_param_draws = [fit.params_draw(h) for h in idx]
        mode = "bayesian-averaged"
    else:
        beta_hat, params_hat = _plugin_params(fit)
        t_param_draws = params_hat
        mode = "plugin-MLE"
        chol = cholesky_with_jitter(correlation_matrix(coords3, params_hat), scale=1.0)
        mean = design.rows @ beta_hat

    t_obs = test_statistic_T(observed, t_param_draws)

    max_failures = int(np.ceil(0.05 * b_replicates))
    gammas = np.empty((b_replicates, len(observed)))
    t_null = np.empty(b_replicates)
    collected = 0
    failures = 0
    attempt = 0
    while collected < b_replicates:
        rng = substream(seed, "gof", attempt)
        attempt += 1
        if bayesian:
            h = int(rng.integers(0, fit.n_draws))
            beta_h = np.asarray(fit.beta_draw(h), dtype=float)
            params_h = fit.params_draw(h)
            chol_h = cholesky_with_jitter(correlation_matrix(coords3, params_h), scale=1.0)
            w = (design.rows @ beta_h
                 + np.sqrt(params_h.sigma2) * (chol_h @ rng.standard_normal(len(dataset)))
                 + np.sqrt(params_h.tau2) * rng.standard_normal(len(dataset)))
        else:
            w = (mean + np.sqrt(params_hat.sigma2) * (chol @ rng.standard_normal(len(dataset)))
                 + np.sqrt(params_hat.tau2) * rng.standard_normal(len(dataset)))
        y_sim = rng.binomial(n_trials.astype(int), expit(w)).astype(float)
        sim_ds = _with_counts(dataset, y_sim)
        try:
            res = fit_nonspatial_glmm(sim_ds, design, estimator=estimator)
        except PrevmapError:
            failures += 1
            if failures > max_failures:
                raise NumericalError(
                    f"goodness-of-fit aborted: {failures} of {attempt} replicate refits failed")
            continue
        table = variogram_from_assignments(res.z_tilde, *assignments)
        gammas[collected] = table.gamma
        t_null[collected] = test_statistic_T(table, t_param_draws)
        collected += 1

    lower, upper = _envelope(gammas)
    reject = (observed.gamma < lower) | (observed.gamma > upper)
    p_value = float(np.mean(t_null > t_obs))
    envelope = EnvelopeResult(table=observed, lower95=lower, upper95=upper,
                              b_replicates=b_replicates, reject=reject,
                              p_value=p_value, n_failures=failures)
    gof = GofResult(t_observed=t_obs, t_null=t_null, p_value=p_value, mode=mode)
    return envelope, gof


def _with_counts(dataset, y_new: np.ndarray):
    """Copy of the dataset with replaced positive counts (same design rows)."""
    from dataclasses import replace as dc_replace
    records = [dc_replace(r, n_positive=int(y_new[k])) for k, r in enumerate(dataset.records)]
    return dc_replace(dataset, records=records)
