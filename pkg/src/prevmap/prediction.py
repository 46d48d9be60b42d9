"""Predictive prevalence surfaces by joint conditional simulation.

Each replicate draws model parameters according to the chosen uncertainty
mode (plug-in point estimate, Gaussian approximation of the estimator's
sampling distribution, parametric-bootstrap replicates, or posterior
draws), one latent-field draw at the data points given those parameters,
and then the exact Gaussian conditional of the latent predictor at the
target cells, jointly across cells within each time slice. Prevalence is
expit of the target predictor d'beta + S; the nugget Z is measurement
noise and is excluded from the target surface.

Summaries kept per cell and time: mean, standard deviation, and a
101-point quantile sketch of the predictive prevalence distribution.
Full draws are retained when they fit the storage budget; district-level
averages need the joint draws, which is why sketch-only bundles refuse
them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import (
    GridMismatchError,
    ModeMismatchError,
    SketchOnlyError,
    ValidationError,
)
from .exploratory import expit
from .kernels import (
    CorrelationParams,
    cholesky_with_jitter,
    covariance_matrix,
    cross_lags,
    gneiting,
    matern,
    pairwise_lags,
)
from .mcml import (
    BootstrapSet,
    FittedModel,
    init_latent_state,
    mala_sample,
    mle_sampling_distribution,
)
from .rng import substream, substream_seed
from .surveys import PredictionGrid, design_from_columns

__all__ = [
    "ParamUncertaintyMode",
    "SurfaceBundle",
    "DistrictSummary",
    "conditional_simulate",
    "conditional_moments",
    "quantile_surface",
    "exceedance_surface",
    "district_average",
    "compare_modes",
    "sketch_quantile",
    "sketch_exceedance",
    "save_bundle",
    "load_bundle",
    "target_design_rows",
]

SKETCH_PROBS = np.linspace(0.0, 1.0, 101)
MODE_TAGS = ("plugin", "gaussian_approx", "bootstrap", "bayesian")


@dataclass(frozen=True)
class ParamUncertaintyMode:
    """How parameter uncertainty enters prediction: the tag picks the
    weighting distribution and the source supplies its draws."""

    tag: str
    source: object

    def __post_init__(self):
        if self.tag not in MODE_TAGS:
            raise ModeMismatchError(f"unknown mode tag {self.tag!r}")
        expected = {"plugin": FittedModel, "gaussian_approx": FittedModel,
                    "bootstrap": BootstrapSet}
        if self.tag in expected and not isinstance(self.source, expected[self.tag]):
            raise ModeMismatchError(f"mode {self.tag!r} needs a {expected[self.tag].__name__} source")
        if self.tag == "bayesian" and not hasattr(self.source, "params_draw"):
            raise ModeMismatchError("mode 'bayesian' needs posterior draws as the source")

    @classmethod
    def plugin(cls, fit: FittedModel):
        return cls(tag="plugin", source=fit)

    @classmethod
    def gaussian_approx(cls, fit: FittedModel):
        return cls(tag="gaussian_approx", source=fit)

    @classmethod
    def bootstrap(cls, replicates: BootstrapSet):
        return cls(tag="bootstrap", source=replicates)

    @classmethod
    def bayesian(cls, draws):
        return cls(tag="bayesian", source=draws)


def target_design_rows(design_spec, covariate_values: dict, n_rows: int) -> np.ndarray:
    """Design rows at prediction targets from constant covariate values.

    Targets are standardized (for example fixed age limits), so every cell
    shares the same covariate vector; the column recipe of the fitted
    design is replayed on those constants.
    """
    values = {}
    for source, transform in design_spec:
        if transform == "intercept":
            continue
        if source not in covariate_values:
            raise ValidationError(f"prediction needs a value for covariate {source!r}")
        values[source] = np.full(n_rows, float(covariate_values[source]))
    terms = [(source, transform) for source, transform in design_spec if transform != "intercept"]
    return design_from_columns(values, terms, n_rows).rows


def conditional_moments(beta, params: CorrelationParams, data_coords, data_design,
                        w_data, target_coords, target_design):
    """Exact Gaussian conditional mean and covariance of the target
    predictor W* = d'beta + S given the data-point predictor W.

    Data covariance includes the nugget; target and cross covariances do
    not, because Z is excluded from the prediction target.
    """
    beta = np.asarray(beta, dtype=float)
    mu_data = np.asarray(data_design, dtype=float) @ beta
    mu_target = np.asarray(target_design, dtype=float) @ beta
    sigma = covariance_matrix(np.asarray(data_coords, dtype=float), params)
    u, v = cross_lags(np.asarray(data_coords, dtype=float), np.asarray(target_coords, dtype=float))
    cross = params.sigma2 * gneiting(u, v, params)
    ut, vt = pairwise_lags(np.asarray(target_coords, dtype=float))
    target_cov = params.sigma2 * gneiting(ut, vt, params)
    chol = cholesky_with_jitter(sigma)
    solved = cho_solve((chol, True), cross)           # Sigma^-1 C, (n, c)
    mean = mu_target + solved.T @ (np.asarray(w_data, dtype=float) - mu_data)
    cov = target_cov - cross.T @ solved
    return mean, cov


@dataclass
class SurfaceBundle:
    """Per-time predictive summaries (and optionally full draws) of
    prevalence on the masked-in grid cells."""

    grid: PredictionGrid
    mode_tag: str
    seed: int
    b_pred: int
    mean: np.ndarray            # (T, C) over active cells
    sd: np.ndarray              # (T, C)
    sketch: np.ndarray          # (T, C, 101) empirical quantiles of prevalence
    draws: np.ndarray | None    # (T, C, B) float32, or None if sketch-only
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.sketch < 0) or np.any(self.sketch > 1):
            raise ValidationError("prevalence quantiles must lie in [0, 1]")
        if np.any(np.diff(self.sketch, axis=-1) < -1e-7):
            raise ValidationError("quantile sketch must be non-decreasing")

    @property
    def times(self) -> tuple:
        return self.grid.times

    @property
    def n_active(self) -> int:
        return self.mean.shape[1]

    def has_draws(self) -> bool:
        return self.draws is not None

    def quantile(self, alpha: float) -> np.ndarray:
        """Per-cell alpha-quantile of predictive prevalence, (T, C)."""
        if not (0.0 < alpha < 1.0):
            raise ValidationError("alpha must be in (0, 1)")
        if self.has_draws():
            return np.quantile(self.draws.astype(np.float64), alpha, axis=-1)
        return sketch_quantile(self.sketch, alpha)

    def exceedance(self, threshold: float) -> np.ndarray:
        """Per-cell P(prevalence > threshold | data), (T, C)."""
        if not (0.0 < threshold <= 1.0):
            raise ValidationError("threshold must be in (0, 1]")
        if self.has_draws():
            return np.mean(self.draws > np.float32(threshold), axis=-1)
        return sketch_exceedance(self.sketch, threshold)

    def rasterize(self, values_tc: np.ndarray) -> np.ndarray:
        """Spread active-cell values (T, C) onto the full grid (T, n_cells)
        with NaN outside the region mask."""
        out = np.full((values_tc.shape[0], self.grid.n_cells), np.nan)
        out[:, self.grid.active_indices] = values_tc
        return out


def quantile_surface(bundle: SurfaceBundle, alpha: float) -> np.ndarray:
    return bundle.quantile(alpha)


def exceedance_surface(bundle: SurfaceBundle, threshold: float) -> np.ndarray:
    return bundle.exceedance(threshold)


def sketch_quantile(sketch: np.ndarray, alpha: float) -> np.ndarray:
    """Linear interpolation of the 101-point sketch at probability alpha."""
    pos = alpha * 100.0
    lo = min(int(math.floor(pos)), 99)
    frac = pos - lo
    return (1.0 - frac) * sketch[..., lo] + frac * sketch[..., lo + 1]


def sketch_exceedance(sketch: np.ndarray, threshold: float) -> np.ndarray:
    """1 - CDF(threshold) with the CDF linearly interpolated between the
    stored quantiles; exact to within one sketch bin (0.01)."""
    flat = sketch.reshape(-1, sketch.shape[-1])
    out = np.empty(flat.shape[0])
    for k in range(flat.shape[0]):
        row = flat[k]
        if threshold < row[0]:
            out[k] = 1.0
        elif threshold >= row[-1]:
            out[k] = 0.0
        else:
            # rightmost index with row[j] <= threshold; interpolate within bin
            j = int(np.searchsorted(row, threshold, side="right")) - 1
            j = min(j, row.size - 2)
            width = row[j + 1] - row[j]
            frac = 0.0 if width <= 0 else (threshold - row[j]) / width
            out[k] = 1.0 - (SKETCH_PROBS[j] + frac * 0.01)
    return out.reshape(sketch.shape[:-1])


def _lambda_draws(mode: ParamUncertaintyMode, b_pred: int, seed: int):
    """Per-replicate (beta, params) pairs, and posterior indices for the
    bayesian mode (whose latent draws are reused)."""
    rng = substream(seed, "lambda")
    if mode.tag == "plugin":
        fit = mode.source
        return [(fit.beta, fit.params)] * b_pred, None
    if mode.tag == "gaussian_approx":
        ga = mle_sampling_distribution(mode.source)
        vectors = ga.draw(b_pred, seed=substream_seed(seed, "lambda"))
        return [ga.as_model_params(v) for v in vectors], None
    if mode.tag == "bootstrap":
        boot = mode.source
        idx = rng.integers(0, boot.replicates.shape[0], size=b_pred)
        return [boot.as_model_params(boot.replicates[i]) for i in idx], None
    draws = mode.source
    idx = rng.integers(0, draws.n_draws, size=b_pred)
    return [(draws.beta_draw(i), draws.params_draw(i)) for i in idx], idx


def _latent_draws_for(mode, dataset, design, lambdas, posterior_idx, b_pred, seed,
                      latent_burn):
    """One data-point latent draw per replicate, shape (B, N).

    Plug-in mode advances a single tuned chain and keeps spaced segments;
    the other likelihood-based modes run a short fresh chain from the
    Laplace mode at each replicate's parameters; bayesian mode reuses the
    stored posterior latent draws (the correct joint (lambda, W) sample).
    """
    y, n, coords = dataset.y, dataset.n, dataset.coords
    rows = design.rows
    if mode.tag == "bayesian":
        return np.array([mode.source.latent_draw(int(h)) for h in posterior_idx])
    if mode.tag == "plugin":
        fit = mode.source
        sigma = covariance_matrix(coords, fit.params)
        chol = cholesky_with_jitter(sigma)
        sigma_inv = cho_solve((chol, True), np.eye(coords.shape[0]))
        state = init_latent_state(y, n, rows @ fit.beta, sigma_inv)
        latents, _, _ = mala_sample(
            y, n, rows @ fit.beta, sigma_inv, state, n_samples=b_pred,
            burn_in=max(latent_burn, 500), thin=10,
            seed=substream_seed(seed, "latent-plugin"))
        return latents
    out = np.empty((b_pred, coords.shape[0]))
    for r in range(b_pred):
        beta_r, params_r = lambdas[r]
        mu_r = rows @ np.asarray(beta_r, dtype=float)
        sigma_r = covariance_matrix(coords, params_r)
        chol_r = cholesky_with_jitter(sigma_r)
        sigma_inv_r = cho_solve((chol_r, True), np.eye(coords.shape[0]))
        state_r = init_latent_state(y, n, mu_r, sigma_inv_r)
        latent, _, _ = mala_sample(y, n, mu_r, sigma_inv_r, state_r, n_samples=1,
                                   burn_in=latent_burn, thin=1,
                                   seed=substream_seed(seed, "latent", r))
        out[r] = latent[0]
    return out


def conditional_simulate(mode: ParamUncertaintyMode, dataset, design, grid: PredictionGrid,
                         target_covariates: dict | None = None, b_pred: int = 1000,
                         seed: int = 0, keep_draws: bool | None = None,
                         draw_budget: int = 50_000_000,
                         latent_burn: int = 200) -> SurfaceBundle:
    """Simulate the predictive prevalence distribution on the grid.

    For every replicate: draw parameters per ``mode``; draw the latent
    predictor at the data points (a fresh Langevin chain segment, or the
    stored posterior latent draw in bayesian mode); draw the target
    predictor from its exact Gaussian conditional jointly across the cells
    of each time slice; apply expit. Target sub-streams are keyed by
    (replicate, slice), so the draws are identical whether or not they are
    retained. When cells x times x replicates exceeds ``draw_budget`` the
    bundle keeps only mean, sd and the quantile sketch, processing one
    time slice at a time.
    """
    if grid.active_indices.size < 1:
        raise ValidationError("prediction grid has no active cells")
    if b_pred < 100:
        raise ValidationError("need at least 100 predictive replicates")
    coords = dataset.coords
    rows = design.rows
    times = grid.times
    centers = grid.active_centers()
    c = centers.shape[0]
    t_count = len(times)

    target_rows = target_design_rows(design.column_spec, target_covariates or {}, c)
    lambdas, posterior_idx = _lambda_draws(mode, b_pred, seed)
    latents = _latent_draws_for(mode, dataset, design, lambdas, posterior_idx,
                                b_pred, seed, latent_burn)

    if keep_draws is None:
        keep_draws = t_count * c * b_pred <= draw_budget

    # residuals Sigma^-1 (W - mu) per replicate; for the plug-in mode the
    # covariance factor and the per-slice conditional factors are shared
    plugin_state = None
    if mode.tag == "plugin":
        fit = mode.source
        chol = cholesky_with_jitter(covariance_matrix(coords, fit.params))
        factors = _slice_factors(coords, centers, times, fit.params, chol)
        mu_data = rows @ fit.beta
        resids = cho_solve((chol, True), (latents - mu_data).T).T   # (B, N)
        plugin_state = (factors, resids, target_rows @ fit.beta)

    mean = np.empty((t_count, c))
    sd = np.empty((t_count, c))
    sketch = np.empty((t_count, c, 101), dtype=np.float32)

    def draw_target(r, s, cross_s, cond_chol_s, mu_target, resid):
        z = substream(seed, "target", r, s).standard_normal(c)
        return expit(mu_target + cross_s.T @ resid + cond_chol_s @ z)

    def summarize(s, buffer):
        as64 = buffer.astype(np.float64)
        mean[s] = as64.mean(axis=-1)
        sd[s] = as64.std(axis=-1, ddof=1)
        sketch[s] = np.quantile(as64, SKETCH_PROBS, axis=-1).T.astype(np.float32)

    if mode.tag == "plugin":
        # shared factors: generate per slice directly
        factors, resids, mu_target = plugin_state
        draws_store = np.empty((t_count, c, b_pred), dtype=np.float32) if keep_draws else None
        for s in range(t_count):
            buffer = draws_store[s] if keep_draws else np.empty((c, b_pred), dtype=np.float32)
            cross_s, cond_chol_s = factors[s]
            for r in range(b_pred):
                buffer[:, r] = draw_target(r, s, cross_s, cond_chol_s, mu_target, resids[r])
            summarize(s, buffer)
    elif keep_draws:
        # replicate-outer: one data factorization per parameter draw
        draws_store = np.empty((t_count, c, b_pred), dtype=np.float32)
        for r in range(b_pred):
            beta_r, params_r = lambdas[r]
            beta_r = np.asarray(beta_r, dtype=float)
            chol_r = cholesky_with_jitter(covariance_matrix(coords, params_r))
            factors = _slice_factors(coords, centers, times, params_r, chol_r)
            resid = cho_solve((chol_r, True), latents[r] - rows @ beta_r)
            mu_target = target_rows @ beta_r
            for s in range(t_count):
                draws_store[s, :, r] = draw_target(r, s, *factors[s], mu_target, resid)
        for s in range(t_count):
            summarize(s, draws_store[s])
    else:
        # slice-outer keeps one (cells, replicates) buffer alive at a time;
        # the data-side factors are recomputed per slice, trading time for
        # bounded memory
        draws_store = None
        for s in range(t_count):
            buffer = np.empty((c, b_pred), dtype=np.float32)
            for r in range(b_pred):
                beta_r, params_r = lambdas[r]
                beta_r = np.asarray(beta_r, dtype=float)
                chol_r = cholesky_with_jitter(covariance_matrix(coords, params_r))
                cross_s, cond_chol_s = _slice_factors(
                    coords, centers, (times[s],), params_r, chol_r)[0]
                resid = cho_solve((chol_r, True), latents[r] - rows @ beta_r)
                buffer[:, r] = draw_target(r, s, cross_s, cond_chol_s,
                                           target_rows @ beta_r, resid)
            summarize(s, buffer)

    return SurfaceBundle(grid=grid, mode_tag=mode.tag, seed=seed, b_pred=b_pred,
                         mean=mean, sd=sd, sketch=sketch, draws=draws_store,
                         provenance={"mode": mode.tag, "seed": seed, "b_pred": b_pred,
                                     "target_covariates": dict(target_covariates or {})})


def _slice_factors(data_coords, centers, times, params: CorrelationParams, data_chol):
    """Per-slice cross covariance and conditional Cholesky factor.

    With a separable correlation (xi = 0) the spatial parts are shared by
    all slices: the cross and cell-cell matrices factor into one spatial
    matrix times per-slice temporal column scalings.
    """
    n = data_coords.shape[0]
    c = centers.shape[0]
    factors = []
    dxs = data_coords[:, 0][:, None] - centers[:, 0][None, :]
    dys = data_coords[:, 1][:, None] - centers[:, 1][None, :]
    u_cross = np.sqrt(dxs * dxs + dys * dys)
    dxc = centers[:, 0][:, None] - centers[:, 0][None, :]
    dyc = centers[:, 1][:, None] - centers[:, 1][None, :]
    u_cells = np.sqrt(dxc * dxc + dyc * dyc)
    if params.xi == 0.0:
        spatial_cross = matern(u_cross, params.phi, params.kappa)
        target_cov = params.sigma2 * matern(u_cells, params.phi, params.kappa)
        for t_s in times:
            v = np.abs(data_coords[:, 2] - t_s)
            temporal = (1.0 + v / params.psi) ** (-(params.delta + 1.0))
            cross = params.sigma2 * spatial_cross * temporal[:, None]
            factors.append(_finish_factor(cross, target_cov, data_chol))
    else:
        ut, vt = pairwise_lags(np.column_stack([centers, np.zeros(c)]))
        target_cov = params.sigma2 * gneiting(ut, vt, params)
        for t_s in times:
            v = np.abs(data_coords[:, 2] - t_s)[:, None] * np.ones((1, c))
            cross = params.sigma2 * gneiting(u_cross, v, params)
            factors.append(_finish_factor(cross, target_cov, data_chol))
    return factors


def _finish_factor(cross, target_cov, data_chol):
    half = solve_triangular(data_chol, cross, lower=True)   # L^-1 C
    cond_cov = target_cov - half.T @ half
    scale = max(float(np.max(np.diag(target_cov))), 1e-12)
    cond_chol = cholesky_with_jitter(cond_cov, scale=scale)
    return cross, cond_chol


@dataclass(frozen=True)
class DistrictSummary:
    """Samples and summaries of area-averaged prevalence for one polygon."""

    district_id: str
    times: tuple
    samples: np.ndarray   # (T, B)
    mean: np.ndarray      # (T,)
    lower95: np.ndarray
    upper95: np.ndarray

    def exceedance(self, threshold: float) -> np.ndarray:
        """Per-time P(average prevalence > threshold | data)."""
        return np.mean(self.samples > threshold, axis=-1)


def district_average(bundle: SurfaceBundle, polygon, district_id: str = "district",
                     times=None) -> DistrictSummary:
    """Area-average prevalence over the grid cells inside the polygon.

    Uses equal-weight averaging of the joint per-time draws (a Riemann
    approximation with uniform cell areas), so correlations between cells
    propagate into the average; sketch-only bundles cannot support this.
    """
    if not bundle.has_draws():
        raise SketchOnlyError("district averages need joint draws; rerun with draws retained")
    from .surveys import mask_by_region
    centers = bundle.grid.active_centers()
    inside = mask_by_region(centers, polygon)
    if not np.any(inside):
        raise ValidationError("polygon does not intersect any active grid cell")
    sel = bundle.draws[:, inside, :].astype(np.float64)
    samples = sel.mean(axis=1)          # (T, B)
    lo, hi = np.percentile(samples, [2.5, 97.5], axis=-1)
    summary_times = tuple(bundle.times if times is None else times)
    if times is not None:
        keep = [bundle.times.index(float(t)) for t in summary_times]
        samples = samples[keep]
        lo, hi = lo[keep], hi[keep]
    return DistrictSummary(district_id=district_id, times=summary_times, samples=samples,
                           mean=samples.mean(axis=-1), lower95=lo, upper95=hi)


@dataclass(frozen=True)
class ModeComparison:
    """Paired per-cell summaries of two bundles on the same grid."""

    mean_pairs: np.ndarray   # (T*C, 2)
    sd_pairs: np.ndarray
    rms_mean_diff: float
    max_mean_diff: float
    rms_sd_diff: float
    max_sd_diff: float


def compare_modes(bundle_a: SurfaceBundle, bundle_b: SurfaceBundle) -> ModeComparison:
    """Scatter data for comparing two parameter-uncertainty handlings."""
    if (bundle_a.times != bundle_b.times
            or not np.array_equal(bundle_a.grid.cell_centers, bundle_b.grid.cell_centers)
            or not np.array_equal(bundle_a.grid.mask, bundle_b.grid.mask)):
        raise GridMismatchError("bundles were built on different grids")
    mean_pairs = np.column_stack([bundle_a.mean.ravel(), bundle_b.mean.ravel()])
    sd_pairs = np.column_stack([bundle_a.sd.ravel(), bundle_b.sd.ravel()])
    mean_diff = mean_pairs[:, 0] - mean_pairs[:, 1]
    sd_diff = sd_pairs[:, 0] - sd_pairs[:, 1]
    return ModeComparison(mean_pairs=mean_pairs, sd_pairs=sd_pairs,
                          rms_mean_diff=float(np.sqrt(np.mean(mean_diff ** 2))),
                          max_mean_diff=float(np.max(np.abs(mean_diff))),
                          rms_sd_diff=float(np.sqrt(np.mean(sd_diff ** 2))),
                          max_sd_diff=float(np.max(np.abs(sd_diff))))


# --- bundle persistence (the viewer-bundle contract's data layer) -------------

BUNDLE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "grid", "times", "mode", "seed", "b_pred", "layers"],
    "properties": {
        "format": {"const": "prevmap-bundle-v1"},
        "grid": {
            "type": "object",
            "required": ["cell_area", "times", "cell_centers", "mask"],
            "properties": {
                "cell_area": {"type": "number", "exclusiveMinimum": 0},
                "times": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "cell_centers": {"type": "array",
                                 "items": {"type": "array", "items": {"type": "number"},
                                           "minItems": 2, "maxItems": 2}},
                "mask": {"type": "array", "items": {"type": "integer", "enum": [0, 1]}},
                "raster": {"type": ["object", "null"]},
            },
        },
        "times": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "mode": {"enum": ["plugin", "gaussian_approx", "bootstrap", "bayesian"]},
        "seed": {"type": "integer"},
        "b_pred": {"type": "integer", "minimum": 100},
        "thresholds": {"type": "array", "items": {"type": "number"}},
        "alphas": {"type": "array", "items": {"type": "number"}},
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "time_index", "time", "path", "dtype", "shape"],
                "properties": {
                    "target": {"type": "string"},
                    "time_index": {"type": "integer", "minimum": 0},
                    "time": {"type": "number"},
                    "path": {"type": "string"},
                    "dtype": {"const": "float32"},
                    "shape": {"type": "array", "items": {"type": "integer"}},
                },
            },
        },
    },
}


def save_bundle(bundle: SurfaceBundle, out_dir, thresholds=(), alphas=()) -> dict:
    """Write the bundle as a JSON header plus flat float32 binary layers.

    Layers: mean, sd and the 101-point sketch per time slice, plus an
    exceedance layer per requested threshold and a quantile layer per
    requested alpha. Returns the header dictionary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers = []

    def write_layer(name, time_index, values, shape):
        fname = f"{name}_t{time_index}.bin"
        np.asarray(values, dtype=np.float32).tofile(out / fname)
        layers.append({"target": name, "time_index": time_index,
                       "time": bundle.times[time_index], "path": fname,
                       "dtype": "float32", "shape": list(shape)})

    c = bundle.n_active
    for s in range(len(bundle.times)):
        write_layer("mean", s, bundle.mean[s], (c,))
        write_layer("sd", s, bundle.sd[s], (c,))
        write_layer("sketch", s, bundle.sketch[s].ravel(), (c, 101))
        for threshold in thresholds:
            write_layer(f"exceedance_{threshold:g}", s, bundle.exceedance(threshold)[s], (c,))
        for alpha in alphas:
            write_layer(f"quantile_{alpha:g}", s, bundle.quantile(alpha)[s], (c,))

    header = {
        "format": "prevmap-bundle-v1",
        "grid": bundle.grid.to_dict(),
        "times": list(bundle.times),
        "mode": bundle.mode_tag,
        "seed": bundle.seed,
        "b_pred": bundle.b_pred,
        "thresholds": [float(t) for t in thresholds],
        "alphas": [float(a) for a in alphas],
        "provenance": bundle.provenance,
        "layers": layers,
    }
    with open(out / "bundle.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return header


def load_bundle(bundle_dir) -> SurfaceBundle:
    """Read a saved bundle (summaries and sketch only; draws are not
    persisted)."""
    base = Path(bundle_dir)
    with open(base / "bundle.json") as fh:
        header = json.load(fh)
    grid = PredictionGrid.from_dict(header["grid"])
    t_count = len(header["times"])
    c = int(np.sum(np.asarray(header["grid"]["mask"], dtype=bool)))
    mean = np.empty((t_count, c))
    sd = np.empty((t_count, c))
    sketch = np.empty((t_count, c, 101), dtype=np.float32)
    for layer in header["layers"]:
        data = np.fromfile(base / layer["path"], dtype=np.float32)
        s = layer["time_index"]
        if layer["target"] == "mean":
            mean[s] = data
        elif layer["target"] == "sd":
            sd[s] = data
        elif layer["target"] == "sketch":
            sketch[s] = data.reshape(c, 101)
    return SurfaceBundle(grid=grid, mode_tag=header["mode"], seed=header["seed"],
                         b_pred=header["b_pred"], mean=mean, sd=sd, sketch=sketch,
                         draws=None, provenance=header.get("provenance", {}))
