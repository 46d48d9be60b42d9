"""Exploratory analysis: non-spatial binomial mixed model and variograms.

The starting point is a binomial logistic model with an independent
Gaussian random effect per record and no spatial term. Its estimated
random effects are the residuals whose empirical variogram reveals (or
rules out) residual spatio-temporal correlation, and a least-squares fit
of the theoretical variogram to the empirical one supplies starting values
for likelihood-based fitting.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .errors import (
    EmptyBinsError,
    InvalidParamError,
    NonConvergenceError,
    OptimFailedError,
    SeparationError,
    ValidationError,
)
from .kernels import CorrelationParams, gneiting
from .surveys import DesignMatrix, SurveyDataset

__all__ = [
    "NonSpatialModel",
    "ResidualSet",
    "VariogramTable",
    "fit_nonspatial_glmm",
    "empirical_variogram",
    "theoretical_variogram",
    "ls_variogram_fit",
    "default_spatial_edges",
    "LSVariogramFit",
]


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def log1pexp(x):
    """log(1 + e^x), stable for large |x|."""
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class NonSpatialModel:
    """Fitted non-spatial binomial mixed model (no spatial random effect)."""

    beta: np.ndarray
    tau2: float
    loglik: float
    converged: bool


@dataclass(frozen=True)
class ResidualSet:
    """Point estimates of the per-record unstructured random effects."""

    z_tilde: np.ndarray
    estimator: str  # "mode" or "mean"
    model: NonSpatialModel

    def __post_init__(self):
        z = np.asarray(self.z_tilde, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValidationError("residuals contain non-finite values")
        object.__setattr__(self, "z_tilde", z)


def _joint_newton(y, n, design, tau2, beta0, z0, tol=1e-10, max_iter=200):
    """Maximize the joint log-density over (beta, z) at fixed tau2.

    Returns (beta, z, joint_value, curvature w = n p (1-p)). Uses a Schur
    complement on the diagonal z-block, so cost is O(N p^2) per step.
    """
    d = design
    beta = beta0.copy()
    z = z0.copy()

    def joint_value(beta, z):
        eta = d @ beta + z
        return float(np.sum(y * eta - n * log1pexp(eta)) - np.sum(z * z) / (2.0 * tau2))

    g = joint_value(beta, z)
    for _ in range(max_iter):
        eta = d @ beta + z
        p = expit(eta)
        w = n * p * (1.0 - p)
        r = y - n * p
        gz = r - z / tau2
        grad_norm = max(np.max(np.abs(d.T @ r)), np.max(np.abs(gz)))
        if grad_norm < tol:
            return beta, z, g, w
        c = w + 1.0 / tau2
        w_eff = w / (1.0 + tau2 * w)
        h_beta = (d * w_eff[:, None]).T @ d
        rhs = d.T @ (r - w * gz / c)
        try:
            step_beta = np.linalg.solve(h_beta, rhs)
        except np.linalg.LinAlgError:
            raise SeparationError("singular working design; separation suspected")
        step_z = (gz - w * (d @ step_beta)) / c
        # backtracking on the joint objective; margin sits above the
        # objective's floating-point resolution so rounding noise near the
        # optimum cannot reject a good Newton step
        margin = 1e-10 * max(1.0, abs(g))
        scale = 1.0
        for _ in range(40):
            beta_new = beta + scale * step_beta
            z_new = z + scale * step_z
            g_new = joint_value(beta_new, z_new)
            if g_new >= g - margin:
                break
            scale *= 0.5
        else:
            raise NonConvergenceError("step halving exhausted in the inner Newton loop")
        beta, z, g = beta_new, z_new, g_new
    raise NonConvergenceError("joint Newton did not converge")


def _laplace_profile(y, n, design, log_tau2, state):
    """Laplace log-likelihood profiled over (beta, z) at fixed tau2."""
    tau2 = math.exp(log_tau2)
    beta, z, g, w = _joint_newton(y, n, design, tau2, state["beta"], state["z"])
    state["beta"], state["z"] = beta, z
    return g - 0.5 * float(np.sum(np.log1p(tau2 * w))), (beta, z, w)


def _glm_beta(y, n, design, max_iter=100):
    """Plain logistic regression estimate (IRLS), used for initialization."""
    beta = np.zeros(design.shape[1])
    beta[0] = math.log((y.sum() + 0.5) / (n.sum() - y.sum() + 0.5))
    for _ in range(max_iter):
        eta = design @ beta
        p = expit(eta)
        w = np.maximum(n * p * (1.0 - p), 1e-12)
        r = y - n * p
        try:
            step = np.linalg.solve((design * w[:, None]).T @ design, design.T @ r)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix in logistic fit")
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def fit_nonspatial_glmm(dataset: SurveyDataset, design: DesignMatrix,
                        tol: float = 1e-8, estimator: str = "mode") -> ResidualSet:
    """Fit the no-spatial-term binomial mixed model and extract residuals.

    The model is logit p_i = d_i' beta + Z_i with Z_i iid N(0, tau2). The
    random-effect variance maximizes the Laplace-approximate likelihood;
    (beta, Z) jointly maximize the joint log-density at that variance, so
    the joint gradient vanishes at the returned estimates. ``estimator``
    selects predictive modes (default) or quadrature predictive means.
    """
    if estimator not in ("mode", "mean"):
        raise ValidationError(f"estimator must be 'mode' or 'mean', got {estimator!r}")
    y, n, d = dataset.y, dataset.n, design.rows
    if d.shape[0] != len(dataset):
        raise ValidationError("design and dataset have different lengths")
    if np.linalg.matrix_rank(d) < d.shape[1]:
        raise ValidationError("design matrix is rank deficient")

    state = {"beta": _glm_beta(y, n, d), "z": np.zeros(len(dataset))}
    cache = {}

    def negated(log_tau2):
        val, fit = _laplace_profile(y, n, d, float(log_tau2), state)
        cache[float(log_tau2)] = (val, fit)
        return -val

    res = minimize_scalar(negated, bounds=(-16.0, 6.0), method="bounded",
                          options={"xatol": max(tol, 1e-9)})
    if not res.success:
        raise NonConvergenceError("variance profile optimization failed")
    loglik, (beta, z_mode, w) = cache[float(res.x)]
    tau2 = math.exp(float(res.x))
    if np.max(np.abs(beta)) > 50.0 or np.max(np.abs(d @ beta + z_mode)) > 45.0:
        raise SeparationError("fitted logits diverged; data separation suspected")

    if estimator == "mode":
        z_tilde = z_mode
    else:
        z_tilde = _predictive_means(y, n, d @ beta, z_mode, w, tau2)
    model = NonSpatialModel(beta=beta, tau2=tau2, loglik=loglik, converged=True)
    return ResidualSet(z_tilde=z_tilde, estimator=estimator, model=model)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(41)


def _predictive_means(y, n, eta_fixed, z_mode, w, tau2, nodes=None, weights=None):
    """E[Z_i | y_i] by Gauss-Hermite quadrature centered at the Laplace mode."""
    x = _GH_NODES if nodes is None else nodes
    lw = np.log(_GH_WEIGHTS if weights is None else weights)
    scale = 1.0 / np.sqrt(w + 1.0 / tau2)
    z_nodes = z_mode[:, None] + math.sqrt(2.0) * scale[:, None] * x[None, :]
    eta = eta_fixed[:, None] + z_nodes
    log_f = (y[:, None] * eta - n[:, None] * log1pexp(eta)
             - z_nodes ** 2 / (2.0 * tau2) + x[None, :] ** 2 + lw[None, :])
    log_f -= log_f.max(axis=1, keepdims=True)
    f = np.exp(log_f)
    return np.sum(f * z_nodes, axis=1) / np.sum(f, axis=1)


# --- variograms ---------------------------------------------------------------

@dataclass(frozen=True)
class VariogramTable:
    """Binned empirical variogram ordinates."""

    u_mid: np.ndarray
    v_mid: np.ndarray
    counts: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        for name in ("u_mid", "v_mid", "counts", "gamma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.counts < 1):
            raise ValidationError("reported variogram bins must have count >= 1")
        if np.any(self.gamma < 0):
            raise ValidationError("variogram ordinates must be non-negative")

    def __len__(self) -> int:
        return self.u_mid.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("u_mid,v_mid,count,gamma\n")
            for k in range(len(self)):
                fh.write(f"{float(self.u_mid[k])!r},{float(self.v_mid[k])!r},"
                         f"{int(self.counts[k])},{float(self.gamma[k])!r}\n")


def pair_bin_assignments(coords: np.ndarray, times: np.ndarray, u_edges, v_edges):
    """Precomputed (i, j) pair bins for repeated variogram evaluation.

    Returns (i_idx, j_idx, flat_bin, n_bins, bin_meta) where flat_bin is -1
    for pairs falling outside the edges and bin_meta holds per-flat-bin
    (u_mid, v_mid). Pairs are enumerated with i < j in row-major order and
    bins are half-open [lo, hi).
    """
    u_edges = np.asarray(u_edges, dtype=float)
    v_edges = np.asarray(v_edges, dtype=float)
    if u_edges.ndim != 1 or u_edges.size < 2 or np.any(np.diff(u_edges) <= 0):
        raise ValidationError("u_edges must be strictly increasing with >= 2 entries")
    if v_edges.ndim != 1 or v_edges.size < 2 or np.any(np.diff(v_edges) <= 0):
        raise ValidationError("v_edges must be strictly increasing with >= 2 entries")
    xy = np.asarray(coords, dtype=float)
    t = np.asarray(times, dtype=float)
    n = xy.shape[0]
    if n < 2:
        raise ValidationError("need at least two records to form pairs")
    i_idx, j_idx = np.triu_indices(n, k=1)
    dx = xy[i_idx, 0] - xy[j_idx, 0]
    dy = xy[i_idx, 1] - xy[j_idx, 1]
    u = np.sqrt(dx * dx + dy * dy)
    v = np.abs(t[i_idx] - t[j_idx])
    iu = np.searchsorted(u_edges, u, side="right") - 1
    iv = np.searchsorted(v_edges, v, side="right") - 1
    nu, nv = u_edges.size - 1, v_edges.size - 1
    valid = (iu >= 0) & (iu < nu) & (iv >= 0) & (iv < nv)
    flat = np.where(valid, iu * nv + iv, -1)
    u_mid = 0.5 * (u_edges[:-1] + u_edges[1:])
    v_mid = 0.5 * (v_edges[:-1] + v_edges[1:])
    meta_u = np.repeat(u_mid, nv)
    meta_v = np.tile(v_mid, nu)
    return i_idx, j_idx, flat, nu * nv, (meta_u, meta_v)


def variogram_from_assignments(z: np.ndarray, i_idx, j_idx, flat, n_bins, bin_meta) -> VariogramTable:
    """Empirical variogram for residuals z given precomputed pair bins."""
    z = np.asarray(z, dtype=float)
    inside = flat >= 0
    if not np.any(inside):
        raise EmptyBinsError("no pairs fall inside the variogram bins")
    diffs = z[i_idx[inside]] - z[j_idx[inside]]
    sq = diffs * diffs
    bins = flat[inside]
    counts = np.bincount(bins, minlength=n_bins)
    sums = np.bincount(bins, weights=sq, minlength=n_bins)
    occupied = counts > 0
    if not np.all(occupied):
        warnings.warn(f"{int(np.sum(~occupied))} variogram bins are empty and omitted",
                      stacklevel=2)
    gamma = sums[occupied] / (2.0 * counts[occupied])
    meta_u, meta_v = bin_meta
    return VariogramTable(u_mid=meta_u[occupied], v_mid=meta_v[occupied],
                          counts=counts[occupied], gamma=gamma)


def empirical_variogram(residuals, coords, times, u_edges, v_edges) -> VariogramTable:
    """Binned empirical variogram of residual point estimates.

    Each unordered pair (i, j), i < j, contributes {z_i - z_j}^2 to exactly
    one (u, v) bin under half-open [lo, hi) intervals; gamma is half the
    within-bin mean. Empty bins are omitted.
    """
    z = residuals.z_tilde if isinstance(residuals, ResidualSet) else np.asarray(residuals, float)
    assignments = pair_bin_assignments(coords, times, u_edges, v_edges)
    return variogram_from_assignments(z, *assignments)


def default_spatial_edges(coords: np.ndarray, n_bins: int = 15) -> np.ndarray:
    """Equal-width spatial bin edges up to half the maximum pairwise distance."""
    xy = np.asarray(coords, dtype=float)
    i_idx, j_idx = np.triu_indices(xy.shape[0], k=1)
    dx = xy[i_idx, 0] - xy[j_idx, 0]
    dy = xy[i_idx, 1] - xy[j_idx, 1]
    u_max = float(np.max(np.sqrt(dx * dx + dy * dy)))
    if u_max <= 0:
        raise ValidationError("all locations coincide; no spatial bins possible")
    return np.linspace(0.0, u_max / 2.0, n_bins + 1)


def theoretical_variogram(u, v, params: CorrelationParams):
    """Model variogram tau2 + sigma2 [1 - rho(u, v)] of W = S + Z."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u < 0) or np.any(v < 0):
        raise InvalidParamError("variogram lags must be non-negative")
    out = params.tau2 + params.sigma2 * (1.0 - np.asarray(gneiting(u, v, params)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LSVariogramFit:
    """Least-squares variogram fit result (initial guess for likelihood fits)."""

    params: CorrelationParams
    objective: float
    weighted: bool


def ls_variogram_fit(table: VariogramTable, family: CorrelationParams | None = None,
                     bounds: dict | None = None, weighted: bool = False) -> LSVariogramFit:
    """Initial covariance parameters by least squares on variogram ordinates.

    Minimizes sum_k w_k {gamma_k - gamma(u_k, v_k; params)}^2 over
    (sigma2, tau2, phi, psi) on the log scale, with w_k the pair counts
    when ``weighted``. Unweighted is the default: count weights let the
    pair-rich large-lag bins drag the fit up the sigma2/phi ridge on noisy
    tables, which is exactly what an initializer must avoid. ``family``
    fixes (delta, xi, kappa); ``bounds`` maps parameter names to (lo, hi)
    on the natural scale.
    """
    if len(table) < 4:
        raise ValidationError("need at least as many occupied bins as free parameters (4)")
    family = family or CorrelationParams(sigma2=1.0, tau2=0.0, phi=1.0, psi=1.0)
    w = table.counts if weighted else np.ones_like(table.counts)
    u, v, g = table.u_mid, table.v_mid, table.gamma

    u_max = max(float(u.max()), 1e-6)
    v_max = max(float(v.max()), 1e-6)
    g_max = max(float(g.max()), 1e-12)
    default_bounds = {
        "sigma2": (1e-6 * g_max, 100.0 * g_max),
        "tau2": (1e-9 * g_max, 100.0 * g_max),
        "phi": (1e-3 * u_max, 100.0 * u_max),
        "psi": (1e-3 * v_max, 100.0 * v_max),
    }
    default_bounds.update(bounds or {})
    names = ("sigma2", "tau2", "phi", "psi")
    log_bounds = [tuple(np.log(default_bounds[k])) for k in names]

    def objective(log_params):
        s2, t2, phi, psi = np.exp(log_params)
        params = family.with_updates(sigma2=s2, tau2=t2, phi=phi, psi=psi)
        resid = g - theoretical_variogram(u, v, params)
        return float(np.sum(w * resid * resid))

    # heuristic starts: sill from the largest ordinates, nugget from the smallest
    sill0 = float(np.mean(g[np.argsort(g)[-max(len(table) // 4, 1):]]))
    nug0 = max(float(np.min(g)), 1e-6 * g_max)
    starts = []
    for phi0 in (u_max / 6.0, u_max / 2.0):
        for psi0 in (v_max / 2.0, v_max * 2.0):
            starts.append(np.log([max(sill0 - nug0, 0.1 * g_max), nug0, phi0, psi0]))
    best = None
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in log_bounds], [b[1] for b in log_bounds])
        res = minimize(objective, x0=x0, method="L-BFGS-B", bounds=log_bounds)
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise OptimFailedError("least-squares variogram fit failed")
    s2, t2, phi, psi = np.exp(best.x)
    params = family.with_updates(sigma2=float(s2), tau2=float(t2), phi=float(phi), psi=float(psi))
    return LSVariogramFit(params=params, objective=float(best.fun), weighted=bool(weighted))
