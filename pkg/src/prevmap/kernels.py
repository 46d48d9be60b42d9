"""Spatio-temporal correlation kernels and Gaussian-field simulation.

The spatial family is the Matern correlation

    M(u; phi, kappa) = {2^(kappa-1) Gamma(kappa)}^-1 (u/phi)^kappa K_kappa(u/phi),

normalized so M(0) = 1 and so that kappa = 1/2 gives exp(-u/phi) exactly.
Space-time correlation follows the Gneiting construction

    rho(u, v) = (1 + v/psi)^-(delta+1) * M(u / (1 + v/psi)^(xi/2); phi, kappa),

which is separable (rho = rho1(u) rho2(v)) when the interaction parameter
xi is zero. A multiplicative temporally-varying-variance (TVV) extension
scales the field by B(t) with log B^2(t) Gaussian (mean -eta2/2, variance
eta2), which leaves the marginal variance at sigma2 but thickens the tails
and damps the temporal correlation by exp{eta2 (rho_B(v) - 1)}.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy import special
from scipy.optimize import least_squares

from .errors import InvalidParamError, NotPositiveDefiniteError, OptimFailedError
from .rng import substream

__all__ = [
    "CorrelationParams",
    "TVVParams",
    "MaternFit",
    "matern",
    "bessel_k",
    "gneiting",
    "tvv_correlation",
    "covariance_matrix",
    "correlation_matrix",
    "pairwise_lags",
    "cross_lags",
    "cholesky_with_jitter",
    "simulate_gaussian_field",
    "simulate_tvv_field",
    "fit_matern_to_mixture",
]

KAPPA_CHOICES = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class CorrelationParams:
    """Variance and correlation parameters of the latent field.

    sigma2  variance of the structured field S
    tau2    nugget variance of the unstructured effects Z
    phi     spatial correlation scale (km)
    psi     temporal correlation scale (years)
    delta   temporal decay exponent (>= 0)
    xi      space-time interaction in [0, 1]; 0 means separable
    kappa   Matern smoothness; fitting restricts it to {1/2, 3/2, 5/2}
    """

    sigma2: float
    tau2: float
    phi: float
    psi: float
    delta: float = 0.0
    xi: float = 0.0
    kappa: float = 0.5

    def __post_init__(self):
        # sigma2 == 0 is tolerated as a degenerate simulation case; fitting
        # code requires strictly positive variance.
        if not (self.sigma2 >= 0 and np.isfinite(self.sigma2)):
            raise InvalidParamError(f"sigma2 must be >= 0, got {self.sigma2}")
        if not (self.tau2 >= 0 and np.isfinite(self.tau2)):
            raise InvalidParamError(f"tau2 must be >= 0, got {self.tau2}")
        if not (self.phi > 0 and np.isfinite(self.phi)):
            raise InvalidParamError(f"phi must be > 0, got {self.phi}")
        if not (self.psi > 0 and np.isfinite(self.psi)):
            raise InvalidParamError(f"psi must be > 0, got {self.psi}")
        if not (self.delta >= 0):
            raise InvalidParamError(f"delta must be >= 0, got {self.delta}")
        if not (0.0 <= self.xi <= 1.0):
            raise InvalidParamError(f"xi must be in [0, 1], got {self.xi}")
        if not (self.kappa > 0):
            raise InvalidParamError(f"kappa must be > 0, got {self.kappa}")

    @property
    def nu2(self) -> float:
        """Noise-to-signal ratio tau2/sigma2."""
        return self.tau2 / self.sigma2

    def with_updates(self, **kwargs) -> "CorrelationParams":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationParams":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class TVVParams:
    """Parameters of the temporally-varying-variance extension.

    eta2          variance of log B^2(t)
    rho_B_scale   temporal scale of the variance process (years)
    rho_B_family  one-dimensional correlation family for log B^2
    """

    eta2: float
    rho_B_scale: float
    rho_B_family: str = "exponential"

    def __post_init__(self):
        if not (self.eta2 >= 0 and np.isfinite(self.eta2)):
            raise InvalidParamError(f"eta2 must be >= 0, got {self.eta2}")
        if not (self.rho_B_scale > 0):
            raise InvalidParamError(f"rho_B_scale must be > 0, got {self.rho_B_scale}")
        if self.rho_B_family not in ("exponential", "gaussian"):
            raise InvalidParamError(f"unknown rho_B family {self.rho_B_family!r}")

    def rho_B(self, v):
        v = np.asarray(v, dtype=float)
        if self.rho_B_family == "exponential":
            return np.exp(-v / self.rho_B_scale)
        return np.exp(-((v / self.rho_B_scale) ** 2))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TVVParams":
        return cls(eta2=float(d["eta2"]), rho_B_scale=float(d["rho_B_scale"]),
                   rho_B_family=str(d.get("rho_B_family", "exponential")))


def bessel_k(nu: float, x):
    """Modified Bessel function of the second kind K_nu(x), x > 0."""
    if nu <= 0:
        raise InvalidParamError(f"order nu must be > 0, got {nu}")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InvalidParamError("bessel_k requires x > 0")
    out = special.kv(nu, x)
    return float(out) if out.ndim == 0 else out


def _matern_closed_form(x: np.ndarray, kappa: float) -> np.ndarray:
    """Half-integer Matern profiles as polynomials times exp(-x)."""
    if kappa == 0.5:
        return np.exp(-x)
    if kappa == 1.5:
        return (1.0 + x) * np.exp(-x)
    # kappa == 2.5
    return (1.0 + x + x * x / 3.0) * np.exp(-x)


def _matern_profile(x: np.ndarray, kappa: float) -> np.ndarray:
    """M as a function of the scaled distance x = u/phi, with M(0) = 1."""
    if kappa in (0.5, 1.5, 2.5):
        return _matern_closed_form(x, kappa)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        # log-space evaluation with the scaled Bessel function keeps the
        # product x^kappa * K_kappa(x) from under/overflowing.
        log_m = (kappa * np.log(xp) + np.log(special.kve(kappa, xp)) - xp
                 - (kappa - 1.0) * np.log(2.0) - special.gammaln(kappa))
        out[pos] = np.exp(log_m)
    return out


def _matern_profile_deriv(x: np.ndarray, kappa: float) -> np.ndarray:
    """d/dx of the Matern profile, using d/dx [x^k K_k(x)] = -x^k K_{k-1}(x)."""
    if kappa == 0.5:
        return -np.exp(-x)
    if kappa == 1.5:
        return -x * np.exp(-x)
    if kappa == 2.5:
        return -(x * (1.0 + x) / 3.0) * np.exp(-x)
    out = np.zeros_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        order = abs(kappa - 1.0)  # K_{-v} = K_v
        log_c = -(kappa - 1.0) * np.log(2.0) - special.gammaln(kappa)
        out[pos] = -np.exp(log_c + kappa * np.log(xp) + np.log(special.kve(order, xp)) - xp)
    return out


def matern(u, phi: float, kappa: float):
    """Matern correlation at spatial lag u (km); accepts scalars or arrays."""
    if not (phi > 0):
        raise InvalidParamError(f"phi must be > 0, got {phi}")
    if not (kappa > 0):
        raise InvalidParamError(f"kappa must be > 0, got {kappa}")
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise InvalidParamError("matern requires u >= 0")
    out = _matern_profile(u / phi, kappa)
    return float(out) if out.ndim == 0 else out


def gneiting(u, v, params: CorrelationParams):
    """Gneiting space-time correlation at lags (u km, v years)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u < 0) or np.any(v < 0):
        raise InvalidParamError("gneiting requires u >= 0 and v >= 0")
    g = 1.0 + v / params.psi
    temporal = g ** (-(params.delta + 1.0))
    spatial = _matern_profile(u / (params.phi * g ** (params.xi / 2.0)), params.kappa)
    out = temporal * spatial
    return float(out) if out.ndim == 0 else out


def tvv_correlation(u, v, params: CorrelationParams, tvv: TVVParams):
    """Correlation of the variance-modulated field B(t)S(x,t)."""
    base = gneiting(u, v, params)
    damp = np.exp(tvv.eta2 * (tvv.rho_B(v) - 1.0))
    out = damp * base
    return float(out) if np.ndim(out) == 0 else out


def gneiting_log_scale_grads(u, v, params: CorrelationParams):
    """Correlation and its derivatives w.r.t. log(phi) and log(psi).

    Returns (rho, d rho / d log phi, d rho / d log psi) elementwise; used by
    the likelihood gradient, where covariance parameters live on the log
    scale.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    g = 1.0 + v / params.psi
    shrink = g ** (params.xi / 2.0)
    x = u / (params.phi * shrink)
    temporal = g ** (-(params.delta + 1.0))
    m = _matern_profile(x, params.kappa)
    m_dx = _matern_profile_deriv(x, params.kappa)
    rho = temporal * m
    # phi enters only through x = u / (phi * shrink); x * d/dx then a sign flip
    d_logphi = -temporal * m_dx * x
    # psi enters through g; psi * dg/dpsi = -v/psi
    d_rho_dg = (-(params.delta + 1.0) * g ** (-(params.delta + 2.0)) * m
                + temporal * m_dx * (u / params.phi) * (-params.xi / 2.0) * g ** (-params.xi / 2.0 - 1.0))
    d_logpsi = d_rho_dg * (-v / params.psi)
    return rho, d_logphi, d_logpsi


def pairwise_lags(coords: np.ndarray):
    """All-pairs spatial and temporal lags for coords rows (x, y, t).

    The spatial lag is computed as sqrt(dx*dx + dy*dy); variogram code and
    its brute-force oracle rely on this exact expression.
    """
    c = np.asarray(coords, dtype=float)
    dx = c[:, 0][:, None] - c[:, 0][None, :]
    dy = c[:, 1][:, None] - c[:, 1][None, :]
    u = np.sqrt(dx * dx + dy * dy)
    v = np.abs(c[:, 2][:, None] - c[:, 2][None, :])
    return u, v


def cross_lags(coords_a: np.ndarray, coords_b: np.ndarray):
    """Spatial/temporal lags between two coordinate sets (rows: x, y, t)."""
    a = np.asarray(coords_a, dtype=float)
    b = np.asarray(coords_b, dtype=float)
    dx = a[:, 0][:, None] - b[:, 0][None, :]
    dy = a[:, 1][:, None] - b[:, 1][None, :]
    u = np.sqrt(dx * dx + dy * dy)
    v = np.abs(a[:, 2][:, None] - b[:, 2][None, :])
    return u, v


def correlation_matrix(coords: np.ndarray, params: CorrelationParams) -> np.ndarray:
    """Correlation of S between all coordinate pairs (no variances)."""
    u, v = pairwise_lags(coords)
    return gneiting(u, v, params)


def covariance_matrix(coords: np.ndarray, params: CorrelationParams) -> np.ndarray:
    """Covariance of W = S + Z at coords: sigma2 * rho + tau2 * I."""
    c = np.asarray(coords, dtype=float)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] != 3:
        raise InvalidParamError("coords must be an (n, 3) array of (x, y, t)")
    cov = params.sigma2 * correlation_matrix(c, params)
    cov[np.diag_indices_from(cov)] += params.tau2
    return cov


def cholesky_with_jitter(matrix: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Lower Cholesky factor, adding escalating diagonal jitter if needed.

    Jitter starts at 1e-10 * scale and grows tenfold up to 1e-6 * scale
    (scale defaults to the mean diagonal); beyond that the matrix is
    declared not positive definite.
    """
    m = np.asarray(matrix, dtype=float)
    if scale is None:
        scale = float(np.mean(np.diag(m)))
    if scale <= 0:
        scale = 1.0
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * scale
    while jitter <= 1e-6 * scale:
        try:
            return np.linalg.cholesky(m + jitter * np.eye(m.shape[0]))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"matrix not positive definite after jitter up to {1e-6 * scale:.3e}")


def _simulate_components(coords, params: CorrelationParams, rng_s, rng_z, size):
    """Draw S (structured) and Z (nugget) at coords; returns (S, Z) arrays."""
    c = np.asarray(coords, dtype=float)
    n = c.shape[0]
    shape = (n,) if size is None else (n, size)
    if params.sigma2 > 0:
        chol = cholesky_with_jitter(correlation_matrix(c, params), scale=1.0)
        s = np.sqrt(params.sigma2) * (chol @ rng_s.standard_normal(shape))
    else:
        s = np.zeros(shape)
    z = np.sqrt(params.tau2) * rng_z.standard_normal(shape)
    return s, z


def simulate_gaussian_field(coords, params: CorrelationParams, rng_seed: int, size: int | None = None):
    """Draw W = S + Z at coords from N(0, covariance_matrix(coords, params)).

    Deterministic given ``rng_seed``. With ``size`` given, returns an
    (n, size) matrix of independent replicate fields (columns). Uses the
    same sub-streams for S and Z as :func:`simulate_tvv_field`, so the TVV
    sampler with eta2 = 0 reproduces this output bit for bit.
    """
    s, z = _simulate_components(coords, params,
                                substream(rng_seed, "field-s"),
                                substream(rng_seed, "field-z"), size)
    return s + z


def simulate_tvv_field(coords, params: CorrelationParams, tvv: TVVParams,
                       rng_seed: int, size: int | None = None):
    """Draw B(t) * S + Z at coords under the TVV extension.

    log B^2 is simulated on the distinct times with mean -2 eta2 and
    variance 4 eta2 (equivalently, log B has mean -eta2 and variance
    eta2), the parametrization under which E[B^2] = 1 -- so the marginal
    variance of B*S stays at sigma2 -- and the induced correlation is
    exactly exp{eta2 (rho_B(v) - 1)} rho(u, v), i.e. tvv_correlation. The
    B, S and Z draws use named sub-streams of ``rng_seed``; eta2 = 0
    forces B = 1 and reproduces simulate_gaussian_field exactly.
    """
    c = np.asarray(coords, dtype=float)
    s, z = _simulate_components(coords, params,
                                substream(rng_seed, "field-s"),
                                substream(rng_seed, "field-z"), size)
    times, inverse = np.unique(c[:, 2], return_inverse=True)
    rng_b = substream(rng_seed, "field-b")
    n_rep = 1 if size is None else size
    lags = np.abs(times[:, None] - times[None, :])
    corr_b = tvv.rho_B(lags)
    chol_b = cholesky_with_jitter(corr_b, scale=1.0)
    log_b2 = -2.0 * tvv.eta2 + 2.0 * np.sqrt(tvv.eta2) * (chol_b @ rng_b.standard_normal((times.size, n_rep)))
    b = np.exp(0.5 * log_b2)[inverse]  # (n, n_rep)
    if size is None:
        b = b[:, 0]
    return b * s + z


@dataclass(frozen=True)
class MaternFit:
    """Single-Matern least-squares approximation of a correlation curve."""

    phi: float
    kappa: float
    objective: float
    max_abs_dev: float


def fit_matern_to_mixture(weights, components, u_grid) -> MaternFit:
    """Fit one Matern correlation to a weighted mixture of Materns.

    Minimizes the sum over ``u_grid`` of squared differences between
    f(u) = sum_j w_j M(u; phi_j, kappa_j) and M(u; phi, kappa).
    """
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-8:
        raise InvalidParamError("mixture weights must sum to 1")
    u = np.asarray(u_grid, dtype=float)
    if np.any(u <= 0):
        raise InvalidParamError("u_grid must be strictly positive")
    target = np.zeros_like(u)
    for w, (phi_j, kappa_j) in zip(weights, components):
        target += w * matern(u, phi_j, kappa_j)

    def residual(log_params):
        phi, kappa = np.exp(log_params)
        return _matern_profile(u / phi, kappa) - target

    starts = [np.log([phi_j, kappa_j]) for phi_j, kappa_j in components]
    phis = np.array([c[0] for c in components])
    kappas = np.array([c[1] for c in components])
    starts.append(np.log([float(np.exp(weights @ np.log(phis))),
                          float(np.exp(weights @ np.log(kappas)))]))
    best = None
    for x0 in starts:
        sol = least_squares(residual, x0=np.asarray(x0), method="lm", xtol=1e-14, ftol=1e-14)
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or not np.all(np.isfinite(best.x)):
        raise OptimFailedError("no descent direction found for Matern approximation")
    phi_hat, kappa_hat = np.exp(best.x)
    dev = residual(best.x)
    return MaternFit(phi=float(phi_hat), kappa=float(kappa_hat),
                     objective=float(np.sum(dev ** 2)), max_abs_dev=float(np.max(np.abs(dev))))
