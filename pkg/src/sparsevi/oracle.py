"""Brute-force reference computations used to check the solvers.

Nothing here shares numerical kernels with the code it checks, except
:func:`sparsevi.special.log_bessel_k` in the 1-D ELBO landscape (that
kernel is itself checked against :func:`bessel_k_integral`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import stats

from .model import GammaHyperprior, LinearProblem
from .outputs import write_csv, write_json
from .special import log_bessel_k

__all__ = [
    "bessel_k_integral",
    "gig_moments_quad",
    "gig_cdf_quad",
    "gig_quantile_quad",
    "GigTable",
    "neg_log_posterior",
    "dense_grid_posterior",
    "GridPosterior",
    "fd_hessian",
    "finite_diff_hessian",
    "elbo_mc",
    "elbo_mc_difference",
    "elbo_manifold_1d",
    "LandscapeReport",
    "landscape_scan",
    "MAX_GRID_CELLS",
]

MAX_GRID_CELLS = 10**8


# -- Bessel K and GIG by quadrature (mpmath, arbitrary exponent range) -----

def bessel_k_integral(s, x, dps: int = 30) -> float:
    """``ln K_s(x)`` from ``int_0^inf exp(-x cosh t) cosh(s t) dt``."""
    with mpmath.workdps(dps):
        s, x = mpmath.mpf(s), mpmath.mpf(x)
        # the integrand is negligible once x (cosh t - 1) exceeds ~ dps*ln10 + 50
        top = mpmath.acosh(1 + (dps * 2.31 + 50) / x) + abs(s)
        val = mpmath.quad(lambda t: mpmath.exp(-x * mpmath.cosh(t)) * mpmath.cosh(s * t),
                          mpmath.linspace(0, top, 8))
        return float(mpmath.log(val))


def _gig_log_kernel(b, r, s):
    # density of t = ln(theta), unnormalized, in mpmath
    return lambda t: s * t - (b * mpmath.exp(t) + r * mpmath.exp(-t)) / 2


class _GigQuad:
    """Mode, peak and break points of a GIG law in ``t = ln theta``.

    Inner break points are spaced in multiples of the peak width (inverse
    square root of the curvature at the mode); the ends are where the log
    density sits ``drop`` below its peak.
    """

    def __init__(self, b, r, s, drop=120):
        self.logk = logk = _gig_log_kernel(b, r, s)
        root = mpmath.sqrt(s * s + r * b)
        self.t0 = t0 = mpmath.log((s + root) / b) if s >= 0 else mpmath.log(r / (root - s))
        self.peak = peak = logk(t0)
        width = 1 / mpmath.sqrt((b * mpmath.exp(t0) + r * mpmath.exp(-t0)) / 2)
        ends = []
        for direction in (-1, 1):
            step = width
            while logk(t0 + direction * step) > peak - drop:
                step *= 2
            ends.append(t0 + direction * step)
        lo, hi = ends
        inner = [t0 + k * width for k in (-48, -24, -12, -6, -3, -1, 0, 1, 3, 6, 12, 24, 48)]
        self.breaks = [lo] + [p for p in inner if lo < p < hi] + [hi]

    def integral(self, power, upper=None):
        """``exp(-peak) * int theta^power * kernel`` over ``t``.

        The integrand is rescaled to order one because mpmath's stopping
        rule is absolute; the common ``exp(-peak)`` cancels in all ratios.
        """
        pts = self.breaks
        if upper is not None:
            pts = [p for p in pts if p < upper] + [upper]
            if len(pts) < 2:
                return mpmath.mpf(0)
        logk, peak, t0 = self.logk, self.peak, self.t0
        scaled = mpmath.quad(lambda t: mpmath.exp(logk(t) - peak + power * (t - t0)), pts,
                             method="gauss-legendre")
        return scaled * mpmath.exp(power * t0)


def gig_moments_quad(b, r, s, dps: int = 30):
    """``(E[theta], Var[theta], E[1/theta])`` of ``GIG(b, r, s)`` by quadrature."""
    with mpmath.workdps(dps):
        g = _GigQuad(mpmath.mpf(b), mpmath.mpf(r), mpmath.mpf(s))
        z = g.integral(0)
        m1 = g.integral(1) / z
        m2 = g.integral(2) / z
        inv = g.integral(-1) / z
        return float(m1), float(m2 - m1 * m1), float(inv)


def gig_cdf_quad(theta, b, r, s, dps: int = 25) -> float:
    with mpmath.workdps(dps):
        g = _GigQuad(mpmath.mpf(b), mpmath.mpf(r), mpmath.mpf(s))
        t = mpmath.log(mpmath.mpf(theta))
        return float(g.integral(0, upper=t) / g.integral(0))


def gig_quantile_quad(prob, b, r, s, dps: int = 25) -> float:
    """Quantile by bisection in ``ln theta`` on :func:`gig_cdf_quad`."""
    with mpmath.workdps(dps):
        pts = _GigQuad(mpmath.mpf(b), mpmath.mpf(r), mpmath.mpf(s)).breaks
    lo, hi = float(pts[0]), float(pts[-1])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gig_cdf_quad(np.exp(mid), b, r, s, dps) < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return float(np.exp(0.5 * (lo + hi)))


class GigTable:
    """Tabulated GIG law in ``t = ln theta`` for sampling and log densities.

    The normalizer and CDF come from composite Simpson quadrature on a
    uniform ``t`` grid; sampling is inverse-CDF with linear interpolation.
    """

    def __init__(self, b, r, s, points: int = 200001):
        b, r, s = float(b), float(r), float(s)
        t0 = float(np.log((s + np.hypot(s, np.sqrt(r * b))) / b)) if s >= 0 else \
            float(np.log(r / (np.hypot(s, np.sqrt(r * b)) - s)))
        logk = lambda t: s * t - 0.5 * (b * np.exp(t) + r * np.exp(-t))
        peak = logk(t0)
        lo, hi = t0 - 1.0, t0 + 1.0
        while logk(lo) > peak - 50:
            lo -= 1.0
        while logk(hi) > peak - 50:
            hi += 1.0
        if points % 2 == 0:
            points += 1
        t = np.linspace(lo, hi, points)
        dens = np.exp(logk(t) - peak)
        h = t[1] - t[0]
        # Simpson weights for the total, trapezoid for the running CDF
        w = np.ones(points)
        w[1:-1:2], w[2:-1:2] = 4.0, 2.0
        total = h / 3.0 * np.sum(w * dens)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * h * (dens[1:] + dens[:-1]))])
        self.t, self.cdf = t, cdf / cdf[-1]
        self.log_norm = peak + np.log(total)
        self.b, self.r, self.s = b, r, s

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        return (self.s - 1) * np.log(theta) - 0.5 * (self.b * theta + self.r / theta) - self.log_norm

    def sample(self, rng, size):
        return np.exp(np.interp(rng.random(size), self.cdf, self.t))


# -- posterior density and its derivatives ---------------------------------

def neg_log_posterior(problem: LinearProblem, prior: GammaHyperprior, u, theta) -> np.ndarray:
    """``-ln p(u, theta | y)`` up to a constant, from the model's factor densities.

    The hyperprior here is Gamma with shape ``beta`` and scale ``alpha``,
    the convention under which the MAP energy is written. Broadcasts over
    leading axes of ``u`` and ``theta`` (last axis = component).
    """
    u = np.asarray(u, dtype=float)
    theta = np.asarray(theta, dtype=float)
    alpha = prior.alpha_vec(problem.d)
    lik = stats.multivariate_normal(mean=problem.y, cov=problem.noise_cov)
    pred = u @ problem.A.T
    log_lik = lik.logpdf(pred) if pred.ndim == 1 else lik.logpdf(pred.reshape(-1, problem.n)).reshape(pred.shape[:-1])
    log_cond = np.sum(stats.norm.logpdf(u, scale=np.sqrt(theta)), axis=-1)
    log_hyper = np.sum(stats.gamma.logpdf(theta, a=prior.beta, scale=alpha), axis=-1)
    return -(log_lik + log_cond + log_hyper)


@dataclass
class GridPosterior:
    axes: list
    density: np.ndarray  # normalized so that sum(density) * cell_volume = 1
    argmax: np.ndarray  # stacked (u, theta) at the grid maximum
    cell_widths: np.ndarray


def dense_grid_posterior(problem: LinearProblem, prior: GammaHyperprior, axes) -> GridPosterior:
    """Posterior density of ``(u, theta)`` on a tensor grid (``d <= 2``).

    ``axes`` lists ``2d`` uniformly spaced 1-D arrays, ``u`` axes first.
    """
    d = problem.d
    if d > 2:
        raise ValueError("dense grid posterior supports d <= 2")
    axes = [np.asarray(a, dtype=float) for a in axes]
    if len(axes) != 2 * d:
        raise ValueError(f"need {2 * d} axes, got {len(axes)}")
    cells = int(np.prod([len(a) for a in axes], dtype=float))
    if cells > MAX_GRID_CELLS:
        raise ValueError(f"grid has {cells} cells, limit is {MAX_GRID_CELLS}")
    widths = np.array([a[1] - a[0] for a in axes])
    for a, w in zip(axes, widths):
        if not np.allclose(np.diff(a), w, rtol=1e-9, atol=0):
            raise ValueError("grid axes must be uniformly spaced")
    if np.any(axes[d][0] <= 0) or any(np.any(a <= 0) for a in axes[d:]):
        raise ValueError("theta axes must be positive")
    mesh = np.meshgrid(*axes, indexing="ij")
    U = np.stack(mesh[:d], axis=-1)
    T = np.stack(mesh[d:], axis=-1)
    logp = -neg_log_posterior(problem, prior, U, T)
    dens = np.exp(logp - np.max(logp))
    vol = float(np.prod(widths))
    dens /= np.sum(dens) * vol
    idx = np.unravel_index(np.argmax(dens), dens.shape)
    arg = np.array([axes[i][idx[i]] for i in range(2 * d)])
    return GridPosterior(axes, dens, arg, widths)


def fd_hessian(fn, x, step: float = 1e-5) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    k = x.shape[0]
    H = np.empty((k, k))
    f0 = fn(x)
    E = np.eye(k) * step
    for i in range(k):
        H[i, i] = (fn(x + E[i]) - 2 * f0 + fn(x - E[i])) / step**2
        for j in range(i + 1, k):
            H[i, j] = (fn(x + E[i] + E[j]) - fn(x + E[i] - E[j]) - fn(x - E[i] + E[j])
                       + fn(x - E[i] - E[j])) / (4 * step**2)
            H[j, i] = H[i, j]
    return H


def finite_diff_hessian(problem: LinearProblem, prior: GammaHyperprior, z, step: float = 1e-5) -> np.ndarray:
    """Finite-difference Hessian of the negative log posterior in ``(u, theta)``."""
    d = problem.d
    x = np.concatenate([np.asarray(z.u, dtype=float), np.asarray(z.theta, dtype=float)])
    if np.any(x[d:] <= 10 * step):
        raise ValueError("theta components must exceed 10 * step")
    return fd_hessian(lambda v: float(neg_log_posterior(problem, prior, v[:d], v[d:])), x, step)


# -- Monte Carlo ELBO -------------------------------------------------------

@dataclass
class McEstimate:
    estimate: float
    std_error: float
    rejected: int = 0


def elbo_mc(problem: LinearProblem, prior: GammaHyperprior, state, samples: int, rng) -> McEstimate:
    """Plain Monte Carlo estimate of ``E_q[ln p(y, u, theta) - ln q(u, theta)]``.

    The hyperprior is Gamma with shape ``alpha`` and rate ``beta``, the
    convention of the variational factorization.
    """
    d = problem.d
    alpha = prior.alpha_vec(d)
    L = np.linalg.cholesky(state.C)
    u = state.m + rng.standard_normal((samples, d)) @ L.T
    tables = [GigTable(state.b, state.r[i], state.s[i]) for i in range(d)]
    theta = np.stack([tab.sample(rng, samples) for tab in tables], axis=1)
    resid = problem.whiten((u @ problem.A.T - problem.y).T).T
    log_lik = -0.5 * np.sum(resid**2, axis=1) - 0.5 * problem.n * np.log(2 * np.pi) - 0.5 * problem.logdet_noise
    log_cond = np.sum(-0.5 * u**2 / theta - 0.5 * np.log(2 * np.pi * theta), axis=1)
    log_hyper = np.sum(stats.gamma.logpdf(theta, a=alpha, scale=1.0 / prior.beta), axis=1)
    dev = np.linalg.solve(L, (u - state.m).T)
    log_qu = -0.5 * np.sum(dev**2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * np.log(2 * np.pi)
    log_qt = np.sum([tables[i].logpdf(theta[:, i]) for i in range(d)], axis=0)
    vals = log_lik + log_cond + log_hyper - log_qu - log_qt
    ok = np.isfinite(vals)
    vals = vals[ok]
    return McEstimate(float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(vals.size)), int(np.sum(~ok)))


def elbo_mc_difference(problem: LinearProblem, prior: GammaHyperprior, state1, state2, samples: int,
                       seed: int = 0):
    """Monte Carlo estimate of ``ELBO(state1) - ELBO(state2)`` and its standard error."""
    rng = np.random.default_rng(seed)
    e1 = elbo_mc(problem, prior, state1, samples, rng)
    e2 = elbo_mc(problem, prior, state2, samples, rng)
    return e1.estimate - e2.estimate, float(np.hypot(e1.std_error, e2.std_error))


# -- one-dimensional ELBO landscape ----------------------------------------

def elbo_manifold_1d(ATA, yA, s, c, b: float = 1.0):
    """ELBO of a scalar problem restricted to the optimal-mean manifold.

    With ``C = c`` and ``m = c yA`` the ELBO (up to a data constant) is

        -ATA/2 (c + yA^2 c^2) + yA^2 c + 1/2 ln c
        - s/2 ln(b / r) + ln(2 K_s(sqrt(r b))),   r = yA^2 c^2 + c.
    """
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise ValueError("c must be positive")
    r = yA * yA * c * c + c
    out = (-0.5 * ATA * (c + yA * yA * c * c) + yA * yA * c + 0.5 * np.log(c)
           - 0.5 * s * np.log(b / r) + np.log(2.0) + log_bessel_k(s, np.sqrt(r * b)))
    return out if np.ndim(out) else float(out)


@dataclass
class LandscapeReport:
    interval: tuple
    mesh: float
    maxima: list  # (c, value), sorted by c
    global_max: tuple
    grid: np.ndarray = field(repr=False, default=None)
    values: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"interval": list(self.interval), "mesh": self.mesh,
                "maxima": [{"c": c, "value": v} for c, v in self.maxima],
                "global_max": {"c": self.global_max[0], "value": self.global_max[1]}}

    def write(self, csv_path=None, json_path=None):
        if csv_path is not None:
            write_csv(csv_path, ["c", "value"], zip(self.grid, self.values))
        if json_path is not None:
            write_json(json_path, self.to_dict())


def landscape_scan(ATA=1.0, yA=3.0, s=-0.49, b: float = 1.0, interval=(0.0, 1.0), mesh: float = 1e-5,
                   func=None, left_limit=None) -> LandscapeReport:
    """Grid search for local maxima of a 1-D function on ``interval``.

    The grid is ``lo, lo + mesh, ..., hi``; local maxima are grid points
    strictly above both neighbours. If ``lo = 0`` the left end is given the
    value ``left_limit`` (the limit from the right). For the manifold ELBO
    with ``s > -1/2`` that limit is ``-inf``, so a maximum lying between 0
    and the first interior grid point is still detected.

    ``func`` replaces the manifold ELBO by any vectorized function of ``c``.
    """
    if mesh <= 0:
        raise ValueError("mesh must be positive")
    lo, hi = map(float, interval)
    if hi <= lo:
        raise ValueError("empty interval")
    n_pts = int(np.floor((hi - lo) / mesh + 1e-9)) + 1
    grid = lo + mesh * np.arange(n_pts)
    fn = func if func is not None else (lambda c: elbo_manifold_1d(ATA, yA, s, c, b))
    values = np.empty(n_pts)
    if lo == 0.0:
        if left_limit is None:
            left_limit = -np.inf if (func is None and s > -0.5) else np.nan
        values[0] = left_limit
        values[1:] = fn(grid[1:])
    else:
        values[:] = fn(grid)
    # nan at the boundary never compares greater, so it never creates a peak
    inner = (values[1:-1] > values[:-2]) & (values[1:-1] > values[2:])
    if lo == 0.0 and np.isnan(values[0]):
        inner[0] = False
    idx = np.nonzero(inner)[0] + 1
    maxima = [(float(grid[i]), float(values[i])) for i in idx]
    finite = np.where(np.isfinite(values), values, -np.inf)
    g = int(np.argmax(finite))
    return LandscapeReport((lo, hi), float(mesh), maxima, (float(grid[g]), float(values[g])), grid, values)
