"""Log-scale modified Bessel K and generalized inverse Gaussian helpers.

The GIG density used throughout the package is

    q(theta | b, r, s) = (b/r)^(s/2) / (2 K_s(sqrt(r b))) * theta^(s-1)
                         * exp(-(b theta + r / theta) / 2),   theta > 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "R_FLOOR",
    "GigParams",
    "log_bessel_k",
    "bessel_k_ratio",
    "gig_mean",
    "gig_var",
    "gig_inv_mean",
    "gig_logpdf",
    "gig_cdf",
    "gig_quantile",
]

# Floor for the GIG "r" parameter; m_i^2 + C_ii can underflow for shrunk components.
R_FLOOR = 1e-300
MAX_ORDER = 50.0


def _check_args(s, x):
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(x))):
        raise ValueError("Bessel K arguments must be finite")
    if np.any(x <= 0):
        raise ValueError("Bessel K argument must be strictly positive")
    return s, x


def _log_k_series(nu, x):
    """Small-argument expansion of ln K_nu(x) for nu > 0.

    Uses the I_{-nu} part of K_nu = pi/2 (I_{-nu} - I_nu)/sin(nu pi), which is
    exact up to O((x/2)^{2 nu}) and only reached where kve overflows
    (tiny x and nu >= 1).
    """
    q = 0.25 * x * x
    total = np.ones_like(x)
    term = np.ones_like(x)
    for k in range(1, 40):
        if np.all(k >= nu - 0.5):
            break
        active = k < nu - 0.5
        term = np.where(active, term * q / (k * (k - nu)), 0.0)
        total = total + term
        if np.all(np.abs(term) < 1e-17 * np.abs(total)):
            break
    return special.gammaln(nu) - np.log(2.0) - nu * np.log(0.5 * x) + np.log(total)


def log_bessel_k(s, x):
    """Natural log of the modified Bessel function of the second kind.

    Parameters
    ----------
    s : float or array_like
        Real order. ``K`` is even in its order, so only ``|s|`` matters.
    x : float or array_like
        Positive argument.

    Returns
    -------
    float or ndarray
        ``ln K_s(x)``, broadcast over the inputs.

    Notes
    -----
    The exponentially scaled ``kve`` covers most of the domain without
    overflow for large ``x``; where ``K`` itself would overflow (tiny ``x``
    with order above one) a log-Gamma based series takes over.
    """
    s, x = _check_args(s, x)
    nu, x = np.broadcast_arrays(np.abs(s), x)
    scalar = nu.ndim == 0
    nu = np.atleast_1d(nu).astype(float)
    x = np.atleast_1d(x).astype(float)
    # kve misbehaves for subnormal orders; K is even in s, so the error is O(s^2)
    nu[nu < 1e-150] = 0.0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        kv = special.kve(nu, x)
        out = np.log(kv) - x
    bad = ~np.isfinite(out) | ~(kv > 0)
    if np.any(bad):
        out[bad] = _log_k_series(nu[bad], x[bad])
    return float(out[0]) if scalar else out


def bessel_k_ratio(s, x, shift):
    """Return ``K_{s+shift}(x) / K_s(x)`` evaluated through log-space.

    ``shift`` must be one of -1, 1 or 2.
    """
    if shift not in (-1, 1, 2):
        raise ValueError(f"shift must be -1, 1 or 2, got {shift!r}")
    s, x = _check_args(s, x)
    return np.exp(log_bessel_k(s + shift, x) - log_bessel_k(s, x))


@dataclass(frozen=True)
class GigParams:
    """Parameters ``(b, r, s)`` of a generalized inverse Gaussian law.

    Fields may be scalars or broadcast-compatible arrays.
    """

    b: float
    r: float
    s: float

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        r = np.asarray(self.r, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
            raise ValueError("GIG parameters must be finite")
        if np.any(b <= 0):
            raise ValueError("GIG parameter b must be positive")
        if np.any(r < 0):
            raise ValueError("GIG parameter r must be non-negative")

    def floored(self):
        """Return ``(b, r, s)`` arrays with ``r`` clipped at :data:`R_FLOOR`."""
        b = np.asarray(self.b, dtype=float)
        r = np.maximum(np.asarray(self.r, dtype=float), R_FLOOR)
        s = np.asarray(self.s, dtype=float)
        return b, r, s


def gig_mean(p: GigParams):
    """E[theta] under GIG(b, r, s)."""
    b, r, s = p.floored()
    return bessel_k_ratio(s, np.sqrt(r * b), 1) * np.sqrt(r / b)


def gig_var(p: GigParams):
    """Var[theta] under GIG(b, r, s)."""
    b, r, s = p.floored()
    x = np.sqrt(r * b)
    r1 = bessel_k_ratio(s, x, 1)
    r2 = bessel_k_ratio(s, x, 2)
    return (r / b) * (r2 - r1 * r1)


def gig_inv_mean(p: GigParams):
    """E[1/theta] under GIG(b, r, s)."""
    b, r, s = p.floored()
    return bessel_k_ratio(s, np.sqrt(r * b), -1) * np.sqrt(b / r)


def gig_logpdf(theta, p: GigParams):
    """Log density of GIG(b, r, s) at ``theta > 0``."""
    b, r, s = p.floored()
    theta = np.asarray(theta, dtype=float)
    lognorm = 0.5 * s * np.log(b / r) - np.log(2.0) - log_bessel_k(s, np.sqrt(r * b))
    return lognorm + (s - 1.0) * np.log(theta) - 0.5 * (b * theta + r / theta)


class _ScalarGig:
    """Quadrature machinery for one scalar GIG, working in ``t = ln theta``."""

    _DROP = 60.0  # log-density drop that marks the integration window

    def __init__(self, p: GigParams):
        b, r, s = (float(v) for v in p.floored())
        self.b, self.r, self.s = b, r, s
        self.lognorm = 0.5 * s * np.log(b / r) - np.log(2.0) - log_bessel_k(s, np.sqrt(r * b))
        # mode of theta^s exp(-(b theta + r/theta)/2), the density in t
        root = np.sqrt(s * s + r * b)
        top = s + root if s >= 0 else r * b / (root - s)
        self.t_mode = np.log(top / b)
        self.peak = self.log_integrand(self.t_mode)
        curv = 0.5 * (b * np.exp(self.t_mode) + r * np.exp(-self.t_mode))
        self.width = 1.0 / np.sqrt(curv)
        self.t_lo = self._edge(-1.0)
        self.t_hi = self._edge(1.0)
        self.total = self._integral(self.t_lo, self.t_hi)

    def log_integrand(self, t):
        return self.lognorm + self.s * t - 0.5 * (self.b * np.exp(t) + self.r * np.exp(-t))

    def _edge(self, direction):
        step = self.width
        t = self.t_mode
        for _ in range(200):
            t_next = t + direction * step
            if self.log_integrand(t_next) < self.peak - self._DROP:
                return t_next
            t = t_next
            step *= 2.0
        raise RuntimeError("GIG tail bracketing failed within 200 doublings")

    def _integral(self, lo, hi):
        if hi <= lo:
            return 0.0
        # break points keep the adaptive rule from stepping over the peak
        pts = [p for p in (self.t_mode - 3 * self.width, self.t_mode, self.t_mode + 3 * self.width)
               if lo < p < hi]
        f = lambda t: np.exp(self.log_integrand(t))
        val, _ = integrate.quad(f, lo, hi, points=pts or None, epsabs=1e-10, epsrel=1e-12, limit=500)
        return val

    def cdf_log(self, t):
        t = min(max(t, self.t_lo), self.t_hi)
        return self._integral(self.t_lo, t) / self.total

    def quantile(self, prob):
        g = lambda t: self.cdf_log(t) - prob
        t = optimize.brentq(g, self.t_lo, self.t_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
        return float(np.exp(t))


def gig_cdf(theta, p: GigParams):
    """CDF of a scalar GIG law at ``theta`` via adaptive quadrature."""
    if theta <= 0:
        return 0.0
    return _ScalarGig(p).cdf_log(np.log(theta))


def gig_quantile(p: GigParams, prob):
    """Quantile of a scalar GIG law.

    The density is integrated with adaptive Gauss-Kronrod quadrature in
    ``ln theta`` and the CDF is inverted by a bracketed root search.

    Parameters
    ----------
    p : GigParams
        Scalar parameters.
    prob : float or sequence of float
        Probabilities in (0, 1).

    Returns
    -------
    float or ndarray
    """
    probs = np.atleast_1d(np.asarray(prob, dtype=float))
    if np.any((probs <= 0) | (probs >= 1)) or not np.all(np.isfinite(probs)):
        raise ValueError("quantile probability must lie strictly inside (0, 1)")
    g = _ScalarGig(p)
    out = np.array([g.quantile(q) for q in probs])
    return float(out[0]) if np.ndim(prob) == 0 else out
