"""Credible intervals, coverage studies, covariance PCA and trajectory bands."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special as sps

from . import ias, problems, vias
from .model import GammaHyperprior, LinearProblem, StopRule
from .outputs import write_csv
from .special import GigParams, gig_quantile

__all__ = [
    "IntervalSet",
    "PcaReport",
    "CoverageReport",
    "TrajectoryBand",
    "normal_quantile",
    "intervals_u",
    "intervals_linear_map",
    "intervals_theta",
    "vias_intervals",
    "laplace_intervals",
    "coverage_study",
    "covariance_pca",
    "mass_near",
    "trajectory_band",
    "BAND_CONVENTION",
]


def _check_level(level):
    level = float(level)
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie strictly inside (0, 1), got {level}")
    return level


def normal_quantile(level: float) -> float:
    """Two-sided standard normal quantile ``z`` with ``P(|Z| <= z) = level``."""
    level = _check_level(level)
    return float(sps.ndtri(0.5 + 0.5 * level))


@dataclass
class IntervalSet:
    """Componentwise intervals ``[lo, hi]`` at a stated level."""

    lo: np.ndarray
    hi: np.ndarray
    level: float
    source: str
    estimate: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise ValueError("lo and hi must have the same shape")
        if np.any(self.lo > self.hi):
            raise ValueError("interval with lo > hi")
        if self.estimate is not None:
            self.estimate = np.asarray(self.estimate, dtype=float)

    @property
    def width(self):
        return self.hi - self.lo

    @property
    def midpoint(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, values):
        values = np.asarray(values, dtype=float)
        return (self.lo <= values) & (values <= self.hi)

    def write_csv(self, path, truth=None):
        est = self.midpoint if self.estimate is None else self.estimate
        tr = [None] * len(self.lo) if truth is None else list(np.asarray(truth, dtype=float))
        rows = [(i, tr[i], est[i], self.lo[i], self.hi[i]) for i in range(len(self.lo))]
        return write_csv(path, ["index", "truth", "estimate", "lo", "hi"], rows)


def intervals_u(mean, cov, level: float = 0.95, source: str = "vias") -> IntervalSet:
    """Gaussian marginal intervals ``m_i +- z sqrt(cov_ii)``."""
    mean = np.asarray(mean, dtype=float)
    var = np.diagonal(np.asarray(cov, dtype=float))
    if var.shape != mean.shape:
        raise ValueError("mean and covariance dimensions differ")
    if np.any(~(var > 0)):
        raise ValueError("covariance diagonal must be positive")
    half = normal_quantile(level) * np.sqrt(var)
    return IntervalSet(mean - half, mean + half, level, source, mean)


def intervals_linear_map(M, mean, cov, level: float = 0.95, source: str = "vias") -> IntervalSet:
    """Intervals for ``M u`` when ``u ~ N(mean, cov)``."""
    M = np.asarray(M, dtype=float)
    mapped_mean = M @ np.asarray(mean, dtype=float)
    var = np.sum((M @ np.asarray(cov, dtype=float)) * M, axis=1)
    if np.any(~(var > 0)):
        raise ValueError("mapped variance must be positive")
    half = normal_quantile(level) * np.sqrt(var)
    return IntervalSet(mapped_mean - half, mapped_mean + half, level, source, mapped_mean)


def intervals_theta(state: vias.VariationalState, level: float = 0.95) -> IntervalSet:
    """Equal-tailed intervals of the GIG factors ``q(theta_i)``."""
    level = _check_level(level)
    probs = [0.5 * (1 - level), 0.5 * (1 + level)]
    lo, hi = np.empty(state.d), np.empty(state.d)
    for i in range(state.d):
        lo[i], hi[i] = gig_quantile(GigParams(state.b, state.r[i], state.s[i]), probs)
    return IntervalSet(lo, hi, level, "vias")


def vias_intervals(result: vias.ViasResult, level: float = 0.95) -> IntervalSet:
    return intervals_u(result.state.m, result.state.C, level, "vias")


def laplace_intervals(problem: LinearProblem, prior: GammaHyperprior, point, level: float = 0.95) -> IntervalSet:
    """Intervals for ``u`` from the u-block of the inverse Hessian at ``point``."""
    approx = ias.laplace(problem, prior, point)
    out = intervals_u(approx.u_mean, approx.u_cov, level, "laplace")
    return out


@dataclass
class CoverageReport:
    coverage_rate: float
    mean_width: float
    reps: int
    failures: int
    solver: str
    level: float
    per_rep: list = field(default_factory=list)  # (rep, covered count, mean width) or (rep, None, error)

    def to_dict(self):
        return {"coverage_rate": self.coverage_rate, "mean_width": self.mean_width, "reps": self.reps,
                "failures": self.failures, "solver": self.solver, "level": self.level}

    def write_csv(self, path):
        return write_csv(path, ["rep", "covered", "mean_width", "error"],
                         [(k, c, w, e) for k, c, w, e in self.per_rep])


VIAS_COVERAGE_STOP = StopRule(max_iter=300, param_rtol=1e-8)
# IAS needs beta > 3/2; this near-L1 setting is the default comparison point
IAS_COVERAGE_PRIOR = GammaHyperprior.from_beta_tilde(1.0, 1e-5)


def _solve_intervals(problem, solver, prior, level, stop):
    if solver == "vias":
        res = vias.solve(problem, prior, stop=stop or VIAS_COVERAGE_STOP, track_elbo=False)
        return vias_intervals(res, level)
    if solver == "ias_laplace":
        res = ias.solve(problem, prior, stop=stop)
        return laplace_intervals(problem, prior, res.point, level)
    raise ValueError(f"unknown solver {solver!r}")


def coverage_study(bundle: problems.ExperimentBundle, solver: str = "vias", reps: int = 200, level: float = 0.95,
                   seed: int = 0, prior: GammaHyperprior | None = None, stop: StopRule | None = None,
                   threads: int = 1) -> CoverageReport:
    """Frequentist coverage of credible intervals under noise resampling.

    The operator and the truth are those of ``bundle``; each repetition
    draws fresh noise with the bundle's noise level from a seed derived from
    ``(seed, rep)``, solves, and counts components whose interval contains
    the truth.

    Parameters
    ----------
    prior : GammaHyperprior, optional
        Defaults to the generating hyperparameters for ``vias`` (taken from
        the bundle metadata) and to ``alpha = 1``, ``beta - 3/2 = 1e-5`` for
        ``ias_laplace``.

    Raises
    ------
    RuntimeError
        If more than 10% of repetitions fail.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if solver not in ("vias", "ias_laplace"):
        raise ValueError(f"unknown solver {solver!r}")
    level = _check_level(level)
    if prior is None:
        if solver == "vias":
            params = bundle.meta.get("params", {})
            if "alpha" not in params or "beta" not in params:
                raise ValueError("bundle meta has no generating hyperparameters; pass prior explicitly")
            prior = GammaHyperprior(params["alpha"], params["beta"])
        else:
            prior = IAS_COVERAGE_PRIOR
    base = bundle.problem
    clean = base.A @ bundle.truth_u
    noise_chol = np.linalg.cholesky(base.noise_cov)
    seeds = np.random.SeedSequence(seed).spawn(reps)

    def one(k):
        rng = np.random.default_rng(seeds[k])
        problem = base.with_data(clean + noise_chol @ rng.standard_normal(base.n))
        try:
            iv = _solve_intervals(problem, solver, prior, level, stop)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            return (k, None, None, f"{type(exc).__name__}: {exc}")
        return (k, int(np.sum(iv.contains(bundle.truth_u))), float(np.mean(iv.width)), None)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_rep = list(pool.map(one, range(reps)))
    else:
        per_rep = [one(k) for k in range(reps)]
    good = [row for row in per_rep if row[3] is None]
    failures = reps - len(good)
    if failures > 0.1 * reps:
        raise RuntimeError(f"{failures} of {reps} repetitions failed; first: "
                           f"{next(row[3] for row in per_rep if row[3] is not None)}")
    covered = sum(row[1] for row in good)
    rate = covered / (len(good) * base.d)
    width = float(np.mean([row[2] for row in good]))
    return CoverageReport(float(rate), width, reps, failures, solver, level, per_rep)


@dataclass
class PcaReport:
    eigenvalues: np.ndarray  # all, descending
    fractions: np.ndarray  # all, descending
    vectors: np.ndarray  # (d, k): top-k unit vectors as columns

    @property
    def k(self):
        return self.vectors.shape[1]

    def write_csv(self, path):
        d = self.vectors.shape[0]
        header = ["component", "eigenvalue", "fraction"] + [f"v{i}" for i in range(d)]
        rows = [[j, self.eigenvalues[j], self.fractions[j], *self.vectors[:, j]] for j in range(self.k)]
        return write_csv(path, header, rows)


def covariance_pca(C, k: int) -> PcaReport:
    """Principal components of a covariance matrix.

    Vectors are unit-norm with their largest-magnitude entry positive.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("C must be square")
    if not 1 <= k <= C.shape[0]:
        raise ValueError(f"k must lie in [1, {C.shape[0]}]")
    scale = max(np.max(np.abs(C)), np.finfo(float).tiny)
    if np.max(np.abs(C - C.T)) > 1e-10 * scale:
        raise ValueError("C is not symmetric")
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    w = np.maximum(w, 0.0)
    fractions = w / np.sum(w)
    top = V[:, :k].copy()
    pivot = np.argmax(np.abs(top), axis=0)
    top *= np.sign(top[pivot, np.arange(k)])
    return PcaReport(w, fractions, top)


def mass_near(vector, sites, radius: int) -> float:
    """Fraction of ``sum(vector**2)`` within ``radius`` indices of any site."""
    v2 = np.asarray(vector, dtype=float) ** 2
    idx = np.arange(v2.shape[0])
    near = np.zeros(v2.shape[0], dtype=bool)
    for site in np.atleast_1d(sites):
        near |= np.abs(idx - int(site)) <= radius
    return float(np.sum(v2[near]) / np.sum(v2))


BAND_CONVENTION = ("terms with |interval midpoint| below the threshold are dropped; pointwise envelope of "
                   "trajectories integrated with the kept coefficients at: interval midpoints for all "
                   "equations; all lower endpoints; all upper endpoints; and for each equation its lower or "
                   "upper endpoints with the other equations at midpoints")


@dataclass
class TrajectoryBand:
    times: np.ndarray
    lower: np.ndarray  # (steps, 3)
    upper: np.ndarray
    center: np.ndarray  # midpoint-coefficient trajectory
    complete: bool  # False if some trajectory blew up and the band was truncated
    convention: str = BAND_CONVENTION

    def contains(self, states, atol: float = 0.0):
        states = np.asarray(states, dtype=float)[: len(self.times)]
        return (self.lower - atol <= states) & (states <= self.upper + atol)

    def write_csv(self, path):
        header = ["t"] + [f"{kind}_{c}" for c in "xyz" for kind in ("lo", "center", "hi")]
        rows = [[self.times[j]] + [v for c in range(3)
                                   for v in (self.lower[j, c], self.center[j, c], self.upper[j, c])]
                for j in range(len(self.times))]
        return write_csv(path, header, rows)


def _coefficient_sets(phi_intervals, threshold):
    lo = np.stack([iv.lo for iv in phi_intervals], axis=1)  # (terms, 3)
    hi = np.stack([iv.hi for iv in phi_intervals], axis=1)
    mid = 0.5 * (lo + hi)
    keep = np.abs(mid) >= threshold
    lo, hi, mid = lo * keep, hi * keep, mid * keep
    sets = [mid, lo, hi]
    for eq in range(3):
        for end in (lo, hi):
            c = mid.copy()
            c[:, eq] = end[:, eq]
            sets.append(c)
    return np.stack(sets)  # (K, terms, 3)


def trajectory_band(phi_intervals, x0=problems.LORENZ_X0, dt: float = 0.02, steps: int = 2000,
                    max_degree: int = 5, threshold: float = 0.1) -> TrajectoryBand:
    """Uncertainty band for dictionary dynamics ``dx/dt = Theta(x) Phi``.

    ``phi_intervals`` holds one :class:`IntervalSet` per state equation over
    the dictionary terms. Terms whose interval midpoint is smaller than
    ``threshold`` in magnitude are removed from the model; perturbing every
    high-degree term at once makes the integrated dynamics blow up within a
    fraction of a time unit. See :data:`BAND_CONVENTION` for the integrated
    coefficient combinations.
    """
    if len(phi_intervals) != 3:
        raise ValueError("need one interval set per state equation")
    coefs = _coefficient_sets(phi_intervals, threshold)
    n_terms = len(problems.dictionary_exponents(max_degree))
    if coefs.shape[1] != n_terms:
        raise ValueError(f"intervals have {coefs.shape[1]} terms, dictionary has {n_terms}")

    def field_fn(X):
        Theta, _ = problems.build_dictionary(X, max_degree)  # (K, terms)
        return np.einsum("kt,ktc->kc", Theta, coefs)

    x_start = np.broadcast_to(np.asarray(x0, dtype=float), (coefs.shape[0], 3))
    with np.errstate(over="ignore", invalid="ignore"):
        X, ok = problems.rk4(field_fn, x_start, dt, steps)
    times = dt * np.arange(X.shape[0])
    return TrajectoryBand(times, X.min(axis=1), X.max(axis=1), X[:, 0], ok)
