"""Linear-Gaussian problem data, gamma hyperpriors and the posterior energy."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

__all__ = [
    "LinearProblem",
    "GammaHyperprior",
    "Point",
    "StopRule",
    "energy",
    "log_posterior_unnorm",
    "spd_solve",
    "problem_to_dict",
    "problem_from_dict",
]


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class LinearProblem:
    """The triple ``(A, y, Gamma)`` of ``y = A u + eta``, ``eta ~ N(0, Gamma)``.

    Parameters
    ----------
    A : array_like, shape (n, d)
        Forward operator.
    y : array_like, shape (n,)
        Observed data.
    noise_cov : float, array_like of shape (n,) or (n, n)
        Noise covariance given as a scalar variance ``gamma**2``, the
        diagonal of a diagonal covariance, or a dense SPD matrix.

    Notes
    -----
    Everything downstream works with the whitened operator
    ``L^{-1} A`` and data ``L^{-1} y`` where ``Gamma = L L^T``; both are
    computed once and cached.
    """

    def __init__(self, A, y, noise_cov=1.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError("A must be a non-empty 2-D array")
        if A.shape[0] != y.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but y has length {y.shape[0]}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise ValueError("A and y must be finite")
        n = A.shape[0]
        cov = np.asarray(noise_cov, dtype=float)
        if cov.ndim == 0:
            if not cov > 0:
                raise ValueError("scalar noise variance must be positive")
            self.noise_kind = "scalar"
            self._noise = _readonly(cov)
            self._scale = np.full(n, np.sqrt(float(cov)))
        elif cov.ndim == 1:
            if cov.shape != (n,) or np.any(cov <= 0):
                raise ValueError("diagonal noise covariance must be positive with length n")
            self.noise_kind = "diagonal"
            self._noise = _readonly(cov)
            self._scale = np.sqrt(cov)
        elif cov.ndim == 2:
            if cov.shape != (n, n):
                raise ValueError("dense noise covariance must be n x n")
            if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
                raise ValueError("noise covariance is not symmetric")
            self.noise_kind = "dense"
            self._noise = _readonly(cov)
            self._chol = linalg.cholesky(cov, lower=True)
            self._scale = None
        else:
            raise ValueError("noise_cov must be a scalar, vector or matrix")
        self.A = _readonly(A)
        self.y = _readonly(y)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def noise_cov(self) -> np.ndarray:
        """Dense ``n x n`` noise covariance."""
        if self.noise_kind == "scalar":
            return float(self._noise) * np.eye(self.n)
        if self.noise_kind == "diagonal":
            return np.diag(self._noise)
        return np.array(self._noise)

    def whiten(self, v):
        """Apply ``Gamma^{-1/2}`` (the inverse Cholesky factor) to ``v``."""
        v = np.asarray(v, dtype=float)
        if self._scale is not None:
            return v / (self._scale if v.ndim == 1 else self._scale[:, None])
        return linalg.solve_triangular(self._chol, v, lower=True)

    @cached_property
    def A_white(self) -> np.ndarray:
        return _readonly(self.whiten(self.A))

    @cached_property
    def y_white(self) -> np.ndarray:
        return _readonly(self.whiten(self.y))

    @cached_property
    def gram(self) -> np.ndarray:
        """``A^T Gamma^{-1} A``."""
        At = self.A_white
        return _readonly(At.T @ At)

    @cached_property
    def rhs(self) -> np.ndarray:
        """``A^T Gamma^{-1} y``."""
        return _readonly(self.A_white.T @ self.y_white)

    @cached_property
    def logdet_noise(self) -> float:
        if self._scale is not None:
            return float(2.0 * np.sum(np.log(self._scale)))
        return float(2.0 * np.sum(np.log(np.diag(self._chol))))

    def with_data(self, y) -> "LinearProblem":
        """Same operator and noise model with new data ``y``."""
        return LinearProblem(self.A, y, self._noise)

    def misfit(self, u) -> float:
        """``||y - A u||^2_Gamma``."""
        res = self.y_white - self.A_white @ np.asarray(u, dtype=float)
        return float(res @ res)


class GammaHyperprior:
    """Gamma(alpha_i, beta) hyperprior on the prior variances.

    ``alpha`` may be a scalar (shared by all components) or a vector.
    """

    def __init__(self, alpha, beta):
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim > 1 or alpha.size == 0:
            raise ValueError("alpha must be a scalar or a 1-D vector")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("alpha must be positive")
        beta = float(beta)
        if not np.isfinite(beta) or beta <= 0:
            raise ValueError("beta must be positive")
        self.alpha = _readonly(alpha)
        self.beta = beta

    @classmethod
    def from_beta_tilde(cls, alpha, beta_tilde):
        """Build from the shifted rate ``beta - 3/2`` used to configure IAS."""
        return cls(alpha, float(beta_tilde) + 1.5)

    @property
    def beta_tilde(self) -> float:
        return self.beta - 1.5

    @property
    def b(self) -> float:
        return 2.0 * self.beta

    def alpha_vec(self, d: int) -> np.ndarray:
        if self.alpha.ndim == 1 and self.alpha.shape[0] != d:
            raise ValueError(f"alpha has length {self.alpha.shape[0]}, expected {d}")
        return np.broadcast_to(self.alpha, (d,)).astype(float)

    def s(self, d: int) -> np.ndarray:
        return self.alpha_vec(d) - 0.5

    def __repr__(self):
        a = float(self.alpha) if self.alpha.ndim == 0 else self.alpha
        return f"GammaHyperprior(alpha={a!r}, beta={self.beta!r})"


@dataclass(frozen=True)
class Point:
    """A point ``z = (u, theta)`` with strictly positive ``theta``."""

    u: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        u = _readonly(np.atleast_1d(self.u))
        theta = _readonly(np.atleast_1d(self.theta))
        if u.shape != theta.shape or u.ndim != 1:
            raise ValueError("u and theta must be vectors of equal length")
        if np.any(~(theta > 0)):
            raise ValueError("theta must be strictly positive")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "theta", theta)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u, self.theta])


@dataclass(frozen=True)
class StopRule:
    """Termination rule shared by the iterative solvers.

    A solve stops when the relative max-norm parameter change drops below
    ``param_rtol``, when the relative objective change stays below
    ``objective_rtol`` for ``patience`` consecutive sweeps (disabled when
    ``objective_rtol`` is None), or after ``max_iter`` sweeps.
    """

    max_iter: int = 1000
    param_rtol: float = 1e-8
    objective_rtol: float | None = None
    patience: int = 5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def to_dict(self):
        return {"max_iter": self.max_iter, "param_rtol": self.param_rtol,
                "objective_rtol": self.objective_rtol, "patience": self.patience}


def _check_dims(problem: LinearProblem, z: Point):
    if z.u.shape[0] != problem.d:
        raise ValueError(f"point has dimension {z.u.shape[0]}, problem has d={problem.d}")


def energy(problem: LinearProblem, prior: GammaHyperprior, z: Point):
    """Negative log posterior ``J(u, theta)`` up to an additive constant.

    Returns
    -------
    total, part_a, part_b : float
        ``part_a`` is the quadratic data/prior term in ``u``; ``part_b`` the
        hyperprior term in ``theta``.
    """
    _check_dims(problem, z)
    u, theta = z.u, z.theta
    alpha = prior.alpha_vec(problem.d)
    part_a = 0.5 * problem.misfit(u) + 0.5 * float(np.sum(u * u / theta))
    ratio = theta / alpha
    part_b = float(np.sum(ratio - prior.beta_tilde * np.log(ratio)))
    return part_a + part_b, part_a, part_b


def log_posterior_unnorm(problem: LinearProblem, prior: GammaHyperprior, z: Point) -> float:
    return -energy(problem, prior, z)[0]


def spd_solve(M, B):
    """Solve ``M X = B`` for symmetric positive definite ``M``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the Cholesky factorization fails.
    """
    M = np.asarray(M, dtype=float)
    try:
        factor = linalg.cho_factor(M, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"matrix is not positive definite: {exc}") from exc
    return linalg.cho_solve(factor, np.asarray(B, dtype=float))


def problem_to_dict(problem: LinearProblem, prior: GammaHyperprior | None = None) -> dict:
    if problem.noise_kind == "scalar":
        noise = {"type": "scalar", "value": float(problem._noise)}
    else:
        noise = {"type": problem.noise_kind, "value": problem._noise.tolist()}
    out = {
        "n": problem.n,
        "d": problem.d,
        "A": problem.A.tolist(),
        "y": problem.y.tolist(),
        "noise_cov": noise,
    }
    if prior is not None:
        out["alpha"] = prior.alpha.tolist()
        out["beta"] = prior.beta
    return out


def problem_from_dict(doc: dict):
    """Inverse of :func:`problem_to_dict`.

    Returns
    -------
    problem : LinearProblem
    prior : GammaHyperprior or None
        Present only when the document carries ``alpha`` and ``beta``.
    """
    for key in ("n", "d", "A", "y", "noise_cov"):
        if key not in doc:
            raise KeyError(key)
    A = np.asarray(doc["A"], dtype=float).reshape(int(doc["n"]), int(doc["d"]))
    noise = doc["noise_cov"]
    kind = noise.get("type")
    if kind not in ("scalar", "diagonal", "dense"):
        raise ValueError(f"unknown noise_cov type {kind!r}")
    problem = LinearProblem(A, doc["y"], np.asarray(noise["value"], dtype=float))
    prior = None
    if "alpha" in doc and "beta" in doc:
        prior = GammaHyperprior(doc["alpha"], doc["beta"])
    return problem, prior
