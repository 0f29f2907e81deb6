"""Iterative alternating scheme (IAS) for MAP estimation and the iterative
Laplace approximation built on its iterates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .model import GammaHyperprior, LinearProblem, Point, StopRule, energy, spd_solve

__all__ = [
    "IasResult",
    "LaplaceApprox",
    "DEFAULT_STOP",
    "choose_method",
    "update_u",
    "update_theta",
    "solve",
    "fixed_point_residuals",
    "hessian",
    "laplace",
]

DEFAULT_STOP = StopRule(max_iter=1000, param_rtol=1e-8)


def choose_method(problem: LinearProblem) -> str:
    """Kalman/Woodbury form when ``d > 2n`` (invert in data space)."""
    return "kalman" if problem.d > 2 * problem.n else "direct"


def update_u(problem: LinearProblem, theta, method: str = "auto"):
    """Minimize ``J(., theta)``: a Tikhonov-type least-squares solve.

    ``method="direct"`` solves the ``d x d`` normal equations;
    ``method="kalman"`` applies the gain ``D A^T (A D A^T + Gamma)^{-1}``.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(~(theta > 0)):
        raise ValueError("theta must be strictly positive")
    if method == "auto":
        method = choose_method(problem)
    if method == "direct":
        M = problem.gram + np.diag(1.0 / theta)
        return spd_solve(M, problem.rhs)
    if method == "kalman":
        At = problem.A_white
        S = (At * theta) @ At.T + np.eye(problem.n)
        return theta * (At.T @ spd_solve(S, problem.y_white))
    raise ValueError(f"unknown method {method!r}")


def update_theta(prior: GammaHyperprior, u):
    """Closed-form minimizer of ``J(u, .)``, componentwise."""
    u = np.asarray(u, dtype=float)
    alpha = prior.alpha_vec(u.shape[0])
    bt = prior.beta_tilde
    q = u * u / (2.0 * alpha)
    root = np.sqrt(0.25 * bt * bt + q)
    if bt >= 0:
        theta = alpha * (0.5 * bt + root)
    else:
        # avoid cancellation of bt/2 + root when bt < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = alpha * q / (root - 0.5 * bt)
    if np.any(~(theta > 0)):
        raise ValueError("theta update produced a non-positive component (beta <= 3/2 with u_i = 0)")
    return theta


@dataclass
class IasResult:
    point: Point
    energy_trace: list = field(default_factory=list)  # (iteration, total, part_a, part_b)
    iterations: int = 0
    converged: bool = False
    reason: str = ""

    def to_dict(self):
        return {
            "u": self.point.u.tolist(),
            "theta": self.point.theta.tolist(),
            "energy_trace": [list(t) for t in self.energy_trace],
            "iterations": self.iterations,
            "converged": {"flag": self.converged, "reason": self.reason},
        }

    @classmethod
    def from_dict(cls, doc):
        conv = doc.get("converged", {})
        return cls(
            point=Point(np.asarray(doc["u"]), np.asarray(doc["theta"])),
            energy_trace=[tuple(t) for t in doc.get("energy_trace", [])],
            iterations=int(doc.get("iterations", 0)),
            converged=bool(conv.get("flag", False)),
            reason=conv.get("reason", ""),
        )


def _rel_change(new, old):
    scale = max(np.max(np.abs(new)), np.finfo(float).tiny)
    return np.max(np.abs(new - old)) / scale


def solve(problem: LinearProblem, prior: GammaHyperprior, theta0=None, stop: StopRule | None = None,
          method: str = "auto", callback=None) -> IasResult:
    """Run IAS from ``theta0`` (all ones by default).

    Parameters
    ----------
    callback : callable, optional
        Called as ``callback(k, point)`` after every sweep.

    Raises
    ------
    ValueError
        If ``beta <= 3/2``; the energy is then not guaranteed convex.
    """
    if prior.beta <= 1.5:
        raise ValueError(f"IAS requires beta > 3/2, got beta={prior.beta}")
    stop = stop or DEFAULT_STOP
    d = problem.d
    theta = np.ones(d) if theta0 is None else np.array(theta0, dtype=float)
    if theta.shape != (d,) or np.any(~(theta > 0)):
        raise ValueError("theta0 must be a positive vector of length d")
    u = np.zeros(d)
    trace = []
    converged, reason = False, "max_iter"
    k = 0
    for k in range(1, stop.max_iter + 1):
        u_new = update_u(problem, theta, method)
        theta_new = update_theta(prior, u_new)
        change = max(_rel_change(u_new, u), _rel_change(theta_new, theta))
        point = Point(u_new, theta_new)
        parts = energy(problem, prior, point)
        if trace and parts[0] > trace[-1][1]:
            # exact sweeps never raise J, so this is round-off at the fixed point
            converged, reason, k = True, "energy_stalled", k - 1
            break
        u, theta = u_new, theta_new
        trace.append((k, *parts))
        if callback is not None:
            callback(k, point)
        if k > 1 and change < stop.param_rtol:
            converged, reason = True, "param_rtol"
            break
        if stop.objective_rtol is not None and len(trace) > stop.patience:
            recent = [abs(trace[j][1] - trace[j - 1][1]) / max(abs(trace[j][1]), 1e-300)
                      for j in range(len(trace) - stop.patience, len(trace))]
            if max(recent) < stop.objective_rtol:
                converged, reason = True, "objective_rtol"
                break
    return IasResult(Point(u, theta), trace, k, converged, reason)


def fixed_point_residuals(problem: LinearProblem, prior: GammaHyperprior, z: Point):
    """Relative residuals of both IAS optimality conditions at ``z``.

    Returns ``(theta_residual, normal_equation_residual)``.
    """
    theta_star = update_theta(prior, z.u)
    r_theta = np.max(np.abs(theta_star - z.theta)) / np.max(np.abs(z.theta))
    lhs = problem.gram @ z.u + z.u / z.theta
    r_u = np.linalg.norm(lhs - problem.rhs) / max(np.linalg.norm(problem.rhs), np.finfo(float).tiny)
    return float(r_theta), float(r_u)


def hessian(problem: LinearProblem, prior: GammaHyperprior, z: Point) -> np.ndarray:
    """Analytic Hessian of ``J`` in the stacked ordering ``(u, theta)``."""
    if z.u.shape[0] != problem.d:
        raise ValueError("point dimension does not match problem")
    u, th = z.u, z.theta
    d = problem.d
    H = np.zeros((2 * d, 2 * d))
    H[:d, :d] = problem.gram + np.diag(1.0 / th)
    off = -u / th**2
    idx = np.arange(d)
    H[idx, d + idx] = off
    H[d + idx, idx] = off
    H[d + idx, d + idx] = u * u / th**3 + prior.beta_tilde / th**2
    return H


@dataclass(frozen=True)
class LaplaceApprox:
    """Gaussian ``N(mean, cov)`` over the stacked vector ``(u, theta)``."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[0] // 2

    @property
    def u_mean(self):
        return self.mean[: self.d]

    @property
    def u_cov(self):
        return self.cov[: self.d, : self.d]


def laplace(problem: LinearProblem, prior: GammaHyperprior, z: Point) -> LaplaceApprox:
    """Gaussian approximation with precision equal to the Hessian at ``z``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the Hessian at ``z`` is not positive definite.
    """
    H = hessian(problem, prior, z)
    try:
        c, low = linalg.cho_factor(H, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Hessian is not positive definite at this point") from exc
    cov = linalg.cho_solve((c, low), np.eye(H.shape[0]))
    cov = 0.5 * (cov + cov.T)
    return LaplaceApprox(z.stacked(), cov)
