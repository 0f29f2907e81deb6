"""Mean-field variational solver (VIAS).

The variational family is ``q(u) prod_i q(theta_i)`` with
``q(u) = N(m, C)`` and ``q(theta_i) = GIG(b, r_i, s_i)``; coordinate ascent
alternates the ``r`` update with the Gaussian update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .model import GammaHyperprior, LinearProblem, StopRule
from .special import R_FLOOR, GigParams, gig_inv_mean, log_bessel_k

__all__ = [
    "VariationalState",
    "ViasResult",
    "DEFAULT_STOP",
    "initial_state",
    "update_r",
    "shrinkage_weights",
    "update_mc",
    "elbo",
    "elbo_constant",
    "sweep",
    "solve",
]

DEFAULT_STOP = StopRule(max_iter=1000, param_rtol=1e-8, objective_rtol=1e-10, patience=5)


@dataclass
class VariationalState:
    """Variational parameters ``(m, C, r)`` plus the fixed ``b`` and ``s``."""

    m: np.ndarray
    C: np.ndarray
    r: np.ndarray
    b: float
    s: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        d = self.m.shape[0]
        self.s = np.broadcast_to(np.asarray(self.s, dtype=float), (d,)).copy()
        self.b = float(self.b)
        if self.C.shape != (d, d) or self.r.shape != (d,):
            raise ValueError("inconsistent variational state dimensions")
        if np.any(~(self.r > 0)):
            raise ValueError("r must be strictly positive")
        if self.b <= 0:
            raise ValueError("b must be positive")

    @property
    def d(self) -> int:
        return self.m.shape[0]

    def gig(self) -> GigParams:
        return GigParams(self.b, self.r, self.s)

    def to_dict(self):
        return {"m": self.m.tolist(), "C": self.C.tolist(), "r": self.r.tolist(),
                "b": self.b, "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["m"]), np.asarray(doc["C"]), np.asarray(doc["r"]),
                   doc["b"], np.asarray(doc["s"]))


@dataclass
class ViasResult:
    state: VariationalState
    elbo_trace: list = field(default_factory=list)  # (iteration, elbo)
    iterations: int = 0
    converged: bool = False
    reason: str = ""
    param_change: list = field(default_factory=list)

    def to_dict(self):
        out = self.state.to_dict()
        out.update({
            "elbo_trace": [list(t) for t in self.elbo_trace],
            "iterations": self.iterations,
            "converged": {"flag": self.converged, "reason": self.reason},
        })
        return out

    @classmethod
    def from_dict(cls, doc):
        conv = doc.get("converged", {})
        return cls(VariationalState.from_dict(doc), [tuple(t) for t in doc.get("elbo_trace", [])],
                   int(doc.get("iterations", 0)), bool(conv.get("flag", False)), conv.get("reason", ""))


def update_r(m, C):
    """``r_i = m_i^2 + C_ii``, floored away from zero."""
    m = np.asarray(m, dtype=float)
    diag = np.diagonal(np.asarray(C, dtype=float))
    r = m * m + diag
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite variational mean or covariance")
    return np.maximum(r, R_FLOOR)


def shrinkage_weights(state: VariationalState):
    """Diagonal of ``L``: ``E[1/theta_i]`` under the current GIG factors."""
    return gig_inv_mean(state.gig())


def _weights(b, r, s):
    return gig_inv_mean(GigParams(b, r, s))


def update_mc(problem: LinearProblem, ell, method: str = "auto"):
    """Gaussian factor update ``C = (A^T Gamma^-1 A + L)^-1``, ``m = C A^T Gamma^-1 y``.

    ``method="woodbury"`` works with an ``n x n`` system, which is cheaper
    when ``d`` exceeds ``n``.
    """
    ell = np.asarray(ell, dtype=float)
    if np.any(~(ell > 0)) or not np.all(np.isfinite(ell)):
        raise ValueError("shrinkage weights must be positive and finite")
    if method == "auto":
        method = "woodbury" if problem.d > 2 * problem.n else "direct"
    if method == "direct":
        P = problem.gram + np.diag(ell)
        try:
            factor = linalg.cho_factor(P, lower=True)
        except linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("Gaussian-factor precision is not positive definite") from exc
        C = linalg.cho_solve(factor, np.eye(problem.d))
        m = linalg.cho_solve(factor, problem.rhs)
    elif method == "woodbury":
        At = problem.A_white
        inv_ell = 1.0 / ell
        AL = At * inv_ell
        S = AL @ At.T + np.eye(problem.n)
        try:
            factor = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("data-space system is not positive definite") from exc
        G = linalg.cho_solve(factor, AL).T  # L^-1 A^T S^-1
        m = G @ problem.y_white
        C = np.diag(inv_ell) - G @ AL
    else:
        raise ValueError(f"unknown method {method!r}")
    C = 0.5 * (C + C.T)
    return m, C


def elbo_constant(problem: LinearProblem, prior: GammaHyperprior) -> float:
    """Terms of the ELBO that do not depend on ``(m, C, r)``.

    They do depend on the hyperparameters, so they must be included when
    ELBO values are compared across hyperparameter choices.
    """
    alpha = prior.alpha_vec(problem.d)
    return float(
        0.5 * problem.d
        - 0.5 * problem.n * np.log(2.0 * np.pi)
        - 0.5 * problem.logdet_noise
        + np.sum(alpha * np.log(prior.beta) - special.gammaln(alpha))
    )


def elbo(problem: LinearProblem, prior: GammaHyperprior, state: VariationalState,
         include_constants: bool = False) -> float:
    """Evidence lower bound of the mean-field state.

    With ``include_constants=False`` terms that do not involve ``(m, C, r)``
    are dropped, leaving

        -1/2 tr(Gamma^-1 A C A^T) - 1/2 ||A m - y||^2_Gamma + 1/2 ln det C
        - sum_i s_i/2 ln(b / r_i) + sum_i ln(2 K_{s_i}(sqrt(r_i b)))
        + 1/2 sum_i (r_i - m_i^2 - C_ii) E[1/theta_i].

    The last sum vanishes whenever ``r`` is at its optimum given ``(m, C)``;
    it keeps the value exact between the two half-steps of a sweep.
    """
    d = problem.d
    if state.d != d:
        raise ValueError("state dimension does not match problem")
    if not np.isclose(state.b, prior.b, rtol=1e-12):
        raise ValueError("state b does not match 2*beta of the prior")
    m, C, r, b, s = state.m, state.C, state.r, state.b, state.s
    try:
        chol = linalg.cholesky(C, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("variational covariance is not positive definite") from exc
    logdet_c = 2.0 * np.sum(np.log(np.diag(chol)))
    trace_term = float(np.sum(C * problem.gram))
    x = np.sqrt(r * b)
    ell = _weights(b, r, s)
    value = (
        -0.5 * trace_term
        - 0.5 * problem.misfit(m)
        + 0.5 * logdet_c
        - np.sum(0.5 * s * np.log(b / r))
        + np.sum(np.log(2.0) + log_bessel_k(s, x))
        + 0.5 * np.sum((r - m * m - np.diagonal(C)) * ell)
    )
    if include_constants:
        value += elbo_constant(problem, prior)
    return float(value)


def initial_state(problem: LinearProblem, prior: GammaHyperprior, m0=None, C0=None) -> VariationalState:
    """Default start ``m = 1``, ``C = I``; ``r`` is taken from ``(m0, C0)``.

    In high-noise regimes a larger initial covariance (``C0 = lam * I`` with
    ``lam`` well above zero) steers the iteration toward the ELBO maximum
    farthest from the origin.
    """
    d = problem.d
    m = np.ones(d) if m0 is None else np.array(m0, dtype=float)
    if C0 is None:
        C = np.eye(d)
    else:
        C = np.asarray(C0, dtype=float)
        if C.ndim == 0:
            C = float(C) * np.eye(d)
    if m.shape != (d,) or C.shape != (d, d):
        raise ValueError("m0/C0 have the wrong shape")
    try:
        linalg.cholesky(C, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("C0 must be positive definite") from exc
    return VariationalState(m, C, update_r(m, C), prior.b, prior.s(d))


def sweep(problem: LinearProblem, state: VariationalState, method: str = "auto") -> VariationalState:
    """One coordinate-ascent sweep: ``r`` from ``(m, C)``, then ``(m, C)`` from ``r``."""
    r = update_r(state.m, state.C)
    ell = _weights(state.b, r, state.s)
    m, C = update_mc(problem, ell, method)
    return VariationalState(m, C, r, state.b, state.s)


def _rel(new, old):
    return np.max(np.abs(new - old)) / max(np.max(np.abs(new)), np.finfo(float).tiny)


def solve(problem: LinearProblem, prior: GammaHyperprior, m0=None, C0=None, stop: StopRule | None = None,
          method: str = "auto", include_constants: bool = False, track_elbo: bool = True,
          callback=None) -> ViasResult:
    """Run VIAS until the stop rule fires.

    Parameters
    ----------
    m0, C0 : array_like, optional
        Initial Gaussian factor; all-ones mean and identity covariance by
        default. A scalar ``C0`` is read as ``C0 * I``.
    stop : StopRule, optional
        Defaults to :data:`DEFAULT_STOP`.
    include_constants : bool
        Record the ELBO including hyperparameter-dependent constants.
    track_elbo : bool
        Evaluate the ELBO after every sweep (default). When False it is
        evaluated once at the end and the objective stop rule is inactive.
    callback : callable, optional
        Called as ``callback(k, state)`` after every sweep.

    Returns
    -------
    ViasResult
        Final state, ELBO trace and convergence diagnostics. Hitting
        ``max_iter`` is reported through ``converged=False``.
    """
    stop = stop or DEFAULT_STOP
    state = initial_state(problem, prior, m0, C0)
    trace, changes = [], []
    converged, reason = False, "max_iter"
    quiet = 0
    k = 0
    for k in range(1, stop.max_iter + 1):
        new = sweep(problem, state, method)
        change = max(_rel(new.m, state.m), _rel(new.C, state.C), _rel(new.r, state.r))
        state = new
        changes.append(float(change))
        if track_elbo:
            value = elbo(problem, prior, new, include_constants)
            if trace and stop.objective_rtol is not None:
                rel = abs(value - trace[-1][1]) / max(abs(value), np.finfo(float).tiny)
                quiet = quiet + 1 if rel < stop.objective_rtol else 0
            trace.append((k, value))
        if callback is not None:
            callback(k, state)
        if k > 1 and change < stop.param_rtol:
            converged, reason = True, "param_rtol"
            break
        if track_elbo and stop.objective_rtol is not None and quiet >= stop.patience:
            converged, reason = True, "objective_rtol"
            break
    if not track_elbo:
        trace.append((k, elbo(problem, prior, state, include_constants)))
    return ViasResult(state, trace, k, converged, reason, changes)
