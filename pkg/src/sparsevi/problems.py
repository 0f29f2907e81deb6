"""Seeded generators for the synthetic benchmark problems."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import LinearProblem, problem_from_dict, problem_to_dict

__all__ = [
    "ExperimentBundle",
    "PiecewiseSignal",
    "DEFAULT_SIGNAL",
    "LORENZ_X0",
    "sample_gamma",
    "gen_hierarchical",
    "gen_fixed_sparse",
    "airy_kernel",
    "deconvolution_operator",
    "gen_deconvolution",
    "lorenz63_field",
    "rk4",
    "lorenz63_trajectory",
    "dictionary_exponents",
    "build_dictionary",
    "lorenz_truth",
    "gen_lorenz_problems",
    "regenerate",
]

# Starts off the attractor so the sampled transient covers low-amplitude
# states; this keeps the degree-5 dictionary far better conditioned than
# an on-attractor start.
LORENZ_X0 = (0.0, 1.0, 1.05)


@dataclass
class ExperimentBundle:
    """A generated problem with its ground truth and regeneration metadata."""

    problem: LinearProblem
    truth_u: np.ndarray
    truth_theta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.truth_u = np.asarray(self.truth_u, dtype=float)
        if self.truth_u.shape != (self.problem.d,):
            raise ValueError("truth_u does not match the problem dimension")
        if self.truth_theta is not None:
            self.truth_theta = np.asarray(self.truth_theta, dtype=float)
            if self.truth_theta.shape != (self.problem.d,):
                raise ValueError("truth_theta does not match the problem dimension")

    def to_dict(self):
        out = problem_to_dict(self.problem)
        out["truth_u"] = self.truth_u.tolist()
        out["truth_theta"] = None if self.truth_theta is None else self.truth_theta.tolist()
        out["meta"] = self.meta
        out["extras"] = {k: np.asarray(v).tolist() for k, v in self.extras.items()}
        return out

    @classmethod
    def from_dict(cls, doc):
        problem, _ = problem_from_dict(doc)
        theta = doc.get("truth_theta")
        extras = {k: np.asarray(v) for k, v in doc.get("extras", {}).items()}
        return cls(problem, np.asarray(doc["truth_u"]), None if theta is None else np.asarray(theta),
                   dict(doc.get("meta", {})), extras)


def sample_gamma(rng: np.random.Generator, shape, rate, size):
    """Gamma(shape, rate) draws that stay correct for tiny shapes.

    Draws Gamma(shape + 1) and multiplies by ``U^(1/shape)``, done in log
    space; values below the float range come out as exactly zero.
    """
    shape = float(shape)
    g = rng.gamma(shape + 1.0, 1.0, size)
    log_u = np.log(rng.random(size))
    return np.exp(np.log(g) + log_u / shape) / float(rate)


def _meta(name, seed, **params):
    return {"generator": name, "seed": seed, "params": params}


def gen_hierarchical(seed: int, d: int = 200, n: int = 50, alpha: float = 0.005, beta: float = 0.05,
                     noise_frac: float = 0.05) -> ExperimentBundle:
    """Truth drawn from the hierarchical model itself.

    ``theta_i ~ Gamma(alpha, beta)``, ``u_i ~ N(0, theta_i)``,
    ``A_jk ~ U(0, 1)`` and ``y = A u + N(0, gamma^2 I)`` with ``gamma`` a
    fraction of ``max|A u|``.
    """
    rng = np.random.default_rng(seed)
    theta = sample_gamma(rng, alpha, beta, d)
    u = rng.standard_normal(d) * np.sqrt(theta)
    A = rng.uniform(0.0, 1.0, (n, d))
    Au = A @ u
    gamma = noise_frac * np.max(np.abs(Au))
    if gamma == 0:
        gamma = noise_frac
    y = Au + gamma * rng.standard_normal(n)
    meta = _meta("hierarchical", seed, d=d, n=n, alpha=alpha, beta=beta, noise_frac=noise_frac)
    meta["noise_std"] = float(gamma)
    return ExperimentBundle(LinearProblem(A, y, gamma**2), u, theta, meta)


def gen_fixed_sparse(seed: int, d: int = 100, n: int = 50, support: int = 10,
                     noise_frac: float = 0.02) -> ExperimentBundle:
    """Fixed sparse truth with ``support`` nonzeros of magnitude in [1, 5]."""
    if support > d or support < 0:
        raise ValueError(f"support must lie in [0, d], got {support}")
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.0, 1.0, (n, d))
    u = np.zeros(d)
    idx = np.sort(rng.choice(d, size=support, replace=False))
    mags = rng.uniform(1.0, 5.0, support)
    signs = rng.choice([-1.0, 1.0], size=support)
    u[idx] = signs * mags
    Au = A @ u
    peak = np.max(np.abs(Au))
    # pure-noise data keeps a unit noise level so the problem stays well posed
    gamma = noise_frac * peak if peak > 0 else 1.0
    y = Au + gamma * rng.standard_normal(n)
    meta = _meta("fixed-sparse", seed, d=d, n=n, support=support, noise_frac=noise_frac)
    meta["noise_std"] = float(gamma)
    return ExperimentBundle(LinearProblem(A, y, gamma**2), u, None, meta)


def airy_kernel(t, kappa: float = 40.0):
    """``(J1(kappa |t|) / (kappa |t|))^2`` with value 1/4 at ``t = 0``."""
    t = np.asarray(t, dtype=float)
    x = kappa * np.abs(t)
    out = np.full(x.shape, 0.25)
    nz = x > 0
    out[nz] = (special.j1(x[nz]) / x[nz]) ** 2
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PiecewiseSignal:
    """Piecewise-constant ``f`` on [0, 1] with ``f(0) = 0``.

    ``levels[j]`` holds on ``[breakpoints[j-1], breakpoints[j])``.
    """

    breakpoints: tuple
    levels: tuple

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        lv = tuple(float(v) for v in self.levels)
        if len(lv) != len(bp) + 1:
            raise ValueError("need exactly one more level than breakpoints")
        if lv[0] != 0.0:
            raise ValueError("the leading level must be 0 so that f(0) = 0")
        if any(not 0 < b < 1 for b in bp) or any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing inside (0, 1)")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "levels", lv)

    def __call__(self, t):
        idx = np.searchsorted(np.asarray(self.breakpoints), np.asarray(t, dtype=float), side="right")
        return np.asarray(self.levels)[idx]

    def to_dict(self):
        return {"breakpoints": list(self.breakpoints), "levels": list(self.levels)}


DEFAULT_SIGNAL = PiecewiseSignal((0.13, 0.33, 0.50, 0.70, 0.85), (0.0, 1.5, -0.5, 1.0, 2.0, 0.5))


def deconvolution_operator(d: int = 500, n: int = 91, kappa: float = 40.0):
    """Trapezoid-discretized convolution matrix, grid and sensor positions.

    Returns
    -------
    K : ndarray, shape (n, d)
        ``K_jk = w_k * kernel(s_j - t_k)``.
    t : ndarray, shape (d,)
        Grid ``t_k = (k-1)/(d-1)``.
    s : ndarray, shape (n,)
        Sensor positions ``s_j = (4 + j)/100``.
    """
    t = np.arange(d) / (d - 1)
    w = np.full(d, 1.0 / (d - 1))
    w[0] = w[-1] = 0.5 / (d - 1)
    s = (4.0 + np.arange(1, n + 1)) / 100.0
    K = w[None, :] * airy_kernel(s[:, None] - t[None, :], kappa)
    return K, t, s


def gen_deconvolution(signal: PiecewiseSignal = DEFAULT_SIGNAL, d: int = 500, n: int = 91, kappa: float = 40.0,
                      noise_frac: float = 0.01, seed: int = 0) -> ExperimentBundle:
    """Deconvolution of a piecewise-constant signal, posed for its jumps.

    The unknown is ``u = B^{-1} v`` (first differences of the sampled
    signal); the forward matrix is ``K B`` with ``B`` the cumulative sum.
    """
    rng = np.random.default_rng(seed)
    K, t, s = deconvolution_operator(d, n, kappa)
    v = signal(t)
    u = np.diff(v, prepend=0.0)
    KB = np.cumsum(K[:, ::-1], axis=1)[:, ::-1]  # K @ B with B lower-triangular ones
    clean = K @ v
    gamma = noise_frac * np.max(np.abs(clean))
    y = clean + gamma * rng.standard_normal(n)
    meta = _meta("deconvolution", seed, d=d, n=n, kappa=kappa, noise_frac=noise_frac, signal=signal.to_dict())
    meta["noise_std"] = float(gamma)
    extras = {"t": t, "s": s, "signal": v, "clean": clean}
    return ExperimentBundle(LinearProblem(KB, y, gamma**2), u, None, meta, extras)


def lorenz63_field(states, sigma: float = 10.0, rho: float = 28.0, zeta: float = 8.0 / 3.0):
    X = np.asarray(states, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - zeta * z], axis=-1)


def rk4(field_fn, x0, dt: float, steps: int):
    """Classical fourth-order Runge-Kutta; returns ``steps`` samples incl. ``x0``.

    ``x0`` may carry leading batch dimensions. Stops early (returning the
    finite prefix and ``False``) if any state blows up.
    """
    x0 = np.asarray(x0, dtype=float)
    X = np.empty((steps,) + x0.shape)
    X[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps - 1):
            x = X[k]
            k1 = field_fn(x)
            k2 = field_fn(x + 0.5 * dt * k1)
            k3 = field_fn(x + 0.5 * dt * k2)
            k4 = field_fn(x + dt * k3)
            X[k + 1] = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(X[k + 1])):
                return X[: k + 1], False
    return X, True


def lorenz63_trajectory(sigma: float = 10.0, rho: float = 28.0, zeta: float = 8.0 / 3.0, x0=LORENZ_X0,
                        dt: float = 0.02, steps: int = 2000):
    """RK4 trajectory of Lorenz-63 and the exact vector field at each sample."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    fn = lambda x: lorenz63_field(x, sigma, rho, zeta)
    X, ok = rk4(fn, x0, dt, steps)
    if not ok:
        raise FloatingPointError(f"Lorenz trajectory became non-finite after {len(X)} steps")
    return X, fn(X)


def dictionary_exponents(max_degree: int = 5, n_vars: int = 3):
    """Monomial exponents ordered by degree, pure powers first, then mixed
    terms in descending lexicographic order."""
    if max_degree < 1:
        raise ValueError("max_degree must be at least 1")
    out = []
    for deg in range(1, max_degree + 1):
        pure = [tuple(deg if j == i else 0 for j in range(n_vars)) for i in range(n_vars)]
        mixed = sorted((e for e in itertools.product(range(deg + 1), repeat=n_vars)
                        if sum(e) == deg and e not in pure), reverse=True)
        out.extend(pure + mixed)
    return out


def _label(exp, names=("x", "y", "z")):
    parts = []
    for name, p in zip(names, exp):
        if p == 1:
            parts.append(name)
        elif p > 1:
            parts.append(f"{name}^{p}")
    return "".join(parts)


def build_dictionary(states, max_degree: int = 5):
    """Polynomial library (no constant column) evaluated at ``states``.

    Returns
    -------
    Theta : ndarray, shape (N, n_terms)
    labels : list of str
    """
    X = np.asarray(states, dtype=float)
    exps = dictionary_exponents(max_degree, X.shape[1])
    cols = [np.prod(X ** np.asarray(e, dtype=float), axis=1) for e in exps]
    return np.stack(cols, axis=1), [_label(e) for e in exps]


def lorenz_truth(labels, sigma: float = 10.0, rho: float = 28.0, zeta: float = 8.0 / 3.0):
    """Coefficient vectors of the three Lorenz-63 equations in ``labels`` order."""
    pos = {lab: i for i, lab in enumerate(labels)}
    phi = np.zeros((3, len(labels)))
    phi[0, pos["x"]], phi[0, pos["y"]] = -sigma, sigma
    phi[1, pos["x"]], phi[1, pos["y"]], phi[1, pos["xz"]] = rho, -1.0, -1.0
    phi[2, pos["z"]], phi[2, pos["xy"]] = -zeta, 1.0
    return phi


def gen_lorenz_problems(seed: int, noise_var: float = 0.3, x0=LORENZ_X0, dt: float = 0.02, steps: int = 2000,
                        max_degree: int = 5):
    """Three dictionary-regression problems, one per Lorenz-63 component."""
    X, dX = lorenz63_trajectory(x0=x0, dt=dt, steps=steps)
    Theta, labels = build_dictionary(X, max_degree)
    phi = lorenz_truth(labels)
    rng = np.random.default_rng(seed)
    bundles = []
    for i, comp in enumerate("xyz"):
        y = Theta @ phi[i] + np.sqrt(noise_var) * rng.standard_normal(steps)
        meta = _meta("lorenz63", seed, noise_var=noise_var, x0=list(map(float, x0)), dt=dt, steps=steps,
                     max_degree=max_degree)
        meta["component"] = comp
        meta["labels"] = labels
        extras = {"states": X, "derivatives": dX[:, i]}
        bundles.append(ExperimentBundle(LinearProblem(Theta, y, noise_var), phi[i], None, meta, extras))
    return bundles


def regenerate(meta: dict):
    """Rebuild a bundle (or the Lorenz triple) from its ``meta`` record."""
    name, seed, params = meta["generator"], meta["seed"], dict(meta["params"])
    if name == "hierarchical":
        return gen_hierarchical(seed, **params)
    if name == "fixed-sparse":
        return gen_fixed_sparse(seed, **params)
    if name == "deconvolution":
        sig = params.pop("signal")
        return gen_deconvolution(PiecewiseSignal(tuple(sig["breakpoints"]), tuple(sig["levels"])), seed=seed,
                                 **params)
    if name == "lorenz63":
        params["x0"] = tuple(params["x0"])
        bundles = gen_lorenz_problems(seed, **params)
        comp = meta.get("component")
        return bundles["xyz".index(comp)] if comp else bundles
    raise ValueError(f"unknown generator {name!r}")
