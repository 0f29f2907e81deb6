"""ELBO-driven choice of the gamma hyperparameters over an (alpha, beta) grid."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import vias
from .model import GammaHyperprior, LinearProblem, StopRule
from .outputs import write_csv, write_json

__all__ = ["SelectionGrid", "SelectionResult", "DEFAULT_ALPHAS", "DEFAULT_BETAS", "grid_search", "cell_elbo"]

DEFAULT_ALPHAS = (1e-4, 1e-3, 1e-2, 1e-1, 0.5)
DEFAULT_BETAS = tuple(np.logspace(-2, 4, 20).tolist())


def _checked(values, name):
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError(f"{name} must be non-empty")
    if any(not np.isfinite(v) or v <= 0 for v in vals):
        raise ValueError(f"{name} must be strictly positive")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValueError(f"{name} must be sorted ascending without repeats")
    return vals


@dataclass(frozen=True)
class SelectionGrid:
    """Scalar ``alpha`` values, ``beta`` values and the per-cell sweep budget."""

    alpha_values: tuple = DEFAULT_ALPHAS
    beta_values: tuple = DEFAULT_BETAS
    iters_per_cell: int = 300

    def __post_init__(self):
        object.__setattr__(self, "alpha_values", _checked(self.alpha_values, "alpha_values"))
        object.__setattr__(self, "beta_values", _checked(self.beta_values, "beta_values"))
        if int(self.iters_per_cell) < 1:
            raise ValueError("iters_per_cell must be at least 1")
        object.__setattr__(self, "iters_per_cell", int(self.iters_per_cell))

    def cells(self):
        """Cells in grid order (alpha-major)."""
        return [(a, b) for a in self.alpha_values for b in self.beta_values]

    def to_dict(self):
        return {"alpha_values": list(self.alpha_values), "beta_values": list(self.beta_values),
                "iters_per_cell": self.iters_per_cell}

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(doc["alpha_values"]), tuple(doc["beta_values"]), doc.get("iters_per_cell", 300))


@dataclass
class SelectionResult:
    best: tuple  # (alpha, beta, elbo)
    table: list = field(default_factory=list)  # dicts: alpha, beta, elbo, converged, iterations, error

    def to_dict(self):
        return {"best": {"alpha": self.best[0], "beta": self.best[1], "elbo": self.best[2]}, "table": self.table}

    def write(self, csv_path=None, json_path=None):
        if csv_path is not None:
            write_csv(csv_path, ["alpha", "beta", "elbo", "converged"],
                      [(row["alpha"], row["beta"], row["elbo"], row["converged"]) for row in self.table])
        if json_path is not None:
            write_json(json_path, self.to_dict())


def cell_elbo(problem: LinearProblem, alpha: float, beta: float, iters: int, m0=None, C0=None,
              method: str = "auto"):
    """Final ELBO (hyperparameter constants included) after ``iters`` sweeps.

    Returns the :class:`vias.ViasResult` as well.
    """
    prior = GammaHyperprior(alpha, beta)
    stop = StopRule(max_iter=iters, param_rtol=1e-10)
    res = vias.solve(problem, prior, m0, C0, stop, method, include_constants=True, track_elbo=False)
    return res.elbo_trace[-1][1], res


def _run_cell(problem, alpha, beta, iters, m0, C0, method):
    try:
        value, res = cell_elbo(problem, alpha, beta, iters, m0, C0, method)
        if not np.isfinite(value):
            raise FloatingPointError("non-finite ELBO")
        return {"alpha": alpha, "beta": beta, "elbo": value, "converged": res.converged,
                "iterations": res.iterations, "error": None}
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        return {"alpha": alpha, "beta": beta, "elbo": float("nan"), "converged": False,
                "iterations": 0, "error": f"{type(exc).__name__}: {exc}"}


def grid_search(problem: LinearProblem, grid: SelectionGrid | None = None, m0=None, C0=None,
                method: str = "auto", threads: int = 1) -> SelectionResult:
    """Run VIAS on every grid cell and return the cell with the largest ELBO.

    ELBO values include every term that depends on ``(alpha, beta)`` so
    that cells are comparable. Ties go to the larger ``beta`` and then the
    larger ``alpha``. Cells whose solve fails are kept in the table with
    their error message and excluded from the argmax.

    Raises
    ------
    RuntimeError
        If every cell fails.
    """
    grid = grid or SelectionGrid()
    cells = grid.cells()
    args = [(problem, a, b, grid.iters_per_cell, m0, C0, method) for a, b in cells]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            table = list(pool.map(lambda t: _run_cell(*t), args))
    else:
        table = [_run_cell(*t) for t in args]
    ok = [row for row in table if row["error"] is None]
    if not ok:
        raise RuntimeError(f"all {len(table)} grid cells failed; first error: {table[0]['error']}")
    top = max(ok, key=lambda row: (row["elbo"], row["beta"], row["alpha"]))
    return SelectionResult((top["alpha"], top["beta"], top["elbo"]), table)
