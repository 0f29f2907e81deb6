"""Sparse Bayesian inversion with gamma hyperpriors: MAP by alternating
minimization, mean-field variational inference, and uncertainty tools."""

from .model import GammaHyperprior, LinearProblem, Point, StopRule

__version__ = "0.1.0"

__all__ = ["GammaHyperprior", "LinearProblem", "Point", "StopRule", "__version__"]
