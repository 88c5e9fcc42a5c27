"""Bayesian PINNs with sparse sigma_3 networks for elliptic Dirichlet problems."""

__version__ = "0.1.0"
