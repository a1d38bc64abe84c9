"""Joint posterior over Bayesian-network DAGs and CPD parameters via a
two-phase sequential sampler trained on balance conditions, with exact
enumerated posteriors for small graphs as ground truth."""

__version__ = "0.1.0"
