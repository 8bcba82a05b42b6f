"""losscal: utility-aware post-hoc correction of Bayesian neural network
predictive distributions, with SGMCMC samplers, online distillation, and a
cost-sensitive decision toolkit."""

__version__ = "0.1.0"
