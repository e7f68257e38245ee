"""Energy disaggregation with latent Bayesian melding over additive factorial
hidden Markov models."""

__version__ = "0.1.0"
