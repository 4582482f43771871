"""Bayesian spectral densities for ARMA models under Jeffreys and superharmonic priors."""

__version__ = "0.1.0"
