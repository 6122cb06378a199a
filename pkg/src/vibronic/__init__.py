"""Vibronic emission modelling and photon-correlation analysis.

Phonon-sideband lineshapes, Monte Carlo time-tag streams, g2 correlation
histograms, Bayesian two-level fits and Cauchy-Schwarz band-pair tests.
"""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DomainError, FormatError, NumericalError, StreamError,  # noqa: E402
                     VibronicError)

__all__ = ["ConfigurationError", "DomainError", "FormatError", "NumericalError", "StreamError", "VibronicError",
           "__version__"]
