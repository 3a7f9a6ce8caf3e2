"""
ckmm - Copula Kernel Mixture Model clustering for multivariate longitudinal data.

Margins are weighted Gaussian kernel density estimates, dependence across
features and time is a Gaussian copula whose correlation matrix is
approximated by a block-circulant matrix and handled in the frequency domain.
"""

__version__ = "1.0.0"
__author__ = "ckmm developers"
