"""Probabilistic forecasting with stochastic interpolants.

Submodules: ``schedules``, ``interpolant``, ``drift_model``, ``analytic_gmm``,
``sampler``, ``dynamics``, ``evaluation`` and ``cli``.  The package root stays
import-light so the CLI can cap thread pools before numpy loads.
"""

__version__ = "0.1.0"
