"""Meta-state-space models and stochastic MPC with output-pdf shaping."""

import jax

# Everything here is double precision: chance margins and equilibrium residuals
# are checked at 1e-8 and below.
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

__version__ = "0.1.0"
