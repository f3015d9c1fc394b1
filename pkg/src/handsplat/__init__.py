"""Interaction-aware Gaussian splatting for animatable two-hand avatars."""
import numba

# the default TBB layer warns on older TBB builds; OpenMP is always available
numba.config.THREADING_LAYER = "omp"

__version__ = "0.1.0"
