"""Multi-appearance deformable head radiance fields on a synthetic benchmark."""
import os

# the TBB layer available in common images is too old for numba; prefer OpenMP
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
