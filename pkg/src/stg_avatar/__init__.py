"""Animatable spacetime-Gaussian avatars: skinning, polynomial refinement,
flow-guided densification and a differentiable software splatting renderer."""
import os

# the bundled TBB is too old for numba's tbb layer; pick OpenMP explicitly
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
