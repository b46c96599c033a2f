"""Stylized-dream augmentation with consistency training, on a NumPy autodiff core."""

import os

# Pin BLAS to one thread before numpy loads: multi-threaded reductions can
# reorder floating-point sums, which would break bit-reproducibility.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
