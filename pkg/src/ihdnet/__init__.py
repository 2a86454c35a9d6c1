"""Hemorrhage detection on CT series: windowed-attention slice encoder, slice-sequence transformer,
pseudo-label self-training and rank-weighted ensembling, on a numpy autodiff core."""

import os

# single-threaded BLAS keeps floating-point reductions in a fixed order
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
