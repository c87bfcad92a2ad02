"""Patch-based diffusion priors for inverse problems under distribution shift."""

import os

__version__ = "0.1.0"


def _cap_threads() -> None:
    """Cap BLAS/OpenMP threads from PATCHPRIOR_THREADS; runs before any submodule imports numpy."""
    n = os.environ.get("PATCHPRIOR_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()
