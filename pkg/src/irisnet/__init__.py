"""Iris recognition pipeline on a small numpy autodiff engine."""
import os as _os

# IRISNET_THREADS caps BLAS threads; it only takes effect if set before numpy loads
_threads = _os.environ.get("IRISNET_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
