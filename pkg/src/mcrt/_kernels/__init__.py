"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting ``MCRT_FORCE_PYTHON=1``
forces the numpy fallback.  ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

_NAMES = ("balance_scores", "pair_subset_scores", "subset_sums", "arm_sums",
          "combinations", "enumerate_labels", "profile_objective")


def _load():
    if os.environ.get("MCRT_FORCE_PYTHON", "").strip() not in ("", "0"):
        return _pykernels, "python"
    try:
        from . import _ckernels
    except ImportError:
        return _pykernels, "python"
    return _ckernels, "cython"


_impl, BACKEND = _load()

balance_scores = _impl.balance_scores
pair_subset_scores = _impl.pair_subset_scores
subset_sums = _impl.subset_sums
arm_sums = _impl.arm_sums
combinations = _impl.combinations
enumerate_labels = _impl.enumerate_labels
profile_objective = _impl.profile_objective


def backend_module(name):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


__all__ = list(_NAMES) + ["BACKEND", "backend_module"]
