"""Backend selection for the pairwise-sum kernels.

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. ``set_backend`` switches explicitly (tests, benchmarks).
"""

import warnings

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError as exc:  # pragma: no cover - depends on the build
    _compiled = None
    warnings.warn(f"sled: compiled kernels unavailable ({exc}); using numpy fallback")

COMPILED_AVAILABLE = _compiled is not None

_active = _compiled if COMPILED_AVAILABLE else _kernels_py


def get_backend():
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def set_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    previous = get_backend()
    if name == "compiled":
        if not COMPILED_AVAILABLE:
            raise RuntimeError("compiled kernels are not built")
        _active = _compiled
    elif name == "python":
        _active = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


def pairwise_distance(X, Y, beta):
    return _active.pairwise_distance(X, Y, float(beta))


def distance_sum(X, Y, beta):
    return _active.distance_sum(X, Y, float(beta))


def rbf_sum(X, Y, bandwidth):
    return _active.rbf_sum(X, Y, float(bandwidth))
