"""Backend selection for the numerical inner loops.

The compiled extension is used when it imports; otherwise (or when
``PROXMED_BACKEND=python`` is set) the numpy fallback takes over.  Both
backends expose the same four functions with identical return values.
"""

import importlib
import os

from ._kernels_py import MAX_ITER, NO_DESCENT, OK, SINGULAR

STATUS_TEXT = {
    OK: "converged",
    MAX_ITER: "iteration limit reached",
    SINGULAR: "singular Jacobian",
    NO_DESCENT: "step halving found no descent direction",
}


def load_backend(name: str):
    """Return the kernel module for ``"compiled"`` or ``"python"``."""
    if name == "compiled":
        return importlib.import_module("proxmed._kernels")
    if name == "python":
        return importlib.import_module("proxmed._kernels_py")
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list:
    names = ["python"]
    try:
        load_backend("compiled")
    except ImportError:
        pass
    else:
        names.insert(0, "compiled")
    return names


if os.environ.get("PROXMED_BACKEND", "").lower() == "python":
    _impl = load_backend("python")
    BACKEND = "python"
else:
    try:
        _impl = load_backend("compiled")
        BACKEND = "compiled"
    except ImportError:
        _impl = load_backend("python")
        BACKEND = "python"

exp_moment_newton = _impl.exp_moment_newton
logistic_newton = _impl.logistic_newton
cross_moments = _impl.cross_moments
gaussian_gram = _impl.gaussian_gram
