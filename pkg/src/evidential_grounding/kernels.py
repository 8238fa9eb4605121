"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the NumPy
fallback. Set ``EVGROUND_PURE=1`` to force the fallback.
"""
import os

from . import _pure

BACKEND = "python"
_impl = _pure

if os.environ.get("EVGROUND_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure

nig_nll_grad = _impl.nig_nll_grad
nms_keep = _impl.nms_keep
gaussian_kde = _impl.gaussian_kde
histogram_cdf_map = _impl.histogram_cdf_map


def backends():
    """Available backends as ``{name: module}``."""
    found = {"python": _pure}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
