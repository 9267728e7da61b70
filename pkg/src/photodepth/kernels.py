"""Kernel backend selection.

The compiled module is used when importable unless ``PHOTODEPTH_KERNELS=python``
is set.  Both backends compute identical results.
"""

import os

from ._ext import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("PHOTODEPTH_KERNELS", "").lower() != "python":
    try:
        from ._ext import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

bilinear_sample = _impl.bilinear_sample
radius_hits = _impl.radius_hits


def backends():
    """Available backend modules by name."""
    found = {"python": _kernels_py}
    try:
        from ._ext import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
