"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy versions in ``_pykernels`` are used.  Set ``LOBIT_PURE_PYTHON=1`` to force
the fallback.
"""

import os

from lobit import _pykernels

if os.environ.get("LOBIT_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from lobit import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
quantize_codes = _impl.quantize_codes
ste_grads = _impl.ste_grads
pack_groups = _impl.pack_groups
unpack_groups = _impl.unpack_groups
round_half_away = _pykernels.round_half_away


def available_backends():
    mods = {"python": _pykernels}
    try:
        from lobit import _ckernels

        mods["cython"] = _ckernels
    except ImportError:
        pass
    return mods
