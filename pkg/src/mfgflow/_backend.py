"""Select the compiled reduction kernels when present, else numpy.

Set ``MFGFLOW_PURE=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
tree_sum = _kernels_py.tree_sum
pair_contract = _kernels_py.pair_contract

if os.environ.get("MFGFLOW_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        BACKEND = "compiled"
        tree_sum = _compiled.tree_sum
        pair_contract = _compiled.pair_contract
