"""Numeric kernels with an optional compiled fast path.

The Cython extension `_ext` is selected at import when present; the numpy
module `_py` is the reference implementation and the fallback. Set
SMOELAB_KERNELS=python or SMOELAB_KERNELS=ext to force a backend.
"""

import os

from . import _py

_choice = os.environ.get("SMOELAB_KERNELS", "auto")
if _choice not in ("auto", "ext", "python"):
    raise ValueError(f"SMOELAB_KERNELS must be auto, ext or python, got {_choice!r}")

_impl = None
if _choice in ("auto", "ext"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "ext":
            raise
if _impl is None:
    _impl = _py

BACKEND = "python" if _impl is _py else "ext"

softmax = _impl.softmax
softmax_grad = _impl.softmax_grad
causal_softmax = _impl.causal_softmax
layernorm = _impl.layernorm
layernorm_grad = _impl.layernorm_grad
cross_entropy = _impl.cross_entropy
cross_entropy_grad = _impl.cross_entropy_grad
topk_mask = _impl.topk_mask
adam_update = _impl.adam_update
