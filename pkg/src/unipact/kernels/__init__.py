"""Hot inner kernels, compiled when available.

The Cython extension ``_ckernels`` is imported if it was built; otherwise
the NumPy implementations in ``_pykernels`` are used.  Setting the
environment variable ``UNIPACT_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("UNIPACT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
adam_update = _impl.adam_update
weighted_auroc = _impl.weighted_auroc
bootstrap_aurocs = _impl.bootstrap_aurocs

__all__ = [
    "BACKEND",
    "gelu_forward",
    "gelu_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_rows",
    "softmax_rows_backward",
    "adam_update",
    "weighted_auroc",
    "bootstrap_aurocs",
]
