"""Hot-kernel backend selection.

Imports the compiled extension when available, otherwise the numpy
fallback. Set ``UNLEARNLAB_FORCE_NUMPY=1`` to force the fallback (useful
for the backend-comparison benchmark and for debugging).
"""

import os

if os.environ.get("UNLEARNLAB_FORCE_NUMPY"):
    from unlearnlab.kernels import _np as backend
else:
    try:
        from unlearnlab.kernels import _ck as backend  # type: ignore[no-redef]
    except ImportError:
        from unlearnlab.kernels import _np as backend  # type: ignore[no-redef]

BACKEND = backend.BACKEND

relu_fwd = backend.relu_fwd
relu_bwd = backend.relu_bwd
tanh_fwd = backend.tanh_fwd
tanh_bwd = backend.tanh_bwd
sigmoid_fwd = backend.sigmoid_fwd
sigmoid_bwd = backend.sigmoid_bwd
clip_fwd = backend.clip_fwd
clip_bwd = backend.clip_bwd
softmax_fwd = backend.softmax_fwd
softmax_bwd = backend.softmax_bwd
