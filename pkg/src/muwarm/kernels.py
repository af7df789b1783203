"""Hot-kernel dispatch.

Each kernel comes from the compiled ``_kernels`` extension when it imports
and provides that kernel; otherwise from the numpy versions in
``_kernels_py``. Set ``MUWARM_PURE_PYTHON=1`` to
force the fallback (handy for comparing the two).
"""

import os

from . import _kernels_py

BACKEND = "python"
_compiled = None

if os.environ.get("MUWARM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"

_NAMES = (
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "causal_softmax_fwd",
    "causal_softmax_bwd",
    "xent_fwd",
    "xent_bwd",
    "embedding_bwd",
    "adam_update",
    "markov_walk",
)
SOURCES = {}
for _name in _NAMES:
    _fn = getattr(_compiled, _name, None)
    SOURCES[_name] = "python" if _fn is None else "cython"
    globals()[_name] = _fn if _fn is not None else getattr(_kernels_py, _name)

__all__ = [
    "BACKEND",
    "SOURCES",
    "layernorm_fwd",
    "layernorm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "causal_softmax_fwd",
    "causal_softmax_bwd",
    "xent_fwd",
    "xent_bwd",
    "embedding_bwd",
    "adam_update",
    "markov_walk",
]
