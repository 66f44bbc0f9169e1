"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the NumPy
fallback is. Set ``GLOBALVOL_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _kernels_py

KIND_GARCH = _kernels_py.KIND_GARCH
KIND_GJR = _kernels_py.KIND_GJR
KIND_EGARCH = _kernels_py.KIND_EGARCH
EGARCH_ABS_MEAN = _kernels_py.EGARCH_ABS_MEAN

_FUNCTIONS = (
    "garch_simulate",
    "garch_variance",
    "garch_nll_grad",
    "rnn_scan_forward",
    "rnn_scan_backward",
    "gru_scan_forward",
    "gru_scan_backward",
    "lstm_scan_forward",
    "lstm_scan_backward",
    "stationary_bootstrap_means",
)


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def available_backends() -> list[str]:
    names = ["python"]
    if _load_compiled() is not None:
        names.insert(0, "cython")
    return names


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _kernels_py
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return mod
    raise ValueError(f"unknown backend {name!r}")


def use_backend(name: str) -> None:
    """Rebind the module-level kernel functions to ``name``'s implementation."""
    global BACKEND
    mod = get_backend(name)
    g = globals()
    for fn in _FUNCTIONS:
        g[fn] = getattr(mod, fn)
    BACKEND = name


BACKEND = "python"
_requested = os.environ.get("GLOBALVOL_BACKEND", "").lower()
if _requested == "python" or _load_compiled() is None:
    use_backend("python")
else:
    use_backend("cython")
