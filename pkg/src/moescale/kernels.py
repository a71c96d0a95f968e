"""Kernel selection: the compiled extension if importable, numpy otherwise.

Set ``MOESCALE_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

from moescale import _kernels_py

BACKEND = "python"

if os.environ.get("MOESCALE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from moescale import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

law_objective_grad = _impl.law_objective_grad
law_log_predict = _impl.law_log_predict
lbfgs_law = _impl.lbfgs_law

__all__ = ["BACKEND", "law_objective_grad", "law_log_predict", "lbfgs_law"]
