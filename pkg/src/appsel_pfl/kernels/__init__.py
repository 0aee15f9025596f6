"""Fused forward/backward kernels for the app-selection network.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Set ``APPSEL_PFL_BACKEND=python`` to force the
fallback.
"""
import os

from appsel_pfl.kernels import fused_py
from appsel_pfl.kernels.layout import TOP_LAYER, param_count, param_shapes

_impl = fused_py
if os.environ.get("APPSEL_PFL_BACKEND", "").lower() != "python":
    try:
        from appsel_pfl.kernels import _fused as _impl
    except ImportError:
        _impl = fused_py

BACKEND = _impl.BACKEND
predict = _impl.predict
loss_grad = _impl.loss_grad
local_train_cohort = _impl.local_train_cohort


def get_backend(name: str):
    """Return the kernel module called ``name`` ("cython" or "python")."""
    if name == "python":
        return fused_py
    if name == "cython":
        from appsel_pfl.kernels import _fused
        return _fused
    raise ValueError(f"unknown kernel backend {name!r}")


__all__ = ["BACKEND", "TOP_LAYER", "get_backend", "local_train_cohort", "loss_grad",
           "param_count", "param_shapes", "predict"]
