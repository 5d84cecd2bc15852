"""Attention kernel dispatch.

The compiled extension (_native, built from _native.pyx) is preferred when
importable; otherwise the numpy reference implementation is used. Set
MASKDIFF_KERNELS=native or MASKDIFF_KERNELS=reference to force a backend;
forcing native raises if the extension failed to build.
"""

from __future__ import annotations

import os

from . import reference

_CHOICES = ("auto", "native", "reference")


def _load_native():
    from . import _native  # noqa: PLC0415  (deferred: extension may not exist)

    return _native


def available_backends() -> dict:
    """Name -> module for every backend importable in this environment."""
    backends = {"reference": reference}
    try:
        backends["native"] = _load_native()
    except ImportError:
        pass
    return backends


def resolve_backend(choice: str = "auto"):
    """Return (name, module) for a backend choice string."""
    if choice not in _CHOICES:
        raise ValueError(f"backend must be one of {_CHOICES}, got {choice!r}")
    if choice == "reference":
        return "reference", reference
    try:
        return "native", _load_native()
    except ImportError:
        if choice == "native":
            raise RuntimeError(
                "native kernels requested but the compiled extension is not available"
            ) from None
        return "reference", reference


BACKEND, _impl = resolve_backend(os.environ.get("MASKDIFF_KERNELS", "auto"))

masked_softmax = _impl.masked_softmax
softmax_backward = _impl.softmax_backward
