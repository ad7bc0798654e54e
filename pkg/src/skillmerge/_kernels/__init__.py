"""Kernel backend selection: compiled Cython extension when available,
pure-Python twin otherwise. ``SKILLMERGE_PURE_PYTHON=1`` forces the fallback
(used by the benchmark and the backend-equality tests)."""

from __future__ import annotations

import os

from skillmerge._kernels import xoshiro_py

if os.environ.get("SKILLMERGE_PURE_PYTHON", "") == "1":
    impl = xoshiro_py
else:
    try:
        from skillmerge._kernels import _xoshiro as impl  # type: ignore[no-redef]
    except ImportError:
        impl = xoshiro_py

BACKEND: str = impl.BACKEND

fill_raw = impl.fill_raw
fill_uniform = impl.fill_uniform
seed_state = impl.seed_state
splitmix64_next = impl.splitmix64_next
