"""Evaluator backend selection.

The compiled kernel core (``_ckernels``, built from Cython) is used when it
imports cleanly and its opcode table matches this package; otherwise the
numpy fallback takes over. ``METABOOT_BACKEND=py|c|auto`` overrides the
choice, and ``Plan(graph, backend=...)`` pins it per plan (the benchmark
uses that to compare both).
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .opcodes import OP_NAMES


class _NumpyBackend:
    NAME = "numpy"
    COMPILED = False


class _CompiledBackend:
    NAME = "compiled"
    COMPILED = True

    def __init__(self, module):
        self._module = module

    def compile_plan(self, plan):
        n = plan.n_synced
        return self._module.CRunner(
            np.asarray(plan.ops[:n], dtype=np.int32),
            np.asarray(plan.pa[:n], dtype=np.int32),
            np.asarray(plan.pb[:n], dtype=np.int32),
            np.asarray(plan.scalars[:n], dtype=np.float64),
            list(plan.aux[:n]),
            list(plan.buffers[:n]),
        )


NUMPY_BACKEND = _NumpyBackend()
COMPILED_BACKEND: _CompiledBackend | None = None

try:
    from . import _ckernels  # type: ignore[attr-defined]

    if tuple(_ckernels.OP_NAMES) == OP_NAMES:
        COMPILED_BACKEND = _CompiledBackend(_ckernels)
    else:  # pragma: no cover - build skew guard
        warnings.warn("metaboot: compiled kernel opcode table is stale; "
                      "using the numpy evaluator", RuntimeWarning)
except ImportError:
    pass


def active_backend():
    choice = os.environ.get("METABOOT_BACKEND", "auto").lower()
    if choice == "py":
        return NUMPY_BACKEND
    if choice == "c":
        if COMPILED_BACKEND is None:
            raise RuntimeError("METABOOT_BACKEND=c but the compiled core is unavailable")
        return COMPILED_BACKEND
    return COMPILED_BACKEND if COMPILED_BACKEND is not None else NUMPY_BACKEND


def backend_name() -> str:
    return active_backend().NAME
