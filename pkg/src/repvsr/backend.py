"""Kernel backend selection.

The compiled Cython kernels are used when the extension was built; otherwise
the numpy kernels. Set ``REPVSR_BACKEND=python`` (or ``compiled``) to force a
choice at import time, or call :func:`use` at runtime (benchmarks, tests).
"""
import importlib
import logging
import os

logger = logging.getLogger(__name__)

BACKENDS = ("compiled", "python")
_MODULES = {"compiled": "repvsr._ckernels", "python": "repvsr._pykernels"}

kernels = None
name = None


def available():
    """Names of the backends importable in this installation."""
    found = []
    for key in BACKENDS:
        try:
            importlib.import_module(_MODULES[key])
        except ImportError:
            continue
        found.append(key)
    return found


def use(backend):
    """Switch the active kernel backend; raises ImportError if unavailable."""
    global kernels, name
    if backend not in _MODULES:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    kernels = importlib.import_module(_MODULES[backend])
    name = backend
    return kernels


def _select():
    forced = os.environ.get("REPVSR_BACKEND")
    if forced:
        return use(forced)
    try:
        return use("compiled")
    except ImportError:
        logger.info("compiled kernels not built; using numpy fallback")
        return use("python")


_select()
