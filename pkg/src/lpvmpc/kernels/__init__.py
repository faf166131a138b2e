"""Hot numerical kernels: compiled core with a pure-NumPy fallback.

The compiled extension is preferred when importable; setting the environment
variable ``LPVMPC_PURE_PYTHON=1`` forces the fallback (useful for testing and
for installs without a C toolchain). Both backends expose ``make_kernel``
with identical semantics.
"""

import os

_force_pure = os.environ.get("LPVMPC_PURE_PYTHON", "") not in ("", "0")

if _force_pure:
    from . import pure as _impl

    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import pure as _impl

        BACKEND = "pure"

ACT_LINEAR = _impl.ACT_LINEAR
ACT_TANH = _impl.ACT_TANH
ACT_RELU = _impl.ACT_RELU

make_kernel = _impl.make_kernel


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'pure'."""
    return BACKEND


def load_backend(name: str):
    """Return a specific backend module by name (for benchmarks/tests)."""
    if name == "pure":
        from . import pure

        return pure
    if name == "compiled":
        from . import _core  # raises ImportError when not built

        return _core
    raise ValueError(f"unknown backend {name!r}")
