"""Backend selection for the batched RK4 kernel.

The compiled extension is used when it imports; otherwise the NumPy
implementation takes over. Set ``HOROM_BACKEND=numpy`` to force the
fallback (the benchmark and the backend-agreement tests do this).
"""

import os

from . import _rk4_numpy

BACKENDS = {"numpy": _rk4_numpy}

try:
    from . import _rk4_ext
except ImportError:  # extension not built
    _rk4_ext = None
else:
    BACKENDS["compiled"] = _rk4_ext


def _select():
    want = os.environ.get("HOROM_BACKEND", "").strip().lower()
    if want in BACKENDS:
        return want
    return "compiled" if "compiled" in BACKENDS else "numpy"


BACKEND = _select()
_impl = BACKENDS[BACKEND]


def rk4_forward(G, b, x0, h, nsteps, guard, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.forward(G, b, x0, h, nsteps, guard)


def rk4_backward(G, b, X, h, valid, gX, backend=None):
    impl = BACKENDS[backend] if backend else _impl
    return impl.backward(G, b, X, h, valid, gX)
