"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection happens once at import from the MATCHA_BACKEND env var:
  auto   - numba if importable, else numpy (default)
  numba  - require numba, fail loudly if missing
  numpy  - force the pure-numpy path
"""

import os

from matcha.errors import ConfigError

from . import _numpy_impl

ENV_VAR = "MATCHA_BACKEND"


def _resolve():
    choice = os.environ.get(ENV_VAR, "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ConfigError(
            f"{ENV_VAR} must be one of auto/numba/numpy, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy", _numpy_impl
    try:
        from . import _numba_impl
    except ImportError:
        if choice == "numba":
            raise ConfigError(f"{ENV_VAR}=numba but numba is not importable")
        return "numpy", _numpy_impl
    return "numba", _numba_impl


BACKEND_NAME, _impl = _resolve()

bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
bilinear_resize = _impl.bilinear_resize
sampson_distances = _impl.sampson_distances

numpy_impl = _numpy_impl
