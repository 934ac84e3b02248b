"""Picks the compiled routing kernel when available, else the numpy one.

Set ``DYMOE_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _routing_py

FIRST_TASK = _routing_py.FIRST_TASK
NEW = _routing_py.NEW
OLD = _routing_py.OLD
AMBIGUOUS = _routing_py.AMBIGUOUS
BOTH = _routing_py.BOTH
OLD_ONLY = _routing_py.OLD_ONLY
NEW_ONLY = _routing_py.NEW_ONLY

BACKEND = "python"
route_kernel = _routing_py.route_kernel

if os.environ.get("DYMOE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._routing import route_kernel  # noqa: F811
    except ImportError:
        pass
    else:
        BACKEND = "cython"

py_route_kernel = _routing_py.route_kernel
