"""Sparse-view cone-beam CT reconstruction toolkit."""

import os

# TBB shipped with this platform is too old for numba; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
