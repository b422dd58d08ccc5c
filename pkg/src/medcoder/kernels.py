"""Kernel backend selection.

The Cython extension ``medcoder._core`` is used when it was built; otherwise
the pure-Python versions in ``medcoder._fallback`` are loaded. Setting
``MEDCODER_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("MEDCODER_PURE_PYTHON", "") not in ("", "0"):
    from medcoder._fallback import levenshtein, levenshtein_many, split_counts

    BACKEND = "python"
else:
    try:
        from medcoder._core import levenshtein, levenshtein_many, split_counts

        BACKEND = "cython"
    except ImportError:  # extension not compiled
        logger.debug("medcoder._core unavailable, using pure-Python kernels")
        from medcoder._fallback import levenshtein, levenshtein_many, split_counts

        BACKEND = "python"

__all__ = ["BACKEND", "levenshtein", "levenshtein_many", "split_counts"]
