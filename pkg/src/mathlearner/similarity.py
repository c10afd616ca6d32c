"""Blended cosine scoring over the record matrices.

This is the one hot loop in the package: every query scans all stored
category/step vectors. Two interchangeable kernels are provided, a numba
``@njit`` one and a pure-numpy one; set ``MATHLEARNER_DISABLE_NUMBA=1`` to
force the numpy path. Inputs are float64 row matrices of (already
normalized) vectors, so a dot product is a cosine.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLE_ENV = "MATHLEARNER_DISABLE_NUMBA"


def scan_scores_numpy(
    cat_matrix: np.ndarray,
    steps_matrix: np.ndarray,
    query_cat: np.ndarray,
    query_steps: np.ndarray,
    alpha: float,
) -> np.ndarray:
    return alpha * (cat_matrix @ query_cat) + (1.0 - alpha) * (steps_matrix @ query_steps)


try:  # pragma: no cover - exercised via the selected kernel
    if os.environ.get(_DISABLE_ENV):
        raise ImportError("numba disabled by environment flag")
    from numba import njit, prange

    @njit(cache=True, parallel=True, fastmath=True)
    def _scan_scores_jit(cat_matrix, steps_matrix, query_cat, query_steps, alpha):
        # fuses both dot products and the blend in one pass over the rows;
        # fastmath reorders the reductions (differences ~1e-13 on unit rows)
        n, d = cat_matrix.shape
        out = np.empty(n, dtype=np.float64)
        for i in prange(n):
            cat_dot = 0.0
            steps_dot = 0.0
            for j in range(d):
                cat_dot += cat_matrix[i, j] * query_cat[j]
                steps_dot += steps_matrix[i, j] * query_steps[j]
            out[i] = alpha * cat_dot + (1.0 - alpha) * steps_dot
        return out

    scan_scores_numba = _scan_scores_jit
    HAS_NUMBA = True
except ImportError:
    scan_scores_numba = None
    HAS_NUMBA = False


def active_backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


def scan_scores(
    cat_matrix: np.ndarray,
    steps_matrix: np.ndarray,
    query_cat: np.ndarray,
    query_steps: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """Blended score per record: ``alpha*cos_cat + (1-alpha)*cos_steps``."""
    if HAS_NUMBA:
        return scan_scores_numba(cat_matrix, steps_matrix, query_cat, query_steps, alpha)
    return scan_scores_numpy(cat_matrix, steps_matrix, query_cat, query_steps, alpha)
