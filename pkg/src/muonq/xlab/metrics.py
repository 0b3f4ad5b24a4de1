"""Reconstruction-quality metrics: relative error and cosine similarity."""

from __future__ import annotations

import numpy as np

from ..errors import ZeroOperandError, ZeroReferenceError
from ..matkit import as_matrix


def relative_error(a, b) -> float:
    """``||a - b||_F / ||a||_F``; the reference ``a`` must be nonzero."""
    am = as_matrix(a)
    bm = as_matrix(b)
    denom = float(np.sqrt((am * am).sum()))
    if denom == 0.0:
        raise ZeroReferenceError("relative error needs a nonzero reference")
    diff = am - bm
    return float(np.sqrt((diff * diff).sum())) / denom


def cosine_similarity(a, b) -> float:
    """Frobenius-inner-product cosine between two matrices, clamped to [-1, 1]."""
    am = as_matrix(a)
    bm = as_matrix(b)
    na = float(np.sqrt((am * am).sum()))
    nb = float(np.sqrt((bm * bm).sum()))
    if na == 0.0 or nb == 0.0:
        raise ZeroOperandError("cosine similarity needs nonzero operands")
    return float(np.clip((am * bm).sum() / (na * nb), -1.0, 1.0))
