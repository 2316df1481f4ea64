"""Dense vector primitives and numerically stable reductions.

Everything here works on float64 regardless of input dtype; the gradient
checks downstream need the full 53 bits.
"""

from __future__ import annotations

import numpy as np

__all__ = ["cosine_sim", "log_sum_exp", "pairwise_cosine", "row_norms"]

# Below this, a vector is treated as zero-norm and rejected. Silent
# similarity-0 substitution would mask adapter collapse.
ZERO_NORM_EPS = 1e-300


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a vector or an (N, d) matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def row_norms(x) -> np.ndarray:
    """Euclidean norm of each row, rejecting zero-norm rows."""
    a = _as_matrix(x, "x")
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms <= ZERO_NORM_EPS):
        bad = int(np.argmin(norms))
        raise ValueError(f"zero-norm vector at row {bad}: cosine similarity undefined")
    return norms


def cosine_sim(u, v) -> float:
    """Cosine similarity u.v / (|u||v|) of two nonzero vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = row_norms(u)[0]
    nv = row_norms(v)[0]
    return float(np.dot(u, v) / (nu * nv))


def log_sum_exp(xs) -> float:
    """Shift-stable log(sum(exp(xs))) for a nonempty 1-D array."""
    a = np.asarray(xs, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    if not np.all(np.isfinite(a)):
        raise ValueError("log_sum_exp input contains non-finite entries")
    m = float(np.max(a))
    return m + float(np.log(np.sum(np.exp(a - m))))


def pairwise_cosine(a, b) -> np.ndarray:
    """All-pairs cosine similarities.

    Returns an (N, M) matrix with entry [i, j] = cosine_sim(a[i], b[j]).
    Rows of both inputs must be nonzero; dimensions must agree.
    """
    am = _as_matrix(a, "a")
    bm = _as_matrix(b, "b")
    if am.shape[1] != bm.shape[1]:
        raise ValueError(f"dimension mismatch: {am.shape[1]} vs {bm.shape[1]}")
    na = row_norms(am)
    nb = row_norms(bm)
    sims = (am / na[:, None]) @ (bm / nb[:, None]).T
    # rounding can push |sim| a hair past 1; keep the invariant exact
    return np.clip(sims, -1.0, 1.0)
