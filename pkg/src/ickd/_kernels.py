"""Masked top-k selection, the inner loop of bank retrieval.

Two interchangeable implementations exist: a numba ``@njit`` partial
selection and a pure-numpy stable sort. Both rank by similarity descending
with ties going to the lower bank index, so they return identical results.

Set ``ICKD_DISABLE_NUMBA=1`` (or call :func:`set_backend`) to force numpy.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

HAVE_NUMBA = numba is not None
_DISABLED = os.environ.get("ICKD_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


def _select_numpy(sims, labels, queries, k, same_class):
    q = queries.size
    n = labels.size
    qlab = labels[queries][:, None]
    if same_class:
        cand = labels[None, :] == qlab
        cand[np.arange(q), queries] = False
    else:
        cand = labels[None, :] != qlab
    keyed = np.where(cand, -sims, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    counts = np.minimum(cand.sum(axis=1), k).astype(np.int64)
    idx = np.where(np.arange(min(k, n))[None, :] < counts[:, None], order, -1).astype(np.int64)
    if idx.shape[1] < k:
        idx = np.concatenate([idx, np.full((q, k - idx.shape[1]), -1, np.int64)], axis=1)
    return idx, counts


def _select_python(sims, labels, queries, k, same_class):
    q = queries.size
    n = labels.size
    out = np.full((q, k), -1, np.int64)
    counts = np.zeros(q, np.int64)
    buf_val = np.empty(k)
    for r in range(q):
        qi = queries[r]
        ql = labels[qi]
        m = 0
        for j in range(n):
            if same_class:
                if labels[j] != ql or j == qi:
                    continue
            elif labels[j] == ql:
                continue
            v = sims[r, j]
            if m == k and not v > buf_val[k - 1]:
                continue
            pos = m if m < k else k - 1
            # shift worse entries right; equal values keep their (lower) index first
            while pos > 0 and buf_val[pos - 1] < v:
                if pos < k:
                    buf_val[pos] = buf_val[pos - 1]
                    out[r, pos] = out[r, pos - 1]
                pos -= 1
            buf_val[pos] = v
            out[r, pos] = j
            if m < k:
                m += 1
        counts[r] = m
    return out, counts


_select_numba = numba.njit(cache=True, nogil=True)(_select_python) if HAVE_NUMBA else None


def backend() -> str:
    return "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"


def set_backend(name: str) -> None:
    global _DISABLED
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _DISABLED = name == "numpy"


def masked_topk(sims, labels, queries, k: int, same_class: bool):
    """Top-``k`` candidate columns of each row of ``sims``.

    Row ``r`` belongs to bank query ``queries[r]``. Candidates are same-label
    columns other than the query itself (``same_class``) or different-label
    columns. Returns ``(indices, counts)``; unused slots hold -1.
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    queries = np.ascontiguousarray(queries, dtype=np.int64)
    k = int(k)
    if backend() == "numba":
        return _select_numba(sims, labels, queries, k, bool(same_class))
    return _select_numpy(sims, labels, queries, k, bool(same_class))
