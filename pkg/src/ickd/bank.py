"""Feature memory bank and class-masked in-context retrieval.

Positive retrieval picks the ``k_positive`` most similar same-class rows
(the query itself excluded); negative retrieval picks ``n_negative``
different-class rows, by default the most similar ones. Ranking always
uses the raw cosine, ties going to the lower row index, so the retrieved
set does not depend on the temperature. Weights are a softmax over the
temperature-scaled similarities of the selected rows only.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .data import LabeledDataset
from .errors import DegenerateVectorError, FormatError, InsufficientCandidatesError, InvalidArgumentError
from .net import MlpModel, forward
from .numerics import NORM_FLOOR, softmax_with_temperature

BANK_MAGIC = b"ICKB"
QUERY_CHUNK = 512
# k_positive value meaning "every same-class entry"
K_ALL = 2**31 - 1


@dataclass(frozen=True)
class RetrievalConfig:
    beta1: float = 1.0
    beta2: float = 4.0
    k_positive: int = 100
    n_negative: int = 8
    negative_strategy: str = "hardest"
    # normalise a/b over the selected entries only, or over every masked candidate
    weight_scope: str = "selected"

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise InvalidArgumentError("retrieval temperatures must be positive")
        if self.k_positive < 1 or self.n_negative < 1:
            raise InvalidArgumentError("k_positive and n_negative must be >= 1")
        if self.negative_strategy not in ("hardest", "random"):
            raise InvalidArgumentError(f"unknown negative strategy {self.negative_strategy!r}")
        if self.weight_scope not in ("selected", "candidates"):
            raise InvalidArgumentError(f"unknown weight scope {self.weight_scope!r}")


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray
    weights: np.ndarray
    polarity: str
    similarities: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class RetrievalTable:
    """Retrieval results for every bank row, padded to a common width.

    Padding slots carry index -1 and weight 0.
    """

    indices: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    polarity: str

    def row(self, i: int) -> RetrievalResult:
        c = int(self.counts[i])
        return RetrievalResult(self.indices[i, :c].copy(), self.weights[i, :c].copy(), self.polarity)


class FeatureBank:
    """Immutable N x D matrix of features with labels.

    Instances also hold the per-epoch negative-selection cache; it is
    populated under a lock and never changes a result once stored.
    """

    def __init__(self, features, labels, source_epoch: int = 0):
        x = np.array(features, dtype=np.float64)
        y = np.array(labels, dtype=np.int64).ravel()
        if x.ndim != 2 or x.shape[0] != y.size:
            raise InvalidArgumentError(f"bank shape {x.shape} does not match {y.size} labels")
        norms = np.linalg.norm(x, axis=1)
        bad = np.flatnonzero(~(norms > NORM_FLOOR))
        if bad.size:
            raise DegenerateVectorError(
                f"bank row {int(bad[0])} has near-zero norm ({bad.size} degenerate rows: {bad[:10].tolist()})",
                index=int(bad[0]),
            )
        normed = x / norms[:, None]
        for arr in (x, y, normed):
            arr.flags.writeable = False
        self.features = x
        self.labels = y
        self.source_epoch = int(source_epoch)
        self._normed = normed
        self._lock = threading.Lock()
        self._neg_cache: dict = {}
        self._checksum = None

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def checksum(self) -> str:
        if self._checksum is None:
            h = hashlib.sha256()
            h.update(self.features.astype("<f8").tobytes())
            h.update(self.labels.astype("<i8").tobytes())
            self._checksum = h.hexdigest()[:16]
        return self._checksum

    def cosine_rows(self, queries) -> np.ndarray:
        """Cosine similarity of bank rows ``queries`` against the whole bank."""
        q = self._normed[np.asarray(queries, dtype=np.int64)]
        return np.clip(q @ self._normed.T, -1.0, 1.0)


def build_bank(model: MlpModel, dataset: LabeledDataset, source_epoch: int = 0) -> FeatureBank:
    if len(dataset) == 0:
        raise InvalidArgumentError("cannot build a bank from an empty dataset")
    if dataset.dim != model.architecture.layer_widths[0]:
        raise InvalidArgumentError(
            f"dataset dimension {dataset.dim} != model input width {model.architecture.layer_widths[0]}"
        )
    feats = forward(model, dataset.features).features
    try:
        return FeatureBank(feats, dataset.labels, source_epoch)
    except DegenerateVectorError as exc:
        raise DegenerateVectorError(f"sample {exc.index}: degenerate feature vector", index=exc.index) from None


def similarity_row(bank: FeatureBank, query, beta: float) -> np.ndarray:
    if not beta > 0:
        raise InvalidArgumentError("beta must be positive")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise InvalidArgumentError(f"query shape {q.shape} does not match bank dimension {bank.dim}")
    n = np.linalg.norm(q)
    if not n > NORM_FLOOR:
        raise DegenerateVectorError("query has near-zero norm")
    return np.clip(bank._normed @ (q / n), -1.0, 1.0) / beta


def _check_query(bank: FeatureBank, query_index: int) -> int:
    i = int(query_index)
    if not 0 <= i < len(bank):
        raise InvalidArgumentError(f"query index {query_index} outside bank of size {len(bank)}")
    return i


def _weights(cos_selected: np.ndarray, beta: float, lse: float | None = None) -> np.ndarray:
    if lse is None:
        # softmax over the selected (already rank-limited) entries only
        return softmax_with_temperature(cos_selected / beta, 1.0)
    return np.exp(cos_selected / beta - lse)


def _scope_lse(bank, queries, cfg, positive):
    if cfg.weight_scope == "selected":
        return None
    beta = cfg.beta1 if positive else cfg.beta2
    return _candidate_lse(bank, queries, beta, positive)


def _candidate_lse(bank, queries, beta, same_class):
    """log sum exp(cos / beta) over every masked candidate of each query."""
    queries = np.asarray(queries, dtype=np.int64)
    out = np.empty(queries.size)
    for start in range(0, queries.size, QUERY_CHUNK):
        qs = queries[start:start + QUERY_CHUNK]
        logits = bank.cosine_rows(qs) / beta
        same = bank.labels[None, :] == bank.labels[qs][:, None]
        mask = same if same_class else ~same
        if same_class:
            mask[np.arange(qs.size), qs] = False
        logits = np.where(mask, logits, -np.inf)
        m = np.max(logits, axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        out[start:start + qs.size] = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return out


def _select(bank, queries, k, same_class):
    """Chunked masked top-k over the bank; returns padded indices, cosines, counts."""
    queries = np.asarray(queries, dtype=np.int64)
    k = min(k, len(bank))
    idx = np.full((queries.size, k), -1, np.int64)
    cos = np.zeros((queries.size, k))
    counts = np.zeros(queries.size, np.int64)
    for start in range(0, queries.size, QUERY_CHUNK):
        qs = queries[start:start + QUERY_CHUNK]
        sims = bank.cosine_rows(qs)
        sel, cnt = _kernels.masked_topk(sims, bank.labels, qs, k, same_class)
        rows = np.arange(qs.size)[:, None]
        idx[start:start + qs.size] = sel
        cos[start:start + qs.size] = np.where(sel >= 0, sims[rows, np.maximum(sel, 0)], 0.0)
        counts[start:start + qs.size] = cnt
    return idx, cos, counts


def retrieve_positive(bank: FeatureBank, query_index: int, cfg: RetrievalConfig) -> RetrievalResult:
    i = _check_query(bank, query_index)
    idx, cos, counts = _select(bank, [i], cfg.k_positive, True)
    c = int(counts[0])
    if c == 0:
        raise InsufficientCandidatesError(f"sample {i} has no same-class peer in the bank", [i])
    sel = cos[0, :c]
    lse = _scope_lse(bank, [i], cfg, True)
    w = _weights(sel, cfg.beta1, None if lse is None else lse[0])
    return RetrievalResult(idx[0, :c], w, "positive", sel / cfg.beta1)


def _random_negatives(bank: FeatureBank, i: int, n: int, epoch_seed: int):
    cand = np.flatnonzero(bank.labels != bank.labels[i])
    rng = np.random.Generator(np.random.Philox([int(epoch_seed), i]))
    pick = np.sort(rng.choice(cand, size=min(n, cand.size), replace=False))
    cos = bank.cosine_rows([i])[0, pick]
    order = np.lexsort((pick, -cos))
    return pick[order], cos[order]


def retrieve_negative(bank: FeatureBank, query_index: int, cfg: RetrievalConfig,
                      epoch_seed: int = 0) -> RetrievalResult:
    i = _check_query(bank, query_index)
    key = ("single", i, int(epoch_seed), cfg)
    with bank._lock:
        hit = bank._neg_cache.get(key)
        if hit is not None:
            return hit
        if cfg.negative_strategy == "random":
            sel_idx, sel = _random_negatives(bank, i, cfg.n_negative, epoch_seed)
        else:
            idx, cos, counts = _select(bank, [i], cfg.n_negative, False)
            c = int(counts[0])
            sel_idx, sel = idx[0, :c], cos[0, :c]
        if sel_idx.size == 0:
            raise InsufficientCandidatesError(f"sample {i} has no different-class sample in the bank", [i])
        lse = _scope_lse(bank, [i], cfg, False)
        w = _weights(sel, cfg.beta2, None if lse is None else lse[0])
        res = RetrievalResult(sel_idx, w, "negative", sel / cfg.beta2)
        bank._neg_cache[key] = res
        return res


def _table(idx, cos, counts, beta, polarity, lse=None) -> RetrievalTable:
    valid = idx >= 0
    logits = np.where(valid, cos / beta, -np.inf)
    if lse is None:
        logits = logits - np.max(logits, axis=1, keepdims=True)
        w = np.where(valid, np.exp(logits), 0.0)
        w = w / w.sum(axis=1, keepdims=True)
    else:
        w = np.where(valid, np.exp(logits - lse[:, None]), 0.0)
    for arr in (idx, w, counts):
        arr.flags.writeable = False
    return RetrievalTable(idx, w, counts, polarity)


def positive_table(bank: FeatureBank, cfg: RetrievalConfig, k: int | None = None) -> RetrievalTable:
    """Positive retrieval for every bank row at once.

    ``k=None`` uses ``cfg.k_positive``; pass ``len(bank)`` to retrieve every
    same-class sample. Raises listing all rows without a same-class peer.
    """
    k = cfg.k_positive if k is None else int(k)
    k = max(1, min(k, len(bank) - 1))
    idx, cos, counts = _select(bank, np.arange(len(bank)), k, True)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise InsufficientCandidatesError(
            f"{missing.size} samples have no same-class peer: {missing[:20].tolist()}", missing.tolist()
        )
    lse = _scope_lse(bank, np.arange(len(bank)), cfg, True)
    return _table(idx, cos, counts, cfg.beta1, "positive", lse)


def negative_table(bank: FeatureBank, cfg: RetrievalConfig, epoch_seed: int = 0) -> RetrievalTable:
    """Negative retrieval for every row, computed once per (epoch_seed, cfg)."""
    key = ("table", int(epoch_seed), cfg)
    with bank._lock:
        hit = bank._neg_cache.get(key)
        if hit is not None:
            return hit
        n = len(bank)
        k = max(1, min(cfg.n_negative, n - 1))
        if cfg.negative_strategy == "random":
            idx = np.full((n, k), -1, np.int64)
            cos = np.zeros((n, k))
            counts = np.zeros(n, np.int64)
            for i in range(n):
                pick, c = _random_negatives(bank, i, k, epoch_seed)
                idx[i, :pick.size] = pick
                cos[i, :pick.size] = c
                counts[i] = pick.size
        else:
            idx, cos, counts = _select(bank, np.arange(n), k, False)
        missing = np.flatnonzero(counts == 0)
        if missing.size:
            raise InsufficientCandidatesError(
                f"{missing.size} samples have no different-class sample: {missing[:20].tolist()}", missing.tolist()
            )
        lse = _scope_lse(bank, np.arange(n), cfg, False)
        table = _table(idx, cos, counts, cfg.beta2, "negative", lse)
        bank._neg_cache[key] = table
        return table


def aggregate_probs(probs: np.ndarray, indices: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_j weights_j * probs[indices_j]; accepts padded (B, k) tables."""
    indices = np.asarray(indices)
    weights = np.asarray(weights, dtype=np.float64)
    gathered = probs[np.maximum(indices, 0)]
    return (weights[..., None] * gathered).sum(axis=-2)


def uniform_weights(counts_or_indices) -> np.ndarray:
    """Uniform weights over valid slots (index >= 0) of a padded index array."""
    valid = np.asarray(counts_or_indices) >= 0
    return valid / valid.sum(axis=-1, keepdims=True)


def aggregate_predictions(teacher: MlpModel, bank_dataset: LabeledDataset, result: RetrievalResult,
                          tau1: float, use_weights: bool = True) -> np.ndarray:
    """Similarity-weighted average of the teacher's softened predictions."""
    if result.polarity != "positive":
        raise InvalidArgumentError("aggregation needs a positive retrieval result")
    idx = np.asarray(result.indices, dtype=np.int64)
    logits = forward(teacher, bank_dataset.features[idx]).logits
    probs = softmax_with_temperature(logits, tau1)
    w = result.weights if use_weights else np.full(idx.size, 1.0 / idx.size)
    return w @ probs


def bank_bytes(bank: FeatureBank) -> bytes:
    n, d = bank.features.shape
    head = BANK_MAGIC + struct.pack("<II", n, d)
    return head + bank.features.astype("<f8").tobytes() + bank.labels.astype("<u2").tobytes()


def save_bank(bank: FeatureBank, path) -> None:
    Path(path).write_bytes(bank_bytes(bank))


def load_bank(path) -> FeatureBank:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("bank header truncated", len(buf))
    if buf[:4] != BANK_MAGIC:
        raise FormatError("bad bank magic", 0)
    n, d = struct.unpack_from("<II", buf, 4)
    end = 12 + 8 * n * d + 2 * n
    if len(buf) != end:
        raise FormatError(f"expected {end} bytes, found {len(buf)}", min(len(buf), end))
    x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=12).reshape(n, d)
    y = np.frombuffer(buf, dtype="<u2", count=n, offset=12 + 8 * n * d)
    return FeatureBank(x, y.astype(np.int64))
