"""Exact (flat) retrieval index and recall metrics."""

from __future__ import annotations

import heapq
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _envelope
from .errors import ConfigError, DataError, DimensionError, FormatError

DOT = "dot"
MAXSIM = "maxsim"
SHARD_MAGIC = b"RET2SHRD"
_CHUNK_ELEMS = 1 << 22


class TruncatedResultWarning(UserWarning):
    """Raised (as a warning) when K exceeds the number of indexed documents."""


@dataclass
class RetrievalResult:
    query_id: str
    doc_ids: list
    scores: list
    truncated: bool = False

    def to_json(self):
        return {"query_id": self.query_id,
                "results": [[d, s] for d, s in zip(self.doc_ids, self.scores)],
                "truncated": self.truncated}

    @classmethod
    def from_json(cls, obj):
        try:
            pairs = obj["results"]
            return cls(obj["query_id"], [p[0] for p in pairs], [float(p[1]) for p in pairs],
                       bool(obj.get("truncated", False)))
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"malformed result line: {exc}", field="results") from None


@dataclass
class IndexShard:
    """Immutable store of document embeddings, one row per document.

    ``matrix`` has shape (num_docs, k * dim); row ``i`` is document
    ``doc_ids[i]`` flattened row-major from its (k, dim) embedding.
    """

    doc_ids: list
    matrix: np.ndarray
    k: int
    dim: int
    scoring: str = DOT
    _pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.scoring not in (DOT, MAXSIM):
            raise ConfigError(f"unknown scoring mode {self.scoring!r}", field="scoring")
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(self.doc_ids), self.k * self.dim):
            raise DimensionError(f"matrix shape {self.matrix.shape} != "
                                 f"({len(self.doc_ids)}, {self.k}*{self.dim})", field="matrix")
        self.matrix.setflags(write=False)
        self._pos = {d: i for i, d in enumerate(self.doc_ids)}
        if len(self._pos) != len(self.doc_ids):
            raise DataError("duplicate document ids", field="doc_ids")

    def __len__(self):
        return len(self.doc_ids)

    @property
    def tokens(self):
        return self.matrix.reshape(len(self), self.k, self.dim)


def build(embeddings, ids, scoring=DOT):
    """Index ``embeddings`` of shape (n, k, dim) (or (n, dim), read as k=1).

    Values are rounded to float32, the on-disk precision, so a saved and
    reloaded shard ranks exactly like the original.
    """
    ids = list(ids)
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.size == 0 and not ids:
        return IndexShard([], np.zeros((0, 0)), 1, 0, scoring)
    if emb.ndim == 2:
        emb = emb[:, None, :]
    if emb.ndim != 3 or emb.shape[0] != len(ids):
        raise DimensionError(f"embeddings shape {emb.shape} does not match {len(ids)} ids",
                             field="embeddings")
    n, k, dim = emb.shape
    matrix = _envelope.to_f32_grid(emb.reshape(n, k * dim))
    if not np.isfinite(matrix).all():
        raise DataError("embeddings contain non-finite or float32-overflowing values",
                        field="embeddings")
    return IndexShard(ids, matrix, k, dim, scoring)


def score_all(shard, query):
    """Scores of every indexed document for one query embedding (k, dim)."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    if q.shape[-1] != shard.dim:
        raise DimensionError(f"query dim {q.shape[-1]} != index dim {shard.dim}", field="query")
    docs = shard.tokens
    if shard.scoring == DOT:
        docs, q = docs.sum(axis=1, keepdims=True), q.sum(axis=0, keepdims=True)
    n, k_d, dim = docs.shape
    k_q = q.shape[0]
    # elementwise products reduced along the last axis: every document row goes
    # through identical arithmetic, so equal documents get bitwise-equal scores
    # (BLAS kernels round edge rows differently) and k == 1 maxsim equals dot
    chunk = max(1, _CHUNK_ELEMS // max(1, k_d * k_q * dim))
    out = np.empty(n)
    for start in range(0, n, chunk):
        block = docs[start:start + chunk]
        pair = (block[:, :, None, :] * q[None, None, :, :]).sum(axis=-1)
        out[start:start + chunk] = pair.max(axis=1).sum(axis=1)
    return out


def search(shard, query, K, query_id=""):
    """Exact top-``K`` documents by score; ties keep insertion order.

    If ``K`` exceeds the index size every document is returned and the
    result is flagged ``truncated`` (with a warning).
    """
    if K < 1:
        raise ConfigError("K must be >= 1", field="K")
    if len(shard) == 0:
        raise DataError("cannot search an empty index", field="index")
    scores = score_all(shard, query)
    truncated = K > len(shard)
    if truncated:
        warnings.warn(f"K={K} exceeds index size {len(shard)}; returning all documents",
                      TruncatedResultWarning, stacklevel=2)
        K = len(shard)
    # min-heap keyed on (score, -position): the root is the weakest survivor
    heap = []
    for pos, s in enumerate(scores.tolist()):
        item = (s, -pos)
        if len(heap) < K:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    ranked = sorted(heap, reverse=True)
    return RetrievalResult(query_id, [shard.doc_ids[-p] for _, p in ranked],
                           [s for s, _ in ranked], truncated)


def search_many(shard, queries, K, query_ids):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncatedResultWarning)
        results = [search(shard, q, K, qid) for q, qid in zip(queries, query_ids)]
    if K > len(shard):
        warnings.warn(f"K={K} exceeds index size {len(shard)}; returning all documents",
                      TruncatedResultWarning, stacklevel=2)
    return results


def save_shard(shard, path):
    header = {"doc_ids": shard.doc_ids, "k": shard.k, "dim": shard.dim, "scoring": shard.scoring,
              "rows": len(shard)}
    _envelope.write_file(path, SHARD_MAGIC, header, [shard.matrix])


def load_shard(path):
    header, payload = _envelope.read_file(path, SHARD_MAGIC)
    try:
        ids, k, dim, scoring = header["doc_ids"], header["k"], header["dim"], header["scoring"]
    except KeyError as exc:
        raise FormatError(f"shard header missing {exc}", field=str(exc)) from None
    if header.get("rows", len(ids)) != len(ids):
        raise FormatError("shard row count disagrees with doc_ids", field="rows")
    matrix = payload.take((len(ids), k * dim), field="matrix")
    payload.finish()
    return IndexShard(list(ids), matrix, k, dim, scoring)


# -- metrics -------------------------------------------------------------

def recall_at_k(results, relevance, K):
    """Fraction of queries whose target document is within the top ``K``."""
    if not results:
        raise DataError("no results to evaluate")
    hits = 0
    for r in results:
        if r.query_id not in relevance:
            raise DataError(f"no relevance entry for query {r.query_id!r}", field=r.query_id)
        target = relevance[r.query_id]
        targets = {target} if isinstance(target, str) else set(target)
        hits += bool(targets & set(r.doc_ids[:K]))
    return hits / len(results)


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = re.compile(r"[^\w\s]")


def normalize_answer(text, strip_punctuation=False, strip_articles=False):
    text = text.lower()
    if strip_punctuation:
        text = _PUNCT.sub(" ", text)
    if strip_articles:
        text = _ARTICLES.sub(" ", text)
    if strip_punctuation or strip_articles:
        text = " ".join(text.split())
    return text


def pseudo_recall_at_k(results, answers, raw_texts, K, strip_punctuation=False,
                       strip_articles=False):
    """Fraction of queries for which some top-``K`` document contains an answer.

    ``answers`` maps query id to one answer string or a list of them;
    matching is a case-insensitive substring test.
    """
    if not results:
        raise DataError("no results to evaluate")
    norm = lambda s: normalize_answer(s, strip_punctuation, strip_articles)  # noqa: E731
    hits = 0
    for r in results:
        if r.query_id not in answers:
            raise DataError(f"no answer for query {r.query_id!r}", field=r.query_id)
        ans = answers[r.query_id]
        ans = [ans] if isinstance(ans, str) else list(ans)
        ans = [norm(a) for a in ans if a]
        docs = [norm(raw_texts.get(d) or "") for d in r.doc_ids[:K]]
        hits += any(a in doc for a in ans for doc in docs)
    return hits / len(results)
