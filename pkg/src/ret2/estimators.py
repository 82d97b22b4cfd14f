"""scikit-learn style wrappers around the encoder and the flat index."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import index as ix
from .cell import RET2, embed, load_checkpoint, save_checkpoint
from .errors import DataError
from .training import TrainConfig, evaluate, train
from .validation import check_embeddings, check_ids, check_records


class Ret2Encoder(TransformerMixin, BaseEstimator):
    """Recurrent fusion encoder shared between queries and documents.

    ``fit(X, y)`` trains on aligned pairs: ``y[i]`` is the positive document
    record of query record ``X[i]``. ``transform`` returns ``(n, out_dim)``
    embeddings in ``ret2`` mode and ``(n, 32, out_dim)`` in ``ret`` mode.
    """

    def __init__(self, mode=RET2, hidden_dim=64, n_heads=8, out_dim=None, lr=1e-3,
                 batch_size=32, max_steps=2000, warmup_steps=0, temperature=0.07,
                 learn_temperature=True, init_std=0.02, seed=0):
        self.mode = mode
        self.hidden_dim = hidden_dim
        self.n_heads = n_heads
        self.out_dim = out_dim
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.warmup_steps = warmup_steps
        self.temperature = temperature
        self.learn_temperature = learn_temperature
        self.init_std = init_std
        self.seed = seed

    def _train_config(self):
        return TrainConfig(lr=self.lr, warmup_steps=self.warmup_steps, batch_size=self.batch_size,
                           max_steps=self.max_steps, seed=self.seed, mode=self.mode,
                           hidden_dim=self.hidden_dim, n_heads=self.n_heads, out_dim=self.out_dim,
                           temperature=self.temperature, learn_temperature=self.learn_temperature,
                           init_std=self.init_std)

    def fit(self, X, y):
        queries = check_records(X, "X")
        positives = check_records(y, "y")
        if len(queries) != len(positives):
            raise DataError(f"X has {len(queries)} queries but y has {len(positives)} documents",
                            field="y")
        documents, seen = [], set()
        for d in positives:
            if d.id not in seen:
                seen.add(d.id)
                documents.append(d)
        relevance = {q.id: d.id for q, d in zip(queries, positives)}
        result = train(queries, documents, relevance, self._train_config())
        self.params_ = result.params
        self.temperature_ = result.temperature
        self.training_log_ = result.log
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        emb = embed(self.params_, check_records(X))
        return emb[:, 0, :] if emb.shape[1] == 1 else emb

    def recall(self, X, documents, relevance, ks=(1, 5, 10)):
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_records(X), check_records(documents, "documents"),
                        relevance, ks)

    def save(self, path):
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.temperature_,
                        meta={"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        params, temperature, meta = load_checkpoint(path)
        est = cls(**meta.get("estimator", {"mode": params.config.mode}))
        est.params_ = params
        est.temperature_ = temperature
        return est


class FlatRetriever(BaseEstimator):
    """Exhaustive top-K search over document embeddings.

    ``fit(X, y)`` indexes embeddings ``X`` under document ids ``y``;
    ``kneighbors`` returns ``(scores, indices)`` sorted best-first.
    """

    def __init__(self, scoring=ix.DOT, n_neighbors=10):
        self.scoring = scoring
        self.n_neighbors = n_neighbors

    def fit(self, X, y=None):
        emb = check_embeddings(X)
        ids = check_ids(range(len(emb)) if y is None else y, len(emb), "y")
        self.index_ = ix.build(emb, ids, self.scoring)
        return self

    def search(self, X, query_ids=None, n_neighbors=None):
        check_is_fitted(self, "index_")
        q = check_embeddings(X)
        qids = check_ids(range(len(q)) if query_ids is None else query_ids, len(q), "query_ids")
        return ix.search_many(self.index_, q, n_neighbors or self.n_neighbors, qids)

    def kneighbors(self, X, n_neighbors=None):
        results = self.search(X, n_neighbors=n_neighbors)
        pos = self.index_._pos
        scores = np.array([r.scores for r in results])
        indices = np.array([[pos[d] for d in r.doc_ids] for r in results], dtype=np.int64)
        return scores, indices

    def predict(self, X):
        """Best-scoring document id per query."""
        return np.array([r.doc_ids[0] for r in self.search(X, n_neighbors=1)], dtype=object)

    def score(self, X, y):
        """Recall@``n_neighbors`` where ``y[i]`` is the target id of query ``i``."""
        results = self.search(X)
        relevance = {r.query_id: str(t) for r, t in zip(results, y)}
        return ix.recall_at_k(results, relevance, self.n_neighbors)
