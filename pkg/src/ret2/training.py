"""Contrastive training loop: Adam, warmup + cosine schedule, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import index as ix
from . import scoring
from . import tensor as T
from ._envelope import to_f32_grid
from .cell import RET, RET2, CellConfig, FusionCellParams, embed, encode_batch
from .errors import ConfigError, DataError, NumericError
from .features import FeatureBatch, collate
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    schedule: str = "cosine"
    warmup_steps: int = 0
    batch_size: int = 32
    max_steps: int = 2000
    seed: int = 0
    mode: str = RET2
    hidden_dim: int = 1024
    n_heads: int = 8
    out_dim: Optional[int] = None
    eval_every: int = 0
    eval_k: list = field(default_factory=lambda: [1, 5, 10])
    temperature: float = scoring.DEFAULT_TEMPERATURE
    learn_temperature: bool = True
    scoring: Optional[str] = None
    init_std: float = 0.02

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", field="lr")
        if self.schedule != "cosine":
            raise ConfigError("only the cosine schedule is supported", field="schedule")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives", field="batch_size")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1", field="max_steps")
        if not 0 <= self.warmup_steps <= self.max_steps:
            raise ConfigError("warmup_steps must lie in [0, max_steps]", field="warmup_steps")
        if self.mode not in (RET, RET2):
            raise ConfigError(f"mode must be {RET2!r} or {RET!r}", field="mode")
        if self.scoring not in (None, scoring.DOT, scoring.MAXSIM):
            raise ConfigError(f"unknown scoring {self.scoring!r}", field="scoring")
        lo, hi = scoring.TEMPERATURE_RANGE
        if not lo <= self.temperature <= hi:
            raise ConfigError(f"temperature must lie in [{lo}, {hi}]", field="temperature")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0", field="eval_every")
        return self

    @property
    def scoring_mode(self):
        if self.scoring:
            return self.scoring
        return scoring.DOT if self.mode == RET2 else scoring.MAXSIM

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale recipe (75k steps, batch 512, d=1024, lr 5e-5)."""
        base = dict(lr=5e-5, batch_size=512, max_steps=75_000, hidden_dim=1024, n_heads=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides):
        """Toy-scale recipe for synthetic features (2k steps, batch 32, d=64)."""
        base = dict(lr=1e-3, batch_size=32, max_steps=2000, hidden_dim=64, n_heads=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}",
                              field=sorted(unknown)[0])
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


def lr_at(step, config):
    """Linear warmup to ``lr`` over ``warmup_steps``, cosine decay to 0 at ``max_steps``."""
    if not 0 <= step <= config.max_steps:
        raise ConfigError(f"step {step} outside [0, {config.max_steps}]", field="step")
    w = config.warmup_steps
    if step < w:
        return config.lr * step / w
    span = config.max_steps - w
    if span == 0:
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


class Adam:
    """Bias-corrected Adam over a list of leaf tensors."""

    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, lr):
        for t in self.tensors:
            if t.grad is None:
                raise DataError("Adam step without gradients", field="grad")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            g = t.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()


def adam_step(tensors, state: Adam, lr):
    state.step(lr)
    return tensors


@dataclass
class TrainResult:
    params: FusionCellParams
    temperature: float
    log: list

    @property
    def losses(self):
        return [r["loss"] for r in self.log if "loss" in r]


def _pairs(queries, relevance, doc_pos):
    pairs = []
    for qi, q in enumerate(queries):
        if q.id not in relevance:
            raise DataError(f"query {q.id!r} has no relevance entry", field=q.id)
        target = relevance[q.id]
        if target not in doc_pos:
            raise DataError(f"query {q.id!r} targets unknown document {target!r}", field=q.id)
        pairs.append((qi, doc_pos[target]))
    return np.array(pairs, dtype=np.int64)


def cell_config_for(queries, documents, config: TrainConfig):
    """Derive a :class:`CellConfig` from corpus feature shapes and the train config."""
    from .features import _corpus_dims
    dims = _corpus_dims(list(queries) + list(documents))
    return CellConfig(mode=config.mode, hidden_dim=config.hidden_dim, n_heads=config.n_heads,
                      text_dim=dims["text"], visual_dim=dims["visual"], pooler_dim=dims["pooler"],
                      out_dim=config.out_dim, num_layers=dims["S"],
                      init_std=config.init_std).validate()


def evaluate(params, queries, documents, relevance, ks=(1, 5, 10), scoring_mode=None):
    """Recall@K of ``queries`` against an index over ``documents``."""
    if scoring_mode is None:
        scoring_mode = ix.DOT if params.config.mode == RET2 else ix.MAXSIM
    shard = ix.build(embed(params, documents), [d.id for d in documents], scoring_mode)
    q_emb = embed(params, queries)
    K = min(max(ks), len(shard))
    results = [ix.search(shard, q, K, query.id) for q, query in zip(q_emb, queries)]
    return {f"recall@{k}": ix.recall_at_k(results, relevance, k) for k in ks}


def train(queries, documents, relevance, config: TrainConfig, eval_queries=None,
          params: Optional[FusionCellParams] = None, log_sink=None):
    """Train the shared encoder on (query, positive document) pairs.

    Every epoch is a fresh permutation drawn from the config seed; the last
    partial batch is dropped. Parameters stay on the float32 grid.
    """
    cfg = config.validate()
    queries, documents = list(queries), list(documents)
    if len(queries) < cfg.batch_size:
        raise DataError(f"need at least batch_size={cfg.batch_size} query/document pairs, "
                        f"got {len(queries)}", field="batch_size")
    doc_pos = {d.id: i for i, d in enumerate(documents)}
    pairs = _pairs(queries, relevance, doc_pos)
    if params is None:
        params = FusionCellParams.init(cell_config_for(queries, documents, cfg), cfg.seed)
    temp = Tensor(to_f32_grid(cfg.temperature), requires_grad=cfg.learn_temperature)
    trainable = [t for _, t in params] + ([temp] if cfg.learn_temperature else [])
    opt = Adam(trainable)
    rng = np.random.default_rng(cfg.seed)
    everything = collate(queries + documents)
    nq = len(queries)
    B = cfg.batch_size
    mode = cfg.scoring_mode
    log = []

    def emit(record):
        log.append(record)
        if log_sink is not None:
            log_sink(record)

    step = 0
    order = np.empty(0, dtype=np.int64)
    while step < cfg.max_steps:
        if len(order) < B:
            order = rng.permutation(len(pairs))
        chosen, order = pairs[order[:B]], order[B:]
        batch = everything.take(np.concatenate([chosen[:, 0], nq + chosen[:, 1]]))
        emb = encode_batch(params, batch).embedding
        Q = T.index_rows(emb, np.arange(B))
        D = T.index_rows(emb, np.arange(B, 2 * B))
        sim = scoring.similarity_matrix(Q, D, mode)
        loss = scoring.infonce(sim, temp if cfg.learn_temperature else cfg.temperature)
        loss.backward()
        lr = lr_at(step, cfg)
        opt.step(lr)
        opt.zero_grad()
        for t in trainable:
            t.data[...] = to_f32_grid(t.data)
            if not np.isfinite(t.data).all():
                raise NumericError(f"non-finite parameter after step {step}")
        if cfg.learn_temperature:
            temp.data[...] = to_f32_grid(scoring.clamp_temperature(temp.data))
        record = {"step": step, "lr": lr, "loss": loss.item(), "temperature": float(temp.data)}
        step += 1
        if cfg.eval_every and eval_queries and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            record.update(evaluate(params, eval_queries, documents, relevance, cfg.eval_k, mode))
        emit(record)
        if step % 100 == 0:
            logger.info("step %d loss %.4f", step, record["loss"])
    return TrainResult(params, float(temp.data), log)


def write_log(log, path):
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
