"""Synthetic stand-in for a multimodal knowledge corpus.

Every entity owns a latent vector. Each (side, modality, layer) has a fixed
random linear map from latent space to an ``N x d_b`` token matrix, so a
query's features and its document's features are different linear images
of the same latent plus i.i.d. noise. Query-side and document-side maps
share a common component whose weight is controlled by ``side_shift``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from ._envelope import to_f32_grid
from .errors import ConfigError
from .features import CorpusRecord, LayerFeatures, Modality

SIDES = ("query", "document")
MODALITIES = ("text", "visual")


@dataclass
class SynthConfig:
    num_entities: int = 64
    queries_per_entity: int = 8
    n_text_tokens: int = 8
    n_visual_tokens: int = 8
    text_dim: int = 32
    visual_dim: int = 32
    pooler_dim: int = 32
    num_layers: int = 3
    latent_dim: int = 16
    noise: float = 0.1
    side_shift: float = 0.5
    pooler_scale: float = 0.02
    query_text_missing: float = 0.0
    query_visual_missing: float = 0.0
    doc_text_missing: float = 0.0
    doc_visual_missing: float = 0.0

    def validate(self):
        for name in ("num_entities", "queries_per_entity", "n_text_tokens", "n_visual_tokens",
                     "text_dim", "visual_dim", "pooler_dim", "num_layers", "latent_dim"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}", field=name)
        if self.noise < 0:
            raise ConfigError("noise must be >= 0", field="noise")
        if self.pooler_scale < 0:
            raise ConfigError("pooler_scale must be >= 0", field="pooler_scale")
        if not 0.0 <= self.side_shift <= 1.0:
            raise ConfigError("side_shift must lie in [0, 1]", field="side_shift")
        for side in ("query", "doc"):
            t, v = getattr(self, f"{side}_text_missing"), getattr(self, f"{side}_visual_missing")
            for name, rate in ((f"{side}_text_missing", t), (f"{side}_visual_missing", v)):
                if not 0.0 <= rate <= 1.0:
                    raise ConfigError(f"{name} must lie in [0, 1]", field=name)
            if t == 1.0 and v == 1.0:
                raise ConfigError(f"{side} side would have no modality at all",
                                  field=f"{side}_text_missing")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}",
                              field=sorted(unknown)[0])
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthCorpus:
    queries: list
    documents: list
    relevance: dict
    entity_of_query: dict
    latents: np.ndarray
    maps: dict
    pooler_maps: dict


def _answer(entity):
    return f"fact-{entity:04d}"


def _mix(shared, specific, shift):
    return np.sqrt(1.0 - shift) * shared + np.sqrt(shift) * specific


def synth_corpus(config: SynthConfig, seed=0) -> SynthCorpus:
    """Generate queries, documents and a query -> document relevance map."""
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    S, r = cfg.num_layers, cfg.latent_dim
    tokens = {"text": cfg.n_text_tokens, "visual": cfg.n_visual_tokens}
    dims = {"text": cfg.text_dim, "visual": cfg.visual_dim}

    maps, pooler_maps = {}, {}
    for m in MODALITIES:
        width = tokens[m] * dims[m]
        shared = rng.normal(0.0, 1.0 / np.sqrt(r), size=(S, r, width))
        shared_pool = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, cfg.pooler_dim))
        for side in SIDES:
            own = rng.normal(0.0, 1.0 / np.sqrt(r), size=(S, r, width))
            own_pool = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, cfg.pooler_dim))
            maps[side, m] = _mix(shared, own, cfg.side_shift)
            pooler_maps[side, m] = _mix(shared_pool, own_pool, cfg.side_shift)

    latents = rng.normal(size=(cfg.num_entities, r))

    def features(side, m, u):
        layers = np.einsum("r,srw->sw", u, maps[side, m]).reshape(S, tokens[m], dims[m])
        layers = layers + cfg.noise * rng.normal(size=layers.shape)
        pooler = cfg.pooler_scale * (u @ pooler_maps[side, m]
                                     + cfg.noise * rng.normal(size=cfg.pooler_dim))
        return LayerFeatures(Modality(m), to_f32_grid(layers), to_f32_grid(pooler))

    def record(rid, side, u, text_rate, vis_rate, **meta):
        has_text = rng.random() >= text_rate
        has_vis = rng.random() >= vis_rate
        if not has_text and not has_vis:
            # keep whichever modality is more likely to be present
            has_text = text_rate <= vis_rate
            has_vis = not has_text
        text = features(side, "text", u) if has_text else LayerFeatures.absent()
        vis = features(side, "visual", u) if has_vis else LayerFeatures.absent()
        return CorpusRecord(rid, text, vis, **meta)

    documents, queries, relevance, entity_of = [], [], {}, {}
    for e in range(cfg.num_entities):
        did = f"d{e:04d}"
        raw = f"Title: Entity {e}; Content: a passage describing entity {e}, known for {_answer(e)}."
        documents.append(record(did, "document", latents[e], cfg.doc_text_missing,
                                cfg.doc_visual_missing, raw_text=raw))
        for j in range(cfg.queries_per_entity):
            qid = f"q{e:04d}_{j:02d}"
            queries.append(record(qid, "query", latents[e], cfg.query_text_missing,
                                  cfg.query_visual_missing, label=_answer(e)))
            relevance[qid] = did
            entity_of[qid] = e
    return SynthCorpus(queries, documents, relevance, entity_of, latents, maps, pooler_maps)


def split_queries(corpus: SynthCorpus, holdout_per_entity=2):
    """Split queries into (train, held_out): the last ``holdout_per_entity``
    queries of every entity are held out."""
    per_entity = {}
    for q in corpus.queries:
        per_entity.setdefault(corpus.entity_of_query[q.id], []).append(q)
    train, held = [], []
    for e in sorted(per_entity):
        qs = per_entity[e]
        if holdout_per_entity >= len(qs):
            raise ConfigError("holdout_per_entity must leave at least one training query",
                              field="holdout_per_entity")
        cut = len(qs) - holdout_per_entity
        train.extend(qs[:cut])
        held.extend(qs[cut:])
    return train, held
