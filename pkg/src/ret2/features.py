"""Precomputed backbone activations and the RET2FEAT file format.

A feature file holds one side of a corpus (queries or documents). For each
record and each present modality it stores the S selected backbone layers
(``S x N x d_b``) followed by the pooler vector (``d_g``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import _envelope
from .errors import DataError, FormatError

MAGIC = b"RET2FEAT"


class Modality(str, Enum):
    TEXT = "text"
    VISUAL = "visual"
    ABSENT = "absent"


@dataclass(eq=False)
class LayerFeatures:
    """Selected-layer activations of one modality for one query or document.

    ``layers`` has shape ``(S, N, d_b)`` ordered shallow to deep; ``pooler``
    is the global token of that backbone. An absent modality carries neither.
    """

    modality: Modality
    layers: Optional[np.ndarray] = None
    pooler: Optional[np.ndarray] = None

    def __post_init__(self):
        self.modality = Modality(self.modality)
        if self.modality is Modality.ABSENT:
            if self.layers is not None or self.pooler is not None:
                raise DataError("absent modality cannot carry features", field="modality")
            return
        if self.layers is None or self.pooler is None:
            raise DataError(f"{self.modality.value} features need layers and pooler")
        self.layers = np.asarray(self.layers, dtype=np.float64)
        self.pooler = np.asarray(self.pooler, dtype=np.float64)
        if self.layers.ndim != 3 or 0 in self.layers.shape:
            raise DataError(f"layers must be a non-empty (S, N, d_b) array, got {self.layers.shape}",
                            field="layers")
        if self.pooler.ndim != 1 or self.pooler.size == 0:
            raise DataError("pooler must be a non-empty vector", field="pooler")
        if not (np.isfinite(self.layers).all() and np.isfinite(self.pooler).all()):
            raise DataError(f"{self.modality.value} features contain non-finite values",
                            field=self.modality.value)

    @classmethod
    def absent(cls):
        return cls(Modality.ABSENT)

    @property
    def present(self):
        return self.modality is not Modality.ABSENT

    @property
    def num_layers(self):
        return 0 if self.layers is None else self.layers.shape[0]

    @property
    def token_count(self):
        return 0 if self.layers is None else self.layers.shape[1]

    @property
    def backbone_dim(self):
        return 0 if self.layers is None else self.layers.shape[2]

    @property
    def pooler_dim(self):
        return 0 if self.pooler is None else self.pooler.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LayerFeatures) or self.modality != other.modality:
            return False
        if not self.present:
            return True
        return (np.array_equal(self.layers, other.layers)
                and np.array_equal(self.pooler, other.pooler))


@dataclass(eq=False)
class CorpusRecord:
    id: str
    text: LayerFeatures = field(default_factory=LayerFeatures.absent)
    visual: LayerFeatures = field(default_factory=LayerFeatures.absent)
    label: Optional[str] = None
    raw_text: Optional[str] = None

    def __post_init__(self):
        if not self.text.present and not self.visual.present:
            raise DataError(f"record {self.id!r} has no modality", field="modality")
        if self.text.present and self.text.modality is not Modality.TEXT:
            raise DataError(f"record {self.id!r}: text slot holds {self.text.modality.value}")
        if self.visual.present and self.visual.modality is not Modality.VISUAL:
            raise DataError(f"record {self.id!r}: visual slot holds {self.visual.modality.value}")
        if self.text.present and self.visual.present:
            if self.text.num_layers != self.visual.num_layers:
                raise DataError(f"record {self.id!r}: modalities disagree on layer count")

    @property
    def num_layers(self):
        return self.text.num_layers or self.visual.num_layers

    def __eq__(self, other):
        return (isinstance(other, CorpusRecord) and self.id == other.id
                and self.text == other.text and self.visual == other.visual
                and self.label == other.label and self.raw_text == other.raw_text)


def _corpus_dims(records):
    dims = {"S": None, "text": None, "visual": None, "pooler": None}
    for rec in records:
        for name, feats in (("text", rec.text), ("visual", rec.visual)):
            if not feats.present:
                continue
            for key, val in (("S", feats.num_layers), (name, feats.backbone_dim),
                             ("pooler", feats.pooler_dim)):
                if dims[key] is None:
                    dims[key] = val
                elif dims[key] != val:
                    raise DataError(f"record {rec.id!r}: {key} dimension {val} != {dims[key]}",
                                    field=key)
    return dims


def write_features(records: Sequence[CorpusRecord], path):
    """Write ``records`` to ``path`` in RET2FEAT format.

    Scalars are stored as float32; values already on the float32 grid
    round-trip exactly.
    """
    records = list(records)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids", field="id")
    dims = _corpus_dims(records)
    entries, arrays = [], []
    for rec in records:
        entry = {"id": rec.id, "label": rec.label, "raw_text": rec.raw_text}
        for name, feats in (("text", rec.text), ("visual", rec.visual)):
            if feats.present:
                entry[name] = {"tokens": feats.token_count}
                arrays.extend([feats.layers, feats.pooler])
            else:
                entry[name] = None
        entries.append(entry)
    header = {"count": len(records), "S": dims["S"],
              "d_b": {"text": dims["text"], "visual": dims["visual"]},
              "d_g": dims["pooler"], "records": entries}
    _envelope.write_file(path, MAGIC, header, arrays)


def read_features(path):
    header, payload = _envelope.read_file(path, MAGIC)
    return _parse(header, payload)


def _parse(header, payload):
    try:
        S = header["S"]
        d_b = header["d_b"]
        d_g = header["d_g"]
        entries = header["records"]
        count = header["count"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"header missing field {exc}", field=str(exc)) from None
    if count != len(entries):
        raise FormatError(f"header count {count} != {len(entries)} records", field="count")
    records = []
    for entry in entries:
        slots = {}
        for name in ("text", "visual"):
            meta = entry.get(name)
            if meta is None:
                slots[name] = LayerFeatures.absent()
                continue
            if d_b.get(name) is None or S is None or d_g is None:
                raise FormatError(f"record {entry['id']!r} has {name} features but header lacks dims",
                                  field="d_b")
            layers = payload.take((S, meta["tokens"], d_b[name]), field=f"{entry['id']}.{name}")
            pooler = payload.take((d_g,), field=f"{entry['id']}.{name}.pooler")
            slots[name] = LayerFeatures(Modality(name), layers, pooler)
        try:
            records.append(CorpusRecord(entry["id"], slots["text"], slots["visual"],
                                        entry.get("label"), entry.get("raw_text")))
        except DataError as exc:
            raise FormatError(str(exc), field=exc.field) from None
    payload.finish()
    return records


@dataclass
class ModalityBatch:
    """Padded features of one modality across a batch.

    ``layers``: (S, B, N_max, d_b); ``key_mask``: (B, N_max), True on real
    tokens; ``present``: (B,); ``pooler``: (B, d_g). Rows of absent records
    hold zeros and a single unmasked placeholder token.
    """

    layers: np.ndarray
    key_mask: np.ndarray
    present: np.ndarray
    pooler: np.ndarray

    def take(self, idx):
        return ModalityBatch(self.layers[:, idx], self.key_mask[idx], self.present[idx],
                             self.pooler[idx])


@dataclass
class FeatureBatch:
    ids: list
    text: Optional[ModalityBatch]
    visual: Optional[ModalityBatch]

    def __len__(self):
        return len(self.ids)

    def take(self, idx):
        idx = np.asarray(idx)
        return FeatureBatch([self.ids[i] for i in idx],
                            self.text.take(idx) if self.text is not None else None,
                            self.visual.take(idx) if self.visual is not None else None)

    @staticmethod
    def join(a, b):
        """Stack two batches built by the same :func:`collate` call."""
        def cat(x, y):
            if x is None:
                return None
            return ModalityBatch(np.concatenate([x.layers, y.layers], axis=1),
                                 np.concatenate([x.key_mask, y.key_mask]),
                                 np.concatenate([x.present, y.present]),
                                 np.concatenate([x.pooler, y.pooler]))
        return FeatureBatch(a.ids + b.ids, cat(a.text, b.text), cat(a.visual, b.visual))


def collate(records: Sequence[CorpusRecord]):
    """Pad ``records`` into a :class:`FeatureBatch`."""
    records = list(records)
    if not records:
        raise DataError("cannot collate an empty record list")
    dims = _corpus_dims(records)
    S = dims["S"]
    B = len(records)
    out = {}
    for name in ("text", "visual"):
        feats = [getattr(r, name) for r in records]
        if not any(f.present for f in feats):
            out[name] = None
            continue
        n_max = max(f.token_count for f in feats)
        layers = np.zeros((S, B, n_max, dims[name]))
        key_mask = np.zeros((B, n_max), dtype=bool)
        present = np.zeros(B, dtype=bool)
        pooler = np.zeros((B, dims["pooler"]))
        for b, f in enumerate(feats):
            if f.present:
                n = f.token_count
                layers[:, b, :n] = f.layers
                key_mask[b, :n] = True
                present[b] = True
                pooler[b] = f.pooler
            else:
                key_mask[b, 0] = True
        out[name] = ModalityBatch(layers, key_mask, present, pooler)
    return FeatureBatch([r.id for r in records], out["text"], out["visual"])
