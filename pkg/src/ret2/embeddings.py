"""RET2EMBD files: encoded embeddings with their record ids."""

import numpy as np

from . import _envelope
from .errors import FormatError

MAGIC = b"RET2EMBD"


def write_embeddings(path, ids, embeddings, mode):
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 2:
        emb = emb[:, None, :]
    header = {"ids": list(ids), "n": emb.shape[0], "k": emb.shape[1], "dim": emb.shape[2],
              "mode": mode}
    _envelope.write_file(path, MAGIC, header, [emb])


def read_embeddings(path):
    """Returns ``(ids, embeddings (n, k, dim), mode)``."""
    header, payload = _envelope.read_file(path, MAGIC)
    try:
        ids, n, k, dim = header["ids"], header["n"], header["k"], header["dim"]
    except KeyError as exc:
        raise FormatError(f"embedding header missing {exc}", field=str(exc)) from None
    if n != len(ids):
        raise FormatError(f"header n={n} but {len(ids)} ids", field="n")
    emb = payload.take((n, k, dim), field="embeddings")
    payload.finish()
    return list(ids), emb, header.get("mode")
