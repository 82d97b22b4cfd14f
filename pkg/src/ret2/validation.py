"""Input checks shared by the estimators and the CLI."""

import numpy as np
from sklearn.utils.validation import check_array

from .errors import DataError
from .features import CorpusRecord


def check_records(X, name="X"):
    """Return ``X`` as a non-empty list of :class:`CorpusRecord`."""
    if isinstance(X, CorpusRecord):
        raise DataError(f"{name} must be a sequence of records, not a single record", field=name)
    records = list(X)
    if not records:
        raise DataError(f"{name} is empty", field=name)
    for i, r in enumerate(records):
        if not isinstance(r, CorpusRecord):
            raise DataError(f"{name}[{i}] is {type(r).__name__}, expected CorpusRecord", field=name)
    return records


def check_embeddings(X, name="X"):
    """Return a finite float64 array of shape (n, dim) or (n, k, dim)."""
    try:
        arr = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True,
                          input_name=name)
    except ValueError as exc:
        raise DataError(str(exc), field=name) from None
    if arr.ndim not in (2, 3):
        raise DataError(f"{name} must be 2-d or 3-d, got {arr.ndim}-d", field=name)
    return arr


def check_ids(ids, n, name="ids"):
    ids = [str(i) for i in ids]
    if len(ids) != n:
        raise DataError(f"{name} has {len(ids)} entries, expected {n}", field=name)
    if len(set(ids)) != len(ids):
        raise DataError(f"{name} contains duplicates", field=name)
    return ids
