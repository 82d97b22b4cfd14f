"""Relevance scores and the contrastive training loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

DEFAULT_TEMPERATURE = 0.07
TEMPERATURE_RANGE = (1e-3, 1.0)

DOT = "dot"
MAXSIM = "maxsim"


def _check_pair(Q, D):
    if Q.ndim != 2 or D.ndim != 2 or Q.shape[-1] != D.shape[-1]:
        raise DimensionError(f"need (k, d) matrices with equal d, got {Q.shape} and {D.shape}")


def maxsim(Q, D):
    """Late-interaction score: sum over query rows of the best document row."""
    Q, D = T.as_tensor(Q), T.as_tensor(D)
    _check_pair(Q, D)
    return T.sum_(T.max_(Q @ T.transpose(D), axis=-1))


def score_fusion(Q, D):
    """Dot product of the row sums, i.e. the sum of all pairwise row dot products."""
    Q, D = T.as_tensor(Q), T.as_tensor(D)
    _check_pair(Q, D)
    return T.dot(T.sum_rows(Q), T.sum_rows(D))


def similarity_matrix(Q, D, scoring=DOT):
    """Pairwise scores between two embedding batches of shape (B, k, d).

    ``dot`` sums the token rows first (score fusion; exact dot product when
    k == 1); ``maxsim`` is the late-interaction score.
    """
    if Q.ndim != 3 or D.ndim != 3 or Q.shape[1:] != D.shape[1:]:
        raise DimensionError(f"need (B, k, d) batches, got {Q.shape} and {D.shape}")
    if scoring == DOT:
        qs, ds = T.sum_rows(Q), T.sum_rows(D)
        return qs @ T.transpose(ds)
    if scoring == MAXSIM:
        # (Bq, 1, k, d) @ (1, Bd, d, k) -> (Bq, Bd, k, k)
        pair = T.reshape(Q, (Q.shape[0], 1) + Q.shape[1:]) @ \
            T.reshape(T.transpose(D), (1, D.shape[0], D.shape[2], D.shape[1]))
        return T.sum_(T.max_(pair, axis=-1), axis=-1)
    raise ConfigError(f"unknown scoring mode {scoring!r}", field="scoring")


def infonce(sim, temperature=DEFAULT_TEMPERATURE):
    """Symmetric in-batch InfoNCE with positives on the diagonal.

    ``0.5 * (CE over rows + CE over columns)`` of ``sim / temperature``.
    ``temperature`` may be a float or a scalar :class:`Tensor`.
    """
    sim = T.as_tensor(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise DimensionError(f"InfoNCE needs a square similarity matrix, got {sim.shape}")
    if isinstance(temperature, Tensor):
        logits = T.div(sim, temperature)
    else:
        if temperature <= 0:
            raise ConfigError("temperature must be positive", field="temperature")
        logits = T.scale(sim, 1.0 / temperature)
    B = sim.shape[0]
    eye = np.eye(B)
    rows = T.sum_(T.log_softmax(logits, axis=1) * eye)
    cols = T.sum_(T.log_softmax(logits, axis=0) * eye)
    return T.scale(rows + cols, -0.5 / B)


def clamp_temperature(t):
    lo, hi = TEMPERATURE_RANGE
    return float(np.clip(t, lo, hi))
