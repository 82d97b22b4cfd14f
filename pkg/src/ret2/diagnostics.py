"""Rank-collapse scores of multi-token outputs and gate-activation profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cell import encode_batch
from .errors import DataError, DimensionError
from .features import collate

SVD_TOL = 1e-10
_MAX_ITERS = 10_000


def leading_left_singular_vector(M, tol=SVD_TOL):
    """Unit vector u maximising ||u^T M|| via power iteration on M M^T."""
    G = M @ M.T
    diag = np.diag(G)
    u = G[:, int(np.argmax(diag))].copy()
    norm = np.linalg.norm(u)
    if norm == 0.0:
        u = np.zeros(len(G))
        u[int(np.argmax(diag))] = 1.0
    else:
        u /= norm
    lam = u @ G @ u
    for _ in range(_MAX_ITERS):
        w = G @ u
        n = np.linalg.norm(w)
        if n == 0.0:
            break
        w /= n
        new_lam = w @ G @ w
        done = abs(new_lam - lam) <= tol * max(new_lam, 1e-300) and np.linalg.norm(w - u) <= math.sqrt(tol)
        u, lam = w, new_lam
        if done:
            break
    return u


def rank_collapse_score(M):
    """``||M - M_1||_F / ||M||_F`` with M_1 the best rank-1 approximation.

    0 means every row is a multiple of one vector; the maximum for k rows is
    ``sqrt((k-1)/k)``, reached by orthogonal rows of equal norm.
    """
    M = np.asarray(M.data if isinstance(M, T.Tensor) else M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2:
        raise DimensionError(f"need a (k, d) matrix with k >= 2, got shape {M.shape}")
    total = np.linalg.norm(M)
    if total == 0.0:
        raise DataError("rank-collapse score of a zero matrix is undefined")
    Ms = M / total
    u = leading_left_singular_vector(Ms)
    resid = Ms - np.outer(u, u @ Ms)
    return float(np.linalg.norm(resid))


GATE_NAMES = ("forget", "input_text", "input_visual")


@dataclass
class GateStat:
    total: float = 0.0
    count: int = 0
    samples: int = 0

    @property
    def mean(self):
        return self.total / self.count if self.count else None


@dataclass
class GateProfile:
    """Per-step average gate activation; ``stats[step][gate]``."""

    stats: list
    flags: list = field(default_factory=list)

    def mean(self, step, gate):
        return self.stats[step][gate].mean

    def rows(self):
        """(step, gate, mean, n) with 1-based steps; undefined gates omitted."""
        out = []
        for s, per_gate in enumerate(self.stats, start=1):
            for g in GATE_NAMES:
                st = per_gate[g]
                if st.count:
                    out.append((s, g, st.mean, st.samples))
        return out


def _accumulate(stats, step_gates):
    for s, sg in enumerate(step_gates):
        per = stats[s]
        f = sg.forget
        per["forget"].total += float(f.sum())
        per["forget"].count += f.size
        per["forget"].samples += f.shape[0]
        for name, gate, present in (("input_text", sg.input_text, sg.text_present),
                                    ("input_visual", sg.input_visual, sg.visual_present)):
            if gate is None:
                continue
            sel = gate[present]
            per[name].total += float(sel.sum())
            per[name].count += sel.size
            per[name].samples += int(present.sum())


def profile_gates(records, params, batch_size=256, return_raw=False):
    """Average forget / input gate activations at every recurrent step."""
    records = list(records)
    if not records:
        raise DataError("cannot profile an empty sample")
    stats = [{g: GateStat() for g in GATE_NAMES} for _ in range(params.config.num_layers)]
    raw = []
    with T.no_grad():
        for start in range(0, len(records), batch_size):
            batch = collate(records[start:start + batch_size])
            out = encode_batch(params, batch, log_gates=True)
            _accumulate(stats, out.gate_log)
            if return_raw:
                raw.append(out.gate_log)
    flags = []
    for g in ("input_text", "input_visual"):
        if all(per[g].count == 0 for per in stats):
            flags.append(f"{g}_undefined")
    profile = GateProfile(stats, flags)
    return (profile, raw) if return_raw else profile


def write_gate_csv(profile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "gate", "mean", "n"])
        for s, g, m, n in profile.rows():
            w.writerow([s, g, repr(m), n])


def write_collapse_csv(scores, path):
    """``scores``: iterable of (matrix_id, score)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["matrix_id", "score"])
        for mid, sc in scores:
            w.writerow([mid, repr(float(sc))])
