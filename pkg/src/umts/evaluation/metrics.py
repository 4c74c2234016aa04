"""Distance matrices and the CMC / mAP retrieval protocol.

The per-query ranking loop runs in a compiled extension when it is built,
and in numpy otherwise. Set ``UMTS_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _rank_py

try:
    if os.environ.get("UMTS_PURE_PYTHON"):
        raise ImportError("pure-Python ranking requested")
    from . import _rank_cy
except ImportError:
    _rank_cy = None

BACKENDS = {"python": _rank_py.eval_ranks}
if _rank_cy is not None:
    BACKENDS["cython"] = _rank_cy.eval_ranks
BACKEND = "cython" if _rank_cy is not None else "python"


@dataclass
class EvalResult:
    cmc: np.ndarray
    map: float
    num_valid_queries: int
    num_excluded_queries: int = 0
    ap: np.ndarray = field(default=None, repr=False)

    def rank(self, r: int) -> float:
        return float(self.cmc[r - 1])

    def summary(self) -> dict:
        return {
            "mAP": float(self.map),
            "rank1": self.rank(1),
            "rank5": self.rank(min(5, len(self.cmc))),
            "num_valid_queries": self.num_valid_queries,
            "num_excluded_queries": self.num_excluded_queries,
        }


def distance_matrix(Q, G, chunk: int = 256) -> np.ndarray:
    """Euclidean distances between rows of Q (Nq x D) and G (Ng x D), in float64."""
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"dimension mismatch: query {Q.shape} vs gallery {G.shape}")
    out = np.empty((len(Q), len(G)))
    for i in range(0, len(Q), chunk):
        diff = Q[i:i + chunk, None, :] - G[None, :, :]
        out[i:i + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def rank_order(dists: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by distance; ties keep ascending gallery index."""
    return np.argsort(dists, axis=1, kind="stable").astype(np.int64)


def evaluate(dists, q_ids, q_cams, g_ids, g_cams, max_rank: int = 50,
             backend: str | None = None) -> EvalResult:
    """Single-query re-id evaluation.

    Gallery entries sharing both identity and camera with the query are
    ignored. Queries left without any relevant gallery entry are excluded
    from both metrics and counted in ``num_excluded_queries``.
    """
    dists = np.asarray(dists, dtype=np.float64)
    q_ids, q_cams = (np.ascontiguousarray(a, dtype=np.int64) for a in (q_ids, q_cams))
    g_ids, g_cams = (np.ascontiguousarray(a, dtype=np.int64) for a in (g_ids, g_cams))
    if dists.ndim != 2 or dists.shape != (len(q_ids), len(g_ids)):
        raise ValueError(f"distance matrix {dists.shape} does not match "
                         f"{len(q_ids)} queries x {len(g_ids)} gallery entries")
    if len(q_cams) != len(q_ids) or len(g_cams) != len(g_ids):
        raise ValueError("camera arrays must align with identity arrays")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    kernel = BACKENDS[backend or BACKEND]
    first, ap = kernel(rank_order(dists), q_ids, q_cams, g_ids, g_cams)
    valid = first >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        return EvalResult(np.zeros(max_rank), 0.0, 0, len(q_ids), ap)
    hits = np.bincount(first[valid], minlength=max_rank)[:max_rank]
    cmc = np.cumsum(hits) / n_valid
    return EvalResult(cmc, float(ap[valid].mean()), n_valid, len(q_ids) - n_valid, ap)
