"""Numpy implementation of the per-query ranking loop (used when the extension is absent)."""
import numpy as np


def eval_ranks(order, q_ids, q_cams, g_ids, g_cams):
    num_q = order.shape[0]
    first = np.full(num_q, -1, dtype=np.int64)
    ap = np.full(num_q, np.nan, dtype=np.float64)
    for q in range(num_q):
        ranked = order[q]
        ids = g_ids[ranked]
        keep = ~((ids == q_ids[q]) & (g_cams[ranked] == q_cams[q]))
        hit = ids[keep] == q_ids[q]
        if not hit.any():
            continue
        pos = np.flatnonzero(hit)
        first[q] = pos[0]
        precision = np.arange(1, len(pos) + 1) / (pos + 1.0)
        ap[q] = precision.mean()
    return first, ap
