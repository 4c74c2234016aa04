# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-query ranking loop: first valid match and average precision."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def eval_ranks(const cnp.int64_t[:, :] order, const cnp.int64_t[:] q_ids,
               const cnp.int64_t[:] q_cams, const cnp.int64_t[:] g_ids,
               const cnp.int64_t[:] g_cams):
    cdef Py_ssize_t num_q = order.shape[0]
    cdef Py_ssize_t num_g = order.shape[1]
    cdef cnp.int64_t[:] first = np.full(num_q, -1, dtype=np.int64)
    cdef double[:] ap = np.full(num_q, np.nan, dtype=np.float64)
    cdef Py_ssize_t q, j, g, pos, hits
    cdef cnp.int64_t qid, qcam
    cdef double prec_sum

    with nogil:
        for q in range(num_q):
            qid = q_ids[q]
            qcam = q_cams[q]
            pos = 0
            hits = 0
            prec_sum = 0.0
            for j in range(num_g):
                g = order[q, j]
                if g_ids[g] == qid and g_cams[g] == qcam:
                    continue
                pos += 1
                if g_ids[g] == qid:
                    hits += 1
                    if hits == 1:
                        first[q] = pos - 1
                    prec_sum += <double>hits / <double>pos
            if hits > 0:
                ap[q] = prec_sum / hits
    return np.asarray(first), np.asarray(ap)
