# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: trigram hashing and HNSW layer search.

Every function here has a twin in ``_pykernels`` with the same signature and
the same tie-breaking rules. ``benchforge.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, int32_t
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue
from libcpp.vector cimport vector

cnp.import_array()

cdef uint32_t FNV_OFFSET = 2166136261U
cdef uint32_t FNV_PRIME = 16777619U


cdef inline uint32_t _fnv_codepoint(uint32_t h, uint32_t cp) nogil:
    cdef int shift
    for shift in range(0, 32, 8):
        h ^= (cp >> shift) & 0xFF
        h *= FNV_PRIME
    return h


def trigram_counts(str text, int dim):
    """Count character trigrams of ``text`` hashed into ``dim`` buckets."""
    cdef Py_ssize_t n = len(text)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dim, dtype=np.float64)
    cdef Py_ssize_t i
    cdef uint32_t h
    cdef Py_UCS4 a, b, c
    if n < 3:
        return out
    for i in range(n - 2):
        a = text[i]
        b = text[i + 1]
        c = text[i + 2]
        h = FNV_OFFSET
        h = _fnv_codepoint(h, <uint32_t>a)
        h = _fnv_codepoint(h, <uint32_t>b)
        h = _fnv_codepoint(h, <uint32_t>c)
        out[h % <uint32_t>dim] += 1.0
    return out


cdef inline double _dot(const float[:, ::1] vectors, Py_ssize_t row,
                        const float[::1] query) nogil:
    cdef float acc = 0.0
    cdef Py_ssize_t j
    for j in range(query.shape[0]):
        acc += vectors[row, j] * query[j]
    return acc


cdef inline double _dot_rows(const float[:, ::1] vectors, Py_ssize_t a,
                             Py_ssize_t b) nogil:
    cdef float acc = 0.0
    cdef Py_ssize_t j
    for j in range(vectors.shape[1]):
        acc += vectors[a, j] * vectors[b, j]
    return acc


def search_layer(const float[:, ::1] vectors, const int32_t[:, ::1] adj,
                 const int32_t[::1] counts, const float[::1] query,
                 const int32_t[::1] entries, int ef, uint32_t[::1] visited,
                 uint32_t tag):
    """Best-first search of one HNSW layer.

    Returns ``(ids, sims)`` ordered by similarity descending, then id ascending.
    """
    # candidates: max-heap on (sim, -id); results: max-heap on (-sim, id)
    cdef priority_queue[pair[double, int32_t]] cand
    cdef priority_queue[pair[double, int32_t]] res
    cdef Py_ssize_t i, k
    cdef int32_t node, nb
    cdef double s, worst, best
    with nogil:
        for i in range(entries.shape[0]):
            node = entries[i]
            if visited[node] == tag:
                continue
            visited[node] = tag
            s = _dot(vectors, node, query)
            cand.push(pair[double, int32_t](s, -node))
            res.push(pair[double, int32_t](-s, node))
            if <int>res.size() > ef:
                res.pop()
        while not cand.empty():
            best = cand.top().first
            node = -cand.top().second
            cand.pop()
            worst = -res.top().first
            if best < worst:
                break
            for k in range(counts[node]):
                nb = adj[node, k]
                if visited[nb] == tag:
                    continue
                visited[nb] = tag
                s = _dot(vectors, nb, query)
                worst = -res.top().first
                if <int>res.size() < ef or s > worst:
                    cand.push(pair[double, int32_t](s, -nb))
                    res.push(pair[double, int32_t](-s, nb))
                    if <int>res.size() > ef:
                        res.pop()
    cdef Py_ssize_t n = res.size()
    ids = np.empty(n, dtype=np.int32)
    sims = np.empty(n, dtype=np.float64)
    cdef int32_t[::1] ids_v = ids
    cdef double[::1] sims_v = sims
    # res pops worst first; fill from the back
    i = n - 1
    while not res.empty():
        sims_v[i] = -res.top().first
        ids_v[i] = res.top().second
        res.pop()
        i -= 1
    return ids, sims


def select_neighbors(const float[:, ::1] vectors, const int32_t[::1] cand_ids,
                     const double[::1] cand_sims, int m):
    """Diversity heuristic over candidates already sorted best-first.

    A candidate is kept when it is closer to the base point than to every
    neighbor kept so far; leftover slots are refilled with pruned candidates.
    """
    cdef Py_ssize_t n = cand_ids.shape[0]
    cdef vector[int32_t] kept
    cdef vector[int32_t] pruned
    cdef Py_ssize_t i, j
    cdef bint ok
    cdef int32_t c
    with nogil:
        for i in range(n):
            if <int>kept.size() >= m:
                break
            c = cand_ids[i]
            ok = True
            for j in range(<Py_ssize_t>kept.size()):
                if _dot_rows(vectors, c, kept[j]) > cand_sims[i]:
                    ok = False
                    break
            if ok:
                kept.push_back(c)
            else:
                pruned.push_back(c)
        i = 0
        while <int>kept.size() < m and i < <Py_ssize_t>pruned.size():
            kept.push_back(pruned[i])
            i += 1
    out = np.empty(kept.size(), dtype=np.int32)
    cdef int32_t[::1] out_v = out
    for i in range(<Py_ssize_t>kept.size()):
        out_v[i] = kept[i]
    return out
