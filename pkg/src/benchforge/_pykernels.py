"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import heapq

import numpy as np

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619
_MASK = 0xFFFFFFFF


def _fnv_trigram(a: str, b: str, c: str) -> int:
    h = _FNV_OFFSET
    for ch in (a, b, c):
        cp = ord(ch)
        for shift in (0, 8, 16, 24):
            h ^= (cp >> shift) & 0xFF
            h = (h * _FNV_PRIME) & _MASK
    return h


def trigram_counts(text: str, dim: int) -> np.ndarray:
    out = np.zeros(dim, dtype=np.float64)
    for i in range(len(text) - 2):
        out[_fnv_trigram(text[i], text[i + 1], text[i + 2]) % dim] += 1.0
    return out


def search_layer(vectors, adj, counts, query, entries, ef, visited, tag):
    cand: list[tuple[float, int]] = []  # (-sim, id): best first
    res: list[tuple[float, int]] = []  # (sim, -id): worst first
    for node in entries:
        node = int(node)
        if visited[node] == tag:
            continue
        visited[node] = tag
        s = float(vectors[node] @ query)
        heapq.heappush(cand, (-s, node))
        heapq.heappush(res, (s, -node))
        if len(res) > ef:
            heapq.heappop(res)
    while cand:
        neg, node = heapq.heappop(cand)
        if -neg < res[0][0]:
            break
        nbrs = adj[node, : counts[node]]
        fresh = nbrs[visited[nbrs] != tag]
        if fresh.size == 0:
            continue
        visited[fresh] = tag
        sims = (vectors[fresh] @ query).astype(np.float64)
        for nb, s in zip(fresh.tolist(), sims.tolist()):
            if len(res) < ef or s > res[0][0]:
                heapq.heappush(cand, (-s, nb))
                heapq.heappush(res, (s, -nb))
                if len(res) > ef:
                    heapq.heappop(res)
    ordered = sorted(res, key=lambda t: (-t[0], -t[1]))
    ids = np.array([-t[1] for t in ordered], dtype=np.int32)
    sims = np.array([t[0] for t in ordered], dtype=np.float64)
    return ids, sims


def select_neighbors(vectors, cand_ids, cand_sims, m):
    kept: list[int] = []
    pruned: list[int] = []
    for c, sim in zip(np.asarray(cand_ids).tolist(), np.asarray(cand_sims).tolist()):
        if len(kept) >= m:
            break
        if kept and float(np.max(vectors[kept] @ vectors[c])) > sim:
            pruned.append(c)
        else:
            kept.append(c)
    for c in pruned:
        if len(kept) >= m:
            break
        kept.append(c)
    return np.array(kept, dtype=np.int32)
