"""Hierarchical navigable small-world index over unit vectors (cosine similarity).

Graph layers are stored as dense ``int32`` adjacency arrays so the layer
search can run in the compiled kernel. Keys are arbitrary strings; removal
is a tombstone (the node keeps routing traffic but is never returned).
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import kernels
from .gateway import ConfigurationError


class HNSWIndex:
    def __init__(self, dim: int, m: int = 16, ef_construction: int = 200, ef_search: int = 100,
                 seed: int = 0, capacity: int = 1024) -> None:
        if dim <= 0 or m < 2:
            raise ValueError("dimension must be positive and m >= 2")
        self.dim = dim
        self.m = m
        self.m0 = 2 * m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.level_mult = 1.0 / math.log(m)
        self._rng = np.random.default_rng(seed)
        self._lock = threading.RLock()

        self._cap = max(capacity, 16)
        self._vectors = np.zeros((self._cap, dim), dtype=np.float32)
        self._levels = np.zeros(self._cap, dtype=np.int32)
        self._visited = np.zeros(self._cap, dtype=np.uint32)
        self._tag = 0
        self._adj: list[np.ndarray] = []
        self._counts: list[np.ndarray] = []
        self._keys: list[str] = []
        self._labels: dict[str, int] = {}
        self._deleted = np.zeros(self._cap, dtype=bool)
        self._entry = -1
        self._max_level = -1

    # -- bookkeeping --
    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, key: str) -> bool:
        return key in self._labels

    def keys(self) -> list[str]:
        return list(self._labels)

    def vector(self, key: str) -> np.ndarray:
        return self._vectors[self._labels[key]].copy()

    def _grow(self, needed: int) -> None:
        if needed <= self._cap:
            return
        cap = max(needed, self._cap * 2)

        def grow(arr: np.ndarray, fill=0) -> np.ndarray:
            out = np.full((cap, *arr.shape[1:]), fill, dtype=arr.dtype)
            out[: self._cap] = arr
            return out

        self._vectors = grow(self._vectors)
        self._levels = grow(self._levels)
        self._visited = grow(self._visited)
        self._deleted = grow(self._deleted, False)
        self._adj = [grow(a, -1) for a in self._adj]
        self._counts = [grow(c) for c in self._counts]
        self._cap = cap

    def _ensure_layer(self, level: int) -> None:
        while len(self._adj) <= level:
            width = self.m0 if not self._adj else self.m
            self._adj.append(np.full((self._cap, width), -1, dtype=np.int32))
            self._counts.append(np.zeros(self._cap, dtype=np.int32))

    def _next_tag(self) -> int:
        self._tag += 1
        if self._tag >= 2**32 - 1:
            self._visited[:] = 0
            self._tag = 1
        return self._tag

    def _search(self, query: np.ndarray, entries: np.ndarray, ef: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return kernels.search_layer(self._vectors, self._adj[layer], self._counts[layer], query,
                                    entries, ef, self._visited, np.uint32(self._next_tag()))

    def _prepare(self, vector: np.ndarray) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ConfigurationError(f"vector dimension {vec.shape[0]} does not match index dimension {self.dim}")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValueError("cannot index a zero vector")
        return np.ascontiguousarray(vec / norm, dtype=np.float32)

    # -- mutation --
    def add(self, key: str, vector: np.ndarray) -> None:
        with self._lock:
            if key in self._labels:
                raise KeyError(f"key {key!r} already indexed")
            q = self._prepare(vector)
            label = len(self._keys)
            self._grow(label + 1)
            level = int(-math.log(1.0 - self._rng.random()) * self.level_mult)
            self._ensure_layer(level)
            self._vectors[label] = q
            self._levels[label] = level
            self._keys.append(key)
            self._labels[key] = label
            if self._entry < 0:
                self._entry, self._max_level = label, level
                return

            ep = np.array([self._entry], dtype=np.int32)
            for layer in range(self._max_level, level, -1):
                ids, _ = self._search(q, ep, 1, layer)
                ep = ids[:1]
            for layer in range(min(level, self._max_level), -1, -1):
                ids, sims = self._search(q, ep, self.ef_construction, layer)
                chosen = kernels.select_neighbors(self._vectors, ids, sims, self.m)
                self._adj[layer][label, : len(chosen)] = chosen
                self._counts[layer][label] = len(chosen)
                cap = self.m0 if layer == 0 else self.m
                for nb in chosen.tolist():
                    self._link(nb, label, layer, cap)
                ep = ids
            if level > self._max_level:
                self._entry, self._max_level = label, level

    def _link(self, node: int, new: int, layer: int, cap: int) -> None:
        adj, counts = self._adj[layer], self._counts[layer]
        n = counts[node]
        if n < cap:
            adj[node, n] = new
            counts[node] = n + 1
            return
        cands = np.append(adj[node, :n], np.int32(new)).astype(np.int32)
        sims = (self._vectors[cands] @ self._vectors[node]).astype(np.float64)
        order = np.lexsort((cands, -sims))
        kept = kernels.select_neighbors(self._vectors, cands[order], sims[order], cap)
        adj[node, :] = -1
        adj[node, : len(kept)] = kept
        counts[node] = len(kept)

    def remove(self, key: str) -> None:
        with self._lock:
            label = self._labels.pop(key)
            self._deleted[label] = True

    # -- queries --
    def search(self, vector: np.ndarray, k: int = 1, ef: int | None = None) -> list[tuple[str, float]]:
        """Approximate top-``k`` by cosine: ``[(key, similarity), ...]`` best first."""
        with self._lock:
            if not self._labels:
                return []
            q = self._prepare(vector)
            ef = max(ef or self.ef_search, k)
            ep = np.array([self._entry], dtype=np.int32)
            for layer in range(self._max_level, 0, -1):
                ids, _ = self._search(q, ep, 1, layer)
                ep = ids[:1]
            ids, sims = self._search(q, ep, ef, 0)
            out = []
            for label, sim in zip(ids.tolist(), sims.tolist()):
                if self._deleted[label]:
                    continue
                out.append((self._keys[label], sim))
                if len(out) == k:
                    break
            return out
