"""Proximity graph of bath spins and enumeration of connected clusters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_MAX_CLUSTERS = 5_000_000


class ClusterLimitError(RuntimeError):
    pass


def build_neighbor_graph(positions: np.ndarray, r_dipole: float) -> list[set[int]]:
    """Adjacency sets; ``i`` and ``j`` are linked iff ``|r_i - r_j| <= r_dipole``."""
    if r_dipole <= 0:
        raise ValueError("r_dipole must be positive")
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    adj: list[set[int]] = [set() for _ in range(len(positions))]
    if len(positions) < 2:
        return adj
    for i, j in cKDTree(positions).query_pairs(r_dipole, output_type="ndarray"):
        adj[i].add(int(j))
        adj[j].add(int(i))
    return adj


def _connected_subsets(adj: list[set[int]], n_max: int, cap: int) -> list[tuple[int, ...]]:
    # ESU enumeration: every connected vertex set is reached exactly once from
    # its smallest vertex.
    out: list[tuple[int, ...]] = []

    def extend(sub: list[int], sub_set: set[int], border: set[int], ext: list[int], root: int):
        out.append(tuple(sorted(sub)))
        if len(out) > cap:
            raise ClusterLimitError(
                f"more than {cap} clusters; reduce r_dipole or the CCE order"
            )
        if len(sub) == n_max:
            return
        ext = list(ext)
        while ext:
            w = ext.pop()
            new = [u for u in adj[w] if u > root and u not in sub_set and u not in border]
            sub.append(w)
            sub_set.add(w)
            added = {w} | set(new)
            border_new = border | added
            extend(sub, sub_set, border_new, ext + new, root)
            sub.pop()
            sub_set.discard(w)

    for v in range(len(adj)):
        nbrs = sorted(u for u in adj[v] if u > v)
        extend([v], {v}, {v} | set(nbrs), nbrs, v)
    return out


@dataclass
class ClusterSet:
    """Connected clusters of size ``1..order`` grouped by size.

    ``by_size[k]`` is an ``(n_k, k)`` int array of sorted spin indices, rows in
    lexicographic order. ``subclusters[k][j]`` is ``(n_k, C(k, j))`` holding
    row indices into ``by_size[j]`` for each j-subset of the cluster, or -1 where
    that subset is not itself a stored (connected) cluster.
    """

    order: int
    r_dipole: float
    n_spins: int
    by_size: dict[int, np.ndarray]
    subclusters: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)

    @property
    def clusters(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in row) for k in sorted(self.by_size) for row in self.by_size[k]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_size.values())

    def __contains__(self, cluster) -> bool:
        c = tuple(sorted(cluster))
        rows = self.by_size.get(len(c))
        return rows is not None and bool(np.any(np.all(rows == c, axis=1)))

    def subcluster_map(self) -> dict[tuple[int, ...], list[tuple[int, ...]]]:
        """Proper subclusters present in the set, for every stored cluster."""
        out = {}
        for k, rows in self.by_size.items():
            for r, row in enumerate(rows):
                subs = []
                for j in range(1, k):
                    for idx in self.subclusters[k][j][r]:
                        if idx >= 0:
                            subs.append(tuple(int(i) for i in self.by_size[j][idx]))
                out[tuple(int(i) for i in row)] = subs
        return out

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "r_dipole": self.r_dipole,
            "n_spins": self.n_spins,
            "clusters": {str(k): v.tolist() for k, v in self.by_size.items()},
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def enumerate_clusters(
    adj: list[set[int]],
    n_max: int,
    r_dipole: float = float("nan"),
    max_clusters: int = DEFAULT_MAX_CLUSTERS,
) -> ClusterSet:
    if n_max < 1:
        raise ValueError("CCE order must be >= 1")
    found = _connected_subsets(adj, n_max, max_clusters)
    by_size: dict[int, np.ndarray] = {}
    for k in range(1, n_max + 1):
        rows = sorted(c for c in found if len(c) == k)
        by_size[k] = np.array(rows, dtype=np.int64).reshape(len(rows), k)
    lookup = {
        k: {tuple(int(i) for i in row): r for r, row in enumerate(rows)} for k, rows in by_size.items()
    }
    subclusters: dict[int, dict[int, np.ndarray]] = {}
    for k in range(2, n_max + 1):
        subclusters[k] = {}
        rows = by_size[k]
        for j in range(1, k):
            combos = list(combinations(range(k), j))
            idx = np.full((len(rows), len(combos)), -1, dtype=np.int64)
            table = lookup[j]
            for r, row in enumerate(rows):
                for c, pick in enumerate(combos):
                    idx[r, c] = table.get(tuple(int(row[p]) for p in pick), -1)
            subclusters[k][j] = idx
    subclusters[1] = {}
    return ClusterSet(n_max, r_dipole, len(adj), by_size, subclusters)


def build_cluster_set(positions: np.ndarray, r_dipole: float, order: int, **kw) -> ClusterSet:
    return enumerate_clusters(build_neighbor_graph(positions, r_dipole), order, r_dipole, **kw)
