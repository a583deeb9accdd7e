"""Undirected simple graphs and the classical algorithms shared by the pipeline.

Nodes are dense integers 1..n. Edge sets are kept sorted by (min, max) so every
iteration over a graph is deterministic; all randomness enters through explicit
numpy generators.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np

Edge = tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """Immutable simple graph on nodes 1..n with canonically sorted edges."""

    n: int
    edges: tuple[Edge, ...]

    def __init__(self, n: int, edges=()):
        if n < 0:
            raise ValueError("node count must be nonnegative")
        canon = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (1 <= u <= n and 1 <= v <= n):
                raise ValueError(f"edge ({u},{v}) out of range 1..{n}")
            canon.add((min(u, v), max(u, v)))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Symmetric boolean adjacency matrix, row/col k for node k+1."""
        a = np.zeros((self.n, self.n), dtype=bool)
        for u, v in self.edges:
            a[u - 1, v - 1] = True
            a[v - 1, u - 1] = True
        a.setflags(write=False)
        return a

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        """neighbors[k] lists the neighbors of node k+1 in ascending order."""
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            nbrs[u - 1].append(v)
            nbrs[v - 1].append(u)
        return tuple(tuple(sorted(b)) for b in nbrs)

    def degree(self, v: int) -> int:
        return len(self.neighbors[v - 1])

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edge_set

    @cached_property
    def _edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def relabeled(self, perm: "NodeOrdering") -> "Graph":
        """Relabel node i as perm(i)."""
        p = perm.perm
        return Graph(self.n, [(p[u - 1], p[v - 1]) for u, v in self.edges])


@dataclass(frozen=True)
class NodeOrdering:
    """A bijection node -> rank, stored as perm[i-1] == rank of node i."""

    perm: tuple[int, ...]

    def __post_init__(self):
        n = len(self.perm)
        if sorted(self.perm) != list(range(1, n + 1)):
            raise ValueError("not a permutation of 1..n")

    def __len__(self) -> int:
        return len(self.perm)

    def __call__(self, v: int) -> int:
        return self.perm[v - 1]

    @cached_property
    def sequence(self) -> tuple[int, ...]:
        """Nodes listed in rank order (inverse of perm)."""
        seq = [0] * len(self.perm)
        for node, rank in enumerate(self.perm, start=1):
            seq[rank - 1] = node
        return tuple(seq)

    @classmethod
    def identity(cls, n: int) -> "NodeOrdering":
        return cls(tuple(range(1, n + 1)))


@dataclass(frozen=True)
class GraphHash:
    digest: int
    rounds: int


def is_connected(g: Graph) -> bool:
    if g.n <= 1:
        return True
    seen = [False] * (g.n + 1)
    stack = [1]
    seen[1] = True
    count = 1
    while stack:
        u = stack.pop()
        for w in g.neighbors[u - 1]:
            if not seen[w]:
                seen[w] = True
                count += 1
                stack.append(w)
    return count == g.n


def dfs_ordering(g: Graph, root: int, rng: np.random.Generator) -> NodeOrdering:
    """Depth-first visit order from root, neighbor order shuffled by rng.

    Raises ValueError("graph not connected") when the DFS cannot reach every
    node, so one call is also a connectivity check.
    """
    if not 1 <= root <= g.n:
        raise ValueError(f"root {root} out of range 1..{g.n}")
    rank = [0] * (g.n + 1)
    stack = [root]
    next_rank = 1
    while stack:
        u = stack.pop()
        if rank[u]:
            continue
        rank[u] = next_rank
        next_rank += 1
        nbrs = [w for w in g.neighbors[u - 1] if not rank[w]]
        if nbrs:
            order = rng.permutation(len(nbrs))
            # reversed push so the first shuffled neighbor is explored first
            stack.extend(nbrs[i] for i in order[::-1])
    if next_rank != g.n + 1:
        raise ValueError("graph not connected")
    return NodeOrdering(tuple(rank[1:]))


def line_graph(g: Graph) -> tuple[Graph, dict[Edge, int]]:
    """Line graph of g plus the map original edge -> line-graph node id.

    Line node k corresponds to g.edges[k-1]; two line nodes are adjacent iff
    the underlying edges share an endpoint.
    """
    if g.m == 0:
        raise ValueError("line graph undefined for empty edge set")
    index = {e: k + 1 for k, e in enumerate(g.edges)}
    incident: list[list[int]] = [[] for _ in range(g.n + 1)]
    for e, k in index.items():
        incident[e[0]].append(k)
        incident[e[1]].append(k)
    edges = set()
    for ks in incident:
        for i in range(len(ks)):
            for j in range(i + 1, len(ks)):
                edges.add((min(ks[i], ks[j]), max(ks[i], ks[j])))
    return Graph(g.m, edges), index


def to_networkx(g: Graph) -> nx.Graph:
    h = nx.Graph()
    h.add_nodes_from(range(1, g.n + 1))
    h.add_edges_from(g.edges)
    return h


def from_networkx(h: nx.Graph) -> Graph:
    """Relabel an arbitrary networkx graph onto dense ids 1..n (sorted order)."""
    nodes = sorted(h.nodes())
    idx = {v: k + 1 for k, v in enumerate(nodes)}
    return Graph(len(nodes), [(idx[u], idx[v]) for u, v in h.edges()])


def is_planar(g: Graph) -> bool:
    if g.n <= 4:
        return True
    ok, _ = nx.check_planarity(to_networkx(g), counterexample=False)
    return bool(ok)


def is_lobster(g: Graph) -> bool:
    """True iff g is a tree whose double leaf-removal leaves a (possibly empty) path."""
    if g.n == 0 or g.m != g.n - 1 or not is_connected(g):
        return False
    alive = set(range(1, g.n + 1))
    deg = {v: g.degree(v) for v in alive}
    for _ in range(2):
        leaves = {v for v in alive if deg[v] <= 1}
        alive -= leaves
        for v in alive:
            deg[v] = sum(1 for w in g.neighbors[v - 1] if w in alive)
    return all(deg[v] <= 2 for v in alive)


def _h64(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def wl_hash(g: Graph, rounds: int = 3) -> GraphHash:
    """Color-refinement (Weisfeiler-Leman) hash, invariant under relabeling.

    Initial colors are degrees; each round hashes a node's color together with
    the sorted multiset of neighbor colors. Non-isomorphic graphs may collide
    (e.g. C6 vs two triangles, the classic WL-1 limitation), so uniqueness
    counts built on this are conservative.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    colors = [_h64(g.degree(v).to_bytes(8, "little")) for v in range(1, g.n + 1)]
    for _ in range(rounds):
        colors = [
            _h64(colors[v - 1] + b"".join(sorted(colors[w - 1] for w in g.neighbors[v - 1])))
            for v in range(1, g.n + 1)
        ]
    summary = g.n.to_bytes(8, "little") + g.m.to_bytes(8, "little") + b"".join(sorted(colors))
    return GraphHash(int.from_bytes(_h64(summary), "little"), rounds)
