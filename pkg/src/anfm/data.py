"""Synthetic graph families, validity predicates, and on-disk containers.

Three families: planar (Delaunay triangulations of uniform points), SBM
(2..5 communities of 20..40 nodes, intra 0.3 / inter 0.05, resampled until
connected), and lobster trees (backbone path with two rounds of Bernoulli leaf
attachment). Every sampler takes its randomness from a per-graph generator
seeded with dataset_seed XOR graph_index, so generation is reproducible and
embarrassingly parallel.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
from scipy.spatial import Delaunay
from scipy.stats import binom

from .graphs import Graph, is_connected, is_lobster, is_planar, to_networkx

FAMILIES = ("planar", "sbm", "lobster")
MAGIC = b"GDS1"
FORMAT_VERSION = 1
REJECTION_BUDGET = 10_000

DEFAULT_PARAMS: dict[str, dict[str, float | int]] = {
    "planar": {"points": 64},
    "sbm": {
        "min_communities": 2,
        "max_communities": 5,
        "min_size": 20,
        "max_size": 40,
        "p_intra": 0.3,
        "p_inter": 0.05,
    },
    "lobster": {"backbone_scale": 80, "p1": 0.7, "p2": 0.7, "min_n": 10, "max_n": 100},
}


@dataclass(frozen=True)
class DatasetSpec:
    family: str = "planar"
    train: int = 8192
    val: int = 256
    test: int = 256
    seed: int = 0
    params: dict[str, float | int] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("split counts must be >= 1")
        merged = dict(DEFAULT_PARAMS[self.family])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown params for {self.family}: {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)


@dataclass(frozen=True)
class GraphRecord:
    graph: Graph
    family: str
    params: dict[str, float | int]
    index: int


@dataclass(frozen=True)
class Splits:
    train: tuple[GraphRecord, ...]
    val: tuple[GraphRecord, ...]
    test: tuple[GraphRecord, ...]


def _sample_planar(rng: np.random.Generator, params) -> Graph:
    pts = rng.random((int(params["points"]), 2))
    tri = Delaunay(pts)
    edges = set()
    for simplex in tri.simplices:
        for i in range(3):
            u = int(simplex[i]) + 1
            v = int(simplex[(i + 1) % 3]) + 1
            edges.add((min(u, v), max(u, v)))
    return Graph(len(pts), edges)


def _sample_sbm(rng: np.random.Generator, params) -> Graph:
    k = int(rng.integers(params["min_communities"], params["max_communities"] + 1))
    sizes = [int(rng.integers(params["min_size"], params["max_size"] + 1)) for _ in range(k)]
    n = sum(sizes)
    labels = np.repeat(np.arange(k), sizes)
    u, v = np.triu_indices(n, k=1)
    same = labels[u] == labels[v]
    prob = np.where(same, params["p_intra"], params["p_inter"])
    keep = rng.random(len(u)) < prob
    return Graph(n, [(int(a) + 1, int(b) + 1) for a, b in zip(u[keep], v[keep])])


def _sample_lobster(rng: np.random.Generator, params) -> Graph:
    backbone = int(2 * params["backbone_scale"] * rng.random() + 0.5)
    if backbone < 1:
        return Graph(0)
    edges = [(i, i + 1) for i in range(1, backbone)]
    nxt = backbone + 1
    hairs = []
    for v in range(1, backbone + 1):
        if rng.random() < params["p1"]:
            edges.append((v, nxt))
            hairs.append(nxt)
            nxt += 1
    for v in hairs:
        if rng.random() < params["p2"]:
            edges.append((v, nxt))
            nxt += 1
    return Graph(nxt - 1, edges)


def _lobster_ok(g: Graph, params) -> bool:
    return params["min_n"] <= g.n <= params["max_n"] and is_connected(g)


def sample_graph(family: str, rng: np.random.Generator, params) -> Graph:
    """One accepted graph of the family; raises after 10^4 rejections."""
    for _ in range(REJECTION_BUDGET):
        if family == "planar":
            g = _sample_planar(rng, params)
            if is_connected(g):
                return g
        elif family == "sbm":
            g = _sample_sbm(rng, params)
            if is_connected(g):
                return g
        else:
            g = _sample_lobster(rng, params)
            if _lobster_ok(g, params):
                return g
    raise RuntimeError(f"rejection budget exceeded while sampling {family}")


def generate(spec: DatasetSpec) -> Splits:
    """Generate train/val/test records; per-graph seed = spec.seed XOR index."""
    counts = [("train", spec.train), ("val", spec.val), ("test", spec.test)]
    out: dict[str, list[GraphRecord]] = {name: [] for name, _ in counts}
    index = 0
    for name, count in counts:
        for _ in range(count):
            rng = np.random.default_rng(spec.seed ^ index)
            g = sample_graph(spec.family, rng, spec.params)
            out[name].append(GraphRecord(g, spec.family, spec.params, index))
            index += 1
    return Splits(tuple(out["train"]), tuple(out["val"]), tuple(out["test"]))


def _binom_interval(count: int, p: float, level: float = 0.99) -> tuple[int, int]:
    lo = int(binom.ppf((1 - level) / 2, count, p))
    hi = int(binom.ppf(1 - (1 - level) / 2, count, p))
    return lo, hi


def _refine_labels(g: Graph, labels: dict[int, int], sweeps: int = 100) -> dict[int, int]:
    """Greedy single-node modularity moves until a sweep makes no move."""
    m = g.m
    deg = {v: g.degree(v) for v in range(1, g.n + 1)}
    dtot: dict[int, int] = {}
    for v, c in labels.items():
        dtot[c] = dtot.get(c, 0) + deg[v]
    for _ in range(sweeps):
        moved = False
        for v in range(1, g.n + 1):
            a = labels[v]
            kin: dict[int, int] = {}
            for u in g.neighbors[v - 1]:
                cu = labels[u]
                kin[cu] = kin.get(cu, 0) + 1
            best, best_dq = a, 0.0
            for b in list(dtot):
                if b == a:
                    continue
                dq = (kin.get(b, 0) - kin.get(a, 0)) / m - deg[v] * (
                    dtot[b] - dtot[a] + deg[v]
                ) / (2.0 * m * m)
                if dq > best_dq + 1e-12:
                    best, best_dq = b, dq
            if best != a:
                labels[v] = best
                dtot[a] -= deg[v]
                dtot[best] += deg[v]
                moved = True
                if dtot[a] == 0:
                    del dtot[a]
        if not moved:
            break
    return labels


def _detect_communities(g: Graph, min_size: int) -> list[set[int]]:
    """Louvain modularity detection, refinement sweeps, then undersized
    fragments merged into their densest-connected partner. Merging cannot
    fool the downstream interval checks: fusing two genuinely distinct
    communities dilutes the intra-block edge frequency far below p_intra."""
    comm = nx.community.louvain_communities(to_networkx(g), seed=0)
    labels = {v: ci for ci, c in enumerate(comm) for v in c}
    labels = _refine_labels(g, labels)
    by_comm: dict[int, set[int]] = {}
    for v, c in labels.items():
        by_comm.setdefault(c, set()).add(v)
    parts = list(by_comm.values())
    for _ in range(len(parts)):
        parts.sort(key=len)
        if len(parts) < 2 or len(parts[0]) >= min_size:
            break
        frag = parts[0]
        best, best_density = 1, -1.0
        for j in range(1, len(parts)):
            other = parts[j]
            cross = sum(1 for u in frag for w in g.neighbors[u - 1] if w in other)
            density = cross / (len(frag) * len(other))
            if density > best_density:
                best_density, best = density, j
        parts[best] |= frag
        parts.pop(0)
    return parts


def valid(g: Graph, family: str, params=None) -> bool:
    """Family validity predicate used by the VUN metric."""
    params = dict(DEFAULT_PARAMS[family], **(params or {}))
    if family == "planar":
        return is_connected(g) and is_planar(g)
    if family == "lobster":
        return is_lobster(g)
    if family != "sbm":
        raise ValueError(f"unknown family {family!r}")
    if g.n == 0 or g.m == 0 or not is_connected(g):
        return False
    communities = _detect_communities(g, int(params["min_size"]))
    k = len(communities)
    if not params["min_communities"] <= k <= params["max_communities"]:
        return False
    if any(not params["min_size"] <= len(c) <= params["max_size"] for c in communities):
        return False
    label = {}
    for ci, comm in enumerate(communities):
        for v in comm:
            label[v] = ci
    intra_pairs = sum(len(c) * (len(c) - 1) // 2 for c in communities)
    inter_pairs = g.n * (g.n - 1) // 2 - intra_pairs
    intra_edges = sum(1 for u, v in g.edges if label[u] == label[v])
    inter_edges = g.m - intra_edges
    lo, hi = _binom_interval(intra_pairs, params["p_intra"])
    if not lo <= intra_edges <= hi:
        return False
    lo, hi = _binom_interval(inter_pairs, params["p_inter"])
    return lo <= inter_edges <= hi


def save(graphs, path) -> None:
    """Binary graph container: magic GDS1, u32 version, u64 count, then per
    graph u32 n, u32 m and m sorted little-endian (u16, u16) edges."""
    graphs = [rec.graph if isinstance(rec, GraphRecord) else rec for rec in graphs]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(graphs)))
        for g in graphs:
            if g.n > 0xFFFF:
                raise ValueError("graph too large for u16 node ids")
            fh.write(struct.pack("<II", g.n, g.m))
            fh.write(np.asarray(g.edges, dtype="<u2").tobytes())


def load(path) -> tuple[Graph, ...]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError("truncated header")
    if data[:4] != MAGIC:
        raise ValueError("bad magic")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    offset = 16
    graphs = []
    for _ in range(count):
        if offset + 8 > len(data):
            raise ValueError("truncated payload")
        n, m = struct.unpack_from("<II", data, offset)
        offset += 8
        need = 4 * m
        if offset + need > len(data):
            raise ValueError("truncated payload")
        flat = np.frombuffer(data, dtype="<u2", count=2 * m, offset=offset)
        offset += need
        graphs.append(Graph(n, flat.reshape(m, 2).tolist()))
    if offset != len(data):
        raise ValueError("trailing bytes after payload")
    return tuple(graphs)


def save_jsonl(graphs, path) -> None:
    """JSON-lines mirror with fields n and edges."""
    graphs = [rec.graph if isinstance(rec, GraphRecord) else rec for rec in graphs]
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps({"n": g.n, "edges": [list(e) for e in g.edges]}) + "\n")


def load_jsonl(path) -> tuple[Graph, ...]:
    graphs = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            graphs.append(Graph(obj["n"], [tuple(e) for e in obj["edges"]]))
    return tuple(graphs)
