"""Edge filtrations: weight functions, threshold schedules, noise augmentation.

A filtration splits a graph into a nested sequence of edge sets
E_0 = {} <= E_1 <= ... <= E_T = E by thresholding an edge-weight function at a
schedule of levels. Noise augmentation then resamples every interior step
around its expected density, which is what the sequence model is trained on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .graphs import (
    Edge,
    Graph,
    NodeOrdering,
    dfs_ordering,
    is_connected,
    line_graph,
    to_networkx,
)
from .spectral import fiedler_vector

FUNCTIONS = ("line_fiedler", "dfs", "betweenness", "remoteness")
SCHEDULES = ("linear", "convex", "concave", "dfs_linear")

LAMBDA_FIRST = 0.25
LAMBDA_LAST = 0.05


@dataclass(frozen=True)
class FiltrationConfig:
    function: str = "line_fiedler"
    steps: int = 30
    schedule: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.function not in FUNCTIONS:
            raise ValueError(f"unknown filtration function {self.function!r}")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        want_dfs = self.function == "dfs"
        if want_dfs != (self.schedule == "dfs_linear"):
            raise ValueError("dfs_linear schedule is used iff function is dfs")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class EdgeWeights:
    values: dict[Edge, float]

    def __post_init__(self):
        for e, w in self.values.items():
            if not math.isfinite(w):
                raise ValueError(f"non-finite weight on edge {e}")


@dataclass(frozen=True)
class FiltrationSequence:
    n: int
    edge_sets: tuple[tuple[Edge, ...], ...]  # E_0 .. E_T, each sorted
    thresholds: tuple[float, ...]
    config: FiltrationConfig
    graph_id: int | None = None
    ordering: NodeOrdering | None = None  # the DFS ordering that defined the weights

    @property
    def steps(self) -> int:
        return len(self.edge_sets) - 1


@dataclass(frozen=True)
class NoisySequence:
    n: int
    edge_sets: tuple[tuple[Edge, ...], ...]  # noisy E~_0 .. E~_T
    lambdas: tuple[float, ...]
    graph_id: int | None = None

    @property
    def steps(self) -> int:
        return len(self.edge_sets) - 1


def gamma(schedule: str, x: float) -> float:
    """Fraction of edges present at progress x = t/T."""
    if schedule == "linear":
        return x
    if schedule == "convex":
        return 1.0 - math.cos(math.pi * x / 2.0)
    if schedule == "concave":
        return math.sin(math.pi * x / 2.0)
    raise ValueError(f"unknown schedule {schedule!r}")


def edge_weights(g: Graph, function: str, aux: NodeOrdering | None = None) -> EdgeWeights:
    """Edge-weight function values for one graph; g must be connected."""
    if not is_connected(g):
        raise ValueError("filtration requires a connected graph")
    if function == "dfs":
        if aux is None:
            raise ValueError("dfs weights require a node ordering")
        return EdgeWeights({(u, v): float(max(aux(u), aux(v))) for u, v in g.edges})
    if function == "line_fiedler":
        lg, index = line_graph(g)
        vec = fiedler_vector(lg)
        return EdgeWeights({e: float(vec[index[e] - 1]) for e in g.edges})
    if function in ("betweenness", "remoteness"):
        central = nx.edge_betweenness_centrality(to_networkx(g), normalized=False)
        sign = -1.0 if function == "remoteness" else 1.0
        return EdgeWeights(
            {(u, v): sign * float(central[(u, v) if (u, v) in central else (v, u)]) for u, v in g.edges}
        )
    raise ValueError(f"unknown filtration function {function!r}")


def thresholds(weights: EdgeWeights, config: FiltrationConfig) -> tuple[float, ...]:
    """Threshold levels a_0..a_T with a_0 = -inf and a_T = +inf.

    Quantile schedules take the ceil(gamma(t/T)*|E|)-th order statistic of the
    weights; the DFS schedule is affine in the ordering values from 2 to n.
    """
    t_steps = config.steps
    if config.schedule == "dfs_linear":
        n = int(max(weights.values.values()))
        levels = [2.0 + (t - 1) * (n - 2.0) / (t_steps - 1) for t in range(1, t_steps)]
        return (-math.inf, *levels, math.inf)
    order = sorted(weights.values.values())
    m = len(order)
    levels = []
    for t in range(1, t_steps):
        quota = math.ceil(gamma(config.schedule, t / t_steps) * m - 1e-12)
        levels.append(order[quota - 1] if quota > 0 else -math.inf)
    return (-math.inf, *levels, math.inf)


def build_filtration(
    g: Graph,
    config: FiltrationConfig,
    rng: np.random.Generator | None = None,
    ordering: NodeOrdering | None = None,
    graph_id: int | None = None,
) -> FiltrationSequence:
    """Sub-level edge sets E_t = {e : f(e) <= a_t} for one connected graph.

    For the DFS function an ordering is drawn from rng when not supplied
    (random root, random neighbor order), and E_t provably equals the induced
    edge set of the ordering prefix cut at a_t.
    """
    if config.function == "dfs" and ordering is None:
        rng = np.random.default_rng(config.seed) if rng is None else rng
        root = int(rng.integers(1, g.n + 1))
        ordering = dfs_ordering(g, root, rng)
    weights = edge_weights(g, config.function, aux=ordering)
    levels = thresholds(weights, config)
    edge_sets = []
    for a in levels:
        edge_sets.append(tuple(e for e in g.edges if weights.values[e] <= a))
    seq = FiltrationSequence(g.n, tuple(edge_sets), levels, config, graph_id, ordering)
    assert seq.edge_sets[0] == ()
    assert seq.edge_sets[-1] == g.edges
    return seq


def lambda_schedule(
    t_steps: int, first: float = LAMBDA_FIRST, last: float = LAMBDA_LAST
) -> tuple[float, ...]:
    """Affine noise levels for t = 0..T; endpoints are never noised (0.0)."""
    if t_steps < 2:
        raise ValueError("steps must be >= 2")
    lams = [0.0] * (t_steps + 1)
    if t_steps == 2:
        return tuple(lams)
    for t in range(1, t_steps):
        frac = (t - 1) / (t_steps - 2)
        lams[t] = first + frac * (last - first)
    return tuple(lams)


def noise_augment(
    seq: FiltrationSequence, lambdas: tuple[float, ...], rng: np.random.Generator
) -> NoisySequence:
    """Independently resample every pair of each interior step.

    A pair is included with probability (1-lam)+lam*rho when it is in E_t and
    lam*rho otherwise, where rho = |E_t| / C(n,2); the expected edge count of
    every step is therefore exactly |E_t|. Steps 0 and T are copied verbatim.
    """
    if len(lambdas) != seq.steps + 1:
        raise ValueError("need one lambda per step 0..T")
    if any(not 0.0 <= l <= 1.0 for l in lambdas):
        raise ValueError("lambdas must lie in [0,1]")
    n = seq.n
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    total = len(pairs)
    out = [seq.edge_sets[0]]
    for t in range(1, seq.steps):
        lam = lambdas[t]
        if lam == 0.0 or total == 0:
            out.append(seq.edge_sets[t])
            continue
        members = frozenset(seq.edge_sets[t])
        rho = len(members) / total
        inside = np.fromiter((p in members for p in pairs), dtype=bool, count=total)
        prob = np.where(inside, (1.0 - lam) + lam * rho, lam * rho)
        draw = rng.random(total) < prob
        out.append(tuple(p for p, keep in zip(pairs, draw) if keep))
    out.append(seq.edge_sets[-1])
    return NoisySequence(n, tuple(out), tuple(lambdas), seq.graph_id)


def derived_node_ordering(
    g: Graph,
    weights: EdgeWeights,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> NodeOrdering:
    """Rank nodes by mean incident edge weight, largest first, ties by node id.

    With sigma > 0 Gaussian jitter is added to the node weights before sorting,
    which yields varying orderings across calls (small-dataset augmentation).
    """
    if not is_connected(g):
        raise ValueError("ordering requires a connected graph")
    h = np.zeros(g.n)
    for v in range(1, g.n + 1):
        inc = [weights.values[(min(v, w), max(v, w))] for w in g.neighbors[v - 1]]
        h[v - 1] = float(np.mean(inc))
    if sigma > 0.0:
        if rng is None:
            raise ValueError("jitter requires an rng")
        h = h + rng.normal(0.0, sigma, g.n)
    order = sorted(range(1, g.n + 1), key=lambda v: (-h[v - 1], v))
    rank = [0] * g.n
    for pos, v in enumerate(order, start=1):
        rank[v - 1] = pos
    return NodeOrdering(tuple(rank))
