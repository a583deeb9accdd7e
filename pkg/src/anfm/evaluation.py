"""Sample-quality metrics: descriptor MMDs, VUN rates, estimator studies,
and sampling throughput benchmarks.

Descriptor and kernel conventions follow the common graph-generation
evaluation stack: degree / clustering / Laplacian-spectrum histograms
compared under a Gaussian kernel over total-variation distance, and mean
graphlet-orbit counts (all orbits of connected subgraphs on up to four
nodes) under a plain Gaussian RBF. Bandwidths and bin counts are surfaced
in every result for auditability.
"""
from __future__ import annotations

import dataclasses
import statistics
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np

from anfm.data import valid
from anfm.graphs import Graph, wl_hash
from anfm.model import ModelConfig, sample
from anfm.spectral import sym_normalized_laplacian

KINDS = ("degree", "clustering", "orbit", "spectral")
CLUSTERING_BINS = 100
SPECTRAL_BINS = 200
ORBITS = 15


# -------------------------------------------------------------- descriptors


def degree_histogram(g: Graph) -> np.ndarray:
    """Normalized degree histogram; length adapts to the graph's max degree."""
    deg = g.adjacency.sum(axis=1).astype(np.int64)
    return np.bincount(deg).astype(np.float64) / g.n


def clustering_histogram(g: Graph) -> np.ndarray:
    a = g.adjacency.astype(np.float64)
    deg = a.sum(axis=1)
    triangles = np.diag(a @ a @ a) / 2.0
    pairs = deg * (deg - 1.0) / 2.0
    coef = np.divide(triangles, pairs, out=np.zeros(g.n), where=pairs > 0)
    hist, _ = np.histogram(coef, bins=CLUSTERING_BINS, range=(0.0, 1.0))
    return hist.astype(np.float64) / g.n


def spectral_histogram(g: Graph) -> np.ndarray:
    eigs = np.linalg.eigvalsh(sym_normalized_laplacian(g))
    # the spectrum lies in [0, 2]; clip roundoff so no mass leaks off-range
    hist, _ = np.histogram(np.clip(eigs, 0.0, 2.0), bins=SPECTRAL_BINS, range=(0.0, 2.0))
    return hist.astype(np.float64) / g.n


def orbit_node_counts(g: Graph) -> np.ndarray:
    """Per-node counts of the 15 automorphism orbits of connected graphlets
    on 2-4 nodes, by exhaustive induced-subgraph enumeration."""
    n = g.n
    counts = np.zeros((n, ORBITS), dtype=np.int64)
    a = g.adjacency.astype(np.int64).tolist()
    counts[:, 0] = g.adjacency.sum(axis=1)
    for i, j, k in combinations(range(n), 3):
        m = a[i][j] + a[i][k] + a[j][k]
        if m == 3:
            counts[[i, j, k], 3] += 1
        elif m == 2:
            if a[i][j] and a[i][k]:
                mid, ends = i, (j, k)
            elif a[i][j] and a[j][k]:
                mid, ends = j, (i, k)
            else:
                mid, ends = k, (i, j)
            counts[mid, 2] += 1
            counts[list(ends), 1] += 1
    for q in combinations(range(n), 4):
        i, j, k, l = q
        e = (a[i][j], a[i][k], a[i][l], a[j][k], a[j][l], a[k][l])
        m = sum(e)
        if m < 3:
            continue
        degs = (e[0] + e[1] + e[2], e[0] + e[3] + e[4],
                e[1] + e[3] + e[5], e[2] + e[4] + e[5])
        if m == 3:
            if 0 in degs:
                continue  # triangle plus an isolated node
            hub, leaf = (7, 6) if 3 in degs else (5, 4)
            for t, d in zip(q, degs):
                counts[t, hub if d >= 2 else leaf] += 1
        elif m == 4:
            if max(degs) == 2:
                counts[list(q), 8] += 1
            else:
                for t, d in zip(q, degs):  # triangle with a pendant edge
                    counts[t, (9, 10, 11)[d - 1]] += 1
        elif m == 5:
            for t, d in zip(q, degs):
                counts[t, 12 if d == 2 else 13] += 1
        else:
            counts[list(q), 14] += 1
    return counts


def orbit_means(g: Graph) -> np.ndarray:
    return orbit_node_counts(g).mean(axis=0)


_DESCRIPTORS = {
    "degree": degree_histogram,
    "clustering": clustering_histogram,
    "orbit": orbit_means,
    "spectral": spectral_histogram,
}


def descriptor(g: Graph, kind: str) -> np.ndarray:
    if kind not in _DESCRIPTORS:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    return _DESCRIPTORS[kind](g)


def descriptor_set(graphs, kind: str) -> list[np.ndarray]:
    return [descriptor(g, kind) for g in graphs]


# ------------------------------------------------------------------ kernels


@dataclass(frozen=True)
class Kernel:
    form: str      # "gaussian_tv" or "gaussian_rbf"
    sigma: float

    def __post_init__(self):
        if self.form not in ("gaussian_tv", "gaussian_rbf"):
            raise ValueError(f"unknown kernel form {self.form!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def spec(self) -> str:
        return f"{self.form}:sigma={self.sigma}"


KERNELS = {
    "degree": Kernel("gaussian_tv", 1.0),
    "clustering": Kernel("gaussian_tv", 0.1),
    "orbit": Kernel("gaussian_rbf", 30.0),
    "spectral": Kernel("gaussian_tv", 1.0),
}


def _pad_stack(vectors, width: int) -> np.ndarray:
    out = np.zeros((len(vectors), width))
    for i, v in enumerate(vectors):
        out[i, : len(v)] = v
    return out


def kernel_value(kernel: Kernel, x: np.ndarray, y: np.ndarray) -> float:
    """Scalar kernel between two descriptor vectors, padding to align."""
    w = max(len(x), len(y))
    xp, yp = np.zeros(w), np.zeros(w)
    xp[: len(x)], yp[: len(y)] = x, y
    if kernel.form == "gaussian_tv":
        d = 0.5 * np.abs(xp - yp).sum()
        return float(np.exp(-(d * d) / (2.0 * kernel.sigma**2)))
    d2 = float(((xp - yp) ** 2).sum())
    return float(np.exp(-d2 / (2.0 * kernel.sigma**2)))


def _gram(kernel: Kernel, ax: np.ndarray, ay: np.ndarray) -> np.ndarray:
    rows = np.empty((ax.shape[0], ay.shape[0]))
    for i in range(ax.shape[0]):
        diff = ax[i][None, :] - ay
        if kernel.form == "gaussian_tv":
            d = 0.5 * np.abs(diff).sum(axis=1)
            rows[i] = np.exp(-(d * d) / (2.0 * kernel.sigma**2))
        else:
            rows[i] = np.exp(-(diff * diff).sum(axis=1) / (2.0 * kernel.sigma**2))
    return rows


class MmdResult(NamedTuple):
    value: float
    kernel: str
    n: int
    m: int


def mmd2(X, Y, kernel: Kernel) -> MmdResult:
    """Biased squared-MMD V-statistic: mean k(x,x') + mean k(y,y')
    - 2 mean k(x,y). Identical sets give exactly zero."""
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("descriptor sets must be nonempty")
    width = max(max(len(v) for v in X), max(len(v) for v in Y))
    ax, ay = _pad_stack(X, width), _pad_stack(Y, width)
    value = (float(_gram(kernel, ax, ax).mean())
             + float(_gram(kernel, ay, ay).mean())
             - 2.0 * float(_gram(kernel, ax, ay).mean()))
    return MmdResult(value, kernel.spec, len(X), len(Y))


def descriptor_mmd(x_graphs, y_graphs, kind: str) -> MmdResult:
    return mmd2(descriptor_set(x_graphs, kind), descriptor_set(y_graphs, kind),
                KERNELS[kind])


# ------------------------------------------------------------- VUN metrics


class VunResult(NamedTuple):
    valid: float
    unique: float
    novel: float
    vun: float
    std: float
    n: int


def estimator_std(p: float, n: int) -> float:
    """Closed-form standard deviation of a Bernoulli fraction estimate."""
    return float(np.sqrt(p * (1.0 - p) / n))


def vun(samples, train_graphs, family: str, params=None) -> VunResult:
    """Valid, unique, and novel fractions plus their conjunction.

    Uniqueness dedups samples by WL hash (a duplicated sample counts zero
    both times); novelty is WL-hash absence from the training set. Both are
    relabeling-invariant because the hash is.
    """
    if len(samples) == 0:
        raise ValueError("no samples")
    hashes = [wl_hash(g) for g in samples]
    seen: dict = {}
    for h in hashes:
        seen[h] = seen.get(h, 0) + 1
    train_hashes = {wl_hash(g) for g in train_graphs}
    flags_v = np.array([valid(g, family, params) for g in samples])
    flags_u = np.array([seen[h] == 1 for h in hashes])
    flags_n = np.array([h not in train_hashes for h in hashes])
    joint = float((flags_v & flags_u & flags_n).mean())
    return VunResult(float(flags_v.mean()), float(flags_u.mean()),
                     float(flags_n.mean()), joint,
                     estimator_std(joint, len(samples)), len(samples))


# -------------------------------------------------- subsampling error study


def estimator_study(samples, test_graphs, sizes, repeats: int = 64,
                    seed: int = 0, kinds=KINDS) -> dict:
    """Mean and std of descriptor MMDs against a fixed test set when the
    sample pool is subsampled without replacement at each size."""
    sizes = tuple(int(s) for s in sizes)
    if min(sizes) < 1:
        raise ValueError("sizes must be positive")
    if max(sizes) > len(samples):
        raise ValueError(
            f"insufficient samples: largest size {max(sizes)} exceeds pool {len(samples)}"
        )
    rng = np.random.default_rng(seed)
    out: dict = {}
    for kind in kinds:
        pool = descriptor_set(samples, kind)
        ref = descriptor_set(test_graphs, kind)
        kernel = KERNELS[kind]
        means, stds = [], []
        for size in sizes:
            values = []
            for _ in range(repeats):
                # sorted for bit-stable kernel sums: subsamples are sets
                idx = np.sort(rng.choice(len(pool), size=size, replace=False))
                values.append(mmd2([pool[i] for i in idx], ref, kernel).value)
            means.append(float(np.mean(values)))
            stds.append(float(np.std(values)))
        out[kind] = {"sizes": list(sizes), "mean": means, "std": stds,
                     "kernel": kernel.spec, "repeats": repeats}
    return out


# --------------------------------------------------------------- baselines


def er_reference(train_graphs, count: int, rng: np.random.Generator):
    """Erdos-Renyi sampler density-matched to a training set: sizes drawn
    from the empirical size distribution, edge probability set to the mean
    training density."""
    sizes = np.array([g.n for g in train_graphs])
    dens = [2.0 * len(g.edges) / (g.n * (g.n - 1)) for g in train_graphs if g.n > 1]
    p = float(np.mean(dens))
    out = []
    for _ in range(count):
        n = int(rng.choice(sizes))
        edges = [(u, v) for u in range(1, n + 1) for v in range(u + 1, n + 1)
                 if rng.random() < p]
        out.append(Graph(n, edges))
    return out


# ------------------------------------------------------------- throughput


@dataclass(frozen=True)
class BenchPoint:
    steps: int
    median: float
    mad: float


def bench_sampling(params, config: ModelConfig, n: int, t_list,
                   rollouts: int = 3, rng: np.random.Generator | None = None):
    """Median and MAD wall-clock time per sampled graph at each step count,
    with one unmeasured warmup rollout per configuration."""
    if rollouts < 3:
        raise ValueError("need at least 3 rollouts per point")
    rng = rng if rng is not None else np.random.default_rng(0)
    points = []
    for t in t_list:
        cfg = dataclasses.replace(config, steps=int(t))
        sample(params, cfg, n, rng)  # warmup
        times = [sample(params, cfg, n, rng).duration for _ in range(rollouts)]
        med = statistics.median(times)
        mad = statistics.median(abs(x - med) for x in times)
        points.append(BenchPoint(int(t), med, mad))
    return points


def quadratic_fit(points) -> tuple[float, float, float]:
    """Least-squares a + b*T + c*T^2 through bench points."""
    t = np.array([p.steps for p in points], dtype=np.float64)
    y = np.array([p.median for p in points])
    basis = np.stack([np.ones_like(t), t, t * t], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return float(coef[0]), float(coef[1]), float(coef[2])
