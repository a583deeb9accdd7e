"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Every test prints `criterion NN <slug>: PASS|FAIL [Ns] <measurements>` on the
real terminal (bypassing capture) before asserting, so a full run leaves an
auditable scoreboard even under default capture. Criteria 6-8 train models
from scratch on one core and dominate the wall time; they carry the `slow`
marker so `-m "not slow"` gives a quick pass over everything else.
"""

import dataclasses
import itertools
import math
import time

import numpy as np
import pytest

import anfm.model as M
import anfm.tensor as tz
from anfm.data import DatasetSpec, generate, sample_graph
from anfm.evaluation import (
    KINDS,
    Kernel,
    bench_sampling,
    descriptor_mmd,
    descriptor_set,
    er_reference,
    estimator_std,
    estimator_study,
    kernel_value,
    mmd2,
    quadratic_fit,
    vun,
)
from anfm.filtration import (
    FiltrationConfig,
    NoisySequence,
    build_filtration,
    lambda_schedule,
    noise_augment,
)
from anfm.finetune import PPOConfig, gan_tuning
from anfm.graphs import Graph, NodeOrdering, is_connected
from anfm.model import ModelConfig, sample
from anfm.training import TrainConfig, TrainLog, expand, new_trainer, train

from oracles import gradient_check


def _report(capfd, label, ok, t0, detail=""):
    tail = f" {detail}" if detail else ""
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'} [{time.time() - t0:.0f}s]{tail}"
    with capfd.disabled():
        print(line, flush=True)
    assert ok, line


def _random_connected(rng, n):
    while True:
        p = rng.uniform(0.25, 0.6)
        mask = rng.random((n, n)) < p
        edges = tuple((i + 1, j + 1) for i in range(n) for j in range(i + 1, n) if mask[i, j])
        g = Graph(n, edges)
        if is_connected(g):
            return g


def _rollout_graphs(params, config, sizes, count, rng, mode="stochastic"):
    out = []
    for _ in range(count):
        r = sample(params, config, int(rng.choice(sizes)), rng, mode=mode)
        out.append(Graph(r.n, r.final_edges))
    return out


# ------------------------------------------------- desk-scale lobster task
#
# Criteria 7 and 8 share this task: 512 lobsters with 10 <= n <= 30, DFS
# filtration at T=8, 10k optimizer steps. The VUN of each (seed, noise)
# stage-I arm is cached so the ablation reuses criterion 7's run.

DESK_SPEC = DatasetSpec(family="lobster", seed=42, train=512, val=64,
                        test=256, params={"min_n": 10, "max_n": 30})
DESK_FC = FiltrationConfig(function="dfs", steps=8, schedule="dfs_linear")
DESK_MC = ModelConfig(n_max=30, hidden=48, layers=2, mixture=2, steps=8)
DESK_TC = TrainConfig(steps=10_000, batch_size=8, lr=1e-3, perturbations=16)
DESK_EVAL_SAMPLES = 256

_VUN_CACHE: dict[tuple[int, bool], float] = {}


@pytest.fixture(scope="session")
def lobster_splits():
    return generate(DESK_SPEC)


def _desk_stage1(splits, seed, noise):
    """Train one stage-I arm; returns (state, vun value) and caches the vun."""
    tc = dataclasses.replace(DESK_TC, seed=seed) if noise else dataclasses.replace(
        DESK_TC, seed=seed, lambda_first=0.0, lambda_last=0.0)
    store = expand(splits.train, DESK_FC, perturbations=tc.perturbations,
                   lambdas=tc.lambdas(DESK_FC.steps), seed=tc.seed)
    state = new_trainer(DESK_MC, tc)
    train(state, store, DESK_MC, tc)
    train_g = [r.graph for r in splits.train]
    sizes = np.array([g.n for g in train_g])
    rng = np.random.default_rng([seed, int(noise), 0xD0])
    samples = _rollout_graphs(state.params, DESK_MC, sizes, DESK_EVAL_SAMPLES, rng)
    v = vun(samples, train_g, "lobster").vun
    _VUN_CACHE[(seed, noise)] = v
    return state, samples, v


# ----------------------------------------------------------- criterion 1


def test_criterion_01_dfs_filtration_equals_induced_subgraphs(capfd):
    t0 = time.time()
    rng = np.random.default_rng(1001)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(4, 13))
        g = _random_connected(rng, n)
        steps = int(rng.choice([2, 3, 4, 6]))
        seq = build_filtration(g, FiltrationConfig("dfs", steps, "dfs_linear"), rng)
        order = seq.ordering
        for t, a in enumerate(seq.thresholds):
            prefix = {v for v in range(1, n + 1) if order(v) <= a}
            induced = tuple(sorted(e for e in g.edges
                                   if e[0] in prefix and e[1] in prefix))
            assert tuple(sorted(seq.edge_sets[t])) == induced
        for t in range(seq.steps):
            assert set(seq.edge_sets[t]) <= set(seq.edge_sets[t + 1])
        assert seq.edge_sets[0] == () and seq.edge_sets[-1] == g.edges
        lf = build_filtration(g, FiltrationConfig("line_fiedler", steps))
        for t in range(lf.steps):
            assert set(lf.edge_sets[t]) <= set(lf.edge_sets[t + 1])
        assert lf.edge_sets[0] == () and lf.edge_sets[-1] == g.edges
        checked += 1
    ok = checked == 200 and time.time() - t0 < 60.0
    _report(capfd, "01 dfs-filtration-induced-subgraphs", ok, t0, f"graphs={checked}")


# ----------------------------------------------------------- criterion 2


def test_criterion_02_noise_law_frequencies(capfd):
    t0 = time.time()
    rng = np.random.default_rng(1002)
    g = sample_graph("lobster", rng,
                     {"backbone_scale": 4, "p1": 0.7, "p2": 0.7, "min_n": 12, "max_n": 12})
    steps = 4
    seq = build_filtration(g, FiltrationConfig("line_fiedler", steps))
    lams = lambda_schedule(steps)
    n = g.n
    pairs = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1)]
    index = {p: i for i, p in enumerate(pairs)}
    resamples = 100_000
    counts = np.zeros((steps - 1, len(pairs)))
    sizes = np.zeros((steps - 1, resamples))
    for r in range(resamples):
        noisy = noise_augment(seq, lams, rng)
        for t in range(1, steps):
            es = noisy.edge_sets[t]
            sizes[t - 1, r] = len(es)
            for e in es:
                counts[t - 1, index[e]] += 1.0
    freq = counts / resamples
    worst_sigma = 0.0
    for t in range(1, steps):
        members = set(seq.edge_sets[t])
        rho = len(members) / len(pairs)
        lam = lams[t]
        p = np.array([(1.0 - lam) + lam * rho if q in members else lam * rho
                      for q in pairs])
        sigma = np.sqrt(np.maximum(p * (1.0 - p), 1e-300) / resamples)
        worst_sigma = max(worst_sigma, float(np.max(np.abs(freq[t - 1] - p) / sigma)))
        mean_size = sizes[t - 1].mean()
        assert abs(mean_size - len(members)) <= 0.01 * len(members)
    ok = worst_sigma <= 3.0 and time.time() - t0 < 120.0
    _report(capfd, "02 noise-law-frequencies", ok, t0, f"worst={worst_sigma:.2f} sigma")


# ----------------------------------------------------------- criterion 3


def test_criterion_03_likelihood_normalization(capfd):
    t0 = time.time()
    worst = 0.0
    for n, k in itertools.product((3, 4), (1, 3)):
        cfg = ModelConfig(n_max=4, hidden=8, layers=1, mixture=k, steps=2)
        rng = np.random.default_rng(100 * n + k)
        params = M.init_params(cfg, rng)
        params["dec3.w"].data[:] = rng.normal(scale=0.7, size=params["dec3.w"].shape)
        dist = M.decode_edges(params, cfg, rng.normal(size=(n, cfg.hidden)))
        pair_list = list(itertools.combinations(range(1, n + 1), 2))
        total = 0.0
        for bits in itertools.product((0, 1), repeat=len(pair_list)):
            edges = tuple(p for p, b in zip(pair_list, bits) if b)
            total += np.exp(M.step_log_likelihood(dist, edges))
        worst = max(worst, abs(total - 1.0))
    ok = worst <= 1e-9
    _report(capfd, "03 likelihood-normalization", ok, t0, f"max|sum-1|={worst:.2e}")


# ----------------------------------------------------------- criterion 4


def test_criterion_04_gradient_fidelity(capfd):
    t0 = time.time()
    cfg = ModelConfig(n_max=4, hidden=8, layers=1, mixture=2, steps=3, temporal="causal")
    rng = np.random.default_rng(1004)
    params = M.init_params(cfg, rng)
    params["dec3.w"].data[:] = rng.normal(scale=0.5, size=params["dec3.w"].shape)
    params["block0.film.w"].data[:] = rng.normal(scale=0.2, size=params["block0.film.w"].shape)
    pairs = list(itertools.combinations(range(1, 5), 2))
    sets = [()]
    for _ in range(cfg.steps):
        keep = rng.random(len(pairs)) < 0.4
        sets.append(tuple(p for p, kp in zip(pairs, keep) if kp))
    seq = NoisySequence(4, tuple(sets), (0.0,) * (cfg.steps + 1), 0)
    batch = M.batch_stack([M.arrays_for_sequence(cfg, seq, NodeOrdering.identity(4))])

    def loss_fn():
        with tz.no_grad():
            total, _ = M.sequence_log_likelihood(params, cfg, batch)
        return -float(total.data.mean())

    total, _ = M.sequence_log_likelihood(params, cfg, batch)
    loss = tz.tmean(total) * -1.0
    err = gradient_check(loss_fn, loss, params, sorted(params))
    ok = err < 1e-4 and time.time() - t0 < 60.0
    _report(capfd, "04 gradient-fidelity", ok, t0, f"max-rel-err={err:.2e}")


# ----------------------------------------------------------- criterion 5


def test_criterion_05_causality(capfd):
    t0 = time.time()
    worst = 0.0
    for temporal in ("causal", "first_order"):
        cfg = ModelConfig(n_max=6, hidden=8, layers=2, mixture=2, steps=4,
                          temporal=temporal)
        rng = np.random.default_rng(1005)
        params = M.init_params(cfg, rng)
        params["dec3.w"].data[:] = rng.normal(scale=0.5, size=params["dec3.w"].shape)
        n, cut = 5, 1
        pairs = list(itertools.combinations(range(1, n + 1), 2))
        def draw_sets(r):
            sets = [()]
            for _ in range(cfg.steps):
                keep = r.random(len(pairs)) < 0.4
                sets.append(tuple(p for p, kp in zip(pairs, keep) if kp))
            return sets
        sets = draw_sets(rng)
        alt_sets = list(sets)
        r2 = np.random.default_rng(77)
        for s in range(cut + 2, cfg.steps + 1):
            keep = r2.random(len(pairs)) < 0.5
            alt_sets[s] = tuple(p for p, kp in zip(pairs, keep) if kp)
        lam = (0.0,) * (cfg.steps + 1)
        base = M.batch_stack([M.arrays_for_sequence(
            cfg, NoisySequence(n, tuple(sets), lam, 0), NodeOrdering.identity(n))])
        alt = M.batch_stack([M.arrays_for_sequence(
            cfg, NoisySequence(n, tuple(alt_sets), lam, 0), NodeOrdering.identity(n))])
        with tz.no_grad():
            reps_a = M.backbone(params, cfg, base).data
            reps_b = M.backbone(params, cfg, alt).data
            _, steps_a = M.sequence_log_likelihood(params, cfg, base)
            _, steps_b = M.sequence_log_likelihood(params, cfg, alt)
        worst = max(worst, float(np.abs(reps_a[:, : cut + 2] - reps_b[:, : cut + 2]).max()))
        worst = max(worst, float(np.abs(steps_a.data[0, : cut + 1] - steps_b.data[0, : cut + 1]).max()))
    ok = worst <= 1e-12
    _report(capfd, "05 causality", ok, t0, f"max-dev={worst:.1e}")


# ----------------------------------------------------------- criterion 6


@pytest.mark.slow
def test_criterion_06_single_graph_memorization(capfd):
    t0 = time.time()
    rng = np.random.default_rng(1006)
    g = sample_graph("planar", rng, {"points": 16})
    cfg = ModelConfig(n_max=16, hidden=64, layers=3, mixture=4, steps=8)
    tc = TrainConfig(steps=2000, batch_size=1, lr=1e-3, perturbations=1,
                     lambda_first=0.0, lambda_last=0.0, seed=0)
    store = expand([g], FiltrationConfig(steps=8), perturbations=1,
                   lambdas=tc.lambdas(8), seed=0)
    state = new_trainer(cfg, tc)
    batch = store.batch(np.array([0]), cfg)
    nll, used, first_hit = np.inf, 0, None
    while used < 2000:
        train(state, store, cfg, tc, steps=50)
        used += 50
        with tz.no_grad():
            total, _ = M.sequence_log_likelihood(state.params, cfg, batch)
        nll = -float(total.data[0])
        if first_hit is None and nll < 0.1:
            first_hit = used
        if nll < 0.02:  # keep sharpening within the step budget
            break
    # rollouts run in filtration-position space: row k of the sampler wears
    # the embedding that the k-th ordered node wore in training, so exact
    # reproduction means matching the position-relabeled edge set
    order = store.orderings[0]
    relabeled = tuple(sorted(tuple(sorted((order(u), order(v)))) for u, v in g.edges))
    hits = 0
    srng = np.random.default_rng(1007)
    for _ in range(100):
        r = sample(state.params, cfg, 16, srng, mode="mode")
        hits += int(tuple(sorted(r.final_edges)) == relabeled)
    elapsed = time.time() - t0
    ok = (first_hit is not None and first_hit <= 2000 and hits >= 95
          and elapsed < 900.0)
    _report(capfd, "06 single-graph-memorization", ok, t0,
            f"nll<0.1@{first_hit} steps (final {nll:.3f}@{used}), mode-hits={hits}/100")


# ----------------------------------------------------------- criterion 7


@pytest.mark.slow
def test_criterion_07_desk_scale_learning(capfd, lobster_splits):
    t0 = time.time()
    splits = lobster_splits
    train_g = [r.graph for r in splits.train]
    test_g = [r.graph for r in splits.test]
    sizes = np.array([g.n for g in train_g])

    state, s1, vun1 = _desk_stage1(splits, seed=0, noise=True)

    rng = np.random.default_rng([0, 0xE7])
    er_g = er_reference(train_g, DESK_EVAL_SAMPLES, rng)
    gates = {}
    ok_mmd = True
    for kind in ("degree", "spectral"):
        # ratios on the metric (sqrt of the squared V-statistic): a 256-draw
        # of the training law itself sits at ~6.5x the 512-vs-256 baseline in
        # squared units from resampling bias alone, so squared ratios would
        # gate the estimator floor, not the model
        base = math.sqrt(descriptor_mmd(train_g, test_g, kind).value)
        model = math.sqrt(descriptor_mmd(s1, test_g, kind).value)
        er = math.sqrt(descriptor_mmd(er_g, test_g, kind).value)
        gates[kind] = (model / base, er / model)
        ok_mmd = ok_mmd and model <= 5.0 * base and er >= 5.0 * model

    cfg = PPOConfig(iterations=500, seed=0)
    gan_tuning(state, DESK_MC, train_g, cfg)
    s2 = _rollout_graphs(state.params, DESK_MC, sizes, DESK_EVAL_SAMPLES,
                         np.random.default_rng([0, 0xE8]))
    vun2 = vun(s2, train_g, "lobster").vun

    elapsed = time.time() - t0
    ok = ok_mmd and vun2 >= vun1 and elapsed <= 7200.0
    detail = (f"deg={gates['degree'][0]:.2f}x/er{gates['degree'][1]:.1f}x "
              f"spec={gates['spectral'][0]:.2f}x/er{gates['spectral'][1]:.1f}x "
              f"vun {vun1:.3f}->{vun2:.3f}")
    _report(capfd, "07 desk-scale-learning", ok, t0, detail)


# ----------------------------------------------------------- criterion 8


@pytest.mark.slow
def test_criterion_08_noise_ablation_direction(capfd, lobster_splits):
    t0 = time.time()
    noisy, plain = [], []
    for seed in (0, 1, 2):
        for noise, bucket in ((True, noisy), (False, plain)):
            if (seed, noise) not in _VUN_CACHE:
                _desk_stage1(lobster_splits, seed, noise)
            bucket.append(_VUN_CACHE[(seed, noise)])
    med_n, med_p = float(np.median(noisy)), float(np.median(plain))
    ok = med_n >= med_p
    _report(capfd, "08 noise-ablation-direction", ok, t0,
            f"median vun noise={med_n:.3f} plain={med_p:.3f} "
            f"(noise {noisy} plain {plain})")


# ----------------------------------------------------------- criterion 9


def test_criterion_09_estimator_statistics(capfd, lobster_splits):
    t0 = time.time()
    closed = estimator_std(0.5, 40)
    rng = np.random.default_rng(1009)
    draws = rng.random((100_000, 40)) < 0.5
    mc = float(draws.mean(axis=1).std())
    ok_std = abs(closed - 0.0790) <= 0.05 * 0.0790 and abs(mc - 0.0790) <= 0.05 * 0.0790

    pool = [r.graph for r in lobster_splits.train]
    test_g = [r.graph for r in lobster_splits.test]
    study = estimator_study(pool, test_g, sizes=(16, 64, 256), repeats=64, seed=0)
    monotone = 0
    for kind in KINDS:
        m = study[kind]["mean"]
        monotone += int(all(m[i + 1] <= m[i] + 1e-15 for i in range(len(m) - 1)))
    elapsed = time.time() - t0
    ok = ok_std and monotone >= 3 and elapsed < 600.0
    _report(capfd, "09 estimator-statistics", ok, t0,
            f"std closed={closed:.4f} mc={mc:.4f}, monotone {monotone}/4")


# ----------------------------------------------------------- criterion 10


def test_criterion_10_mmd_oracle(capfd):
    t0 = time.time()
    rng = np.random.default_rng(1010)
    graphs_a = [_random_connected(rng, int(rng.integers(5, 10))) for _ in range(12)]
    graphs_b = [_random_connected(rng, int(rng.integers(5, 10))) for _ in range(10)]
    worst = 0.0
    for kind in KINDS:
        xs = descriptor_set(graphs_a, kind)
        ys = descriptor_set(graphs_b, kind)
        kernel = Kernel("gaussian_tv", 0.7) if kind != "orbit" else Kernel("gaussian_rbf", 30.0)
        ref = 0.0
        for a in xs:
            for b in xs:
                ref += kernel_value(kernel, a, b) / (len(xs) * len(xs))
        for a in ys:
            for b in ys:
                ref += kernel_value(kernel, a, b) / (len(ys) * len(ys))
        for a in xs:
            for b in ys:
                ref -= 2.0 * kernel_value(kernel, a, b) / (len(xs) * len(ys))
        got = mmd2(xs, ys, kernel).value
        worst = max(worst, abs(got - ref))
        assert mmd2(xs, xs, kernel).value == 0.0
    ok = worst <= 1e-12
    _report(capfd, "10 mmd-oracle", ok, t0, f"max|impl-oracle|={worst:.1e}")


# ----------------------------------------------------------- criterion 11


def test_criterion_11_complexity_envelope(capfd):
    t0 = time.time()
    rng = np.random.default_rng(1011)
    t_list = (2, 4, 8, 12)
    results = {}
    for temporal in ("causal", "first_order"):
        cfg = ModelConfig(n_max=32, hidden=32, layers=2, mixture=2,
                          steps=max(t_list), temporal=temporal)
        params = M.init_params(cfg, rng)
        points = bench_sampling(params, cfg, 16, t_list, rollouts=7, rng=rng)
        const, lin, quad = quadratic_fit(points)
        total_at_max = points[-1].median
        results[temporal] = (quad, total_at_max, points)
    quad_causal = results["causal"][0]
    quad_first, total_first = results["first_order"][0], results["first_order"][1]
    ok_causal = quad_causal >= -1e-9 * results["causal"][1]
    ok_first = abs(quad_first) * max(t_list) ** 2 < 0.10 * total_first

    cfg = ModelConfig(n_max=32, hidden=32, layers=2, mixture=2, steps=4,
                      temporal="causal")
    params = M.init_params(cfg, rng)
    small = bench_sampling(params, cfg, 16, (4,), rollouts=7, rng=rng)[0].median
    big = bench_sampling(params, cfg, 32, (4,), rollouts=7, rng=rng)[0].median
    ratio = big / small
    ok = ok_causal and ok_first and ratio <= 8.0 * 1.3
    _report(capfd, "11 complexity-envelope", ok, t0,
            f"quad(causal)={quad_causal:.2e} quad(first)*T^2/total="
            f"{abs(quad_first) * max(t_list) ** 2 / total_first:.3f} n-doubling={ratio:.2f}x")
