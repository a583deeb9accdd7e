"""Adversarial fine-tuning: rewards, discriminator, value model, PPO."""
import dataclasses
import math

import numpy as np
import pytest

import anfm.finetune as F
import anfm.tensor as tz
from anfm.data import sample_graph
from anfm.finetune import (
    DiscState,
    PPOConfig,
    RewardStats,
    disc_accuracy,
    disc_arrays,
    disc_bce,
    disc_forward,
    disc_logit,
    gan_tuning,
    load_gan_checkpoint,
    new_discriminator,
    new_value_model,
    ppo_surrogate,
    ppo_update,
    rewards_to_go,
    save_gan_checkpoint,
    terminal_reward,
    train_discriminator,
    train_value,
    value_forward,
)
from anfm.graphs import Graph, NodeOrdering
from anfm.model import (
    ModelConfig,
    arrays_for_sequence,
    batch_stack,
    init_params,
    sample,
    sequence_log_likelihood,
)
from anfm.training import TrainerState


def tiny_config(**kw):
    base = dict(n_max=8, hidden=8, layers=1, mixture=2, steps=3, temporal="causal")
    base.update(kw)
    return ModelConfig(**base)


def tiny_state(config, seed=0):
    params = init_params(config, np.random.default_rng(seed))
    names = tuple(sorted(params))
    return TrainerState(params, names, tz.AdamState.init([params[n] for n in names]),
                        np.random.default_rng(seed + 100))


def perturb(state, seed=1):
    # zero-init heads decode to p=1/2 everywhere; tests want a generic point
    rng = np.random.default_rng(seed)
    state.params["dec3.w"].data[:] = rng.normal(0.0, 0.5, state.params["dec3.w"].shape)
    return state


def lobster(rng, lo=6, hi=8):
    params = {"backbone_scale": 4, "p1": 0.7, "p2": 0.7, "min_n": lo, "max_n": hi}
    return sample_graph("lobster", rng, params)


def lobsters(count, rng, lo=6, hi=8):
    return [lobster(rng, lo, hi) for _ in range(count)]


def rollout_batch(state, config, ns, rng):
    rollouts = [sample(state.params, config, n, rng, graph_id=i) for i, n in enumerate(ns)]
    batch = batch_stack(
        [arrays_for_sequence(config, r, NodeOrdering.identity(r.n)) for r in rollouts]
    )
    return rollouts, batch, [Graph(r.n, r.final_edges) for r in rollouts]


# ------------------------------------------------------------------ rewards


def test_terminal_reward_examples(monkeypatch):
    disc = new_discriminator(hidden=4, layers=1)
    cases = {0.0: -math.log(2.0), -100.0: -10.0, 20.0: -math.log1p(math.exp(-20.0))}
    g = Graph(2, ((1, 2),))
    for logit, expected in cases.items():
        monkeypatch.setattr(F, "disc_logit", lambda p, gg, z=logit: z)
        assert terminal_reward(disc, g, floor=-10.0) == pytest.approx(expected, abs=1e-12)
    assert abs(F.log_sigmoid(20.0)) < 1e-8  # confident-real rewards vanish


def test_reward_stats_constant_stream_whitens_to_zero():
    stats = RewardStats(decay=0.99)
    for _ in range(5):
        stats.update([3.7, 3.7, 3.7])
        out = stats.whiten([3.7, 3.7])
        assert np.all(out == 0.0)


def test_reward_stats_bias_corrected_convergence():
    rng = np.random.default_rng(0)
    stats = RewardStats(decay=0.999)
    stats.update([2.25])
    # one sample: bias correction copies it bitwise
    assert stats.mean == 2.25 and stats.second == 2.25 * 2.25
    for _ in range(300):
        stats.update(rng.normal(2.0, 1.0, 64))
    whitened = stats.whiten(rng.normal(2.0, 1.0, 2000))
    assert abs(whitened.mean()) < 0.1
    assert abs(whitened.std() - 1.0) < 0.1


def test_reward_stats_whiten_requires_update():
    with pytest.raises(ValueError, match="update"):
        RewardStats().whiten([1.0])


def test_rewards_to_go_is_reward_minus_baseline():
    r = np.array([1.0, -2.0])
    v = np.array([[0.5, 0.25, 0.0], [0.0, -1.0, -2.0]])
    g = rewards_to_go(r, v)
    assert g.shape == (2, 3)
    assert np.array_equal(g, r[:, None] - v)
    assert np.all(rewards_to_go(r, np.broadcast_to(r[:, None], (2, 3))) == 0.0)


# ------------------------------------------------------------ discriminator


def test_disc_logit_is_permutation_invariant():
    rng = np.random.default_rng(3)
    disc = new_discriminator(hidden=16, layers=2, seed=1)
    g = lobster(rng, lo=8, hi=10)
    perm = rng.permutation(g.n) + 1
    relabel = {u: int(perm[u - 1]) for u in range(1, g.n + 1)}
    h = Graph(g.n, tuple(tuple(sorted((relabel[u], relabel[v]))) for u, v in g.edges))
    assert disc_logit(disc.params, g) == pytest.approx(disc_logit(disc.params, h), abs=1e-9)


def test_disc_logit_ignores_batch_padding():
    rng = np.random.default_rng(4)
    disc = new_discriminator(hidden=8, layers=2, seed=2)
    small, big = lobster(rng, lo=4, hi=5), lobster(rng, lo=8, hi=10)
    feats, adj, mask = disc_arrays([small, big])
    with tz.no_grad():
        padded = float(disc_forward(disc.params, feats, adj, mask).data[0])
    assert padded == pytest.approx(disc_logit(disc.params, small), abs=1e-12)


def test_identical_real_and_fake_floor_bce_at_ln2():
    # softplus(z) + softplus(-z) >= 2 ln 2 pointwise, so no discriminator
    # can score identical populations better than chance
    rng = np.random.default_rng(5)
    graphs = lobsters(6, rng)
    for seed in range(3):
        disc = new_discriminator(hidden=8, layers=1, seed=seed)
        labels = np.concatenate([np.ones(6), np.zeros(6)])
        loss = disc_bce(disc.params, graphs + graphs, labels)
        assert float(loss.data) >= math.log(2.0) - 1e-12


def test_discriminator_separates_untrained_generator_from_data():
    rng = np.random.default_rng(6)
    config = tiny_config(n_max=10)
    state = tiny_state(config)
    real = lobsters(32, rng, lo=6, hi=10)
    _, _, fake = rollout_batch(state, config, [int(rng.integers(6, 11)) for _ in range(32)], rng)
    disc = new_discriminator(hidden=32, layers=2, seed=0)
    losses = train_discriminator(disc, real, fake, steps=200, batch_per_side=8,
                                 lr=1e-3, rng=rng)
    assert losses[-1] < losses[0]
    assert disc_accuracy(disc, real, fake) > 0.9


# -------------------------------------------------------------- value model


def value_model_for(config, seed=0):
    return new_value_model(dataclasses.replace(config, hidden=8, layers=1, mixture=1),
                           seed=seed)


def test_value_model_starts_at_zero_and_fits_targets():
    rng = np.random.default_rng(7)
    config = tiny_config()
    state = perturb(tiny_state(config))
    value = value_model_for(config)
    _, batch, _ = rollout_batch(state, config, [5, 6, 7], rng)
    assert np.all(value_forward(value, batch).data == 0.0)
    targets = np.array([1.0, -0.5, 0.25])
    losses = train_value(value, batch, targets, steps=50, lr=3e-3)
    assert losses[-1] < 0.2 * losses[0]


def test_value_estimates_depend_only_on_the_prefix():
    rng = np.random.default_rng(8)
    config = tiny_config(steps=4)
    state = perturb(tiny_state(config))
    value = value_model_for(config)
    for name in value.names:
        if name.startswith("value."):
            value.params[name].data[:] = rng.normal(0.0, 0.3, value.params[name].shape)
    rollouts, batch, _ = rollout_batch(state, config, [6, 6], rng)
    cut = 1
    alt_sets = []
    for r in rollouts:
        sets = list(r.edge_sets)
        for s in range(cut + 2, len(sets)):
            sets[s] = ((1, 2), (3, 4))
        alt_sets.append(tuple(sets))
    alt = [dataclasses.replace(r, edge_sets=s) for r, s in zip(rollouts, alt_sets)]
    alt_batch = batch_stack(
        [arrays_for_sequence(config, r, NodeOrdering.identity(r.n)) for r in alt]
    )
    with tz.no_grad():
        v0 = value_forward(value, batch).data
        v1 = value_forward(value, alt_batch).data
    assert np.max(np.abs(v0[:, : cut + 2] - v1[:, : cut + 2])) <= 1e-12


# --------------------------------------------------------------------- PPO


def test_ppo_config_validation():
    with pytest.raises(ValueError, match="clip_eps"):
        PPOConfig(clip_eps=0.0)
    with pytest.raises(ValueError, match="ema_decay"):
        PPOConfig(ema_decay=1.0)
    with pytest.raises(ValueError, match="iterations"):
        PPOConfig(iterations=-1)


def test_ppo_surrogate_matches_numpy_oracle():
    rng = np.random.default_rng(9)
    ll = tz.param(rng.normal(-2.0, 1.0, (4, 3)))
    ref_nll = -rng.normal(-2.0, 1.0, (4, 3))
    g = rng.normal(0.0, 1.0, (4, 3))
    for eps in (0.2, 1e6):
        loss, u = ppo_surrogate(ll, ref_nll, g, eps)
        u_np = np.exp(ll.data + ref_nll)
        expected = np.maximum(-u_np * g, -np.clip(u_np, 1 - eps, 1 + eps) * g).sum()
        assert float(loss.data) == pytest.approx(expected, rel=1e-12)
        assert np.array_equal(u, u_np)
    loss_wide, _ = ppo_surrogate(ll, ref_nll, g, 1e6)
    assert float(loss_wide.data) == pytest.approx(-(np.exp(ll.data + ref_nll) * g).sum(),
                                                  rel=1e-12)


def test_first_ppo_epoch_has_unit_ratios_and_plain_pg_loss():
    rng = np.random.default_rng(10)
    config = tiny_config()
    state = perturb(tiny_state(config))
    _, batch, _ = rollout_batch(state, config, [5, 6], rng)
    with tz.no_grad():
        _, ref_ll = sequence_log_likelihood(state.params, config, batch)
    ref_nll = -ref_ll.data.copy()
    g = rng.normal(0.0, 1.0, ref_nll.shape)
    cfg = PPOConfig(iterations=1, samples=2, epochs=3, lr=1e-3)
    opt = tz.AdamState.init([state.params[n] for n in state.names])
    stats = ppo_update(state, config, batch, ref_nll, g, cfg, opt)
    assert stats.mean_ratio[0] == 1.0
    assert stats.clip_fraction[0] == 0.0
    assert stats.losses[0] == -g.sum()
    assert len(stats.losses) == 3
    assert all(np.isfinite(stats.losses))


def test_ppo_ascends_trajectory_likelihood_for_positive_advantages():
    rng = np.random.default_rng(11)
    config = tiny_config()
    state = perturb(tiny_state(config))
    _, batch, _ = rollout_batch(state, config, [6, 6, 6, 6], rng)
    with tz.no_grad():
        total0, ref_ll = sequence_log_likelihood(state.params, config, batch)
    cfg = PPOConfig(iterations=1, samples=4, epochs=4, lr=3e-3)
    opt = tz.AdamState.init([state.params[n] for n in state.names])
    ppo_update(state, config, batch, -ref_ll.data.copy(),
               np.ones(ref_ll.shape), cfg, opt)
    with tz.no_grad():
        total1, _ = sequence_log_likelihood(state.params, config, batch)
    assert np.all(total1.data > total0.data)


def test_large_policy_ratios_get_clipped():
    rng = np.random.default_rng(12)
    ll = tz.param(rng.normal(-1.0, 0.1, (2, 3)))
    ref_nll = -(ll.data - 2.0)  # current policy is e^2 more likely than reference
    g = np.ones((2, 3))
    loss, u = ppo_surrogate(ll, ref_nll, g, 0.2)
    assert np.all(u > 1.2)
    assert float(loss.data) == pytest.approx(-1.2 * g.size, rel=1e-12)
    tz.backward(loss)
    assert np.all(ll.grad == 0.0)  # clipped branch with g>0 has zero slope


# ----------------------------------------------------------------- GAN loop


def small_ppo_cfg(**kw):
    base = dict(iterations=2, samples=4, epochs=2, lr=1e-3, value_lr=1e-3,
                value_steps=2, value_pretrain=3, disc_lr=1e-3, disc_steps=1,
                disc_batch=4, disc_pretrain=5, seed=0)
    base.update(kw)
    return PPOConfig(**base)


def test_gan_tuning_zero_iterations_is_identity():
    rng = np.random.default_rng(13)
    config = tiny_config()
    state = perturb(tiny_state(config))
    before = {n: state.params[n].data.copy() for n in state.names}
    report = gan_tuning(state, config, lobsters(8, rng), small_ppo_cfg(iterations=0))
    assert report.rewards == [] and report.ppo_losses == []
    for n in state.names:
        assert np.array_equal(state.params[n].data, before[n])


def test_gan_tuning_smoke_run():
    rng = np.random.default_rng(14)
    config = tiny_config()
    state = perturb(tiny_state(config))
    before = {n: state.params[n].data.copy() for n in state.names}
    data = lobsters(16, rng)
    cfg = small_ppo_cfg()
    disc = new_discriminator(hidden=16, layers=2, seed=0)
    value = value_model_for(config)
    report = gan_tuning(state, config, data, cfg, disc=disc, value=value)
    assert len(report.rewards) == 2 and len(report.ppo_losses) == 2
    assert all(cfg.reward_floor <= r <= 0.0 for r in report.rewards)
    assert all(0.0 <= c <= 1.0 for c in report.clip_fractions)
    assert all(np.isfinite(v) for v in report.disc_losses + report.value_losses)
    assert any(not np.array_equal(state.params[n].data, before[n]) for n in state.names)


def test_gan_tuning_rejects_oversized_graphs():
    rng = np.random.default_rng(15)
    config = tiny_config(n_max=6)
    state = tiny_state(config)
    with pytest.raises(ValueError, match="n_max"):
        gan_tuning(state, config, [lobster(rng, lo=8, hi=9)], small_ppo_cfg())


def test_gan_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    config = tiny_config()
    state = perturb(tiny_state(config))
    disc = new_discriminator(hidden=8, layers=2, seed=3)
    value = value_model_for(config, seed=4)
    state.step = 77
    path = tmp_path / "gan.ckpt"
    save_gan_checkpoint(path, state, config, disc, value)
    state2, config2, disc2, value2 = load_gan_checkpoint(path)
    assert config2 == config and value2.config == value.config
    assert state2.step == 77
    assert (disc2.hidden, disc2.layers) == (8, 2)
    for n in state.names:
        assert np.array_equal(state2.params[n].data, state.params[n].data)
    for n in disc.names:
        assert np.array_equal(disc2.params[n].data, disc.params[n].data)
    for n in value.names:
        assert np.array_equal(value2.params[n].data, value.params[n].data)
    rng_graph = lobster(rng)
    assert disc_logit(disc2.params, rng_graph) == disc_logit(disc.params, rng_graph)


def test_gan_checkpoint_rejects_unsectioned_files(tmp_path):
    from anfm.training import save_checkpoint

    config = tiny_config()
    state = tiny_state(config)
    path = tmp_path / "plain.ckpt"
    save_checkpoint(path, state, config)
    with pytest.raises(ValueError, match="section"):
        load_gan_checkpoint(path)
