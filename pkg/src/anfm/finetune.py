"""Stage II: adversarial fine-tuning of the generator with clipped PPO.

A message-passing discriminator scores final sampled graphs against the
training set; its clamped log-sigmoid output is the terminal reward. A value
model with the generator's backbone architecture supplies a per-prefix
baseline, and the generator takes clipped-ratio policy-gradient steps on
whole trajectories. The generator runs in inference mode during rollouts;
since the architecture has no dropout this is a documented no-op.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

import anfm.tensor as tz
from anfm.graphs import Graph, NodeOrdering
from anfm.model import (
    Batch,
    ModelConfig,
    arrays_for_sequence,
    backbone,
    batch_stack,
    init_params,
    sample,
    sequence_log_likelihood,
)
from anfm.spectral import node_features
from anfm.tensor import Tensor
from anfm.training import CKPT_MAGIC, CKPT_VERSION, TrainerState, _read, _read_tensor, _write_tensor

RWPE_DIM = 20


@dataclass(frozen=True)
class PPOConfig:
    iterations: int = 500
    samples: int = 16          # rollouts per iteration
    epochs: int = 4            # PPO passes per rollout batch
    clip_eps: float = 0.2
    reward_floor: float = -10.0
    lr: float = 2.5e-4         # generator step size
    value_lr: float = 2.5e-4
    value_steps: int = 5
    value_pretrain: int = 25
    disc_lr: float = 1e-4
    disc_steps: int = 2
    disc_batch: int = 16       # graphs per side per discriminator step
    disc_pretrain: int = 100
    fake_buffer: int = 256
    ema_decay: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.iterations < 0 or min(self.samples, self.epochs) < 1:
            raise ValueError("iterations must be >= 0, samples and epochs >= 1")


# ------------------------------------------------------------- reward model


@dataclass
class RewardStats:
    """EMA moments for reward whitening, stored in bias-corrected form.

    Each reward applies mean += (r - mean) * w with w = (1-d)/(1-d^k),
    which equals the Adam-style corrected average but keeps constant
    streams exact: the first sample is copied bitwise and every later
    identical sample adds (r - mean) * w = 0, so whiten returns exact 0.
    """

    decay: float = 0.99
    mean: float = 0.0
    second: float = 0.0
    count: int = 0

    def update(self, rewards) -> None:
        for r in np.asarray(rewards, dtype=np.float64).ravel():
            self.count += 1
            w = (1.0 - self.decay) / (1.0 - self.decay ** self.count)
            self.mean += (r - self.mean) * w
            self.second += (r * r - self.second) * w

    def whiten(self, rewards) -> np.ndarray:
        if self.count == 0:
            raise ValueError("whiten called before any update")
        var = max(self.second - self.mean * self.mean, 0.0)
        std = max(np.sqrt(var), 1e-6)
        return (np.asarray(rewards, dtype=np.float64) - self.mean) / std


def log_sigmoid(x: float) -> float:
    return -float(np.logaddexp(0.0, -x))


def terminal_reward(disc: "DiscState", g: Graph, floor: float = -10.0) -> float:
    """Clamped log-sigmoid of the discriminator's realness logit."""
    return max(log_sigmoid(disc_logit(disc.params, g)), floor)


def rewards_to_go(rewards: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Terminal reward minus the value baseline, broadcast to every step."""
    return np.asarray(rewards, dtype=np.float64)[:, None] - np.asarray(values)


# ------------------------------------------------------------ discriminator


@dataclass
class DiscState:
    params: dict[str, Tensor]
    names: tuple[str, ...]
    opt: tz.AdamState
    hidden: int
    layers: int


def _xavier(rng, fan_in, fan_out, shape=None):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, (fan_in, fan_out) if shape is None else shape)


def new_discriminator(hidden: int = 128, layers: int = 3, seed: int = 0) -> DiscState:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    p["disc.in.w"] = _xavier(rng, RWPE_DIM, hidden)
    p["disc.in.b"] = np.zeros(hidden)
    for i in range(layers):
        p[f"disc.mp{i}.w"] = _xavier(rng, 2 * hidden, hidden)
        p[f"disc.mp{i}.b"] = np.zeros(hidden)
    p["disc.out1.w"] = _xavier(rng, hidden, hidden)
    p["disc.out1.b"] = np.zeros(hidden)
    p["disc.out2.w"] = _xavier(rng, hidden, 1)
    p["disc.out2.b"] = np.zeros(1)
    params = {k: tz.param(v) for k, v in p.items()}
    names = tuple(sorted(params))
    return DiscState(params, names, tz.AdamState.init([params[n] for n in names]),
                     hidden, layers)


def disc_arrays(graphs: list[Graph]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad random-walk features, adjacency, and node masks to a batch."""
    nmax = max(g.n for g in graphs)
    feats = np.zeros((len(graphs), nmax, RWPE_DIM))
    adj = np.zeros((len(graphs), nmax, nmax))
    mask = np.zeros((len(graphs), nmax))
    for i, g in enumerate(graphs):
        feats[i, : g.n] = node_features(g).rwpe
        adj[i, : g.n, : g.n] = g.adjacency
        mask[i, : g.n] = 1.0
    return feats, adj, mask


def disc_forward(params, feats, adj, mask) -> Tensor:
    """Realness logits, one per graph; padded nodes never reach the pool."""
    layers = sum(1 for k in params if k.endswith(".w") and k.startswith("disc.mp"))
    h = tz.relu(tz.matmul(Tensor(np.asarray(feats)), params["disc.in.w"]) + params["disc.in.b"])
    a = Tensor(np.asarray(adj))
    for i in range(layers):
        agg = h + tz.matmul(a, h)
        h = tz.relu(tz.matmul(tz.concat([h, agg], axis=-1), params[f"disc.mp{i}.w"])
                    + params[f"disc.mp{i}.b"])
    pooled = tz.masked_mean_pool(h, np.asarray(mask)[:, :, None])
    out = tz.relu(tz.matmul(pooled, params["disc.out1.w"]) + params["disc.out1.b"])
    out = tz.matmul(out, params["disc.out2.w"]) + params["disc.out2.b"]
    return tz.reshape(out, (out.shape[0],))


def disc_logit(params, g: Graph) -> float:
    with tz.no_grad():
        feats, adj, mask = disc_arrays([g])
        return float(disc_forward(params, feats, adj, mask).data[0])


def disc_bce(params, graphs: list[Graph], labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of realness logits against 0/1 labels."""
    feats, adj, mask = disc_arrays(graphs)
    logits = disc_forward(params, feats, adj, mask)
    sign = 1.0 - 2.0 * np.asarray(labels, dtype=np.float64)
    return tz.tmean(tz.softplus(logits * sign))


def train_discriminator(disc: DiscState, real: list[Graph], fake: list[Graph],
                        steps: int, batch_per_side: int, lr: float,
                        rng: np.random.Generator) -> list[float]:
    """BCE steps on 50/50 batches of dataset graphs vs generated finals."""
    losses = []
    plist = [disc.params[n] for n in disc.names]
    for _ in range(steps):
        r_idx = rng.integers(0, len(real), batch_per_side)
        f_idx = rng.integers(0, len(fake), batch_per_side)
        graphs = [real[i] for i in r_idx] + [fake[i] for i in f_idx]
        labels = np.concatenate([np.ones(batch_per_side), np.zeros(batch_per_side)])
        loss = disc_bce(disc.params, graphs, labels)
        losses.append(float(loss.data))
        tz.backward(loss)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in plist]
        tz.adam_step(plist, grads, disc.opt, lr)
        for p in plist:
            p.grad = None
    return losses


def disc_accuracy(disc: DiscState, real: list[Graph], fake: list[Graph]) -> float:
    with tz.no_grad():
        feats, adj, mask = disc_arrays(real + fake)
        logits = disc_forward(disc.params, feats, adj, mask).data
    labels = np.concatenate([np.ones(len(real)), np.zeros(len(fake))])
    return float(((logits > 0.0) == labels).mean())


# -------------------------------------------------------------- value model


@dataclass
class ValueState:
    params: dict[str, Tensor]
    names: tuple[str, ...]
    opt: tz.AdamState
    config: ModelConfig


def new_value_model(config: ModelConfig, seed: int = 0) -> ValueState:
    """Generator-architecture backbone plus a zero-initialized scalar head,
    so the initial baseline is exactly zero."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    d = config.hidden
    params["value.head1.w"] = tz.param(_xavier(rng, d, d))
    params["value.head1.b"] = tz.param(np.zeros(d))
    params["value.head2.w"] = tz.param(np.zeros((d, 1)))
    params["value.head2.b"] = tz.param(np.zeros(1))
    names = tuple(sorted(params))
    return ValueState(params, names, tz.AdamState.init([params[n] for n in names]), config)


def value_forward(value: ValueState, batch: Batch) -> Tensor:
    """Per-prefix value estimates, shape (B, T); causal by construction."""
    reps = backbone(value.params, value.config, batch)
    pooled = tz.masked_mean_pool(reps, batch.node_mask[:, None, :, None])
    h = tz.relu(tz.matmul(pooled, value.params["value.head1.w"]) + value.params["value.head1.b"])
    v = tz.matmul(h, value.params["value.head2.w"]) + value.params["value.head2.b"]
    return tz.reshape(v, v.shape[:2])


def train_value(value: ValueState, batch: Batch, targets: np.ndarray,
                steps: int, lr: float) -> list[float]:
    """Least-squares fit of the per-prefix values to the whitened rewards."""
    losses = []
    plist = [value.params[n] for n in value.names]
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64)[:, None],
                        (batch.size, batch.feats.shape[1]))
    for _ in range(steps):
        err = value_forward(value, batch) - Tensor(t)
        loss = tz.tmean(err * err)
        losses.append(float(loss.data))
        tz.backward(loss)
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in plist]
        tz.adam_step(plist, grads, value.opt, lr)
        for p in plist:
            p.grad = None
    return losses


# --------------------------------------------------------------- PPO proper


@dataclass
class PPOStats:
    losses: list[float] = field(default_factory=list)
    mean_ratio: list[float] = field(default_factory=list)
    clip_fraction: list[float] = field(default_factory=list)


def ppo_surrogate(per_step: Tensor, ref_nll: np.ndarray, advantages: np.ndarray,
                  clip_eps: float) -> tuple[Tensor, np.ndarray]:
    """Clipped-ratio surrogate: sum over steps of max(-u*g, -clamp(u)*g),
    with u = exp(l_ref - l_cur) built from per-step negative log-likelihoods.
    Returns the loss and the detached ratio matrix."""
    u = tz.exp(per_step + ref_nll)  # per_step is log-lik, ref_nll is -log p_ref
    g = np.asarray(advantages, dtype=np.float64)
    unclipped = u * g * -1.0
    clipped = tz.clamp(u, 1.0 - clip_eps, 1.0 + clip_eps) * g * -1.0
    return tz.tsum(tz.maximum(unclipped, clipped)), u.data.copy()


def ppo_update(state: TrainerState, config: ModelConfig, batch: Batch,
               ref_nll: np.ndarray, advantages: np.ndarray, cfg: PPOConfig,
               opt: tz.AdamState) -> PPOStats:
    """N_epoch clipped-surrogate passes over one rollout batch.

    ref_nll must be the frozen per-step negative log-likelihoods computed
    from the same weights by the same batched path, so the first epoch's
    ratios are exactly one.
    """
    stats = PPOStats()
    plist = [state.params[n] for n in state.names]
    for _ in range(cfg.epochs):
        try:
            _, per_step = sequence_log_likelihood(state.params, config, batch)
            loss, u = ppo_surrogate(per_step, ref_nll, advantages, cfg.clip_eps)
            tz.backward(loss)
        except ValueError as e:
            if "non-finite" not in str(e):
                raise
            raise RuntimeError(f"non-finite PPO ratio or loss: {e}") from e
        stats.losses.append(float(loss.data))
        stats.mean_ratio.append(float(u.mean()))
        stats.clip_fraction.append(
            float(((u < 1.0 - cfg.clip_eps) | (u > 1.0 + cfg.clip_eps)).mean())
        )
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in plist]
        tz.adam_step(plist, grads, opt, cfg.lr)
        for p in plist:
            p.grad = None
    return stats


# ------------------------------------------------------------- the GAN loop


@dataclass
class GanReport:
    rewards: list[float] = field(default_factory=list)        # mean raw reward
    ppo_losses: list[float] = field(default_factory=list)     # first-epoch loss
    clip_fractions: list[float] = field(default_factory=list)
    disc_losses: list[float] = field(default_factory=list)
    value_losses: list[float] = field(default_factory=list)


def _rollout_batch(state: TrainerState, config: ModelConfig, sizes: np.ndarray,
                   count: int, rng: np.random.Generator):
    rollouts = [
        sample(state.params, config, int(rng.choice(sizes)), rng, graph_id=j)
        for j in range(count)
    ]
    batch = batch_stack(
        [arrays_for_sequence(config, r, NodeOrdering.identity(r.n)) for r in rollouts]
    )
    finals = [Graph(r.n, r.final_edges) for r in rollouts]
    return rollouts, batch, finals


def gan_tuning(state: TrainerState, config: ModelConfig, data: list[Graph],
               cfg: PPOConfig, disc: DiscState | None = None,
               value: ValueState | None = None) -> GanReport:
    """Alternating PPO / discriminator loop from a stage-I checkpoint.

    Mutates state.params in place; zero iterations leave them untouched.
    """
    report = GanReport()
    if cfg.iterations == 0:
        return report
    rng = np.random.default_rng([cfg.seed, 0x6A1])
    sizes = np.array(sorted(g.n for g in data))
    if sizes.max() > config.n_max:
        raise ValueError("data contains graphs larger than the generator's n_max")
    disc = disc if disc is not None else new_discriminator(seed=cfg.seed)
    value = value if value is not None else new_value_model(
        dataclasses.replace(config, hidden=32, layers=1, mixture=1), seed=cfg.seed
    )
    if value.config.n_max != config.n_max or value.config.steps != config.steps:
        raise ValueError("value model must share the generator's n_max and steps")
    gen_opt = tz.AdamState.init([state.params[n] for n in state.names])
    stats = RewardStats(decay=cfg.ema_decay)

    # discriminator pretraining on a frozen pool of generator finals
    _, _, pool = _rollout_batch(state, config, sizes, max(cfg.disc_batch * 4, cfg.samples), rng)
    fakes: list[Graph] = list(pool)
    report.disc_losses.extend(
        train_discriminator(disc, data, fakes, cfg.disc_pretrain, cfg.disc_batch,
                            cfg.disc_lr, rng)
    )
    # value pretraining against the same frozen rollouts
    _, batch, finals = _rollout_batch(state, config, sizes, cfg.samples, rng)
    raw = [terminal_reward(disc, g, cfg.reward_floor) for g in finals]
    stats.update(raw)
    report.value_losses.extend(
        train_value(value, batch, stats.whiten(raw), cfg.value_pretrain, cfg.value_lr)
    )

    for _ in range(cfg.iterations):
        _, batch, finals = _rollout_batch(state, config, sizes, cfg.samples, rng)
        raw = [terminal_reward(disc, g, cfg.reward_floor) for g in finals]
        stats.update(raw)
        whitened = stats.whiten(raw)
        with tz.no_grad():
            _, ref_ll = sequence_log_likelihood(state.params, config, batch)
            values = value_forward(value, batch)
        ref_nll = -ref_ll.data.copy()
        advantages = rewards_to_go(whitened, values.data)
        report.value_losses.extend(
            train_value(value, batch, whitened, cfg.value_steps, cfg.value_lr)
        )
        ppo = ppo_update(state, config, batch, ref_nll, advantages, cfg, gen_opt)
        fakes.extend(finals)
        del fakes[: max(0, len(fakes) - cfg.fake_buffer)]
        disc_losses = train_discriminator(disc, data, fakes, cfg.disc_steps,
                                          cfg.disc_batch, cfg.disc_lr, rng)
        report.rewards.append(float(np.mean(raw)))
        report.ppo_losses.append(ppo.losses[0])
        report.clip_fractions.append(ppo.clip_fraction[-1])
        report.disc_losses.extend(disc_losses)
    return report


# ------------------------------------------------- sectioned GAN checkpoints


def save_gan_checkpoint(path, state: TrainerState, config: ModelConfig,
                        disc: DiscState, value: ValueState) -> None:
    """Same container as stage-I checkpoints; tensors carry section tags
    gen. / disc. / value. so the three models coexist in one file."""
    meta = {
        "sections": {
            "gen": dataclasses.asdict(config),
            "value": dataclasses.asdict(value.config),
            "disc": {"hidden": disc.hidden, "layers": disc.layers},
        },
        "step": state.step,
    }
    config_text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = [(f"gen.{n}", state.params[n].data) for n in state.names]
    tensors += [(n, disc.params[n].data) for n in disc.names]  # already disc.-tagged
    tensors += [(f"value.{n}", value.params[n].data) for n in value.names]
    rng_blob = json.dumps(np.random.default_rng(0).bit_generator.state).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(config_text)))
        f.write(config_text)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr)
        f.write(struct.pack("<Q", len(rng_blob)))
        f.write(rng_blob)


def load_gan_checkpoint(path):
    with open(path, "rb") as f:
        if _read(f, 4) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<Q", _read(f, 8))
        meta = json.loads(_read(f, clen).decode("utf-8"))
        (count,) = struct.unpack("<I", _read(f, 4))
        table = dict(_read_tensor(f) for _ in range(count))
        (rlen,) = struct.unpack("<Q", _read(f, 8))
        _read(f, rlen)
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    if "sections" not in meta:
        raise ValueError("incompatible checkpoint: no section tags")
    gen_config = ModelConfig(**meta["sections"]["gen"])
    value_config = ModelConfig(**meta["sections"]["value"])
    d = meta["sections"]["disc"]

    gen_params = {k[len("gen."):]: tz.param(v) for k, v in table.items()
                  if k.startswith("gen.")}
    gen_names = tuple(sorted(gen_params))
    state = TrainerState(gen_params, gen_names,
                         tz.AdamState.init([gen_params[n] for n in gen_names]),
                         np.random.default_rng(0), step=meta["step"])
    disc_params = {k: tz.param(v) for k, v in table.items() if k.startswith("disc.")}
    disc_names = tuple(sorted(disc_params))
    disc = DiscState(disc_params, disc_names,
                     tz.AdamState.init([disc_params[n] for n in disc_names]),
                     d["hidden"], d["layers"])
    value_params = {k[len("value."):]: tz.param(v) for k, v in table.items()
                    if k.startswith("value.")}
    value_names = tuple(sorted(value_params))
    value = ValueState(value_params, value_names,
                       tz.AdamState.init([value_params[n] for n in value_names]),
                       value_config)
    return state, gen_config, disc, value
