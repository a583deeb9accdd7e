"""Stage-I training: teacher forcing over noisy filtration sequences.

A dataset is expanded ahead of time into a store of noisy sequences (P
independent perturbations per graph), then batches of rendered sequence
arrays drive plain Adam steps on the negated sequence log-likelihood.
Checkpoints are a self-contained binary container carrying the model config,
all weights and optimizer moments in f64, and the training RNG state, so a
resumed run is bit-identical to an uninterrupted one.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

import anfm.tensor as tz
from anfm.filtration import (
    LAMBDA_FIRST,
    LAMBDA_LAST,
    FiltrationConfig,
    build_filtration,
    derived_node_ordering,
    edge_weights,
    lambda_schedule,
    noise_augment,
)
from anfm.graphs import Graph
from anfm.model import (
    Batch,
    ModelConfig,
    SequenceArrays,
    arrays_for_sequence,
    batch_stack,
    init_params,
    sequence_log_likelihood,
)
from anfm.tensor import Tensor

CKPT_MAGIC = b"ANFM"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 8
    lr: float = 1e-3
    clip_norm: float | None = 1.0
    perturbations: int = 4
    lambda_first: float = LAMBDA_FIRST
    lambda_last: float = LAMBDA_LAST
    ordering_sigma: float = 0.0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.perturbations < 1:
            raise ValueError("steps, batch_size and perturbations must be positive")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive when set")
        if min(self.lambda_first, self.lambda_last, self.ordering_sigma) < 0.0:
            raise ValueError("noise levels cannot be negative")

    def lambdas(self, steps: int) -> tuple[float, ...]:
        if self.lambda_first == 0.0 and self.lambda_last == 0.0:
            return (0.0,) * (steps + 1)
        return lambda_schedule(steps, self.lambda_first, self.lambda_last)


# ---------------------------------------------------------- sequence store


class SequenceStore:
    """Noisy sequences plus their node orderings, rendered to arrays lazily.

    Rendering recomputes spectral node features per slot, which dominates
    batch assembly, so rendered arrays are cached per item (a desk-scale
    store of a few thousand short sequences stays well under a gigabyte).
    """

    def __init__(self, sequences, orderings):
        if len(sequences) != len(orderings):
            raise ValueError("one ordering per sequence required")
        self.sequences = list(sequences)
        self.orderings = list(orderings)
        self._arrays: dict[int, SequenceArrays] = {}
        self._render_config: ModelConfig | None = None

    def __len__(self) -> int:
        return len(self.sequences)

    def render(self, i: int, config: ModelConfig) -> SequenceArrays:
        if self._render_config is None:
            self._render_config = config
        elif config != self._render_config:
            self._arrays.clear()
            self._render_config = config
        if i not in self._arrays:
            self._arrays[i] = arrays_for_sequence(config, self.sequences[i], self.orderings[i])
        return self._arrays[i]

    def batch(self, indices, config: ModelConfig) -> Batch:
        return batch_stack([self.render(int(i), config) for i in indices])


def _expansion_rng(seed: int, graph_index: int, perturbation: int) -> np.random.Generator:
    return np.random.default_rng([seed, graph_index, perturbation])


def expand(
    records,
    filt_config: FiltrationConfig,
    perturbations: int,
    lambdas: tuple[float, ...] | None = None,
    seed: int = 0,
    ordering_sigma: float = 0.0,
) -> SequenceStore:
    """P independent noisy sequences per graph, graph-major order.

    Every perturbation gets its own deterministic stream keyed by (seed,
    graph index, perturbation index). The DFS weight function resamples the
    DFS ordering per perturbation; the other functions share one filtration
    per graph and vary only the noise (plus optional ordering jitter).
    """
    sequences, orderings = [], []
    for gid, rec in enumerate(records):
        g: Graph = rec.graph if hasattr(rec, "graph") else rec
        lams = lambdas if lambdas is not None else lambda_schedule(filt_config.steps)
        if filt_config.function == "dfs":
            for p in range(perturbations):
                rng = _expansion_rng(seed, gid, p)
                seq = build_filtration(g, filt_config, rng=rng, graph_id=gid)
                sequences.append(noise_augment(seq, lams, rng))
                orderings.append(seq.ordering)
        else:
            seq = build_filtration(g, filt_config, graph_id=gid)
            weights = edge_weights(g, filt_config.function)
            for p in range(perturbations):
                rng = _expansion_rng(seed, gid, p)
                sequences.append(noise_augment(seq, lams, rng))
                if ordering_sigma > 0.0:
                    orderings.append(derived_node_ordering(g, weights, ordering_sigma, rng))
                else:
                    orderings.append(derived_node_ordering(g, weights))
    return SequenceStore(sequences, orderings)


# ------------------------------------------------------------ the optimizer


@dataclass
class TrainerState:
    params: dict[str, Tensor]
    names: tuple[str, ...]
    opt: tz.AdamState
    rng: np.random.Generator
    step: int = 0


def new_trainer(model_config: ModelConfig, train_config: TrainConfig) -> TrainerState:
    params = init_params(model_config, np.random.default_rng(train_config.seed))
    names = tuple(sorted(params))
    opt = tz.AdamState.init([params[n] for n in names])
    rng = np.random.default_rng([train_config.seed, 0xA5F])
    return TrainerState(params=params, names=names, opt=opt, rng=rng)


def stage1_step(state: TrainerState, model_config: ModelConfig,
                train_config: TrainConfig, batch: Batch) -> float:
    """One teacher-forcing step: loss = -mean sequence log-likelihood,
    backward, optional global-norm clip, Adam. Returns the loss value."""
    try:
        total, _ = sequence_log_likelihood(state.params, model_config, batch)
        loss = tz.tmean(total) * -1.0
        value = float(loss.data)
        tz.backward(loss)
    except ValueError as e:
        if "non-finite" not in str(e):
            raise
        raise RuntimeError(
            f"non-finite loss at step {state.step} "
            f"(batch sizes {batch.ns.tolist()}): {e}"
        ) from e
    plist = [state.params[n] for n in state.names]
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in plist]
    if train_config.clip_norm is not None:
        tz.clip_grad_norm(grads, train_config.clip_norm)
    tz.adam_step(plist, grads, state.opt, train_config.lr)
    for p in plist:
        p.grad = None
    state.step += 1
    return value


def validation_loss(params, model_config: ModelConfig, store: SequenceStore,
                    batch_size: int = 32) -> float:
    """Mean per-sequence negative log-likelihood over the whole store."""
    totals = []
    with tz.no_grad():
        for lo in range(0, len(store), batch_size):
            batch = store.batch(range(lo, min(lo + batch_size, len(store))), model_config)
            total, _ = sequence_log_likelihood(params, model_config, batch)
            totals.append(total.data)
    return -float(np.concatenate(totals).mean())


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)


def train(state: TrainerState, store: SequenceStore, model_config: ModelConfig,
          train_config: TrainConfig, steps: int | None = None,
          val_store: SequenceStore | None = None, log: TrainLog | None = None) -> TrainLog:
    """Run optimizer steps with batches drawn uniformly from the store."""
    log = log if log is not None else TrainLog()
    for _ in range(train_config.steps if steps is None else steps):
        idx = state.rng.integers(0, len(store), train_config.batch_size)
        batch = store.batch(idx, model_config)
        log.losses.append(stage1_step(state, model_config, train_config, batch))
        if (train_config.eval_every and val_store is not None
                and state.step % train_config.eval_every == 0):
            log.val.append((state.step, validation_loss(state.params, model_config, val_store)))
    return log


# -------------------------------------------------------------- checkpoints


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint")
    return buf


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read(f, 4))
    name = _read(f, nlen).decode("utf-8")
    (rank,) = struct.unpack("<B", _read(f, 1))
    dims = [struct.unpack("<Q", _read(f, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read(f, 8 * count), dtype="<f8").reshape(dims)
    return name, data.astype(np.float64)


def save_checkpoint(path, state: TrainerState, model_config: ModelConfig) -> None:
    config_text = json.dumps(
        {"model": dataclasses.asdict(model_config), "step": state.step},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = []
    for name in state.names:
        tensors.append((name, state.params[name].data))
    for i, name in enumerate(state.names):
        tensors.append((f"adam.m.{name}", state.opt.m[i]))
        tensors.append((f"adam.v.{name}", state.opt.v[i]))
    tensors.append(("adam.step", np.array(float(state.opt.step))))
    rng_blob = json.dumps(state.rng.bit_generator.state).encode("utf-8")
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


def load_checkpoint(path) -> tuple[TrainerState, ModelConfig]:
    with open(path, "rb") as f:
        if _read(f, 4) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (version,) = struct.unpack("<I", _read(f, 4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<Q", _read(f, 8))
        meta = json.loads(_read(f, clen).decode("utf-8"))
        model_config = ModelConfig(**meta["model"])
        (count,) = struct.unpack("<I", _read(f, 4))
        table = dict(_read_tensor(f) for _ in range(count))
        (rlen,) = struct.unpack("<Q", _read(f, 8))
        rng_state = json.loads(_read(f, rlen).decode("utf-8"))
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")

    template = init_params(model_config, np.random.default_rng(0))
    names = tuple(sorted(template))
    for name in names:
        if name not in table:
            raise ValueError(f"incompatible checkpoint: missing tensor {name!r}")
        if table[name].shape != template[name].data.shape:
            raise ValueError(
                f"incompatible checkpoint: tensor {name!r} has shape "
                f"{table[name].shape}, config implies {template[name].data.shape}"
            )
    params = {name: tz.param(table[name]) for name in names}
    try:
        opt = tz.AdamState(
            m=[table[f"adam.m.{n}"] for n in names],
            v=[table[f"adam.v.{n}"] for n in names],
            step=int(table["adam.step"]),
        )
    except KeyError as e:
        raise ValueError(f"incompatible checkpoint: missing tensor {e}") from e
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return (
        TrainerState(params=params, names=names, opt=opt, rng=rng, step=meta["step"]),
        model_config,
    )
