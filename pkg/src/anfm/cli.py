"""Pipeline command surface: dataset gen, filtrate, train, finetune,
sample, eval, bench.

Every command resolves its configuration from an optional JSON file plus
--set overrides and writes the resolved document next to its outputs, so
any artifact can be regenerated from (config, seed). Heavy imports happen
inside the handlers so --threads can pin BLAS pools before numpy loads.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TOP_LEVEL_KEYS = {"seed", "dataset", "filtration", "model", "train",
                  "finetune", "eval"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


# ------------------------------------------------------------ config layer


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise CliError(EXIT_CONFIG, f"override {item!r} is not of the form key=value")
    key, _, raw = item.partition("=")
    path = key.strip().split(".")
    if not all(path):
        raise CliError(EXIT_CONFIG, f"override key {key!r} is malformed")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def load_config(args) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise CliError(EXIT_CONFIG, f"config file is not valid JSON: {e}")
        if not isinstance(cfg, dict):
            raise CliError(EXIT_CONFIG, "config file must hold a JSON object")
    for item in getattr(args, "set", None) or []:
        path, value = _parse_override(item)
        node = cfg
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(EXIT_CONFIG, f"override {item!r} descends into non-object {part!r}")
        node[path[-1]] = value
    unknown = sorted(set(cfg) - TOP_LEVEL_KEYS)
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown key {unknown[0]} in config")
    return cfg


def resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        if not isinstance(cfg["seed"], int):
            raise CliError(EXIT_CONFIG, "seed must be an integer")
        return cfg["seed"]
    env = os.environ.get("ANFM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"ANFM_SEED is not an integer: {env!r}")
    return 0


def build_section(cls, cfg: dict, name: str, seed: int | None = None, **extra):
    """Instantiate a config dataclass from a config section, rejecting
    unknown keys by dotted name. Explicit extras override the section."""
    raw = cfg.get(name, {})
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, f"section {name} must be an object")
    raw = dict(raw)
    raw.update({k: v for k, v in extra.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown key {name}.{unknown[0]}")
    if seed is not None and "seed" in names and "seed" not in raw:
        raw["seed"] = seed
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise CliError(EXIT_CONFIG, f"invalid {name} config: {e}")


def _write_resolved(out_dir: Path, command: str, document: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.config.json"
    path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")


def _load_graphs(path):
    from anfm.data import load

    try:
        return load(path)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"data file not found: {path}")
    except ValueError as e:
        raise CliError(EXIT_DATA, f"cannot read {path}: {e}")


def _load_ckpt(path):
    from anfm.training import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, f"checkpoint not found: {path}")
    except ValueError as e:
        raise CliError(EXIT_DATA, f"cannot read checkpoint {path}: {e}")


# ---------------------------------------------------------------- commands


def cmd_dataset_gen(args) -> int:
    from anfm import data

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    spec = build_section(data.DatasetSpec, cfg, "dataset", seed=seed,
                         family=args.family, train=args.train, val=args.val,
                         test=args.test)
    splits = data.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        records = getattr(splits, split)
        data.save(records, out / f"{spec.family}_{split}.gds")
        data.save_jsonl(records, out / f"{spec.family}_{split}.jsonl")
    _write_resolved(out, "dataset_gen", {"seed": seed, "dataset": dataclasses.asdict(spec)})
    for split in ("train", "val", "test"):
        print(f"{split}: {len(getattr(splits, split))} graphs -> "
              f"{out / f'{spec.family}_{split}.gds'}")
    return EXIT_OK


def cmd_filtrate(args) -> int:
    from anfm.filtration import FiltrationConfig, build_filtration
    import numpy as np

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    fc = build_section(FiltrationConfig, cfg, "filtration", seed=seed)
    graphs = _load_graphs(args.data)
    if not 0 <= args.index < len(graphs):
        raise CliError(EXIT_DATA, f"graph index {args.index} out of range 0..{len(graphs) - 1}")
    g = graphs[args.index]
    seq = build_filtration(g, fc, rng=np.random.default_rng(seed), graph_id=args.index)
    doc = {
        "n": seq.n,
        "function": fc.function,
        "schedule": fc.schedule,
        "steps": fc.steps,
        "thresholds": list(seq.thresholds),
        "edge_counts": [len(es) for es in seq.edge_sets],
        "ordering": list(seq.ordering.perm) if seq.ordering is not None else None,
    }
    if args.edges:
        doc["edges"] = [[list(e) for e in es] for es in seq.edge_sets]
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np

    from anfm.filtration import FiltrationConfig
    from anfm.model import ModelConfig
    from anfm import training as T

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    fc = build_section(FiltrationConfig, cfg, "filtration", seed=seed)
    mc = build_section(ModelConfig, cfg, "model")
    tc = build_section(T.TrainConfig, cfg, "train", seed=seed)
    if mc.steps != fc.steps:
        raise CliError(EXIT_CONFIG, f"model.steps ({mc.steps}) != filtration.steps ({fc.steps})")
    graphs = _load_graphs(args.data)
    if max(g.n for g in graphs) > mc.n_max:
        raise CliError(EXIT_DATA, f"data contains graphs larger than model.n_max ({mc.n_max})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = T.expand(graphs, fc, tc.perturbations, lambdas=tc.lambdas(fc.steps),
                     seed=tc.seed, ordering_sigma=tc.ordering_sigma)
    state = T.new_trainer(mc, tc)
    log = T.TrainLog()
    t0 = time.perf_counter()
    while state.step < tc.steps:
        chunk = min(args.log_every, tc.steps - state.step)
        T.train(state, store, mc, tc, steps=chunk, log=log)
        print(f"step {state.step:7d}  loss {np.mean(log.losses[-min(100, chunk):]):10.3f}  "
              f"elapsed {time.perf_counter() - t0:7.1f}s", flush=True)
        if args.checkpoint_every and state.step % args.checkpoint_every == 0 \
                and state.step < tc.steps:
            T.save_checkpoint(out / f"ckpt_{state.step:07d}.ckpt", state, mc)
    T.save_checkpoint(out / "stage1.ckpt", state, mc)
    (out / "losses.json").write_text(json.dumps({"loss": log.losses, "val": log.val}))
    _write_resolved(out, "train", {
        "seed": seed,
        "filtration": dataclasses.asdict(fc),
        "model": dataclasses.asdict(mc),
        "train": dataclasses.asdict(tc),
    })
    print(f"saved {out / 'stage1.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from anfm import finetune as FT
    from anfm import training as T

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    ppo = build_section(FT.PPOConfig, cfg, "finetune", seed=seed)
    state, mc = _load_ckpt(args.checkpoint)
    graphs = list(_load_graphs(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = FT.gan_tuning(state, mc, graphs, ppo)
    T.save_checkpoint(out / "stage2.ckpt", state, mc)
    (out / "finetune_report.json").write_text(json.dumps(dataclasses.asdict(report)))
    _write_resolved(out, "finetune", {
        "seed": seed,
        "model": dataclasses.asdict(mc),
        "finetune": dataclasses.asdict(ppo),
        "checkpoint": str(args.checkpoint),
    })
    print(f"saved {out / 'stage2.ckpt'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from anfm import data
    from anfm.graphs import Graph
    from anfm.model import sample

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    state, mc = _load_ckpt(args.checkpoint)
    if args.n is not None:
        sizes = np.array([args.n])
    elif args.data:
        sizes = np.array([g.n for g in _load_graphs(args.data)])
    else:
        raise CliError(EXIT_CONFIG, "sample needs --n or --data for the size distribution")
    if sizes.max() > mc.n_max:
        raise CliError(EXIT_DATA, f"requested size exceeds model n_max ({mc.n_max})")
    rng = np.random.default_rng([seed, 0x5A11])
    graphs = []
    t0 = time.perf_counter()
    for i in range(args.count):
        r = sample(state.params, mc, int(rng.choice(sizes)), rng,
                   mode=args.mode, graph_id=i)
        graphs.append(Graph(r.n, r.final_edges))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save(graphs, out / "samples.gds")
    data.save_jsonl(graphs, out / "samples.jsonl")
    _write_resolved(out, "sample", {
        "seed": seed,
        "model": dataclasses.asdict(mc),
        "count": args.count,
        "mode": args.mode,
        "fixed_n": args.n,
        "checkpoint": str(args.checkpoint),
    })
    print(f"{args.count} samples in {time.perf_counter() - t0:.1f}s -> {out / 'samples.gds'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from anfm import evaluation as E

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    eval_cfg = cfg.get("eval", {})
    if not isinstance(eval_cfg, dict):
        raise CliError(EXIT_CONFIG, "section eval must be an object")
    unknown = sorted(set(eval_cfg) - {"kinds", "params"})
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown key eval.{unknown[0]}")
    kinds = tuple(eval_cfg.get("kinds", E.KINDS))
    bad = sorted(set(kinds) - set(E.KINDS))
    if bad:
        raise CliError(EXIT_CONFIG, f"unknown key eval.kinds value {bad[0]!r}")
    samples = list(_load_graphs(args.samples))
    train_g = list(_load_graphs(args.train))
    test_g = list(_load_graphs(args.test))
    t0 = time.perf_counter()
    report: dict = {
        "seed": seed,
        "family": args.family,
        "counts": {"samples": len(samples), "train": len(train_g), "test": len(test_g)},
        "mmd": {}, "baseline_mmd": {},
    }
    v = E.vun(samples, train_g, args.family, eval_cfg.get("params"))
    report["vun"] = v._asdict()
    for kind in kinds:
        report["mmd"][kind] = E.descriptor_mmd(samples, test_g, kind)._asdict()
        report["baseline_mmd"][kind] = E.descriptor_mmd(train_g, test_g, kind)._asdict()
    if args.er:
        er = E.er_reference(train_g, len(samples), np.random.default_rng([seed, 0xE5]))
        report["er_mmd"] = {k: E.descriptor_mmd(er, test_g, k)._asdict() for k in kinds}
    report["seconds"] = round(time.perf_counter() - t0, 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"vun: valid {v.valid:.3f} unique {v.unique:.3f} novel {v.novel:.3f} "
          f"vun {v.vun:.3f} (std {v.std:.3f})")
    for kind in kinds:
        print(f"mmd {kind:10s} {report['mmd'][kind]['value']:.4e} "
              f"(baseline {report['baseline_mmd'][kind]['value']:.4e})")
    return EXIT_OK


def cmd_bench(args) -> int:
    import numpy as np

    from anfm import evaluation as E
    from anfm.model import ModelConfig, init_params

    cfg = load_config(args)
    seed = resolve_seed(args, cfg)
    mc = build_section(ModelConfig, cfg, "model")
    try:
        t_list = [int(x) for x in args.t_list.split(",")]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"bad --t-list {args.t_list!r}: expected comma-separated ints")
    params = init_params(mc, np.random.default_rng(seed))
    points = E.bench_sampling(params, mc, args.n, t_list, rollouts=args.rollouts,
                              rng=np.random.default_rng([seed, 0xBE]))
    a, b, c = E.quadratic_fit(points) if len(points) >= 3 else (float("nan"),) * 3
    doc = {
        "seed": seed,
        "n": args.n,
        "temporal": mc.temporal,
        "points": [dataclasses.asdict(p) for p in points],
        "fit": {"a": a, "b": b, "c": c},
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(doc, indent=2) + "\n")
    for p in points:
        print(f"T={p.steps:4d}  median {p.median * 1e3:9.2f} ms  mad {p.mad * 1e3:7.2f} ms")
    if len(points) >= 3:
        print(f"fit a={a:.3e} b={b:.3e} c={c:.3e}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value)")
    p.add_argument("--seed", type=int, help="global seed (falls back to ANFM_SEED)")
    p.add_argument("--threads", type=int, default=os.cpu_count(),
                   help="BLAS thread cap; 1 gives bit-stable outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anfm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="dataset utilities")
    dsub = dataset.add_subparsers(dest="subcommand", required=True)
    gen = dsub.add_parser("gen", help="generate train/val/test splits")
    _common(gen)
    gen.add_argument("--family", choices=("planar", "sbm", "lobster"))
    gen.add_argument("--train", type=int)
    gen.add_argument("--val", type=int)
    gen.add_argument("--test", type=int)
    gen.add_argument("--out", default="out")
    gen.set_defaults(func=cmd_dataset_gen)

    filtrate = sub.add_parser("filtrate", help="dump one graph's filtration")
    _common(filtrate)
    filtrate.add_argument("--data", required=True)
    filtrate.add_argument("--index", type=int, default=0)
    filtrate.add_argument("--edges", action="store_true", help="include per-step edge lists")
    filtrate.add_argument("--out")
    filtrate.set_defaults(func=cmd_filtrate)

    train = sub.add_parser("train", help="stage-I teacher-forcing training")
    _common(train)
    train.add_argument("--data", required=True)
    train.add_argument("--out", default="out")
    train.add_argument("--checkpoint-every", type=int, default=0)
    train.add_argument("--log-every", type=int, default=500)
    train.set_defaults(func=cmd_train)

    finetune = sub.add_parser("finetune", help="stage-II adversarial fine-tuning")
    _common(finetune)
    finetune.add_argument("--checkpoint", required=True)
    finetune.add_argument("--data", required=True)
    finetune.add_argument("--out", default="out")
    finetune.set_defaults(func=cmd_finetune)

    samp = sub.add_parser("sample", help="draw graphs from a checkpoint")
    _common(samp)
    samp.add_argument("--checkpoint", required=True)
    samp.add_argument("--count", type=int, default=64)
    samp.add_argument("--mode", choices=("stochastic", "mode"), default="stochastic")
    samp.add_argument("--n", type=int, help="fix the graph size instead of --data sizes")
    samp.add_argument("--data", help="dataset whose empirical sizes to draw from")
    samp.add_argument("--out", default="out")
    samp.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="VUN and descriptor MMD report")
    _common(ev)
    ev.add_argument("--samples", required=True)
    ev.add_argument("--train", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--family", required=True, choices=("planar", "sbm", "lobster"))
    ev.add_argument("--er", action="store_true", help="include a density-matched ER baseline")
    ev.add_argument("--out", default="out")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="sampling throughput vs step count")
    _common(bench)
    bench.add_argument("--n", type=int, default=24)
    bench.add_argument("--t-list", default="4,8,16,32")
    bench.add_argument("--rollouts", type=int, default=5)
    bench.add_argument("--out", default="out")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.code
    except RuntimeError as e:
        if "non-finite" in str(e):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
