"""Command-line pipeline: decompose, init, pretrain, finetune, analyze, sweep.

Every command writes its outputs under --out: checkpoint.tsr and/or
curves.csv / report.json, plus a manifest.json echoing the resolved
configuration. Exit codes: 0 success, 2 configuration problem, 3 numeric
failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, store
from .adapters import AdapterConfig, adapter_store, init_adapters, parse_ranks
from .analysis import delta_norms, forgetting_loss, similarity_report
from .errors import ConfigError, DivergenceError, NumericError, ShapeError, StoreFormatError
from .factorization import SplitKind, split
from .model import ModelConfig, model_from_store, model_to_store
from .store import TensorStore
from .tasks import SynthTask
from .training import TrainConfig, apply_finetune, finetune, finetune_store, pretrain, write_curves

DEFAULT_SEEDS = (11, 23, 37, 53, 71)
PRETRAIN_LR = 1e-3
FINETUNE_LR = 4e-4


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: dict, seeds: list[int],
                    inputs: dict, outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _train_config(args, default_lr: float) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr if args.lr is not None else default_lr,
        weight_decay=args.wd,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def cmd_decompose(args) -> None:
    started = time.monotonic()
    weights = store.read(args.weights)
    names = [n for n in weights.names() if fnmatch.fnmatch(n, args.tensors)]
    if not names:
        raise ConfigError(f"pattern {args.tensors!r} matches no tensors")
    kind = SplitKind(args.kind)
    result = TensorStore()
    for name in names:
        try:
            s = split(weights[name], args.rank, kind)
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        result.add(f"{name}.a", s.a)
        result.add(f"{name}.b", s.b)
        result.add(f"{name}.residual", s.residual)
    result.metadata.update(kind=kind.value, rank=str(args.rank), source=str(args.weights))
    out = _out_dir(args)
    store.write(result, out / "checkpoint.tsr")
    _write_manifest(out, "decompose",
                    {"rank": args.rank, "kind": kind.value, "tensors": args.tensors},
                    [], {"weights": str(args.weights)}, ["checkpoint.tsr"], started)


def _adapter_config(args) -> AdapterConfig:
    return AdapterConfig(scheme=args.scheme, ranks=parse_ranks(args.ranks),
                         alpha=args.alpha, seed=args.seed)


def cmd_init(args) -> None:
    started = time.monotonic()
    weights = store.read(args.weights)
    cfg = _adapter_config(args)
    adapters = init_adapters(weights, cfg)
    result = adapter_store(adapters, cfg)
    for name in ("classifier.weight", "classifier.bias"):
        if name in weights:
            result.add(name, weights[name])
    for key in ("layers", "dim", "heads", "ffn_dim", "vocab", "max_seq", "num_classes", "seed"):
        if key in weights.metadata:
            result.metadata.setdefault(key, weights.metadata[key])
    out = _out_dir(args)
    store.write(result, out / "checkpoint.tsr")
    _write_manifest(out, "init",
                    {"scheme": cfg.scheme.value, "ranks": args.ranks, "alpha": cfg.alpha},
                    [cfg.seed], {"weights": str(args.weights)}, ["checkpoint.tsr"], started)


def cmd_pretrain(args) -> None:
    started = time.monotonic()
    model_cfg = ModelConfig(layers=args.layers, dim=args.dim, heads=args.heads,
                            ffn_dim=args.ffn_dim, vocab=args.vocab, max_seq=args.seq,
                            num_classes=args.classes, seed=args.seed)
    task = SynthTask(kind=args.task, seq_len=args.seq, vocab=args.vocab,
                     num_classes=args.classes, sample_count=args.samples, seed=args.seed)
    train_cfg = _train_config(args, PRETRAIN_LR)
    model, rows = pretrain(model_cfg, task, train_cfg)
    out = _out_dir(args)
    store.write(model_to_store(model), out / "checkpoint.tsr")
    write_curves(rows, out / "curves.csv")
    _write_manifest(out, "pretrain",
                    {"task": task.kind.value, "model": model_cfg.to_metadata(),
                     "lr": train_cfg.learning_rate, "wd": train_cfg.weight_decay,
                     "epochs": train_cfg.epochs, "batch_size": train_cfg.batch_size,
                     "samples": args.samples},
                    [args.seed], {}, ["checkpoint.tsr", "curves.csv"], started)


def _finetune_one(pretrained: TensorStore, args, seed: int, out: Path,
                  ranks: dict[str, int] | None = None) -> None:
    started = time.monotonic()
    adapter_cfg = AdapterConfig(scheme=args.scheme,
                                ranks=ranks if ranks is not None else parse_ranks(args.ranks),
                                alpha=args.alpha, seed=seed)
    task = SynthTask(kind=args.task,
                     seq_len=int(pretrained.metadata["max_seq"]),
                     vocab=int(pretrained.metadata["vocab"]),
                     num_classes=int(pretrained.metadata["num_classes"]),
                     sample_count=args.samples, seed=seed)
    train_cfg = TrainConfig(learning_rate=args.lr if args.lr is not None else FINETUNE_LR,
                            weight_decay=args.wd, epochs=args.epochs,
                            batch_size=args.batch_size, seed=seed)
    model, rows = finetune(pretrained, adapter_cfg, task, train_cfg)
    out.mkdir(parents=True, exist_ok=True)
    store.write(finetune_store(model, adapter_cfg), out / "checkpoint.tsr")
    write_curves(rows, out / "curves.csv")
    _write_manifest(out, "finetune",
                    {"scheme": adapter_cfg.scheme.value,
                     "ranks": {p: r for p, r in adapter_cfg.ranks.items() if r},
                     "alpha": adapter_cfg.alpha, "task": task.kind.value,
                     "lr": train_cfg.learning_rate, "wd": train_cfg.weight_decay,
                     "epochs": train_cfg.epochs, "batch_size": train_cfg.batch_size,
                     "samples": args.samples},
                    [seed], {"weights": str(args.weights)},
                    ["checkpoint.tsr", "curves.csv"], started)


def cmd_finetune(args) -> None:
    pretrained = store.read(args.weights)
    if "max_seq" not in pretrained.metadata:
        raise ConfigError("weight store carries no model metadata; run pretrain first")
    _finetune_one(pretrained, args, args.seed, _out_dir(args))


def cmd_analyze(args) -> None:
    started = time.monotonic()
    out = _out_dir(args)
    if args.metric == "similarity":
        a = store.read(args.a)
        b = store.read(args.b)
        report = similarity_report(a, b, args.proj, args.rank).to_dict()
        inputs = {"a": str(args.a), "b": str(args.b)}
    elif args.metric == "delta-norms":
        pre = store.read(args.pre)
        ft = store.read(args.ft)
        report = {"metric": "delta_norm", "per_layer": delta_norms(pre, ft, args.proj),
                  "params": {"projection": args.proj}}
        inputs = {"pre": str(args.pre), "ft": str(args.ft)}
    else:
        pre = store.read(args.pre)
        ft = store.read(args.ft)
        pre_model = model_from_store(pre)
        ft_model = apply_finetune(pre, ft)
        task = SynthTask(kind=args.task, seq_len=pre_model.cfg.max_seq,
                         vocab=pre_model.cfg.vocab, num_classes=pre_model.cfg.num_classes,
                         seed=args.seed)
        tokens, _ = task.eval_data(args.samples)
        report = forgetting_loss(pre_model, ft_model, tokens).to_dict()
        inputs = {"pre": str(args.pre), "ft": str(args.ft)}
    _write_report(out, report)
    _write_manifest(out, f"analyze {args.metric}", {k: v for k, v in report["params"].items()},
                    [getattr(args, "seed", 0)] if args.metric == "forgetting" else [],
                    inputs, ["report.json"], started)


def _parse_seeds(text: str) -> list[int]:
    if text.strip().lower() == "all":
        return list(DEFAULT_SEEDS)
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad seeds spec {text!r}; expected like 11,23 or 'all'") from None


def cmd_sweep(args) -> None:
    started = time.monotonic()
    pretrained = store.read(args.weights)
    if "max_seq" not in pretrained.metadata:
        raise ConfigError("weight store carries no model metadata; run pretrain first")
    projections = [p.strip() for p in args.proj.split(",") if p.strip()]
    try:
        ranks = [int(r) for r in args.ranks.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"bad rank grid {args.ranks!r}; expected like 4,8") from None
    if not projections or not ranks:
        raise ConfigError("sweep needs at least one projection and one rank")
    seeds = _parse_seeds(args.seeds)
    out = _out_dir(args)
    jobs = [(r, seed) for r in ranks for seed in seeds]
    threads = max(1, int(os.environ.get("AILORA_THREADS", "1")))

    def run(job: tuple[int, int]) -> None:
        r, seed = job
        _finetune_one(pretrained, args, seed, out / f"rank{r}" / f"seed{seed}",
                      ranks={p: r for p in projections})

    if threads == 1:
        for job in jobs:
            run(job)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for future in [pool.submit(run, job) for job in jobs]:
                future.result()
    _write_manifest(out, "sweep",
                    {"scheme": args.scheme, "projections": projections, "ranks": ranks,
                     "alpha": args.alpha, "task": args.task, "epochs": args.epochs},
                    seeds, {"weights": str(args.weights)},
                    [f"rank{r}/seed{s}" for r, s in jobs], started)


def _add_train_flags(parser: argparse.ArgumentParser, epochs: int) -> None:
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--wd", type=float, default=0.01)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--samples", type=int, default=2048)


def _add_adapter_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scheme", choices=["lora", "pissa", "milora", "ailora"],
                        default="ailora")
    parser.add_argument("--ranks", default="q=8,v=8")
    parser.add_argument("--alpha", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ailora",
                                     description="Low-rank adapter initialization toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="split stored matrices into b, a, residual")
    p.add_argument("--weights", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--kind", choices=["principal", "minor"], default="principal")
    p.add_argument("--tensors", default="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("init", help="initialize adapters without training")
    p.add_argument("--weights", required=True)
    _add_adapter_flags(p)
    p.add_argument("--seed", type=int, default=DEFAULT_SEEDS[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("pretrain", help="train a fresh model on a synthetic task")
    p.add_argument("--task", choices=["majority", "parity", "copyfirst"], default="majority")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=128)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    _add_train_flags(p, epochs=30)
    p.add_argument("--seed", type=int, default=DEFAULT_SEEDS[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pretrained checkpoint to a new task")
    p.add_argument("--weights", required=True)
    _add_adapter_flags(p)
    p.add_argument("--task", choices=["majority", "parity", "copyfirst"], default="parity")
    _add_train_flags(p, epochs=8)
    p.add_argument("--seed", type=int, default=DEFAULT_SEEDS[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("analyze", help="similarity, delta-norms, or forgetting reports")
    p.add_argument("metric", choices=["similarity", "delta-norms", "forgetting"])
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--pre")
    p.add_argument("--ft")
    p.add_argument("--proj", choices=["q", "k", "v", "o"], default="q")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--task", choices=["majority", "parity", "copyfirst"], default="majority")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=DEFAULT_SEEDS[0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="finetune across a rank grid and seed set")
    p.add_argument("--weights", required=True)
    _add_adapter_flags(p)
    # sweep reads --ranks as a grid of integers, not a per-projection map
    p.set_defaults(ranks="8")
    p.add_argument("--proj", default="q,v")
    p.add_argument("--task", choices=["majority", "parity", "copyfirst"], default="parity")
    _add_train_flags(p, epochs=8)
    p.add_argument("--seeds", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "analyze":
        needed = {"similarity": ("a", "b"), "delta-norms": ("pre", "ft"),
                  "forgetting": ("pre", "ft")}[args.metric]
        missing = [f"--{name}" for name in needed if getattr(args, name) is None]
        if missing:
            print(f"error: analyze {args.metric} requires {' and '.join(missing)}",
                  file=sys.stderr)
            return 2
    try:
        args.func(args)
    except (ConfigError, ShapeError, StoreFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
