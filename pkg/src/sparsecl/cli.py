"""Command-line entry point: ``sparsecl train | eval | grad-check``.

Errors exit nonzero with a JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import TrainConfig, load_config
from .data import build_split_tasks, build_synthetic_tasks, load_idx_dir
from .errors import SparseCLError
from .gradcheck import numeric_grad_check
from .metrics import CLASS_IL, TASK_IL, evaluate
from .nn import build_cnn, build_mlp, load_checkpoint, resolve_dtype
from .trainer import emit_report, run_experiment

log = logging.getLogger("sparsecl")

# CLI flag -> TrainConfig field
_OVERRIDES = {
    "method": "method", "sparsity": "s", "gradient_extra_sparsity": "q", "rho": "rho",
    "cutoff": "cutoff", "delta_k": "delta_k", "buffer": "buffer", "seed": "seed",
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "arch": "arch",
    "precision": "precision", "p_intra": "p_intra", "p_inter": "p_inter", "removal": "removal",
}


def _stream_args(p):
    p.add_argument("--data", default=None,
                   help="directory holding MNIST-style IDX files, or 'synthetic'")
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--classes-per-task", type=int, default=2)
    p.add_argument("--synthetic-dim", type=int, default=784)
    p.add_argument("--synthetic-separation", type=float, default=5.0)
    p.add_argument("--synthetic-per-class", type=int, default=250)
    p.add_argument("--data-seed", type=int, default=0)


def make_stream(data, tasks=5, classes_per_task=2, dim=784, separation=5.0, per_class=250,
                seed=0):
    if data in (None, "synthetic"):
        return build_synthetic_tasks(tasks, classes_per_task, dim, per_class, separation, seed)
    train, test = load_idx_dir(data)
    return build_split_tasks(train, tasks, classes_per_task, seed=seed, test=test,
                             description={"source": str(data)})


def _stream_from_args(args, recorded=None):
    recorded = recorded or {}
    if args.data is None and recorded.get("kind") == "synthetic":
        return build_synthetic_tasks(recorded["T"], recorded["classes_per_task"], recorded["dim"],
                                     recorded["n_per_class"], recorded["separation"],
                                     recorded["seed"], recorded.get("noise", 1.0))
    if args.data is None and "source" in recorded:
        return make_stream(recorded["source"], recorded["T"], recorded["classes_per_task"],
                           seed=recorded["seed"])
    return make_stream(args.data, args.tasks, args.classes_per_task, args.synthetic_dim,
                       args.synthetic_separation, args.synthetic_per_class, args.data_seed)


def cmd_train(args):
    values = load_config(args.config) if args.config else {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    cfg = TrainConfig.from_dict(values).resolved()
    stream = _stream_from_args(args)
    log.info("training %s on %d tasks (%s)", cfg.method, stream.T, stream.description["kind"])
    report = run_experiment(cfg, stream)
    paths = emit_report(report, args.out, buffer_dump=args.dump_buffer)
    m = report.metrics
    print(json.dumps({"class_il_avg": m["class_il_avg"], "task_il_avg": m["task_il_avg"],
                      "train_flops_total": m["train_flops_total"],
                      "memory_footprint_bytes": m["memory_footprint_bytes"], "outputs": paths},
                     indent=2))


def cmd_eval(args):
    model, extra = load_checkpoint(args.checkpoint)
    stream = _stream_from_args(args, extra.get("data"))
    if stream.class_count != model.class_count:
        raise SparseCLError(
            f"data has {stream.class_count} classes, checkpoint expects {model.class_count}"
        )
    table = evaluate(model, stream.tasks, args.mode)
    print(json.dumps(table.to_dict(), indent=2))


def cmd_grad_check(args):
    dtype = resolve_dtype(args.precision)
    rng = np.random.default_rng(args.seed)
    results = {}
    if args.arch in ("mlp", "both"):
        model = build_mlp(784, 10, dtype=dtype, seed=args.seed)
        x = rng.random((8, 784))
        y = rng.integers(0, 10, 8)
        results["mlp"] = numeric_grad_check(model, x, y, args.samples, args.tol, seed=args.seed)
    if args.arch in ("cnn", "both"):
        model = build_cnn((1, 28, 28), 10, dtype=dtype, seed=args.seed)
        x = rng.random((4, 1, 28, 28))
        y = rng.integers(0, 10, 4)
        results["cnn"] = numeric_grad_check(model, x, y, args.samples, args.tol, seed=args.seed)
    out = {k: r.to_dict() for k, r in results.items()}
    print(json.dumps(out, indent=2))
    if not all(r.passed for r in results.values()):
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sparsecl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a continual-learning experiment")
    t.add_argument("--config", help="flat YAML file of TrainConfig keys")
    t.add_argument("--method", choices=["sgd", "er", "derpp", "sparcl-er", "sparcl-derpp"])
    t.add_argument("--sparsity", type=float)
    t.add_argument("--gradient-extra-sparsity", type=float)
    t.add_argument("--rho", type=float)
    t.add_argument("--cutoff", type=int)
    t.add_argument("--delta-k", type=int)
    t.add_argument("--p-intra", type=float)
    t.add_argument("--p-inter", type=float)
    t.add_argument("--removal", choices=["ddr", "one-shot"])
    t.add_argument("--buffer", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--arch", choices=["mlp", "cnn"])
    t.add_argument("--precision", choices=["f32", "f64"])
    t.add_argument("--out", required=True)
    t.add_argument("--dump-buffer", action="store_true")
    _stream_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=[CLASS_IL, TASK_IL], default=CLASS_IL)
    _stream_args(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of backprop")
    g.add_argument("--precision", choices=["f32", "f64"], default="f64")
    g.add_argument("--arch", choices=["mlp", "cnn", "both"], default="both")
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--tol", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except SparseCLError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
