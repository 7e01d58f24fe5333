"""``teinet`` command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 I/O or file-format error, 4 numerical divergence, 5 gradient check failure.
"""
import argparse
import csv
import hashlib
import os
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from . import ablation, analysis, bench, gradcheck
from .backbone import build_network, evaluate, load_checkpoint, save_checkpoint, train
from .config import RunConfig, load_config
from .data import SyntheticVideoConfig, class_names, generate_dataset, load_dataset, save_dataset
from .errors import ContractError, FormatError, NumericalDivergence

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NAN, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

TRAIN_FILE, EVAL_FILE = "train.teid", "eval.teid"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _print_histogram(ds, label):
    names = class_names(ds.task) if ds.task else [str(i) for i in range(ds.num_classes)]
    counts = ds.class_counts()
    print(f"{label}: {len(ds)} clips, {ds.num_classes} classes")
    for name, count in zip(names, counts):
        print(f"  {name:<14}{count:>6}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _resolve_data(path, which):
    """``path`` is a gen-data directory or a single .teid file."""
    if os.path.isdir(path):
        return load_dataset(os.path.join(path, which))
    return load_dataset(path)


def _config(args):
    return load_config(args.config) if getattr(args, "config", None) else RunConfig.from_dict({})


def _datasets(args, cfg):
    if args.data:
        return _resolve_data(args.data, TRAIN_FILE), _resolve_data(args.data, EVAL_FILE)
    return cfg.data.train_set(), cfg.data.eval_set()


def _check_classes(spec, ds):
    if ds.num_classes != spec.num_classes:
        raise CliError(f"dataset has {ds.num_classes} classes but the network expects "
                       f"{spec.num_classes}; set network.num_classes in the config", EXIT_CONFIG)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = SyntheticVideoConfig(task=args.task, raw_frames=args.raw_frames, spatial=args.spatial,
                               seed=args.seed).validate()
    os.makedirs(args.out, exist_ok=True)
    n_eval = args.eval_n_per_class or args.n_per_class
    for fname, n, split_seed, split in ((TRAIN_FILE, args.n_per_class, 1, "train"),
                                        (EVAL_FILE, n_eval, 2, "eval")):
        ds = generate_dataset(cfg, n, split_seed=split_seed, split=split)
        path = os.path.join(args.out, fname)
        save_dataset(ds, path)
        _print_histogram(ds, f"{split} -> {path}")
        print(f"  sha256 {_sha256(path)}")
    return EXIT_OK


def _write_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "eval_acc"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["train_acc"]),
                        repr(r["eval_acc"])])


def cmd_train(args):
    cfg = _config(args)
    train_ds, eval_ds = _datasets(args, cfg)
    _check_classes(cfg.network, train_ds)
    model = build_network(cfg.network, seed=cfg.seed)
    tc = cfg.train

    def report(row):
        print(f"epoch {row['epoch']:>3}  lr {row['lr']:.5f}  loss {row['train_loss']:.4f}  "
              f"train {row['train_acc']:.4f}  eval {row['eval_acc']:.4f}")

    log = train(model, train_ds, tc.epochs, tc.schedule(), tc.batch_size, seed=cfg.seed,
                eval_dataset=eval_ds, momentum=tc.momentum, weight_decay=tc.weight_decay,
                on_epoch=None if args.quiet else report)
    if args.out_checkpoint:
        save_checkpoint(model, args.out_checkpoint)
    if args.log_csv:
        _write_log(log, args.log_csv)
    print(f"final eval accuracy {log[-1]['eval_acc']:.6f}")
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    ds = _resolve_data(args.data, EVAL_FILE)
    _check_classes(model.spec, ds)
    top1, per_class = evaluate(model, ds)
    names = class_names(ds.task) if ds.task else [str(i) for i in range(ds.num_classes)]
    print(f"top1 {top1:.6f}")
    for name, acc in zip(names, per_class):
        print(f"  {name:<14}{acc:.6f}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args)
    train_ds, eval_ds = _datasets(args, cfg)
    _check_classes(cfg.network, train_ds)
    variants = ablation.parse_variants(args.variants)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"--seeds must be comma-separated integers: {exc}", EXIT_CONFIG) from exc
    table = ablation.run_ablation(train_ds, eval_ds, variants, seeds, cfg)
    ablation.write_summary_csv(table, args.out_csv)
    if args.log_csv:
        ablation.write_epoch_log_csv(table, args.log_csv)
    for row in ablation.summary_rows(table):
        accs = "  ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "variant")
        print(f"{row['variant']:<9}{accs}")
    return EXIT_OK


def cmd_gradcheck(args):
    ops = None if args.op == "all" else [args.op]
    if ops and ops[0] not in gradcheck.CASES:
        raise CliError(f"unknown op {args.op!r}; valid: all, {', '.join(gradcheck.CASES)}",
                       EXIT_CONFIG)
    results = gradcheck.run_checks(ops, seeds=range(args.seeds))
    failed = False
    for op in (ops or list(gradcheck.CASES)):
        rs = [r for r in results if r.op == op]
        worst = max(r.max_rel_error for r in rs)
        ok = all(r.ok for r in rs)
        failed |= not ok
        skipped = sum(r.skipped for r in rs)
        extra = f"  ({skipped} kink-straddling coords skipped)" if skipped else ""
        print(f"{op:<24}{'PASS' if ok else 'FAIL'}  max rel err {worst:.2e} over {len(rs)} seeds{extra}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_flops(args):
    if args.frames < 1:
        raise CliError("--frames must be positive", EXIT_CONFIG)
    if args.arch == "resnet50":
        stages = tuple(int(s) for s in args.stages.split(",")) if args.stages else (0, 1, 2, 3)
        g = analysis.resnet50_teinet_spec(args.frames, args.spatial, args.num_classes,
                                          stages, args.variant or "none")
        title = (f"ResNet-50 {args.variant or 'none'} @ {args.frames}x{args.spatial}x{args.spatial}, "
                 f"{args.num_classes} classes")
    else:
        cfg = _config(args)
        spec = replace(cfg.network, frames=args.frames,
                       variant=args.variant or cfg.network.variant)
        g = analysis.mini_graph(spec)
        title = f"mini {spec.variant} @ {spec.frames}x{spec.input_spatial}x{spec.input_spatial}"
    report = analysis.cost_report(g)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(report.to_csv())
    if args.summary:
        print(title)
        print(f"params = {report.params / 1e6:.2f} M, FLOPs (MACs) = {report.macs / 1e9:.2f} G")
    else:
        print(report.format_table(title))
    return EXIT_OK


def cmd_bench(args):
    cfg = _config(args)
    spec = cfg.network if not args.variant else replace(cfg.network, variant=args.variant)
    model = build_network(spec, seed=cfg.seed)
    workers = ablation.worker_count()
    lat = bench.bench_latency(model, batch=1, warmup=args.warmup, iters=args.iters, workers=workers)
    thr = bench.bench_throughput(model, batch=16, warmup=1, iters=max(3, args.iters // 3),
                                 workers=workers)
    medians, spread = bench.stability(model, runs=3, batch=1, warmup=args.warmup,
                                      iters=args.iters, workers=workers)
    print(f"variant {spec.variant}, workers {workers}")
    print(f"latency  batch 1 : median {lat.median_ms:.3f} ms  IQR {lat.iqr_ms:.3f} ms  "
          f"({lat.iters} iters after {args.warmup} warmup)")
    print(f"throughput batch 16: {thr.clips_per_s():.2f} clips/s  "
          f"(median {thr.median_ms:.3f} ms/batch, IQR {thr.iqr_ms:.3f} ms)")
    print("stability: medians " + ", ".join(f"{m:.3f}" for m in medians)
          + f" ms, spread {100 * spread:.1f}% -> {'pass' if spread < 0.2 else 'FAIL'} (gate 20%)")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="teinet", description="Temporal enhancement-and-interaction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/eval synthetic datasets into a directory")
    g.add_argument("--task", default="direction4")
    g.add_argument("--n-per-class", type=int, default=50)
    g.add_argument("--eval-n-per-class", type=int, default=None)
    g.add_argument("--out", required=True, help="output directory (train.teid, eval.teid)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--raw-frames", type=int, default=32)
    g.add_argument("--spatial", type=int, default=32)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one network")
    t.add_argument("--config")
    t.add_argument("--data", help="gen-data directory; generated from the config if omitted")
    t.add_argument("--out-checkpoint")
    t.add_argument("--log-csv")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="gen-data directory (uses eval.teid) or a .teid file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every variant under every seed")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--variants", default=",".join(ablation.DEFAULT_VARIANTS))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out-csv", required=True)
    a.add_argument("--log-csv")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--op", default="all")
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="parameter and MAC counts")
    f.add_argument("--arch", choices=("mini", "resnet50"), default="resnet50")
    f.add_argument("--frames", type=int, default=8)
    f.add_argument("--variant")
    f.add_argument("--spatial", type=int, default=224)
    f.add_argument("--num-classes", type=int, default=174)
    f.add_argument("--stages", help="comma-separated insertion stages, 0..3 = res2..res5")
    f.add_argument("--config", help="network config for --arch mini")
    f.add_argument("--csv", help="also write the per-layer breakdown as CSV")
    f.add_argument("--summary", action="store_true", help="print totals only")
    f.set_defaults(func=cmd_flops)

    b = sub.add_parser("bench", help="latency (batch 1) and throughput (batch 16)")
    b.add_argument("--config")
    b.add_argument("--variant")
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        workers = ablation.worker_count()
        with threadpool_limits(limits=workers):
            return args.func(args)
    except CliError as exc:
        print(f"teinet: {exc}", file=sys.stderr)
        return exc.code
    except NumericalDivergence as exc:
        print(f"teinet: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NAN
    except FormatError as exc:
        print(f"teinet: bad file: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ValueError, KeyError) as exc:
        print(f"teinet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"teinet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
