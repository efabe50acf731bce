"""Command-line entry point.

usage:
  steercnn train <config>
  steercnn eval <config> <ckpt>
  steercnn equiv-report <config> <ckpt> [--image N] [--out DIR]
  steercnn export-filters <config> [--ckpt PATH] <outdir>
  steercnn grad-check [--op NAME]

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric failure.
DSF_THREADS caps the BLAS/OpenMP worker threads.
"""
import os
import sys

# thread caps only take effect if set before numpy loads its BLAS
if os.environ.get("DSF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS"):
        os.environ[_var] = os.environ["DSF_THREADS"]

import argparse  # noqa: E402
import math  # noqa: E402

import numpy as np  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_cap() -> int | None:
    raw = os.environ.get("DSF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DSF_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DSF_THREADS must be a positive integer, got {raw!r}")
    return n


def _limit_threads(n: int | None):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(n)


def cmd_train(args) -> int:
    from .config import load_config
    from .train import train

    rc = load_config(args.config)
    summary = train(rc)
    if summary["epochs"]:
        print(f"done: best test_acc {summary['best_test_acc']:.4f}, final test_acc "
              f"{summary['final_test_acc']:.4f}, {summary['params']} params")
    else:
        print(f"done: 0 epochs, untrained checkpoint {summary['checkpoint']}")
    print(f"metrics: {summary['metrics']}")
    print(f"checkpoint: {summary['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import load_config
    from .train import evaluate

    rc = load_config(args.config)
    acc = evaluate(rc, args.ckpt)
    print(f"test_acc {acc:.4f}  test_error {100 * (1 - acc):.2f}%")
    return EXIT_OK


def _baseline(rc, calib):
    """Plain-CNN contrast model: from report.baseline_* if set, else random with BN calibrated."""
    from dataclasses import replace

    from . import checkpoint
    from .config import load_config
    from .model import analytic_param_count, build_classifier, calibrate_bn, match_width

    if rc["report.baseline_config"]:
        brc = load_config(rc["report.baseline_config"])
        model = build_classifier(brc.model, seed=brc["model.seed"])
        if rc["report.baseline_checkpoint"]:
            checkpoint.load(rc["report.baseline_checkpoint"], model)
            return model
    else:
        cfg = rc.model
        plain = replace(cfg, n=1, family="plain")
        plain = match_width(plain, analytic_param_count(cfg))
        model = build_classifier(plain, seed=rc["report.baseline_seed"])
        if rc["report.baseline_checkpoint"]:
            checkpoint.load(rc["report.baseline_checkpoint"], model)
            return model
    calibrate_bn(model, calib)
    return model


def cmd_equiv_report(args) -> int:
    from .config import load_config
    from .report import equivariance_report, format_report
    from .train import load_model, prepare_split

    rc = load_config(args.config)
    model = load_model(rc, args.ckpt)
    test = prepare_split(rc, "test")
    if not 0 <= args.image < len(test.y):
        raise UsageError(f"--image must lie in [0, {len(test.y)})")
    baseline = _baseline(rc, test.x[:256])
    out_dir = args.out or os.path.join(rc["output.dir"], "equiv_report")
    report = equivariance_report(model, test.x[args.image:args.image + 1], out_dir, baseline)
    print(format_report(report))
    print(f"report: {os.path.join(out_dir, 'report.json')}")
    return EXIT_OK


def cmd_export_filters(args) -> int:
    from .basis import synthesize_filter, write_basis_pgms
    from .config import load_config
    from .model import build_classifier
    from .pgm import write_pgm

    rc = load_config(args.config)
    model = build_classifier(rc.model, seed=rc["model.seed"])
    if args.ckpt:
        from . import checkpoint
        checkpoint.load(args.ckpt, model)
    try:
        os.makedirs(args.outdir, exist_ok=True)
        probe = os.path.join(args.outdir, ".write-test")
        open(probe, "wb").close()
        os.remove(probe)
    except OSError as e:
        raise DataErrorProxy(f"cannot write to {args.outdir}: {e.strerror}") from None
    written = 0
    for size in (7, 5):
        written += len(write_basis_pgms(model.basis(size), os.path.join(args.outdir, f"basis{size}")))
    unit = model.stem_in
    n = model.cfg.n
    fdir = os.path.join(args.outdir, "filters")
    os.makedirs(fdir, exist_ok=True)
    if unit.layer is not None:
        w = unit.layer.complex_weights  # (O, C, P)
        for o in range(w.shape[0]):
            for c in range(w.shape[1]):
                for s in range(n):
                    plane = synthesize_filter(w[o, c], unit.layer.basis, 2 * math.pi * s / n)
                    write_pgm(os.path.join(fdir, f"{unit.name}_o{o}_c{c}_r{s}.pgm"), plane)
                    written += 1
    else:
        w = unit.w.data
        for o in range(w.shape[0]):
            for c in range(w.shape[1]):
                write_pgm(os.path.join(fdir, f"{unit.name}_o{o}_c{c}_r0.pgm"), w[o, c])
                written += 1
    print(f"wrote {written} PGM files under {args.outdir}")
    return EXIT_OK


class DataErrorProxy(Exception):
    pass


def cmd_grad_check(args) -> int:
    from . import gradcheck

    names = [args.op] if args.op else None
    if args.op and args.op not in gradcheck.OPS:
        raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(gradcheck.OPS)}")
    failed = 0
    for name, err in gradcheck.run(names, seed=args.seed).items():
        ok = np.isfinite(err) and err <= gradcheck.TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:24s} rel_err {err:.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="steercnn", description="Rotation-equivariant steerable G-CNNs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    t = sub.add_parser("train", help="train a classifier from a config file")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("config")
    e.add_argument("ckpt")
    e.set_defaults(func=cmd_eval)
    r = sub.add_parser("equiv-report", help="feature-variance equivariance diagnostic")
    r.add_argument("config")
    r.add_argument("ckpt")
    r.add_argument("--image", type=int, default=0, help="index into the test set")
    r.add_argument("--out", default=None, help="output directory (default: <output.dir>/equiv_report)")
    r.set_defaults(func=cmd_equiv_report)
    x = sub.add_parser("export-filters", help="write basis and learned filters as PGM")
    x.add_argument("config")
    x.add_argument("--ckpt", default=None)
    x.add_argument("outdir")
    x.set_defaults(func=cmd_export_filters)
    g = sub.add_parser("grad-check", help="finite-difference gradient checks")
    g.add_argument("--op", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .data import DataError
    from .model import ConfigError
    from .train import NumericError

    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("steercnn: a command is required (train, eval, equiv-report, "
                             "export-filters, grad-check)")
        with _limit_threads(thread_cap()) or _nullcontext():
            return args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, DataErrorProxy) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


if __name__ == "__main__":
    sys.exit(main())
