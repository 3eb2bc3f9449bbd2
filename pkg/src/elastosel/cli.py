"""Command-line entry point: ``elastosel <command> ...``.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 precondition
failure, 4 the selector abstained.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import classifier, motion, oracle, selector, simulate
from .errors import FormatError, PreconditionError
from .nn import load_model, save_model
from .rf_core import load_frame, read_labels

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PRECONDITION, EXIT_ABSTAIN = 0, 1, 2, 3, 4

log = logging.getLogger("elastosel")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {text}")
    return v


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ELASTO_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ELASTO_SEED must be an integer, got {env!r}")


def _emit(args, payload: dict, text: str):
    print(json.dumps(payload) if getattr(args, "json", False) else text)


# -- commands ------------------------------------------------------------------

def cmd_simulate(args):
    seed = _seed(args)
    if args.pairs < 10:
        raise UsageError("--pairs must be at least 10")
    dims = (args.axial, args.lateral)
    pulse = simulate.PulseSpec()
    rows = simulate.synth_dataset(args.pairs, args.good_fraction, dims, pulse, seed, args.out)
    good = sum(r["regime"] == "good" for r in rows)
    _emit(args, dict(pairs=len(rows), good=good, seed=seed),
          f"pairs={len(rows)} good={good} seed={seed}")
    return EXIT_OK


def cmd_label(args):
    def progress(i, total, pid, rep, seconds):
        if rep is None:
            print(f"[{i + 1}/{total}] {pid} skipped", file=sys.stderr)
        else:
            print(f"[{i + 1}/{total}] {pid} min_ncc={rep.min_ncc:.4f} "
                  f"mean_abs_disp={rep.mean_abs_disp_samples:.3f} decision={rep.decision} "
                  f"time={seconds:.2f}s", file=sys.stderr)

    t0 = time.perf_counter()
    records, skipped = oracle.label_dataset(
        Path(args.input) / "manifest.csv", out=args.out,
        ncc_threshold=args.ncc_threshold, disp_threshold=args.disp_threshold,
        report_dir=args.reports, progress=progress)
    elapsed = time.perf_counter() - t0
    n_good = sum(r.label for r in records)
    per_pair = elapsed / max(1, len(records) + len(skipped))
    _emit(args, dict(labeled=len(records), good=n_good, skipped=len(skipped),
                     seconds_per_pair=per_pair),
          f"labeled={len(records)} good={n_good} skipped={len(skipped)} "
          f"seconds_per_pair={per_pair:.3f}")
    return EXIT_OK


def cmd_train(args):
    seed = _seed(args)
    labels = Path(args.labels)
    if not labels.is_file():
        raise FormatError(f"missing labels file: {labels}")
    records = read_labels(labels)
    cfg = classifier.TrainConfig(lr=args.lr, max_epochs=args.epochs, seed=seed)

    def progress(e):
        print(f"epoch={e['epoch']} train_loss={e['train_loss']:.4f} "
              f"val_loss={e['val_loss']:.4f} val_accuracy={e['val_accuracy']:.4f}",
              file=sys.stderr)

    model, report = classifier.train(records, args.data, cfg=cfg, progress=progress)
    save_model(model, args.model)
    report_path = args.report or str(Path(args.model).with_suffix(".csv"))
    report.write_csv(report_path)
    _emit(args, dict(best_epoch=report.best_epoch, best_val_accuracy=report.best_val_accuracy,
                     model=str(args.model), report=report_path),
          f"best_val_accuracy={report.best_val_accuracy:.4f}")
    return EXIT_OK


def cmd_classify(args):
    model = load_model(args.model)
    pred = classifier.predict(model, load_frame(args.a), load_frame(args.b))
    _emit(args, dict(p_good=pred.p_good, p_bad=pred.p_bad, decision=pred.decision),
          f"p_good={pred.p_good:.6f} p_bad={pred.p_bad:.6f} decision={pred.decision}")
    return EXIT_OK


def cmd_select(args):
    model = load_model(args.model)
    seq = Path(args.seq)
    if not seq.is_dir():
        raise FormatError(f"missing sequence directory: {seq}")
    frames = selector.FrameDirectory(seq)
    if not 0 <= args.index < len(frames):
        raise UsageError(f"--index {args.index} outside sequence of {len(frames)} frames")
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    result = selector.select_best(selector.score_candidates(model, frames, args.index, args.window))
    # the result is JSON either way; --json only guarantees nothing else reaches stdout
    print(result.to_json(args.index, args.window))
    return EXIT_ABSTAIN if result.abstained else EXIT_OK


def cmd_strain(args):
    a, b = load_frame(args.a), load_frame(args.b)
    if a.shape != b.shape:
        raise FormatError(f"frame shapes differ: {a.shape} vs {b.shape}")
    disp = motion.estimate_displacement(a, b)
    try:
        strain = motion.compute_strain(disp, args.ls_window)
    except ValueError as exc:
        raise UsageError(str(exc))
    motion.write_pgm(strain.values, args.out)
    if args.csv:
        motion.write_strain_csv(strain.values, args.csv)
    med = float(np.median(strain.values[strain.valid])) if strain.valid.any() else float("nan")
    _emit(args, dict(rows=strain.values.shape[0], cols=strain.values.shape[1],
                     median_strain=med),
          f"strain {strain.values.shape[0]}x{strain.values.shape[1]} median={med:.6f}")
    return EXIT_OK


def time_classify(model, a, b, repeat):
    """Median seconds for (preprocess, forward, total) over ``repeat`` runs."""
    arch = classifier.model_arch(model)
    pre, fwd, tot = [], [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        x = classifier.preprocess_pair(a, b, arch)
        t1 = time.perf_counter()
        classifier.predict_tensor(model, x)
        t2 = time.perf_counter()
        pre.append(t1 - t0)
        fwd.append(t2 - t1)
        tot.append(t2 - t0)
    return statistics.median(pre), statistics.median(fwd), statistics.median(tot)


def time_oracle(a, b, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        oracle.evaluate_pair(a, b)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args):
    if args.repeat < 3:
        raise UsageError("--repeat must be at least 3 to take a median")
    model = load_model(args.model)
    a, b = load_frame(args.a), load_frame(args.b)
    pre, fwd, cls = time_classify(model, a, b, args.repeat)
    orc = time_oracle(a, b, args.repeat)
    ratio = orc / cls
    _emit(args, dict(classify_s=cls, preprocess_s=pre, forward_s=fwd, oracle_s=orc,
                     ratio=ratio, repeat=args.repeat),
          f"classify={cls * 1e3:.2f}ms (preprocess={pre * 1e3:.2f}ms forward={fwd * 1e3:.2f}ms) "
          f"oracle={orc * 1e3:.1f}ms ratio={ratio:.1f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="elastosel", description="RF frame-pair suitability for elastography.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic labeled-regime dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=_positive_int, required=True)
    s.add_argument("--good-fraction", type=_fraction, default=0.5)
    s.add_argument("--axial", type=_positive_int, default=512)
    s.add_argument("--lateral", type=_positive_int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("label", help="label a dataset with the NCC oracle")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ncc-threshold", type=float, default=oracle.NCC_THRESHOLD)
    s.add_argument("--disp-threshold", type=float, default=oracle.DISP_THRESHOLD)
    s.add_argument("--reports", help="directory for per-pair JSON reports")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("train", help="train the pair classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--report", help="training report CSV (default: model path with .csv)")
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--epochs", type=_positive_int, default=30)
    s.add_argument("--seed", type=int)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="score one frame pair")
    s.add_argument("--model", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("select", help="choose the best partner for a reference frame")
    s.add_argument("--model", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--window", type=int, default=selector.DEFAULT_WINDOW)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("strain", help="estimate an axial strain image")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.add_argument("--ls-window", type=int, default=63)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_strain)

    s = sub.add_parser("bench", help="time the classifier against the oracle")
    s.add_argument("--model", required=True)
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--repeat", type=int, default=5)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"elastosel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"elastosel {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PreconditionError as exc:
        print(f"elastosel {args.command}: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except ValueError as exc:
        # invalid frame contents or incompatible dimensions surface as ValueError
        print(f"elastosel {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
