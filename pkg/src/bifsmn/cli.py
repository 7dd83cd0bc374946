"""Command-line entry point: ``bifsmn {infer,train-toy,bench,wavelet-diagnose}``.

Every failure prints one line ``error:<category>: message`` to stderr and
exits nonzero.
"""
import argparse
import csv
import io
import os
import sys

import numpy as np

from . import wavelet
from .bench import run_benchmark
from .binarize import sign
from .bitkernel import BACKENDS
from .errors import BifsmnError, DegenerateError
from .fsmn import count_flops, softmax
from .io import load_features, load_model, save_model
from .trainer import run_toy


class UsageError(BifsmnError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sizes(text):
    out = []
    for item in text.split(","):
        parts = item.lower().split("x")
        if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise argparse.ArgumentTypeError(f"bad size {item!r}; expected MxNxK")
        out.append(tuple(int(p) for p in parts))
    return out


def build_parser():
    p = _Parser(prog="bifsmn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("infer", help="classify one feature file")
    q.add_argument("--model", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--delta", type=int, default=1)

    q = sub.add_parser("train-toy", help="train a binarized model on synthetic data")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--steps", type=int, default=1500)
    q.add_argument("--gamma", type=float, default=0.01)
    q.add_argument("--out", required=True, help="output directory for model.bfsm and train_log.csv")

    q = sub.add_parser("bench", help="time BGEMM backends against a naive float loop")
    q.add_argument("--sizes", type=_sizes, default=[(256, 256, 256)])
    q.add_argument("--backends", default="reference,blocked")
    q.add_argument("--repeat", type=int, default=3)
    q.add_argument("--repeat-parallel", action="store_true")

    q = sub.add_parser("wavelet-diagnose", help="relative wavelet energy of block states")
    q.add_argument("--model", required=True)
    q.add_argument("--input", required=True)
    q.add_argument("--layer", type=int, default=None)
    return p


def cmd_infer(args, out):
    model = load_model(args.model)
    x = load_features(args.input)
    trace = model.forward(x, args.delta)
    probs = softmax(trace.logits)
    flops = count_flops(model, args.delta, frames=x.shape[0])
    buf = io.StringIO()
    buf.write(f"class {int(np.argmax(probs))}\n")
    buf.write("probs " + " ".join(f"{v:.6f}" for v in probs) + "\n")
    buf.write(f"mflops {flops / 1e6:.2f}\n")
    buf.write(f"flops {flops:.6f}\n")
    out.write(buf.getvalue())


def cmd_train_toy(args, out):
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, "w", newline="") as log:
        student, _, data, rows = run_toy(seed=args.seed, steps=args.steps, gamma=args.gamma, log=log)
    save_model(student, os.path.join(args.out, "model.bfsm"))
    final = {r[1]: r[5] for r in rows if r[0] == args.steps}
    out.write(" ".join(f"delta={d} test_acc={a}" for d, a in sorted(final.items())) + "\n")


def cmd_bench(args, out):
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    unknown = [b for b in backends if b not in BACKENDS]
    if unknown or not backends:
        raise UsageError(f"unknown backend(s) {unknown}; choose from {list(BACKENDS)}")
    rows = run_benchmark(args.sizes, backends, args.repeat, parallel=args.repeat_parallel)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["m", "n", "k", "backend", "median_s", "speedup_vs_naive"])
    for r in rows:
        w.writerow([r["m"], r["n"], r["k"], r["backend"], f"{r['median_s']:.6f}", f"{r['speedup']:.2f}"])


def diagnose_rows(model, x, layer=None):
    delta = 1 if 1 in model.delta_set else model.delta_set[0]
    trace = model.forward(x, delta, kernel="emulate")
    rows = []
    for ell, state in zip(trace.active_layers, trace.memory_outputs):
        if layer is not None and ell != layer:
            continue
        for kind, m in (("real", state), ("binarized", sign(state))):
            try:
                ph, pl = wavelet.relative_energy(wavelet.haar_dwt2(m))
            except DegenerateError:
                ph = pl = float("nan")
            rows.append((ell, kind, ph, pl))
    return rows


def cmd_wavelet_diagnose(args, out):
    model = load_model(args.model)
    x = load_features(args.input)
    if args.layer is not None and not 1 <= args.layer <= model.n_blocks:
        raise UsageError(f"--layer must be in 1..{model.n_blocks}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "p_high", "p_low"])
    for ell, kind, ph, pl in diagnose_rows(model, x, args.layer):
        w.writerow([ell, kind, f"{ph:.6f}", f"{pl:.6f}"])
    out.write(buf.getvalue())


COMMANDS = {
    "infer": cmd_infer,
    "train-toy": cmd_train_toy,
    "bench": cmd_bench,
    "wavelet-diagnose": cmd_wavelet_diagnose,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args, out)
    except BifsmnError as exc:
        err.write(f"error:{exc.category}: {exc}\n")
        return 2
    except OSError as exc:
        err.write(f"error:io: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
