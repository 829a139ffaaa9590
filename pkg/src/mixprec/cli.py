"""Command-line front end: observe, infer, mem-plan, emit-kernel.

Graphs are JSON files (or one of the built-in names ``celsius``,
``chain8``, ``small_cnn``, ``moe``). Sample files are CSV with one sample per
row, flattened in C order; a non-numeric first line is treated as a header.
Machine-readable results go to stdout, diagnostics to stderr, and every
output file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codegen import Dialect, EMITTERS
from .dtypes import DataType
from .graph import GraphSpec, Net, QuantizationError, apply_model, check, load_model, plan_memory, save_model, with_precision
from .graph import zoo
from .quantizer import QuantMode

BUILTIN_GRAPHS = {
    "celsius": zoo.celsius_graph,
    "chain8": zoo.chain_graph,
    "small_cnn": zoo.conv_graph,
    "moe": zoo.moe_graph,
}
BUILTIN_WEIGHTS = {"celsius": zoo.CELSIUS_WEIGHTS}


class CliError(Exception):
    pass


def load_graph(ref: str) -> tuple[GraphSpec, dict]:
    if ref in BUILTIN_GRAPHS and not Path(ref).exists():
        return BUILTIN_GRAPHS[ref](), BUILTIN_WEIGHTS.get(ref, {})
    try:
        return GraphSpec.load(ref), {}
    except OSError as exc:
        raise CliError(f"cannot read graph {ref}: {exc.strerror or exc}") from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot parse graph {ref}: {exc}") from None


def read_samples(path: str, shape: tuple) -> np.ndarray:
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read samples {path}: {exc.strerror or exc}") from None
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]  # header
    per_sample = math.prod(shape[1:])
    values = []
    for i, row in enumerate(rows, 1):
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise CliError(f"{path}: row {i} is not numeric") from None
        if len(vals) != per_sample:
            raise CliError(f"{path}: row {i} has {len(vals)} values, expected {per_sample}")
        values.append(vals)
    return np.asarray(values, dtype=np.float32).reshape((len(values),) + tuple(shape[1:]))


def write_atomic(path: str, data: str):
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(data)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_net(args, dtype=None) -> Net:
    spec, weights = load_graph(args.graph)
    if dtype is not None:
        spec = with_precision(spec, dtype)
    net = Net(spec, seed=args.seed)
    for name, arrays in weights.items():
        net.set_params(name, arrays)
    if args.model:
        try:
            apply_model(net, load_model(args.model))
        except OSError as exc:
            raise CliError(f"cannot read model {args.model}: {exc.strerror or exc}") from None
    return net


def single_input_shape(net: Net) -> tuple[str, tuple]:
    ins = net.spec.inputs()
    if len(ins) != 1:
        raise CliError("the CLI supports single-input graphs only")
    return ins[0], net.shapes[ins[0]]


def cmd_observe(args) -> int:
    net = build_net(args, DataType.FP32)
    name, shape = single_input_shape(net)
    samples = read_samples(args.inp, shape)
    if len(samples) == 0:
        raise CliError("no calibration data")
    net.calibrate([{name: samples}])
    save_model(net, args.out)
    print(f"observed {len(samples)} samples", file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    dtype = DataType.parse(args.precision) if args.precision else None
    net = build_net(args, dtype)
    if net.quantized_layers():
        try:
            net.set_quant_mode(QuantMode.QUANTIZED)
        except QuantizationError as exc:
            raise CliError(f"model not calibrated ({exc})") from None
    name, shape = single_input_shape(net)
    samples = read_samples(args.inp, shape)
    outs = net.spec.outputs()
    result = net.forward({name: samples})
    flat = np.concatenate([result[o].to_float().reshape(len(samples), -1) for o in outs], axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample"] + [f"y{i}" for i in range(flat.shape[1])])
    for i, row in enumerate(flat):
        w.writerow([i] + [repr(float(v)) for v in row])
    if args.out:
        write_atomic(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _plan_lines(plan) -> list[str]:
    state = "on" if plan.reuse_enabled else "off"
    lines = [f"reuse={state} peak_bytes={plan.peak_bytes} slots={plan.slot_count}", "slot,bytes,blobs"]
    lines += [f"{slot},{size},{' '.join(blobs)}" for slot, size, blobs in plan.table()]
    return lines


def cmd_mem_plan(args) -> int:
    spec, _ = load_graph(args.graph)
    if args.precision:
        spec = with_precision(spec, args.precision)
    check(spec)
    plans = {}
    for reuse in (False, True):
        if args.reuse == "both" or (args.reuse == "on") == reuse:
            plans[reuse] = plan_memory(spec, reuse=reuse)
    lines = []
    for plan in plans.values():
        lines += _plan_lines(plan)
    if len(plans) == 2:
        off, on = plans[False].peak_bytes, plans[True].peak_bytes
        r = Fraction(off, on)
        lines.append(f"ratio={r.numerator}:{r.denominator} reduction={100 * (1 - on / off):.2f}%")
    print("\n".join(lines))
    return 0


def cmd_emit_kernel(args) -> int:
    if args.op not in EMITTERS:
        raise CliError(f"unsupported op '{args.op}' (supported: {', '.join(sorted(EMITTERS))})")
    dtype = DataType.parse(args.precision or "fp32")
    program = EMITTERS[args.op](dtype, Dialect.parse(args.dialect))
    if args.out:
        write_atomic(args.out, program.source)
    else:
        sys.stderr.write(program.source)
    print(program.hexdigest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixprec", description="Mixed-precision inference tools.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True):
        if graph:
            sp.add_argument("--graph", required=True, help="graph JSON file or built-in name")
        sp.add_argument("--seed", type=int, default=0, help="seed for parameters not loaded from a model")

    sp = sub.add_parser("observe", help="calibrate quantizer ranges on sample data")
    common(sp)
    sp.add_argument("--model", help="model file with trained parameters")
    sp.add_argument("--in", dest="inp", required=True, help="CSV calibration samples")
    sp.add_argument("--out", required=True, help="output model file")
    sp.set_defaults(func=cmd_observe)

    sp = sub.add_parser("infer", help="run the network on CSV samples")
    common(sp)
    sp.add_argument("--model", help="model file")
    sp.add_argument("--precision", help="fp32, fp16, int16 or int8")
    sp.add_argument("--in", dest="inp", required=True, help="CSV input samples")
    sp.add_argument("--out", help="CSV output file (default: stdout)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("mem-plan", help="print blob memory plans")
    common(sp)
    sp.add_argument("--reuse", choices=["on", "off", "both"], default="both")
    sp.add_argument("--precision", help="rewrite the graph to this precision first")
    sp.set_defaults(func=cmd_mem_plan)

    sp = sub.add_parser("emit-kernel", help="generate kernel source")
    common(sp, graph=False)
    sp.add_argument("op", help="operator name (relu)")
    sp.add_argument("--precision", default="fp32", help="fp32, fp16, int16 or int8")
    sp.add_argument("--dialect", default="opencl", help="opencl or cuda")
    sp.add_argument("--out", help="output source file (default: program on stderr)")
    sp.set_defaults(func=cmd_emit_kernel)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        msg = str(exc)
    except (ValueError, KeyError, TypeError, OSError, QuantizationError) as exc:
        msg = str(exc) or type(exc).__name__
    print(f"mixprec {args.command}: error: {msg.splitlines()[0] if msg else 'failed'}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
