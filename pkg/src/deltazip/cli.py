"""Command-line workflow: synthetic models, compression, traces, simulation.

Exit codes: 0 success, 1 input/format problems, 2 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import simulator
from .compress import (
    SPARSITY_2_4,
    SPARSITY_NONE,
    CalibrationSet,
    CompressConfig,
    compress_model,
)
from .core import Rng, WeightStack, gaussian_matrix
from .errors import DeltaZipError, FormatError, NumericDomainError, TraceError
from .formats import inspect_delta, read_stack, write_delta, write_stack
from .scheduler import SchedulerConfig
from .simulator import (
    MODE_DELTAZIP,
    MODE_SCB,
    CostModel,
    Metrics,
    WorkloadSpec,
    dump_trace_jsonl,
    gen_trace,
    load_trace_jsonl,
    run_sim,
    slo_attainment,
    sweep_n,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2

GB = 1e9


def _sparsity_flag(value: str) -> str:
    if value in ("2:4", "2of4", SPARSITY_2_4):
        return SPARSITY_2_4
    if value in ("none", SPARSITY_NONE):
        return SPARSITY_NONE
    raise argparse.ArgumentTypeError(f"unknown sparsity {value!r} (use 'none' or '2:4')")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deltazip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="generate paired synthetic base/finetuned stacks")
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--dim", type=int, default=256)
    g.add_argument("--delta-scale", type=float, default=0.02,
                   help="delta stddev relative to base stddev")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-base", required=True)
    g.add_argument("--out-finetuned", required=True)
    g.add_argument("--calib-out", default=None,
                   help="also write a calibration matrix (DZWT, single layer)")
    g.add_argument("--calib-samples", type=int, default=32)

    c = sub.add_parser("compress", help="compress finetuned-minus-base deltas")
    c.add_argument("--base", required=True)
    c.add_argument("--finetuned", required=True)
    c.add_argument("--calib", required=True)
    c.add_argument("--bits", type=int, default=4, choices=[2, 3, 4, 8, 16])
    c.add_argument("--sparsity", type=_sparsity_flag, default=SPARSITY_2_4)
    c.add_argument("--group-size", type=int, default=128)
    c.add_argument("--damping", type=float, default=0.01)
    c.add_argument("--block-size", type=int, default=32)
    c.add_argument("--lossless", action="store_true")
    c.add_argument("--base-model-id", default="base")
    c.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="print header, per-layer sizes, compression ratio")
    i.add_argument("path")

    t = sub.add_parser("gen-trace", help="generate a Poisson request trace (JSONL)")
    t.add_argument("--rate", type=float, required=True)
    t.add_argument("--duration", type=float, default=300.0)
    t.add_argument("--models", type=int, default=32)
    t.add_argument("--dist", default="uniform",
                   help="'uniform' or 'zipf:ALPHA'")
    t.add_argument("--prompt-median", type=float, default=100.0)
    t.add_argument("--decode-median", type=float, default=150.0)
    t.add_argument("--token-sigma", type=float, default=0.6)
    t.add_argument("--max-tokens", type=int, default=2048)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="-")

    s = sub.add_parser("serve-sim", help="replay a trace through the serving simulator")
    s.add_argument("--trace", default="-", help="trace JSONL path, '-' for stdin")
    s.add_argument("--mode", choices=[MODE_DELTAZIP, "scb"], default=MODE_DELTAZIP)
    s.add_argument("--max-requests", "--K", dest="max_requests", type=int, default=32)
    s.add_argument("--max-deltas", "--N", dest="max_deltas", type=int, default=4)
    s.add_argument("--scb-slots", type=int, default=2)
    s.add_argument("--model-gb", type=float, default=26.0,
                   help="full fp16 model size in GB (baseline swap unit)")
    s.add_argument("--delta-gb", type=float, default=5.0,
                   help="compressed delta size in GB (deltazip swap unit)")
    s.add_argument("--cost", action="append", default=[], metavar="KEY=VALUE",
                   help="override a CostModel field")
    s.add_argument("--cost-config", default=None,
                   help="file of KEY=VALUE cost overrides")
    s.add_argument("--compare-baseline", action="store_true")
    s.add_argument("--sweep-n", default=None, metavar="SPEC",
                   help="e.g. '1..8' or '1,2,4,8': mean-latency sweep over N")
    s.add_argument("--out", default=None, help="write metrics JSON here")

    r = sub.add_parser("report", help="tabulate one or two metrics files")
    r.add_argument("files", nargs="+")
    r.add_argument("--slo-grid", default="1,2,5,10,30,60",
                   help="comma-separated SLO thresholds in seconds")
    r.add_argument("--kind", choices=["e2e", "ttft"], default="e2e")
    r.add_argument("--csv", action="store_true")
    return p


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _f32(m: np.ndarray) -> np.ndarray:
    # Fixture stacks live on the f32 grid so DZWT round trips are exact.
    return m.astype(np.float32).astype(np.float64)


def cmd_gen_model(args) -> int:
    rng = Rng(args.seed)
    dim = args.dim
    base_std = 1.0 / np.sqrt(dim)
    base_layers = []
    ft_layers = []
    for i in range(args.layers):
        w = _f32(gaussian_matrix(rng, dim, dim, base_std))
        d = _f32(gaussian_matrix(rng, dim, dim, args.delta_scale * base_std))
        base_layers.append((f"layer{i}", w))
        ft_layers.append((f"layer{i}", _f32(w + d)))
    write_stack(WeightStack(base_layers), args.out_base)
    write_stack(WeightStack(ft_layers), args.out_finetuned)
    print(f"wrote {args.layers}x{dim}x{dim} stacks to {args.out_base}, {args.out_finetuned}")
    if args.calib_out:
        calib = _f32(gaussian_matrix(rng, dim, args.calib_samples, 1.0))
        write_stack(WeightStack([("calibration", calib)]), args.calib_out)
        print(f"wrote calibration ({dim}x{args.calib_samples}) to {args.calib_out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    base = read_stack(args.base)
    finetuned = read_stack(args.finetuned)
    calib_stack = read_stack(args.calib)
    calib = CalibrationSet(calib_stack.layers[0][1])
    cfg = CompressConfig(
        bits=args.bits,
        sparsity=args.sparsity,
        group_size=args.group_size,
        damping=args.damping,
        block_size=args.block_size,
        lossless="deflate" if args.lossless else "off",
    )
    cd = compress_model(finetuned, base, calib, cfg, base_model_id=args.base_model_id)
    write_delta(cd, args.out)
    for ld in cd.layers:
        print(f"layer {ld.name:<16} proxy_loss={ld.proxy_loss:.6e}")
    _, _, ratio = inspect_delta(args.out)
    print(f"compression ratio vs 16-bit dense: {ratio:.2f}x")
    return EXIT_OK


def cmd_inspect(args) -> int:
    header, sizes, ratio = inspect_delta(args.path)
    print(json.dumps(header, indent=2, sort_keys=True))
    print(f"{'layer':<16} {'rows':>6} {'cols':>6} {'scales':>8} {'index':>8} {'payload':>9}")
    for s in sizes:
        print(
            f"{s.name:<16} {s.rows:>6} {s.cols:>6} {s.scales_bytes:>8} "
            f"{s.index_bytes:>8} {s.payload_bytes:>9}"
        )
    print(f"compression ratio vs 16-bit dense: {ratio:.2f}x")
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    if args.dist == "uniform":
        popularity, alpha = simulator.POP_UNIFORM, 1.5
    elif args.dist.startswith("zipf:"):
        popularity, alpha = simulator.POP_ZIPF, float(args.dist.split(":", 1)[1])
    else:
        raise TraceError(f"unknown distribution {args.dist!r}")
    spec = WorkloadSpec(
        n_models=args.models,
        rate=args.rate,
        duration=args.duration,
        popularity=popularity,
        zipf_alpha=alpha,
        prompt_median=args.prompt_median,
        decode_median=args.decode_median,
        token_sigma=args.token_sigma,
        max_tokens=args.max_tokens,
        seed=args.seed,
    )
    events = gen_trace(spec)
    out = sys.stdout if args.out == "-" else open(args.out, "w")
    try:
        for line in dump_trace_jsonl(events):
            out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _parse_cost(args) -> CostModel:
    overrides: dict[str, float] = {}
    if args.cost_config:
        with open(args.cost_config) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                overrides[key.strip()] = float(value)
    for item in args.cost:
        key, _, value = item.partition("=")
        overrides[key.strip()] = float(value)
    valid = {f.name for f in dataclasses.fields(CostModel)}
    unknown = set(overrides) - valid
    if unknown:
        raise DeltaZipError(f"unknown cost fields: {sorted(unknown)}")
    return CostModel(**overrides)


def _parse_sweep(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in spec.split(",")]


def _summarize(label: str, m: Metrics) -> None:
    print(
        f"{label:<14} finished={m.finished:<5} throughput={m.throughput:.4f} req/s  "
        f"mean_e2e={m.mean_e2e:.3f} s  mean_ttft={m.mean_ttft:.3f} s"
    )


def cmd_serve_sim(args) -> int:
    if args.trace == "-":
        trace = load_trace_jsonl(sys.stdin)
    else:
        with open(args.trace) as f:
            trace = load_trace_jsonl(f)
    cost = _parse_cost(args)
    cfg = SchedulerConfig(max_requests=args.max_requests, max_deltas=args.max_deltas)
    models = sorted({ev.model_id for ev in trace})
    delta_sizes = {m: args.delta_gb * GB for m in models}
    full_sizes = {m: args.model_gb * GB for m in models}
    mode = MODE_SCB if args.mode == "scb" else args.mode

    if args.sweep_n:
        values = _parse_sweep(args.sweep_n)
        sweep = sweep_n(trace, cfg, cost, delta_sizes, values)
        best = simulator.choose_n(sweep)
        print(f"{'N':>4} {'mean_e2e_s':>12}")
        for n in values:
            marker = "  <- chosen" if n == best else ""
            print(f"{n:>4} {sweep[n]:>12.4f}{marker}")
        if args.out:
            with open(args.out, "w") as f:
                json.dump({"sweep": {str(k): v for k, v in sweep.items()}, "chosen": best}, f)
        return EXIT_OK

    if mode == MODE_SCB:
        metrics = run_sim(trace, MODE_SCB, cfg, cost, full_sizes, scb_slots=args.scb_slots)
    else:
        metrics = run_sim(trace, MODE_DELTAZIP, cfg, cost, delta_sizes)
    _summarize(mode, metrics)

    if args.compare_baseline:
        other_mode = MODE_SCB if mode == MODE_DELTAZIP else MODE_DELTAZIP
        if other_mode == MODE_SCB:
            other = run_sim(trace, MODE_SCB, cfg, cost, full_sizes, scb_slots=args.scb_slots)
        else:
            other = run_sim(trace, MODE_DELTAZIP, cfg, cost, delta_sizes)
        _summarize(other_mode, other)
        dz, scb = (metrics, other) if mode == MODE_DELTAZIP else (other, metrics)
        if scb.throughput > 0 and dz.mean_e2e > 0 and dz.mean_ttft > 0:
            print(f"throughput ratio (deltazip/scb): {dz.throughput / scb.throughput:.2f}x")
            print(f"mean E2E ratio   (scb/deltazip): {scb.mean_e2e / dz.mean_e2e:.2f}x")
            print(f"mean TTFT ratio  (scb/deltazip): {scb.mean_ttft / dz.mean_ttft:.2f}x")

    if args.out:
        with open(args.out, "w") as f:
            json.dump(metrics.to_dict(), f)
        print(f"metrics written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    grid = [float(x) for x in args.slo_grid.split(",")]
    loaded: list[tuple[str, Metrics]] = []
    for path in args.files:
        try:
            with open(path) as f:
                loaded.append((path, Metrics.from_dict(json.load(f))))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"malformed metrics file {path}: {exc}") from exc

    sep = "," if args.csv else "  "
    headers = ["file", "throughput", "mean_e2e", "mean_ttft"] + [
        f"slo_{args.kind}<={s}" for s in grid
    ]
    rows = []
    for path, m in loaded:
        att = slo_attainment(m, grid, kind=args.kind)
        rows.append(
            [path, f"{m.throughput:.4f}", f"{m.mean_e2e:.3f}", f"{m.mean_ttft:.3f}"]
            + [f"{a:.3f}" for a in att]
        )
    if len(loaded) == 2:
        a, b = loaded[0][1], loaded[1][1]
        ratio_row = ["ratio(1/2)"]
        ratio_row.append(f"{a.throughput / b.throughput:.3f}" if b.throughput else "inf")
        ratio_row.append(f"{a.mean_e2e / b.mean_e2e:.3f}" if b.mean_e2e else "inf")
        ratio_row.append(f"{a.mean_ttft / b.mean_ttft:.3f}" if b.mean_ttft else "inf")
        ratio_row += ["-"] * len(grid)
        rows.append(ratio_row)

    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    if args.csv:
        print(sep.join(headers))
        for r in rows:
            print(sep.join(r))
    else:
        print(sep.join(h.ljust(w) for h, w in zip(headers, widths)))
        for r in rows:
            print(sep.join(c.ljust(w) for c, w in zip(r, widths)))
    return EXIT_OK


_COMMANDS = {
    "gen-model": cmd_gen_model,
    "compress": cmd_compress,
    "inspect": cmd_inspect,
    "gen-trace": cmd_gen_trace,
    "serve-sim": cmd_serve_sim,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DeltaZipError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
