"""Command-line front end: compile kernels, run host scripts, sweep grains,
compare reordered access patterns, and simulate caches over trace files."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from blockfuse import bench
from blockfuse.arena import trace_from_bytes, trace_from_text
from blockfuse.cachesim import CacheConfig, ConfigError, simulate
from blockfuse.hostprog import TypeMismatch, parse_host
from blockfuse.parser import ParseError, parse_unit
from blockfuse.runtime import parse_policy, run_host_program
from blockfuse.transform import (
    DependenceError,
    PatternNotFound,
    TransformError,
    transform,
)
from blockfuse.validate import validate


def _emit_json(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def _kernel_listing(mk) -> str:
    d = mk.to_dict()
    lines = [f"kernel {d['name']}  (warp_mode={d['warp_mode']}, "
             f"warp_size={d['warp_size']})"]
    lines.append("params: " + ", ".join(f"{p['name']}: {p['type']}"
                                        for p in d["params"]))
    if d["expanded_vars"]:
        lines.append("expanded: " + ", ".join(
            f"{v['name']}: {v['type']}" for v in d["expanded_vars"]))
    for i, sec in enumerate(d["sections"]):
        if sec["kind"] == "thread":
            lines.append(f"section {i} [{sec['loop_shape']} loop]:")
            lines.extend("  " + s for s in sec["body"])
        else:
            lines.append(
                f"section {i} [sequential {sec['counter']} = {sec['lo']}; "
                f"{sec['counter']} < {sec['hi']}; {sec['counter']} += "
                f"{sec['step']}]:")
            for pi, phase in enumerate(sec["phases"]):
                lines.append(f"  phase {pi} [{sec['loop_shape']} loop]:")
                lines.extend("    " + s for s in phase)
    return "\n".join(lines)


def cmd_compile(args) -> int:
    source = Path(args.file).read_text()
    kernels = parse_unit(source)
    status = 0
    payload = {}
    for name, kp in kernels.items():
        diags = validate(kp, warp_mode=args.warp)
        if diags:
            for d in diags:
                print(f"{args.file}: {name}: {d}", file=sys.stderr)
            status = 1
            continue
        mk = transform(kp, warp_mode=args.warp, warp_size=args.warp_size)
        if args.json:
            payload[name] = mk.to_dict()
        else:
            print(_kernel_listing(mk))
            print()
    if args.json:
        _emit_json(payload)
    return status


def cmd_run(args) -> int:
    kernels = {}
    kernel_files = args.kernels or [
        str(bench.corpus_path(f"{name}.kn")) for name in bench.CORPUS
    ]
    for path in kernel_files:
        kernels.update(parse_unit(Path(path).read_text()))
    program = parse_host(Path(args.script).read_text(), kernels)
    result = run_host_program(
        program, kernels, pool_size=args.pool,
        policy=parse_policy(args.policy), warp_mode=args.warp,
        warp_size=args.warp_size, write_files=args.write_files)
    if args.json:
        _emit_json({
            "conflicts": len(result.conflicts),
            "counters": result.counters.to_dict(),
            "downloads": {p: len(raw) for p, raw in result.downloads.items()},
            "ops": result.program.dump(),
        })
    else:
        for line in result.program.dump():
            print(line)
        c = result.counters.to_dict()
        print(f"blocks executed: {c['blocks_executed']}  "
              f"fetches: {c['fetch_count']}  syncs: {c['syncs']}")
        for path, raw in result.downloads.items():
            print(f"download {path}: {len(raw)} bytes"
                  + ("" if args.write_files else " (not written; --write-files)"))
    return 1 if result.conflicts else 0


def cmd_sweep(args) -> int:
    grains = [g if g == "average" else int(g) for g in args.grains.split(",")]
    try:
        report = bench.run_sweep(args.case, grains, args.pool,
                                 repeats=args.repeats)
    except bench.OracleMismatch as e:
        print(f"FAILED: {e}", file=sys.stderr)
        return 1
    if args.json:
        _emit_json(report.to_dict())
        return 0
    print(f"case {report.case}  pool {report.pool_size}")
    print(f"{'grain':>8} {'fetches':>8} {'idle':>6} {'blocks':>8} {'median s':>10}")
    for r in report.rows:
        print(f"{r.grain:>8} {r.fetch_count:>8} {r.idle_workers:>6} "
              f"{r.blocks_executed:>8} {r.wall_time:>10.4f}")
    return 0


def cmd_reorder_exp(args) -> int:
    cfg = CacheConfig(args.capacity, args.line, args.ways)
    try:
        report = bench.run_reorder_experiment(args.case, cfg, scale=args.scale)
    except (PatternNotFound, DependenceError, ValueError) as e:
        print(f"FAILED: {e}", file=sys.stderr)
        return 1
    if args.json:
        _emit_json(report.to_dict())
    else:
        print(f"case {report.case}  cache {cfg.capacity}B/"
              f"{cfg.line_size}B/{cfg.associativity}-way")
        for label, rep in (("original", report.original),
                           ("reordered", report.reordered)):
            print(f"{label:>10}: loads {rep.loads}  load misses "
                  f"{rep.load_misses}  stores {rep.stores}  store misses "
                  f"{rep.store_misses}")
        print(f"outputs match oracle: {report.outputs_match}")
    return 0 if report.outputs_match else 1


def cmd_cachesim(args) -> int:
    cfg = CacheConfig(args.capacity, args.line, args.ways)
    raw = Path(args.trace).read_bytes()
    trace = trace_from_bytes(raw) if args.binary else trace_from_text(
        raw.decode())
    report = simulate(trace, cfg)
    if args.json:
        _emit_json(report.to_dict())
    else:
        d = report.to_dict()
        for key in sorted(d):
            print(f"{key:>14}: {d[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="blockfuse",
        description="Compile SPMD kernels to block-fused form and run them "
                    "on a worker-pool runtime.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a .kn file and dump sections")
    c.add_argument("file")
    c.add_argument("--warp", action="store_true")
    c.add_argument("--warp-size", type=int, default=32)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="execute a host script")
    r.add_argument("script")
    r.add_argument("--kernels", action="append",
                   help=".kn file to compile (repeatable; default: corpus)")
    r.add_argument("--pool", type=int, default=4)
    r.add_argument("--policy", default="average",
                   help="average | fixed:<g> | auto")
    r.add_argument("--warp", action="store_true")
    r.add_argument("--warp-size", type=int, default=32)
    r.add_argument("--write-files", action="store_true",
                   help="write download files to disk")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="grain-size sweep on a corpus case")
    s.add_argument("case", choices=sorted(bench.CORPUS))
    s.add_argument("--grains", default="1,2,4,8,16",
                   help="comma list of grains; 'average' allowed")
    s.add_argument("--pool", type=int, default=4)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("reorder-exp",
                       help="cache comparison of original vs reordered accesses")
    x.add_argument("case", nargs="?", default="hist_stride")
    x.add_argument("--capacity", type=int, default=32768)
    x.add_argument("--line", type=int, default=64)
    x.add_argument("--ways", type=int, default=8)
    x.add_argument("--scale", type=int, default=32,
                   help="working set as a multiple of cache capacity")
    x.add_argument("--json", action="store_true")
    x.set_defaults(func=cmd_reorder_exp)

    m = sub.add_parser("cachesim", help="simulate a cache over a trace file")
    m.add_argument("--capacity", type=int, default=32768)
    m.add_argument("--line", type=int, default=64)
    m.add_argument("--ways", type=int, default=8)
    m.add_argument("--trace", required=True)
    m.add_argument("--binary", action="store_true",
                   help="trace file is in the compact binary form")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_cachesim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, TransformError, TypeMismatch, ConfigError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
