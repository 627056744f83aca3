"""Host-side scripts: parsing, buffer-dependence analysis, argument packing.

A host script is a line-oriented list of operations (alloc / upload / launch /
download / sync / free).  `insert_barriers` performs the dependence analysis
that protects a launch's buffers: any later operation touching a buffer a
not-yet-synchronized launch wrote (or writing one it read) gets an implicit
`sync` inserted in front of it.
"""

from __future__ import annotations

import random
import shlex
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from blockfuse.executor import ArgSlot
from blockfuse.parser import ParseError
from blockfuse.syntax import (
    Assign,
    AtomicStmt,
    Dim3,
    Expr,
    For,
    If,
    Index,
    KernelProgram,
    LocalDecl,
    SCALAR_TYPES,
    Stmt,
)


class UnknownKernel(ParseError):
    pass


class TypeMismatch(Exception):
    pass


# ---------------------------------------------------------------------------
# host ops
# ---------------------------------------------------------------------------

@dataclass
class Alloc:
    buf: str
    scalar: str
    length: int
    line: int = field(default=0, compare=False)


@dataclass
class Upload:
    buf: str
    source: str  # "file:<path>" | "fill:seq" | "fill:const:<v>" | "fill:rand:<seed>"
    line: int = field(default=0, compare=False)


@dataclass
class ScalarArg:
    value: Union[int, float]
    scalar: str  # i32 | i64 | f32 | f64


@dataclass
class BufferArg:
    buf: str


@dataclass
class Launch:
    kernel: str
    grid: Dim3
    block: Dim3
    shmem: int
    args: list[Union[ScalarArg, BufferArg]]
    line: int = field(default=0, compare=False)


@dataclass
class Download:
    buf: str
    path: str
    line: int = field(default=0, compare=False)


@dataclass
class Sync:
    implicit: bool = False
    line: int = field(default=0, compare=False)


@dataclass
class Free:
    buf: str
    line: int = field(default=0, compare=False)


HostOp = Union[Alloc, Upload, Launch, Download, Sync, Free]


@dataclass
class HostProgram:
    ops: list[HostOp]

    def dump(self) -> list[str]:
        """Stable one-line-per-op form; implicit syncs are marked."""
        out: list[str] = []
        for op in self.ops:
            if isinstance(op, Alloc):
                out.append(f"alloc {op.buf} {op.scalar} {op.length}")
            elif isinstance(op, Upload):
                out.append(f"upload {op.buf} {op.source}")
            elif isinstance(op, Launch):
                args = " ".join(
                    a.buf if isinstance(a, BufferArg) else f"{a.value}{a.scalar}"
                    for a in op.args)
                out.append(
                    f"launch {op.kernel} grid {op.grid.x} {op.grid.y} {op.grid.z} "
                    f"block {op.block.x} {op.block.y} {op.block.z} "
                    f"shmem {op.shmem}" + (f" args {args}" if args else ""))
            elif isinstance(op, Download):
                out.append(f"download {op.buf} {op.path}")
            elif isinstance(op, Sync):
                out.append("sync  # implicit" if op.implicit else "sync")
            else:
                out.append(f"free {op.buf}")
        return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SUFFIXES = ("i32", "i64", "f32", "f64")


def _parse_scalar_literal(text: str, expected: str, line: int) -> ScalarArg:
    scalar = expected
    body = text
    for suf in _SUFFIXES:
        if text.endswith(suf) and len(text) > len(suf):
            scalar = suf
            body = text[: -len(suf)]
            break
    if scalar != expected:
        raise TypeMismatch(
            f"line {line}: literal {text!r} is {scalar}, parameter wants {expected}")
    try:
        value = int(body, 0) if scalar in ("i32", "i64") else float(body)
    except ValueError:
        raise ParseError(f"bad {scalar} literal {body!r}", line, 1) from None
    return ScalarArg(value, scalar)


def parse_host(source: str, kernels: dict[str, KernelProgram]) -> HostProgram:
    """Parse a host script, checking launches against kernel signatures."""
    ops: list[HostOp] = []
    buffers: dict[str, str] = {}  # name -> scalar, for liveness checking

    def err(msg: str, line: int) -> ParseError:
        return ParseError(msg, line, 1)

    for lineno, raw in enumerate(source.splitlines(), start=1):
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as e:
            raise err(f"bad line: {e}", lineno) from None
        if not words:
            continue
        op, rest = words[0], words[1:]
        if op == "alloc":
            if len(rest) != 3 or rest[1] not in SCALAR_TYPES:
                raise err("usage: alloc <buf> <i32|i64|f32|f64> <len>", lineno)
            name, scalar, length = rest[0], rest[1], rest[2]
            if name in buffers:
                raise err(f"buffer {name!r} already allocated", lineno)
            if not length.isdigit():
                raise err(f"bad length {length!r}", lineno)
            buffers[name] = scalar
            ops.append(Alloc(name, scalar, int(length), line=lineno))
        elif op == "upload":
            if len(rest) != 2:
                raise err("usage: upload <buf> <source-spec>", lineno)
            if rest[0] not in buffers:
                raise err(f"upload of unallocated buffer {rest[0]!r}", lineno)
            spec = rest[1]
            if not (spec.startswith("file:") or spec == "fill:seq"
                    or spec.startswith("fill:const:")
                    or spec.startswith("fill:rand:")):
                raise err(f"bad source spec {spec!r}", lineno)
            ops.append(Upload(rest[0], spec, line=lineno))
        elif op == "launch":
            ops.append(_parse_launch(rest, kernels, buffers, lineno))
        elif op == "download":
            if len(rest) != 2:
                raise err("usage: download <buf> <path>", lineno)
            if rest[0] not in buffers:
                raise err(f"download of unallocated buffer {rest[0]!r}", lineno)
            ops.append(Download(rest[0], rest[1], line=lineno))
        elif op == "sync":
            if rest:
                raise err("sync takes no arguments", lineno)
            ops.append(Sync(line=lineno))
        elif op == "free":
            if len(rest) != 1:
                raise err("usage: free <buf>", lineno)
            if rest[0] not in buffers:
                raise err(f"free of unallocated buffer {rest[0]!r}", lineno)
            del buffers[rest[0]]
            ops.append(Free(rest[0], line=lineno))
        else:
            raise err(f"unknown host op {op!r}", lineno)
    return HostProgram(ops)


def _parse_launch(rest: list[str], kernels: dict[str, KernelProgram],
                  buffers: dict[str, str], lineno: int) -> Launch:
    def err(msg: str) -> ParseError:
        return ParseError(msg, lineno, 1)

    if len(rest) < 10 or rest[1] != "grid" or rest[5] != "block" or rest[9] != "shmem":
        raise err("usage: launch <kernel> grid x y z block x y z shmem <bytes> "
                  "args <a1> ...")
    name = rest[0]
    kernel = kernels.get(name)
    if kernel is None:
        raise UnknownKernel(f"launch of unknown kernel {name!r}", lineno, 1)
    try:
        grid = Dim3(int(rest[2]), int(rest[3]), int(rest[4]))
        block = Dim3(int(rest[6]), int(rest[7]), int(rest[8]))
        shmem = int(rest[10])
    except (ValueError, IndexError) as e:
        raise err(f"bad launch dims: {e}") from None
    raw_args = []
    if len(rest) > 11:
        if rest[11] != "args":
            raise err(f"expected 'args', got {rest[11]!r}")
        raw_args = rest[12:]
    if len(raw_args) != len(kernel.params):
        raise err(f"kernel {name!r} takes {len(kernel.params)} args, "
                  f"got {len(raw_args)}")
    args: list[Union[ScalarArg, BufferArg]] = []
    for p, text in zip(kernel.params, raw_args):
        if p.ptype.is_global:
            if text not in buffers:
                raise err(f"param {p.name!r}: unknown buffer {text!r}")
            if buffers[text] != p.ptype.scalar:
                raise TypeMismatch(
                    f"line {lineno}: buffer {text!r} is {buffers[text]}, "
                    f"param {p.name!r} wants {p.ptype.scalar}")
            args.append(BufferArg(text))
        else:
            args.append(_parse_scalar_literal(text, p.ptype.scalar, lineno))
    return Launch(name, grid, block, shmem, args, line=lineno)


# ---------------------------------------------------------------------------
# access summaries and implicit barrier insertion
# ---------------------------------------------------------------------------

@dataclass
class AccessSummary:
    reads: set[int]   # param indices of global refs loaded
    writes: set[int]  # param indices of global refs stored (incl. atomics)


def summarize_access(k: KernelProgram) -> AccessSummary:
    """Which global params a kernel may load from / store to (over-approx)."""
    global_params = {p.name: i for i, p in enumerate(k.params) if p.ptype.is_global}
    reads: set[int] = set()
    writes: set[int] = set()

    def scan_expr(e: Optional[Expr]) -> None:
        if e is None:
            return
        if isinstance(e, Index):
            if e.array in global_params:
                reads.add(global_params[e.array])
            scan_expr(e.index)
        else:
            for child in getattr(e, "__dict__", {}).values():
                if isinstance(child, Expr):
                    scan_expr(child)
                elif isinstance(child, list):
                    for c in child:
                        if isinstance(c, Expr):
                            scan_expr(c)

    def scan(stmts: list[Stmt]) -> None:
        for s in stmts:
            if isinstance(s, LocalDecl):
                scan_expr(s.init)
            elif isinstance(s, Assign):
                if s.target.index is not None and s.target.name in global_params:
                    writes.add(global_params[s.target.name])
                scan_expr(s.target.index)
                scan_expr(s.value)
            elif isinstance(s, If):
                scan_expr(s.cond)
                scan(s.then_body)
                scan(s.else_body)
            elif isinstance(s, For):
                scan_expr(s.lo)
                scan_expr(s.hi)
                scan_expr(s.step)
                scan(s.body)
            elif isinstance(s, AtomicStmt):
                if s.target.name in global_params:
                    # a read-modify-write touches the buffer both ways
                    writes.add(global_params[s.target.name])
                    reads.add(global_params[s.target.name])
                scan_expr(s.target.index)
                scan_expr(s.operand)
                scan_expr(s.compare_to)

    scan(k.body)
    return AccessSummary(reads, writes)


def launch_buffer_sets(op: Launch, summary: AccessSummary) -> tuple[set[str], set[str]]:
    """Map a launch's param-index summary onto the buffer names it was given.

    A buffer passed to several params gets the union of their accesses.
    """
    reads: set[str] = set()
    writes: set[str] = set()
    for i, a in enumerate(op.args):
        if isinstance(a, BufferArg):
            if i in summary.reads:
                reads.add(a.buf)
            if i in summary.writes:
                writes.add(a.buf)
    return reads, writes


def host_buffer_sets(op: HostOp,
                     summaries: dict[str, AccessSummary]) -> tuple[set[str], set[str]]:
    """(reads, writes) buffer sets of one host op, for conflict checks."""
    if isinstance(op, Launch):
        return launch_buffer_sets(op, summaries[op.kernel])
    if isinstance(op, Upload):
        return set(), {op.buf}
    if isinstance(op, Download):
        return {op.buf}, set()
    if isinstance(op, Free):
        # reclaiming storage conflicts with any outstanding access
        return {op.buf}, {op.buf}
    return set(), set()


def insert_barriers(p: HostProgram,
                    summaries: dict[str, AccessSummary]) -> HostProgram:
    """Insert an implicit sync before every op that conflicts with an
    unsynchronized earlier launch (RAW, WAR, or WAW on any buffer).

    Idempotent: ops guarded by an existing sync never trigger another.
    """
    out: list[HostOp] = []
    unsynced_reads: set[str] = set()
    unsynced_writes: set[str] = set()

    for op in p.ops:
        if isinstance(op, Sync):
            unsynced_reads.clear()
            unsynced_writes.clear()
            out.append(op)
            continue
        reads, writes = host_buffer_sets(op, summaries)
        conflict = (reads & unsynced_writes or writes & unsynced_reads
                    or writes & unsynced_writes)
        if conflict:
            out.append(Sync(implicit=True, line=op.line))
            unsynced_reads.clear()
            unsynced_writes.clear()
        if isinstance(op, Launch):
            unsynced_reads |= reads
            unsynced_writes |= writes
        out.append(op)
    return HostProgram(out)


# ---------------------------------------------------------------------------
# argument packing
# ---------------------------------------------------------------------------

@dataclass
class PackedArgs:
    """Ordered boxed argument slots, one per kernel parameter."""
    slots: list[ArgSlot]


def pack_params(launch: Launch, kernel: KernelProgram,
                handles: dict[str, int]) -> PackedArgs:
    """Box launch arguments in param order: scalars by value, buffers by handle."""
    if len(launch.args) != len(kernel.params):
        raise TypeMismatch(
            f"kernel {kernel.name!r} takes {len(kernel.params)} args, "
            f"launch has {len(launch.args)}")
    slots: list[ArgSlot] = []
    for p, a in zip(kernel.params, launch.args):
        if p.ptype.is_global:
            if not isinstance(a, BufferArg):
                raise TypeMismatch(f"param {p.name!r} needs a buffer")
            slots.append(ArgSlot("handle", handles[a.buf]))
        else:
            if not isinstance(a, ScalarArg) or a.scalar != p.ptype.scalar:
                raise TypeMismatch(
                    f"param {p.name!r} wants a {p.ptype.scalar} scalar")
            slots.append(ArgSlot(p.ptype.scalar, a.value))
    return PackedArgs(slots)


# ---------------------------------------------------------------------------
# upload sources
# ---------------------------------------------------------------------------

def upload_values(spec: str, scalar: str, length: int) -> Optional[list]:
    """Materialize a fill:* source spec; file: sources return None (raw bytes)."""
    if spec == "fill:seq":
        if scalar in ("f32", "f64"):
            return [float(i) for i in range(length)]
        return list(range(length))
    if spec.startswith("fill:const:"):
        text = spec[len("fill:const:"):]
        v = float(text) if scalar in ("f32", "f64") else int(text, 0)
        return [v] * length
    if spec.startswith("fill:rand:"):
        seed = int(spec[len("fill:rand:"):])
        rng = random.Random(seed)
        if scalar in ("f32", "f64"):
            vals = [rng.uniform(-1.0, 1.0) for _ in range(length)]
            if scalar == "f32":
                # keep values exactly representable at single precision
                vals = [struct.unpack("<f", struct.pack("<f", v))[0] for v in vals]
            return vals
        return [rng.randrange(0, 1 << 16) for _ in range(length)]
    return None  # file:<path>
