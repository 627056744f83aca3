"""Block fusion: turn a validated SPMD kernel into MPMD (section) form.

The body is split at every barrier into consecutive sections; each section is
executed by one worker as a loop over the block's threads (or, in warp mode,
a warp loop nested over a lane loop of length warp_size).  A barrier directly
inside a block-uniform for-loop splits the loop body instead: the sequential
loop is preserved outside the thread loops and each iteration runs the split
phases in order.

Locals whose live range crosses a split point are "expanded": the executor
stores them in per-thread arrays of length block_size indexed by linear
thread id, so a read after a split sees the value the same thread wrote
before it.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Union

from blockfuse.syntax import (
    SCALAR_SIZE,
    Assign,
    AtomicStmt,
    Barrier,
    Binary,
    BuiltinRef,
    Call,
    Expr,
    For,
    If,
    Index,
    IntLit,
    KernelProgram,
    LValue,
    LocalDecl,
    Param,
    SharedDecl,
    Stmt,
    Unary,
    VarRef,
    count_barriers,
)
from blockfuse.validate import analyze


class TransformError(Exception):
    pass


class PatternNotFound(Exception):
    pass


class DependenceError(Exception):
    pass


# ---------------------------------------------------------------------------
# MPMD form
# ---------------------------------------------------------------------------

@dataclass
class ThreadSection:
    """Barrier-free statements wrapped in a single thread (or warp/lane) loop."""
    body: list[Stmt]
    loop_shape: str = "thread"  # "thread" | "warp-lane"


@dataclass
class LoopSection:
    """A sequential uniform for-loop whose body was fissioned at barriers.

    Each iteration evaluates the counter once (uniformly) and runs every
    phase as its own thread loop, honoring the in-loop barrier trip_count
    times.
    """
    var: str
    lo: Expr
    hi: Expr
    step: Expr
    phases: list[list[Stmt]]
    loop_shape: str = "thread"


Section = Union[ThreadSection, LoopSection]


@dataclass
class SharedLayout:
    static: list[SharedDecl]
    dynamic_scalar: Optional[str]  # element type of the extern shared array

    def static_bytes(self, slot: int) -> int:
        d = self.static[slot]
        return d.length * SCALAR_SIZE[d.scalar]


@dataclass
class MemRef:
    """Classification of one array name after memory mapping."""
    space: str  # "global" | "shared-static" | "shared-dynamic"
    param_index: Optional[int] = None  # global: position in param_signature
    slot: Optional[int] = None         # shared-static: index into layout


@dataclass
class MpmdKernel:
    name: str
    sections: list[Section]
    expanded_vars: list[tuple[str, str]]  # (name, scalar type), decl order
    shared_layout: SharedLayout
    warp_mode: bool
    warp_size: int
    param_signature: list[Param]
    local_types: dict[str, str]
    variant_locals: set[str] = field(default_factory=set)
    memory_map: dict[str, MemRef] = field(default_factory=dict)
    # section boundaries i (between sections[i] and sections[i+1]) that came
    # from a source-level barrier; in-loop barriers live in LoopSection phases
    barrier_boundaries: set[int] = field(default_factory=set)

    @property
    def expanded_names(self) -> set[str]:
        return {name for name, _ in self.expanded_vars}

    def loop_trip_counts(self, block_size: int) -> tuple[int, ...]:
        """Per-section loop trip counts for a given linear block size."""
        if self.warp_mode:
            warps = -(-block_size // self.warp_size)
            return (warps, self.warp_size)
        return (block_size,)

    def static_instruction_estimate(self) -> int:
        """Statement-node count, used by the grain-size heuristics."""
        def count(stmts: list[Stmt]) -> int:
            n = 0
            for s in stmts:
                n += 1
                if isinstance(s, If):
                    n += count(s.then_body) + count(s.else_body)
                elif isinstance(s, For):
                    n += count(s.body)
            return n
        total = 0
        for sec in self.sections:
            if isinstance(sec, ThreadSection):
                total += count(sec.body)
            else:
                total += 1 + sum(count(p) for p in sec.phases)
        return total

    def has_atomics(self) -> bool:
        def scan(stmts: list[Stmt]) -> bool:
            for s in stmts:
                if isinstance(s, AtomicStmt):
                    return True
                if isinstance(s, If) and (scan(s.then_body) or scan(s.else_body)):
                    return True
                if isinstance(s, For) and scan(s.body):
                    return True
            return False
        for sec in self.sections:
            bodies = [sec.body] if isinstance(sec, ThreadSection) else sec.phases
            if any(scan(b) for b in bodies):
                return True
        return False

    def to_dict(self) -> dict:
        """Stable-key structured dump for golden tests."""
        from blockfuse.syntax import expr_to_source

        def stmts_dump(stmts):
            from blockfuse.syntax import _stmts_to_source
            out: list[str] = []
            _stmts_to_source(stmts, out, 0)
            return out

        sections = []
        for sec in self.sections:
            if isinstance(sec, ThreadSection):
                sections.append({
                    "kind": "thread",
                    "loop_shape": sec.loop_shape,
                    "body": stmts_dump(sec.body),
                })
            else:
                sections.append({
                    "kind": "seqloop",
                    "loop_shape": sec.loop_shape,
                    "counter": sec.var,
                    "lo": expr_to_source(sec.lo),
                    "hi": expr_to_source(sec.hi),
                    "step": expr_to_source(sec.step),
                    "phases": [stmts_dump(p) for p in sec.phases],
                })
        return {
            "name": self.name,
            "warp_mode": self.warp_mode,
            "warp_size": self.warp_size,
            "params": [
                {"name": p.name,
                 "type": ("global " + p.ptype.scalar + "[]") if p.ptype.is_global
                         else p.ptype.scalar}
                for p in self.param_signature
            ],
            "shared": {
                "static": [{"name": d.name, "type": d.scalar, "length": d.length}
                           for d in self.shared_layout.static],
                "dynamic": self.shared_layout.dynamic_scalar,
            },
            "expanded_vars": [{"name": n, "type": t} for n, t in self.expanded_vars],
            "memory_map": {
                name: {"space": ref.space, "param_index": ref.param_index,
                       "slot": ref.slot}
                for name, ref in sorted(self.memory_map.items())
            },
            "sections": sections,
        }


# ---------------------------------------------------------------------------
# transform
# ---------------------------------------------------------------------------

def _split_at_barriers(stmts: list[Stmt]) -> list[list[Stmt]]:
    chunks: list[list[Stmt]] = [[]]
    for s in stmts:
        if isinstance(s, Barrier):
            chunks.append([])
        else:
            chunks[-1].append(s)
    return chunks


def _collect_names(e: Optional[Expr], out: set[str]) -> None:
    if e is None:
        return
    if isinstance(e, VarRef):
        out.add(e.name)
    elif isinstance(e, Index):
        _collect_names(e.index, out)
    elif isinstance(e, Binary):
        _collect_names(e.left, out)
        _collect_names(e.right, out)
    elif isinstance(e, Unary):
        _collect_names(e.operand, out)
    elif isinstance(e, Call):
        for a in e.args:
            _collect_names(a, out)


def _chunk_defs_uses(stmts: list[Stmt]) -> tuple[set[str], set[str]]:
    defs: set[str] = set()
    uses: set[str] = set()

    def visit(body: list[Stmt]) -> None:
        for s in body:
            if isinstance(s, LocalDecl):
                defs.add(s.name)
                _collect_names(s.init, uses)
            elif isinstance(s, Assign):
                uses.add(s.target.name) if s.target.index is None else None
                _collect_names(s.target.index, uses)
                _collect_names(s.value, uses)
            elif isinstance(s, If):
                _collect_names(s.cond, uses)
                visit(s.then_body)
                visit(s.else_body)
            elif isinstance(s, For):
                defs.add(s.var)
                for b in (s.lo, s.hi, s.step):
                    _collect_names(b, uses)
                visit(s.body)
            elif isinstance(s, AtomicStmt):
                _collect_names(s.target.index, uses)
                _collect_names(s.operand, uses)
                _collect_names(s.compare_to, uses)

    visit(stmts)
    return defs, uses


def transform(k: KernelProgram, warp_mode: bool = False, warp_size: int = 32) -> MpmdKernel:
    """Block-fuse a kernel: fission at barriers, mark expanded locals."""
    if warp_size < 1:
        raise TransformError(f"warp_size must be >= 1, got {warp_size}")
    info = analyze(k, warp_mode)
    if info.diagnostics:
        raise TransformError(
            "kernel failed validation: " + "; ".join(str(d) for d in info.diagnostics))

    shape = "warp-lane" if warp_mode else "thread"
    sections: list[Section] = []
    pending: list[Stmt] = []

    def flush() -> None:
        sections.append(ThreadSection(list(pending), loop_shape=shape))
        pending.clear()

    barrier_bounds: set[int] = set()
    need_tail = True  # an empty kernel still gets one (empty) section
    for s in k.body:
        if isinstance(s, Barrier):
            flush()
            barrier_bounds.add(len(sections) - 1)
            need_tail = True
        elif isinstance(s, For) and count_barriers(s.body) > 0:
            if any(isinstance(inner, For) and count_barriers(inner.body) > 0
                   for inner in s.body):
                raise TransformError("barrier nested deeper than one loop level")
            if pending:
                flush()
            phases = _split_at_barriers(s.body)
            sections.append(LoopSection(s.var, s.lo, s.hi, s.step, phases,
                                        loop_shape=shape))
            need_tail = False
        else:
            if count_barriers([s]) > 0:
                # validate should have rejected this (defense-in-depth)
                raise TransformError("barrier in a non-uniform context")
            pending.append(s)
            need_tail = True
    if pending or need_tail:
        flush()

    # Live ranges across split points: a local declared in one chunk and
    # referenced in any other chunk is expanded to a per-thread array.
    chunk_bounds: list[tuple[set[str], set[str]]] = []
    for sec in sections:
        if isinstance(sec, ThreadSection):
            chunk_bounds.append(_chunk_defs_uses(sec.body))
        else:
            bound_uses: set[str] = set()
            for b in (sec.lo, sec.hi, sec.step):
                _collect_names(b, bound_uses)
            chunk_bounds.append(({sec.var}, bound_uses))
            for p in sec.phases:
                chunk_bounds.append(_chunk_defs_uses(p))

    decl_chunk: dict[str, int] = {}
    for i, (defs, _) in enumerate(chunk_bounds):
        for name in defs:
            decl_chunk.setdefault(name, i)
    crossing: set[str] = set()
    for i, (_, uses) in enumerate(chunk_bounds):
        for name in uses:
            if name in decl_chunk and decl_chunk[name] != i and name in info.local_types:
                if name not in info.loop_counters:
                    crossing.add(name)

    expanded = [(name, info.local_types[name])
                for name in info.local_types
                if name in crossing]

    layout = SharedLayout(
        static=list(k.static_shared),
        dynamic_scalar=k.dynamic_shared[1] if k.dynamic_shared else None,
    )
    mk = MpmdKernel(
        name=k.name,
        sections=sections,
        expanded_vars=expanded,
        shared_layout=layout,
        warp_mode=warp_mode,
        warp_size=warp_size,
        param_signature=list(k.params),
        local_types=dict(info.local_types),
        variant_locals=set(info.variant_locals),
        barrier_boundaries=barrier_bounds,
    )
    return map_memory(mk, k)


# ---------------------------------------------------------------------------
# memory mapping
# ---------------------------------------------------------------------------

def map_memory(k: MpmdKernel, source: Optional[KernelProgram] = None) -> MpmdKernel:
    """Classify every array reference as global (arena handle) or shared."""
    param_index = {p.name: i for i, p in enumerate(k.param_signature)
                   if p.ptype.is_global}
    static_slot = {d.name: i for i, d in enumerate(k.shared_layout.static)}
    dynamic_name = None
    if source is not None and source.dynamic_shared is not None:
        dynamic_name = source.dynamic_shared[0]

    memory_map: dict[str, MemRef] = {}

    def classify(name: str) -> None:
        if name in memory_map:
            return
        if name in param_index:
            memory_map[name] = MemRef("global", param_index=param_index[name])
        elif name in static_slot:
            memory_map[name] = MemRef("shared-static", slot=static_slot[name])
        elif name == dynamic_name or (dynamic_name is None
                                      and k.shared_layout.dynamic_scalar is not None):
            memory_map[name] = MemRef("shared-dynamic")
        else:
            raise TransformError(f"unclassifiable array reference {name!r}")

    def scan_expr(e: Optional[Expr]) -> None:
        if e is None:
            return
        if isinstance(e, Index):
            classify(e.array)
            scan_expr(e.index)
        elif isinstance(e, Binary):
            scan_expr(e.left)
            scan_expr(e.right)
        elif isinstance(e, Unary):
            scan_expr(e.operand)
        elif isinstance(e, Call):
            for a in e.args:
                scan_expr(a)

    def scan(stmts: list[Stmt]) -> None:
        for s in stmts:
            if isinstance(s, LocalDecl):
                scan_expr(s.init)
            elif isinstance(s, Assign):
                if s.target.index is not None:
                    classify(s.target.name)
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
                classify(s.target.name)
                scan_expr(s.target.index)
                scan_expr(s.operand)
                scan_expr(s.compare_to)

    for sec in k.sections:
        if isinstance(sec, ThreadSection):
            scan(sec.body)
        else:
            scan_expr(sec.lo)
            scan_expr(sec.hi)
            scan_expr(sec.step)
            for p in sec.phases:
                scan(p)

    k.memory_map = memory_map
    return k


# ---------------------------------------------------------------------------
# grid-stride access reordering
# ---------------------------------------------------------------------------

def _is_block_stride(e: Expr) -> bool:
    return isinstance(e, BuiltinRef) and e.base == "blockDim" and e.axis == "x"


def _match_stride(e: Expr, counter: str) -> Optional[tuple[Expr, Expr]]:
    """Match `base + j*T` (any operand order) with T = blockDim.x; return (base, T)."""
    if not (isinstance(e, Binary) and e.op == "+"):
        return None

    def as_stride_term(t: Expr) -> Optional[Expr]:
        if isinstance(t, Binary) and t.op == "*":
            l, r = t.left, t.right
            if isinstance(l, VarRef) and l.name == counter and _is_block_stride(r):
                return r
            if isinstance(r, VarRef) and r.name == counter and _is_block_stride(l):
                return l
        return None

    for base, term in ((e.left, e.right), (e.right, e.left)):
        stride = as_stride_term(term)
        if stride is not None:
            names: set[str] = set()
            _collect_names(base, names)
            if counter not in names:
                return base, stride
    return None


def _rewrite_stride(e: Expr, counter: str, trip: Expr) -> tuple[Expr, bool]:
    m = _match_stride(e, counter)
    if m is not None:
        base, _ = m
        new = Binary("+", Binary("*", copy.deepcopy(base), copy.deepcopy(trip)),
                     VarRef(counter))
        return new, True
    changed = False
    if isinstance(e, Binary):
        e.left, c1 = _rewrite_stride(e.left, counter, trip)
        e.right, c2 = _rewrite_stride(e.right, counter, trip)
        changed = c1 or c2
    elif isinstance(e, Unary):
        e.operand, changed = _rewrite_stride(e.operand, counter, trip)
    elif isinstance(e, Index):
        e.index, changed = _rewrite_stride(e.index, counter, trip)
    elif isinstance(e, Call):
        for i, a in enumerate(e.args):
            e.args[i], c = _rewrite_stride(a, counter, trip)
            changed = changed or c
    return e, changed


def _check_loop_dependences(body: list[Stmt]) -> None:
    from blockfuse.syntax import expr_to_source

    reads: dict[str, set[str]] = {}
    writes: dict[str, set[str]] = {}

    def note(table: dict[str, set[str]], name: str, idx: Expr) -> None:
        table.setdefault(name, set()).add(expr_to_source(idx))

    def scan_expr(e: Optional[Expr]) -> None:
        if e is None:
            return
        if isinstance(e, Index):
            note(reads, e.array, e.index)
            scan_expr(e.index)
        elif isinstance(e, Binary):
            scan_expr(e.left)
            scan_expr(e.right)
        elif isinstance(e, Unary):
            scan_expr(e.operand)
        elif isinstance(e, Call):
            for a in e.args:
                scan_expr(a)

    def scan(stmts: list[Stmt]) -> None:
        for s in stmts:
            if isinstance(s, LocalDecl):
                scan_expr(s.init)
            elif isinstance(s, Assign):
                if s.target.index is not None:
                    note(writes, s.target.name, s.target.index)
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
                # an atomic RMW touches one element; same-index RMW is fine
                note(writes, s.target.name, s.target.index)
                note(reads, s.target.name, s.target.index)
                scan_expr(s.target.index)
                scan_expr(s.operand)
                scan_expr(s.compare_to)

    scan(body)
    for name in writes:
        if name in reads and reads[name] != writes[name]:
            raise DependenceError(
                f"array {name!r} is read and written with differing indices "
                "inside the reordered loop")


def reorder_grid_stride(k: MpmdKernel) -> MpmdKernel:
    """Rewrite `base + j*blockDim.x` indices to `base*K + j` in grid-stride loops.

    K is the loop trip count; after the rewrite each thread touches a
    contiguous chunk of K elements instead of a blockDim.x-strided sequence.
    Iterations must be independent: an array both read and written with
    differing indices inside the loop is rejected.
    """
    new = copy.deepcopy(k)
    rewritten = False

    def visit(stmts: list[Stmt]) -> None:
        nonlocal rewritten
        for s in stmts:
            if isinstance(s, For) and not rewritten:
                uniform = True
                for b in (s.lo, s.hi, s.step):
                    names: set[str] = set()
                    _collect_names(b, names)
                    if (names & new.variant_locals
                            or contains_thread_builtin(b)):
                        uniform = False
                is_canonical = (isinstance(s.lo, IntLit) and s.lo.value == 0
                                and isinstance(s.step, IntLit) and s.step.value == 1)
                if uniform and is_canonical:
                    trip = s.hi
                    changed = False
                    for inner in s.body:
                        c = _rewrite_stmt(inner, s.var, trip)
                        changed = changed or c
                    if changed:
                        _check_loop_dependences(s.body)
                        rewritten = True
                        continue
                visit(s.body)
            elif isinstance(s, If):
                visit(s.then_body)
                visit(s.else_body)
            elif isinstance(s, For):
                visit(s.body)

    def _rewrite_stmt(s: Stmt, counter: str, trip: Expr) -> bool:
        changed = False
        if isinstance(s, LocalDecl):
            s.init, changed = _rewrite_stride(s.init, counter, trip)
        elif isinstance(s, Assign):
            c1 = False
            if s.target.index is not None:
                s.target.index, c1 = _rewrite_stride(s.target.index, counter, trip)
            s.value, c2 = _rewrite_stride(s.value, counter, trip)
            changed = c1 or c2
        elif isinstance(s, AtomicStmt):
            c1 = False
            if s.target.index is not None:
                s.target.index, c1 = _rewrite_stride(s.target.index, counter, trip)
            s.operand, c2 = _rewrite_stride(s.operand, counter, trip)
            c3 = False
            if s.compare_to is not None:
                s.compare_to, c3 = _rewrite_stride(s.compare_to, counter, trip)
            changed = c1 or c2 or c3
        elif isinstance(s, If):
            s.cond, c0 = _rewrite_stride(s.cond, counter, trip)
            cs = [_rewrite_stmt(x, counter, trip) for x in s.then_body + s.else_body]
            changed = c0 or any(cs)
        elif isinstance(s, For):
            cs = [_rewrite_stmt(x, counter, trip) for x in s.body]
            changed = any(cs)
        return changed

    for sec in new.sections:
        bodies = [sec.body] if isinstance(sec, ThreadSection) else sec.phases
        for b in bodies:
            visit(b)
    if not rewritten:
        raise PatternNotFound("no grid-stride access pattern (base + j*blockDim.x) found")
    return new


def contains_thread_builtin(e: Optional[Expr]) -> bool:
    if e is None:
        return False
    if isinstance(e, BuiltinRef):
        return e.base == "threadIdx"
    if isinstance(e, Binary):
        return contains_thread_builtin(e.left) or contains_thread_builtin(e.right)
    if isinstance(e, Unary):
        return contains_thread_builtin(e.operand)
    if isinstance(e, Index):
        return contains_thread_builtin(e.index)
    if isinstance(e, Call):
        return any(contains_thread_builtin(a) for a in e.args)
    return False
