"""Block execution for transformed kernels, plus the lockstep reference oracle.

`run_block` executes one block of a fused (MPMD) kernel: sections run in
order, each wrapped in a loop over the block's threads (ascending linear
tid) or, in warp mode, in an outer warp loop over an inner lane loop.

`run_reference` executes the *untransformed* kernel in barrier-lockstep
fashion and defines the expected output for equivalence tests.  It shares
only the expression semantics (interp) with the fused path; the fission,
expansion, and scheduling machinery are not reused.
"""

from __future__ import annotations

from array import array
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Union

from blockfuse.arena import DeviceArena, MemoryTrace, TraceEvent, Trap, new_buffer
from blockfuse.interp import coerce, eval_expr, exec_block, run_warp_stmts
from blockfuse.syntax import (
    SCALAR_SIZE,
    Barrier,
    Dim3,
    Idx3,
    For,
    KernelProgram,
    Param,
    Stmt,
    count_barriers,
    delinearize,
)
from blockfuse.transform import MpmdKernel, ThreadSection
from blockfuse.validate import analyze


# ---------------------------------------------------------------------------
# packed arguments
# ---------------------------------------------------------------------------

@dataclass
class ArgSlot:
    kind: str  # "i32" | "i64" | "f32" | "f64" | "handle"
    value: Union[int, float]


def unpack_args(params: list[Param], packed,
                kernel_name: str = "?") -> tuple[dict, dict]:
    """Split packed slots into scalar values and buffer handles by param name.

    The slot sequence must match the parameter list positionally and by
    kind; scalars come back bit-exact (they are stored boxed, untouched).
    """
    slots = list(packed.slots)
    if len(slots) != len(params):
        raise Trap("TypeFault",
                   f"expected {len(params)} arguments, got {len(slots)}",
                   kernel=kernel_name)
    scalars: dict[str, Union[int, float]] = {}
    handles: dict[str, int] = {}
    for p, slot in zip(params, slots):
        if p.ptype.is_global:
            if slot.kind != "handle":
                raise Trap("TypeFault",
                           f"param {p.name!r} needs a buffer handle, got {slot.kind}",
                           kernel=kernel_name)
            handles[p.name] = int(slot.value)
        else:
            if slot.kind != p.ptype.scalar:
                raise Trap("TypeFault",
                           f"param {p.name!r} is {p.ptype.scalar}, got {slot.kind}",
                           kernel=kernel_name)
            scalars[p.name] = slot.value
    return scalars, handles


# ---------------------------------------------------------------------------
# block context (per-block storage for the fused path)
# ---------------------------------------------------------------------------

@dataclass
class BlockContext:
    block_index: Dim3
    block_dim: Dim3
    grid_dim: Dim3
    static_buffers: list[array]
    dyn_buffer: Optional[array]
    dyn_bytes: int
    expanded: dict[str, array]
    trace: Optional[MemoryTrace] = None
    barrier_events: int = 0


def make_context(k: MpmdKernel, block_index: Dim3, block_dim: Dim3,
                 grid_dim: Dim3, dyn_bytes: int = 0,
                 trace: Optional[MemoryTrace] = None) -> BlockContext:
    """Fresh per-block storage; shared and expanded buffers start zeroed."""
    block_size = block_dim.total
    static = [new_buffer(d.scalar, d.length) for d in k.shared_layout.static]
    dyn = None
    if k.shared_layout.dynamic_scalar is not None:
        elems = dyn_bytes // SCALAR_SIZE[k.shared_layout.dynamic_scalar]
        dyn = new_buffer(k.shared_layout.dynamic_scalar, elems)
    expanded = {name: new_buffer(ty, block_size) for name, ty in k.expanded_vars}
    return BlockContext(block_index, block_dim, grid_dim, static, dyn,
                        dyn_bytes, expanded, trace=trace)


class _ArrayEnv:
    """Shared plumbing: builtins from dims, loads/stores routed by array kind.

    Subclasses supply variable storage and the mapping from an array name to
    either a global handle or a local (shared-memory) buffer.
    """

    arena: DeviceArena
    block_index: Dim3
    block_dim: Dim3
    grid_dim: Dim3
    tid: int
    kernel_name: str
    trace: Optional[MemoryTrace] = None

    # subclass hooks -------------------------------------------------------
    def _resolve(self, name: str, span):
        """Return ("global", handle) or ("buf", array)."""
        raise NotImplementedError

    def _elem_type(self, name: str) -> str:
        raise NotImplementedError

    # env protocol ---------------------------------------------------------
    def builtin(self, base: str, axis: str) -> int:
        if base == "threadIdx":
            x, y, z = delinearize(self.tid, self.block_dim)
            return {"x": x, "y": y, "z": z}[axis]
        if base == "blockIdx":
            return self.block_index.axis(axis)
        if base == "blockDim":
            return self.block_dim.axis(axis)
        return self.grid_dim.axis(axis)

    def _located(self, t: Trap, span) -> Trap:
        return Trap(t.kind, t.message, kernel=self.kernel_name,
                    tid=self.tid, span=span)

    def _emit(self, kind: str, handle: int, index: int) -> None:
        if self.trace is not None:
            buf = self.arena.buffer(handle)
            size = SCALAR_SIZE[buf.scalar]
            self.trace.append(TraceEvent(kind, buf.base + index * size, size))

    def load(self, name: str, index: int, span):
        target = self._resolve(name, span)
        try:
            if target[0] == "global":
                self._emit("R", target[1], index)
                return self.arena.read(target[1], index)
            buf = target[1]
            if not 0 <= index < len(buf):
                raise Trap("OutOfBounds",
                           f"shared load index {index} out of range [0, {len(buf)})")
            return buf[index]
        except Trap as t:
            raise self._located(t, span) from None

    def store(self, name: str, index: int, value, span) -> None:
        value = coerce(value, self._elem_type(name))
        target = self._resolve(name, span)
        try:
            if target[0] == "global":
                self._emit("W", target[1], index)
                self.arena.write(target[1], index, value)
                return
            buf = target[1]
            if not 0 <= index < len(buf):
                raise Trap("OutOfBounds",
                           f"shared store index {index} out of range [0, {len(buf)})")
            buf[index] = value
        except Trap as t:
            raise self._located(t, span) from None

    def atomic(self, kind: str, name: str, index, operand, compare, span) -> None:
        if index is None:
            raise Trap("TypeFault", "atomic target must be an array element",
                       kernel=self.kernel_name, tid=self.tid, span=span)
        elem_ty = self._elem_type(name)
        target = self._resolve(name, span)
        with self.arena.atomic_lock:
            try:
                if target[0] == "global":
                    self._emit("R", target[1], index)
                    old = self.arena.read(target[1], index)
                else:
                    buf = target[1]
                    if not 0 <= index < len(buf):
                        raise Trap(
                            "OutOfBounds",
                            f"atomic index {index} out of range [0, {len(buf)})")
                    old = buf[index]
                if kind == "add":
                    new = coerce(old + operand, elem_ty)
                elif old == compare:  # cas
                    new = coerce(operand, elem_ty)
                else:
                    return
                if target[0] == "global":
                    self._emit("W", target[1], index)
                    self.arena.write(target[1], index, new)
                else:
                    target[1][index] = new
            except Trap as t:
                raise self._located(t, span) from None


class _MpmdEnv(_ArrayEnv):
    """Environment for one block execution of a fused kernel."""

    def __init__(self, k: MpmdKernel, ctx: BlockContext, arena: DeviceArena,
                 scalars: dict, handles: dict):
        self.k = k
        self.ctx = ctx
        self.arena = arena
        self.scalars = scalars
        self.handles = handles
        self.kernel_name = k.name
        self.block_index = ctx.block_index
        self.block_dim = ctx.block_dim
        self.grid_dim = ctx.grid_dim
        self.trace = ctx.trace
        self.tid = 0
        self.uniform: dict[str, int] = {}   # sequential-loop counters
        self.frames: dict[int, dict] = defaultdict(dict)  # per-tid chunk locals
        self.expanded_names = k.expanded_names

    def fresh_frames(self) -> None:
        self.frames = defaultdict(dict)

    def read_var(self, name: str):
        if name in self.expanded_names:
            return self.ctx.expanded[name][self.tid]
        if name in self.uniform:
            return self.uniform[name]
        frame = self.frames[self.tid]
        if name in frame:
            return frame[name]
        if name in self.scalars:
            return self.scalars[name]
        raise Trap("TypeFault", f"read of unbound variable {name!r}",
                   kernel=self.kernel_name, tid=self.tid)

    def write_var(self, name: str, value, ty: Optional[str]) -> None:
        decl_ty = ty or self.k.local_types.get(name)
        value = coerce(value, decl_ty)
        if name in self.expanded_names:
            self.ctx.expanded[name][self.tid] = value
        else:
            self.frames[self.tid][name] = value

    def _resolve(self, name: str, span):
        ref = self.k.memory_map.get(name)
        if ref is None:
            raise Trap("TypeFault", f"unmapped array {name!r}",
                       kernel=self.kernel_name, tid=self.tid, span=span)
        if ref.space == "global":
            pname = self.k.param_signature[ref.param_index].name
            return ("global", self.handles[pname])
        if ref.space == "shared-static":
            return ("buf", self.ctx.static_buffers[ref.slot])
        if self.ctx.dyn_buffer is None:
            raise Trap("OutOfBounds",
                       "dynamic shared memory used but none was allocated",
                       kernel=self.kernel_name, tid=self.tid, span=span)
        return ("buf", self.ctx.dyn_buffer)

    def _elem_type(self, name: str) -> str:
        ref = self.k.memory_map[name]
        if ref.space == "global":
            return self.k.param_signature[ref.param_index].ptype.scalar
        if ref.space == "shared-static":
            return self.k.shared_layout.static[ref.slot].scalar
        return self.k.shared_layout.dynamic_scalar


def _warp_partition(block_size: int, warp_size: int) -> list[list[int]]:
    return [list(range(w * warp_size, min((w + 1) * warp_size, block_size)))
            for w in range(-(-block_size // warp_size))]


def run_block(k: MpmdKernel, ctx: BlockContext, arena: DeviceArena,
              packed) -> None:
    """Execute one block of a fused kernel: sections in order, tids ascending."""
    scalars, handles = unpack_args(k.param_signature, packed, k.name)
    env = _MpmdEnv(k, ctx, arena, scalars, handles)
    block_size = ctx.block_dim.total

    def env_for_lane(lane: int):
        env.tid = lane
        return env

    def run_chunk(stmts: list[Stmt]) -> None:
        env.fresh_frames()
        if k.warp_mode:
            for lanes in _warp_partition(block_size, k.warp_size):
                run_warp_stmts(stmts, lanes, env_for_lane, k.warp_size)
        else:
            for tid in range(block_size):
                env.tid = tid
                exec_block(stmts, env)

    for si, sec in enumerate(k.sections):
        if isinstance(sec, ThreadSection):
            run_chunk(sec.body)
        else:
            env.tid = 0  # bounds are block-uniform; evaluate them once per trip
            v = coerce(eval_expr(sec.lo, env), "i32")
            while True:
                env.uniform[sec.var] = v
                env.tid = 0
                if not v < eval_expr(sec.hi, env):
                    break
                for pi, phase in enumerate(sec.phases):
                    if pi > 0:
                        ctx.barrier_events += 1
                    run_chunk(phase)
                env.tid = 0
                v = coerce(v + eval_expr(sec.step, env), "i32")
            del env.uniform[sec.var]
        if si in k.barrier_boundaries:
            ctx.barrier_events += 1


def run_mpmd(k: MpmdKernel, grid: Dim3, block: Dim3, packed,
             arena: DeviceArena, dyn_bytes: int = 0,
             trace: Optional[MemoryTrace] = None) -> int:
    """Single-threaded whole-grid run, blocks in ascending linear order.

    Returns the total barrier-event count across blocks.  The worker-pool
    runtime calls `run_block` directly instead.
    """
    events = 0
    for bid in range(grid.total):
        bx, by, bz = delinearize(bid, grid)
        ctx = make_context(k, Idx3(bx, by, bz), block, grid, dyn_bytes, trace)
        run_block(k, ctx, arena, packed)
        events += ctx.barrier_events
    return events


def trace_accesses(k: MpmdKernel, grid: Dim3, block: Dim3, packed,
                   arena: DeviceArena, dyn_bytes: int = 0) -> MemoryTrace:
    """Global-memory trace of a full run, without mutating the given arena."""
    trace: MemoryTrace = []
    run_mpmd(k, grid, block, packed, arena.snapshot(), dyn_bytes, trace)
    return trace


# ---------------------------------------------------------------------------
# reference interpreter (the oracle)
# ---------------------------------------------------------------------------

class _RefEnv(_ArrayEnv):
    """Per-block environment with persistent per-thread locals (no expansion)."""

    def __init__(self, kp: KernelProgram, arena: DeviceArena, scalars: dict,
                 handles: dict, decl_types: dict[str, str],
                 block_index: Dim3, block_dim: Dim3, grid_dim: Dim3,
                 dyn_bytes: int):
        self.kp = kp
        self.arena = arena
        self.scalars = scalars
        self.handles = handles
        self.decl_types = decl_types
        self.kernel_name = kp.name
        self.block_index = block_index
        self.block_dim = block_dim
        self.grid_dim = grid_dim
        self.tid = 0
        self.trace = None
        self.frames: dict[int, dict] = defaultdict(dict)
        self.shared: dict[str, array] = {
            d.name: new_buffer(d.scalar, d.length) for d in kp.static_shared}
        self.shared_elem = {d.name: d.scalar for d in kp.static_shared}
        self.dyn_name = None
        self.dyn_buffer = None
        if kp.dynamic_shared is not None:
            name, scalar = kp.dynamic_shared
            self.dyn_name = name
            self.shared_elem[name] = scalar
            self.dyn_buffer = new_buffer(scalar, dyn_bytes // SCALAR_SIZE[scalar])

    def read_var(self, name: str):
        frame = self.frames[self.tid]
        if name in frame:
            return frame[name]
        if name in self.scalars:
            return self.scalars[name]
        raise Trap("TypeFault", f"read of unbound variable {name!r}",
                   kernel=self.kernel_name, tid=self.tid)

    def write_var(self, name: str, value, ty: Optional[str]) -> None:
        decl_ty = ty or self.decl_types.get(name)
        self.frames[self.tid][name] = coerce(value, decl_ty)

    def _resolve(self, name: str, span):
        if name in self.shared:
            return ("buf", self.shared[name])
        if name == self.dyn_name:
            return ("buf", self.dyn_buffer)
        if name in self.handles:
            return ("global", self.handles[name])
        raise Trap("TypeFault", f"unknown array {name!r}",
                   kernel=self.kernel_name, tid=self.tid, span=span)

    def _elem_type(self, name: str) -> str:
        if name in self.shared_elem:
            return self.shared_elem[name]
        return self.kp.param(name).ptype.scalar


def run_reference(kp: KernelProgram, grid: Dim3, block: Dim3, packed,
                  arena: DeviceArena, warp_mode: bool = False,
                  warp_size: int = 32, dyn_bytes: int = 0) -> None:
    """Run the untransformed kernel in barrier-lockstep order.

    Each block advances all threads through each barrier-free chunk before
    crossing the barrier; a for-loop containing barriers runs sequentially
    with its counter advanced for every thread each iteration.  Thread
    locals persist for the whole kernel, so no liveness analysis is needed.
    """
    info = analyze(kp, warp_mode=warp_mode)
    if info.diagnostics:
        raise Trap("TypeFault",
                   "kernel failed validation: "
                   + "; ".join(str(d) for d in info.diagnostics),
                   kernel=kp.name)
    scalars, handles = unpack_args(kp.params, packed, kp.name)
    block_size = block.total

    for bid in range(grid.total):
        bx, by, bz = delinearize(bid, grid)
        env = _RefEnv(kp, arena, scalars, handles, info.local_types,
                      Idx3(bx, by, bz), block, grid, dyn_bytes)

        def env_for_lane(lane: int):
            env.tid = lane
            return env

        def run_chunk(stmts: list[Stmt]) -> None:
            if not stmts:
                return
            if warp_mode:
                for lanes in _warp_partition(block_size, warp_size):
                    run_warp_stmts(stmts, lanes, env_for_lane, warp_size)
            else:
                for tid in range(block_size):
                    env.tid = tid
                    exec_block(stmts, env)

        def run_lockstep(stmts: list[Stmt]) -> None:
            chunk: list[Stmt] = []

            def flush() -> None:
                run_chunk(chunk)
                chunk.clear()

            for s in stmts:
                if isinstance(s, Barrier):
                    flush()
                elif isinstance(s, For) and count_barriers(s.body) > 0:
                    flush()
                    env.tid = 0
                    v = coerce(eval_expr(s.lo, env), "i32")
                    while True:
                        for tid in range(block_size):
                            env.tid = tid
                            env.write_var(s.var, v, "i32")
                        env.tid = 0
                        if not v < eval_expr(s.hi, env):
                            break
                        run_lockstep(s.body)
                        env.tid = 0
                        v = coerce(v + eval_expr(s.step, env), "i32")
                else:
                    chunk.append(s)
            flush()

        run_lockstep(kp.body)
