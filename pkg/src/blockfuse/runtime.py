"""Worker-pool runtime: task queue, push/fetch/execute protocol, grain policies.

The host thread pushes kernel tasks and returns immediately; pool workers
claim `block_per_fetch` blocks per fetch under the queue guard, execute them
strictly outside the guard, and the task is popped when its block cursor
reaches the total.  Workers are created once and joined once per runtime.
"""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Union

from blockfuse.arena import DeviceArena, Trap
from blockfuse.executor import make_context, run_block
from blockfuse.syntax import Dim3, Idx3, delinearize
from blockfuse.transform import MpmdKernel

log = logging.getLogger(__name__)


class PoolShutdown(Exception):
    pass


class RuntimeFault(Exception):
    """An executor trap surfaced from a worker, carrying the block id."""

    def __init__(self, trap: Trap, block_id: int):
        self.trap = trap
        self.block_id = block_id
        super().__init__(f"block {block_id}: {trap}")


# ---------------------------------------------------------------------------
# fetch policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Average:
    pass


@dataclass(frozen=True)
class Fixed:
    grain: int

    def __post_init__(self):
        if self.grain < 1:
            raise ValueError(f"grain must be >= 1, got {self.grain}")


@dataclass(frozen=True)
class AutoAggressive:
    # a kernel whose per-block statement count stays under this is "light"
    light_kernel_threshold: int = 64


FetchPolicy = Union[Average, Fixed, AutoAggressive]


def parse_policy(text: str) -> FetchPolicy:
    if text == "average":
        return Average()
    if text == "auto":
        return AutoAggressive()
    if text.startswith("fixed:"):
        return Fixed(int(text[len("fixed:"):]))
    raise ValueError(f"unknown policy {text!r} (want average | fixed:<g> | auto)")


def resolve_grain(policy: FetchPolicy, grid_size: int, pool_size: int,
                  kernel_stats: Optional[MpmdKernel] = None) -> int:
    """Blocks claimed per fetch for one launch."""
    if grid_size < 1 or pool_size < 1:
        raise ValueError("grid_size and pool_size must be >= 1")
    average = -(-grid_size // pool_size)
    if isinstance(policy, Average):
        grain = average
    elif isinstance(policy, Fixed):
        grain = min(policy.grain, grid_size)
    else:
        grain = average
        if kernel_stats is not None and kernel_stats.has_atomics():
            # contended atomics: halve the fetch traffic at the same grain cost
            grain = min(2 * average, grid_size)
        elif (kernel_stats is not None
              and kernel_stats.static_instruction_estimate()
              < policy.light_kernel_threshold):
            # light kernel: idle workers are cheaper than fetch overhead
            grain = min(max(average, grid_size // 2), grid_size)
    grain = max(grain, 1)
    log.debug("resolve_grain(%s, grid=%d, pool=%d) -> %d",
              type(policy).__name__, grid_size, pool_size, grain)
    return grain


# ---------------------------------------------------------------------------
# tasks and counters
# ---------------------------------------------------------------------------

@dataclass
class KernelTask:
    routine: MpmdKernel
    args: object  # PackedArgs
    gridDim: Dim3
    blockDim: Dim3
    dynamic_shared_mem_size: int
    totalBlocks: int
    block_per_fetch: int
    curr_blockId: int = 0
    # completion / instrumentation (not part of the queue protocol)
    remaining: int = 0
    fetches: int = 0
    executed: list[int] = field(default_factory=list)  # per-block run counts

    def __post_init__(self):
        self.remaining = self.totalBlocks
        self.executed = [0] * self.totalBlocks


@dataclass
class RuntimeCounters:
    fetch_count: int = 0
    blocks_executed: int = 0
    busy_blocks: list[int] = field(default_factory=list)  # per worker
    syncs: int = 0
    queue_waits: int = 0

    def to_dict(self) -> dict:
        return {
            "blocks_executed": self.blocks_executed,
            "busy_blocks": list(self.busy_blocks),
            "fetch_count": self.fetch_count,
            "queue_waits": self.queue_waits,
            "syncs": self.syncs,
        }


class TaskQueue:
    """FIFO of tasks; every mutation happens inside the guard."""

    def __init__(self, counters: RuntimeCounters):
        self._cv = threading.Condition()
        self._tasks: deque[KernelTask] = deque()
        self._closed = False
        self._holder: Optional[int] = None  # thread ident holding the guard
        self._counters = counters

    def held_by_me(self) -> bool:
        return self._holder == threading.get_ident()

    def push(self, task: KernelTask) -> None:
        with self._cv:
            self._holder = threading.get_ident()
            try:
                if self._closed:
                    raise PoolShutdown("launch after shutdown")
                self._tasks.append(task)
                self._cv.notify_all()  # wake every idle worker
            finally:
                self._holder = None

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def fetch(self) -> Optional[tuple[KernelTask, int, int]]:
        """Claim the next block range of the front task, or None at shutdown.

        Blocks on the wake signal while the queue is empty; re-checks under
        the guard on every wakeup.
        """
        with self._cv:
            self._holder = threading.get_ident()
            try:
                while not self._tasks:
                    if self._closed:
                        return None
                    self._counters.queue_waits += 1
                    self._holder = None
                    self._cv.wait()
                    self._holder = threading.get_ident()
                task = self._tasks[0]
                first = task.curr_blockId
                count = min(task.block_per_fetch, task.totalBlocks - first)
                task.curr_blockId = first + count
                task.fetches += 1
                self._counters.fetch_count += 1
                if task.curr_blockId == task.totalBlocks:
                    self._tasks.popleft()
                return task, first, count
            finally:
                self._holder = None

    def is_empty(self) -> bool:
        with self._cv:
            return not self._tasks


# ---------------------------------------------------------------------------
# the runtime
# ---------------------------------------------------------------------------

def default_pool_size() -> int:
    return os.cpu_count() or 1


class Runtime:
    """Worker pool plus task queue; one thread-create and one thread-join.

    `hold_blocks=True` gates all block execution until the next
    device_synchronize — an adversarial schedule where a launch's blocks all
    run as late as possible.  `block_delay` adds a random per-block sleep of
    up to that many seconds (seeded) to shake out schedule dependence.
    """

    def __init__(self, arena: DeviceArena, pool_size: Optional[int] = None,
                 policy: FetchPolicy = Average(), hold_blocks: bool = False,
                 block_delay: float = 0.0, seed: int = 0):
        self.arena = arena
        self.pool_size = pool_size if pool_size is not None else default_pool_size()
        if self.pool_size < 1:
            raise ValueError(f"pool size must be >= 1, got {self.pool_size}")
        self.policy = policy
        self.counters = RuntimeCounters(busy_blocks=[0] * self.pool_size)
        self.queue = TaskQueue(self.counters)
        self._state = threading.Condition()
        self._outstanding = 0           # launched blocks not yet completed
        self._fault: Optional[RuntimeFault] = None
        self._tasks: list[KernelTask] = []
        self._hold = threading.Event()
        if not hold_blocks:
            self._hold.set()
        self._delay = block_delay
        self._rng_lock = threading.Lock()
        self._rng = random.Random(seed)
        self._shut_down = False
        self._workers = [
            threading.Thread(target=self._worker_loop, args=(i,), daemon=True)
            for i in range(self.pool_size)
        ]
        for w in self._workers:
            w.start()

    # -- host API -----------------------------------------------------------

    def launch(self, routine: MpmdKernel, grid: Dim3, block: Dim3,
               shmem_bytes: int, packed) -> KernelTask:
        """Enqueue a kernel; returns immediately, never waits for workers."""
        if self._shut_down:
            raise PoolShutdown("launch after shutdown")
        grain = resolve_grain(self.policy, grid.total, self.pool_size, routine)
        task = KernelTask(routine, packed, grid, block, shmem_bytes,
                          totalBlocks=grid.total, block_per_fetch=grain)
        with self._state:
            self._outstanding += task.totalBlocks
            self._tasks.append(task)
        self.queue.push(task)
        return task

    def device_synchronize(self) -> None:
        """Return once the queue is drained and every fetched range finished."""
        self._hold.set()
        with self._state:
            while self._outstanding > 0 and self._fault is None:
                self._state.wait()
            self.counters.syncs += 1
            fault = self._fault
        if fault is not None:
            raise fault

    def unfinished_tasks(self) -> list[KernelTask]:
        with self._state:
            return [t for t in self._tasks if t.remaining > 0]

    def hold_new_blocks(self) -> None:
        """Re-arm the adversarial gate (blocks run only after the next sync)."""
        self._hold.clear()

    def shutdown(self) -> None:
        if self._shut_down:
            return
        self._shut_down = True
        self._hold.set()
        self.queue.close()
        for w in self._workers:
            w.join()

    def __enter__(self) -> "Runtime":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- workers ------------------------------------------------------------

    def _worker_loop(self, worker_id: int) -> None:
        while True:
            item = self.queue.fetch()
            if item is None:
                return
            task, first, count = item
            self._hold.wait()
            assert not self.queue.held_by_me(), \
                "kernel execution must happen outside the queue guard"
            try:
                self._execute_range(worker_id, task, first, count)
            except BaseException as e:  # pragma: no cover - worker bug guard
                with self._state:
                    if self._fault is None:
                        self._fault = RuntimeFault(
                            Trap("TypeFault", f"worker crashed: {e!r}"), first)
                    self._state.notify_all()

    def _execute_range(self, worker_id: int, task: KernelTask,
                       first: int, count: int) -> None:
        for b in range(first, first + count):
            if self._delay > 0.0:
                with self._rng_lock:
                    pause = self._rng.uniform(0.0, self._delay)
                time.sleep(pause)
            bx, by, bz = delinearize(b, task.gridDim)
            ctx = make_context(task.routine, Idx3(bx, by, bz), task.blockDim,
                               task.gridDim, task.dynamic_shared_mem_size)
            try:
                run_block(task.routine, ctx, self.arena, task.args)
            except Trap as t:
                with self._state:
                    undone = first + count - b
                    task.remaining -= undone
                    self._outstanding -= undone
                    if self._fault is None:
                        self._fault = RuntimeFault(t, b)
                    self._state.notify_all()
                return
            with self._state:
                task.executed[b] += 1
                task.remaining -= 1
                self._outstanding -= 1
                self.counters.blocks_executed += 1
                self.counters.busy_blocks[worker_id] += 1
                self._state.notify_all()


# ---------------------------------------------------------------------------
# host program driver
# ---------------------------------------------------------------------------

@dataclass
class ConflictEvent:
    """A host op touched buffers of a launch whose blocks were unfinished."""
    op_line: int
    op_kind: str
    buffers: set[str]


@dataclass
class HostResult:
    arena: DeviceArena
    handles: dict[str, int]           # buffers still allocated at exit
    downloads: dict[str, bytes]       # path -> raw little-endian bytes
    counters: RuntimeCounters
    conflicts: list[ConflictEvent]
    tasks: list[KernelTask]
    program: object                   # the (possibly instrumented) HostProgram


def run_host_program(program, kernels: dict, *, pool_size: int = 4,
                     policy: FetchPolicy = Average(), warp_mode: bool = False,
                     warp_size: int = 32, insert_implicit: bool = True,
                     hold_blocks: bool = False, block_delay: float = 0.0,
                     seed: int = 0, write_files: bool = False,
                     arena: Optional[DeviceArena] = None) -> HostResult:
    """Execute a host script against a fresh runtime.

    Implicit barriers are inserted first (unless disabled, for the
    soundness/minimality experiments).  A conflict detector snapshots, at
    every host op, whether any unfinished launch's buffer sets clash with
    the op's — with barriers in place the list stays empty.
    """
    from blockfuse import hostprog
    from blockfuse.transform import transform

    summaries = {name: hostprog.summarize_access(k) for name, k in kernels.items()}
    if insert_implicit:
        program = hostprog.insert_barriers(program, summaries)

    compiled: dict[str, MpmdKernel] = {}
    arena = arena if arena is not None else DeviceArena()
    handles: dict[str, int] = {}
    downloads: dict[str, bytes] = {}
    conflicts: list[ConflictEvent] = []
    launched: list[tuple[KernelTask, set[str], set[str]]] = []

    def check_conflicts(op, reads: set[str], writes: set[str]) -> None:
        touched: set[str] = set()
        for task, t_reads, t_writes in launched:
            if task.remaining > 0:
                touched |= reads & t_writes
                touched |= writes & t_reads
                touched |= writes & t_writes
        if touched:
            conflicts.append(ConflictEvent(op.line, type(op).__name__.lower(),
                                           touched))

    with Runtime(arena, pool_size=pool_size, policy=policy,
                 hold_blocks=hold_blocks, block_delay=block_delay,
                 seed=seed) as rt:
        for op in program.ops:
            if isinstance(op, hostprog.Sync):
                rt.device_synchronize()
                if hold_blocks:
                    rt.hold_new_blocks()
                continue
            reads, writes = hostprog.host_buffer_sets(op, summaries)
            check_conflicts(op, reads, writes)
            if isinstance(op, hostprog.Alloc):
                handles[op.buf] = arena.alloc(op.scalar, op.length)
            elif isinstance(op, hostprog.Upload):
                values = hostprog.upload_values(
                    op.source, arena.scalar_type(handles[op.buf]),
                    arena.length(handles[op.buf]))
                if values is None:
                    path = op.source[len("file:"):]
                    with open(path, "rb") as f:
                        arena.from_bytes(handles[op.buf], f.read())
                else:
                    arena.fill(handles[op.buf], values)
            elif isinstance(op, hostprog.Launch):
                key = op.kernel
                if key not in compiled:
                    compiled[key] = transform(kernels[key], warp_mode=warp_mode,
                                              warp_size=warp_size)
                packed = hostprog.pack_params(op, kernels[key], handles)
                task = rt.launch(compiled[key], op.grid, op.block, op.shmem, packed)
                launched.append((task, reads, writes))
            elif isinstance(op, hostprog.Download):
                raw = arena.to_bytes(handles[op.buf])
                downloads[op.path] = raw
                if write_files:
                    with open(op.path, "wb") as f:
                        f.write(raw)
            elif isinstance(op, hostprog.Free):
                arena.free(handles.pop(op.buf))
        rt.device_synchronize()
        counters = rt.counters
        tasks = [t for t, _, _ in launched]
    return HostResult(arena, handles, downloads, counters, conflicts, tasks,
                      program)
