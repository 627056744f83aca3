"""Kernel corpus and experiment harness: grain-size sweeps and the
original-vs-reordered cache comparison.

Each corpus case carries a kernel file, a demo host script, and a
randomized instance generator whose outputs are checked against the
lockstep reference interpreter.  Wall times are reported but never
asserted; the counters carry the verifiable content.
"""

from __future__ import annotations

import random
import statistics
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional, Union

from blockfuse.arena import DeviceArena
from blockfuse.cachesim import CacheConfig, CacheReport, simulate
from blockfuse.executor import ArgSlot, run_reference, trace_accesses
from blockfuse.hostprog import PackedArgs
from blockfuse.parser import parse_unit
from blockfuse.runtime import Average, FetchPolicy, Fixed, Runtime, resolve_grain
from blockfuse.syntax import Dim3, KernelProgram
from blockfuse.transform import MpmdKernel, reorder_grid_stride, transform


def corpus_path(filename: str):
    return resources.files("blockfuse").joinpath("corpus", filename)


def load_kernel(name: str) -> KernelProgram:
    source = corpus_path(f"{name}.kn").read_text()
    kernels = parse_unit(source)
    return kernels[name]


def load_host_script(name: str) -> str:
    return corpus_path(f"{name}.host").read_text()


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass
class BufferSpec:
    name: str
    scalar: str
    length: int
    values: list


@dataclass
class Instance:
    grid: Dim3
    block: Dim3
    shmem: int
    buffers: list[BufferSpec]
    args: list  # ("buf", name) | (scalar, value)
    outputs: list[str]  # buffer names compared against the oracle


def materialize(instance: Instance, arena: DeviceArena) -> tuple[PackedArgs, dict]:
    handles: dict[str, int] = {}
    for b in instance.buffers:
        h = arena.alloc(b.scalar, b.length)
        arena.fill(h, b.values)
        handles[b.name] = h
    slots = [
        ArgSlot("handle", handles[a[1]]) if a[0] == "buf" else ArgSlot(a[0], a[1])
        for a in instance.args
    ]
    return PackedArgs(slots), handles


def _rand_f32(rng: random.Random, n: int) -> list[float]:
    return [rng.uniform(-1.0, 1.0) for _ in range(n)]


def _rand_i32(rng: random.Random, n: int) -> list[int]:
    return [rng.randrange(0, 1 << 16) for _ in range(n)]


def _vecadd_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    gx = rng.randint(1, max(1, 4096 // bx))
    n = rng.randint(0, gx * bx)
    length = max(n, 1)
    return Instance(
        Dim3(gx), Dim3(bx), 0,
        [BufferSpec("a", "f32", length, _rand_f32(rng, length)),
         BufferSpec("b", "f32", length, _rand_f32(rng, length)),
         BufferSpec("c", "f32", length, [0.0] * length)],
        [("buf", "a"), ("buf", "b"), ("buf", "c"), ("i32", n)],
        ["c"],
    )


def _reverse_instance(rng: random.Random) -> Instance:
    n = rng.randint(1, 512)
    return Instance(
        Dim3(1), Dim3(n), 4 * n,
        [BufferSpec("d", "i32", n, _rand_i32(rng, n))],
        [("buf", "d"), ("i32", n)],
        ["d"],
    )


def _reduce_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    gx = rng.randint(1, min(16, max(1, 4096 // bx)))
    n = rng.randint(0, gx * bx)
    length = max(n, 1)
    return Instance(
        Dim3(gx), Dim3(bx), 0,
        [BufferSpec("x", "i32", length, _rand_i32(rng, length)),
         BufferSpec("out", "i32", gx, [0] * gx)],
        [("buf", "x"), ("buf", "out"), ("i32", n)],
        ["out"],
    )


def _hist_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    gx = rng.randint(1, max(1, 4096 // bx))
    n = rng.randint(0, gx * bx)
    nbins = rng.randint(1, 32)
    length = max(n, 1)
    return Instance(
        Dim3(gx), Dim3(bx), 0,
        [BufferSpec("pix", "i32", length, _rand_i32(rng, length)),
         BufferSpec("counts", "i32", nbins, [0] * nbins)],
        [("buf", "pix"), ("buf", "counts"), ("i32", n), ("i32", nbins)],
        ["counts"],
    )


def _fir_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    m = rng.randint(1, 16)
    taps = rng.randint(1, 8)
    out_len = bx * m
    return Instance(
        Dim3(1), Dim3(bx), 0,
        [BufferSpec("x", "f32", out_len + taps, _rand_f32(rng, out_len + taps)),
         BufferSpec("y", "f32", out_len, [0.0] * out_len),
         BufferSpec("w", "f32", taps, _rand_f32(rng, taps))],
        [("buf", "x"), ("buf", "y"), ("buf", "w"), ("i32", taps), ("i32", m)],
        ["y"],
    )


def _hist_stride_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    k = rng.randint(1, 16)
    nbins = rng.randint(1, 32)
    length = bx * k
    return Instance(
        Dim3(1), Dim3(bx), 0,
        [BufferSpec("pix", "i32", length, _rand_i32(rng, length)),
         BufferSpec("counts", "i32", nbins, [0] * nbins)],
        [("buf", "pix"), ("buf", "counts"), ("i32", k), ("i32", nbins)],
        ["counts"],
    )


def _wreduce_instance(rng: random.Random) -> Instance:
    bx = rng.randint(1, 256)
    gx = rng.randint(1, max(1, 4096 // bx))
    n = rng.randint(0, gx * bx)
    length = max(n, 1)
    return Instance(
        Dim3(gx), Dim3(bx), 0,
        [BufferSpec("x", "i32", length, _rand_i32(rng, length)),
         BufferSpec("out", "i32", 1, [0])],
        [("buf", "x"), ("buf", "out"), ("i32", n)],
        ["out"],
    )


@dataclass
class BenchCase:
    name: str
    warp_mode: bool
    random_instance: Callable[[random.Random], Instance]
    grid_stride: bool = False

    def kernel(self) -> KernelProgram:
        return load_kernel(self.name)

    def compiled(self, warp_size: int = 32) -> MpmdKernel:
        return transform(self.kernel(), warp_mode=self.warp_mode,
                         warp_size=warp_size)


CORPUS: dict[str, BenchCase] = {
    c.name: c for c in [
        BenchCase("vecadd", False, _vecadd_instance),
        BenchCase("reverse", False, _reverse_instance),
        BenchCase("reduce", False, _reduce_instance),
        BenchCase("hist", False, _hist_instance),
        BenchCase("fir", False, _fir_instance, grid_stride=True),
        BenchCase("hist_stride", False, _hist_stride_instance, grid_stride=True),
        BenchCase("wreduce", True, _wreduce_instance),
    ]
}

# the six equivalence-suite kernels; hist_stride is the reordering study case
EQUIVALENCE_CASES = ["vecadd", "reverse", "reduce", "hist", "fir", "wreduce"]


# ---------------------------------------------------------------------------
# oracle comparison
# ---------------------------------------------------------------------------

def reference_outputs(case: BenchCase, instance: Instance,
                      warp_size: int = 32) -> dict[str, list]:
    arena = DeviceArena()
    packed, handles = materialize(instance, arena)
    run_reference(case.kernel(), instance.grid, instance.block, packed, arena,
                  warp_mode=case.warp_mode, warp_size=warp_size,
                  dyn_bytes=instance.shmem)
    return {name: arena.to_list(handles[name]) for name in instance.outputs}


def runtime_outputs(case: BenchCase, instance: Instance, *,
                    pool_size: int = 4, policy: FetchPolicy = Average(),
                    warp_size: int = 32, seed: int = 0,
                    compiled: Optional[MpmdKernel] = None):
    """Run via the worker-pool runtime; returns (outputs, task, counters)."""
    arena = DeviceArena()
    packed, handles = materialize(instance, arena)
    mk = compiled if compiled is not None else case.compiled(warp_size)
    with Runtime(arena, pool_size=pool_size, policy=policy, seed=seed) as rt:
        task = rt.launch(mk, instance.grid, instance.block, instance.shmem,
                         packed)
        rt.device_synchronize()
        counters = rt.counters
    outputs = {name: arena.to_list(handles[name]) for name in instance.outputs}
    return outputs, task, counters


def outputs_equal(a: dict[str, list], b: dict[str, list],
                  rel_tol: float = 1e-6) -> bool:
    if a.keys() != b.keys():
        return False
    for name in a:
        if len(a[name]) != len(b[name]):
            return False
        for x, y in zip(a[name], b[name]):
            if isinstance(x, float) or isinstance(y, float):
                scale = max(abs(x), abs(y), 1.0)
                if abs(x - y) > rel_tol * scale:
                    return False
            elif x != y:
                return False
    return True


# ---------------------------------------------------------------------------
# grain-size sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    grain_spec: str
    grain: int
    fetch_count: int
    idle_workers: int
    blocks_executed: int
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "blocks_executed": self.blocks_executed,
            "fetch_count": self.fetch_count,
            "grain": self.grain,
            "grain_spec": self.grain_spec,
            "idle_workers": self.idle_workers,
            "wall_time": self.wall_time,
        }


@dataclass
class SweepReport:
    case: str
    pool_size: int
    rows: list[SweepRow]

    def to_dict(self) -> dict:
        return {"case": self.case, "pool_size": self.pool_size,
                "rows": [r.to_dict() for r in self.rows]}


class OracleMismatch(Exception):
    def __init__(self, case: str, grain_spec: str, seed: int):
        self.case = case
        self.grain_spec = grain_spec
        self.seed = seed
        super().__init__(f"oracle mismatch: case={case} grain={grain_spec} "
                         f"seed={seed}")


def run_sweep(case_name: str, grains: list[Union[int, str]], pool: int,
              repeats: int = 3, seed: int = 12345) -> SweepReport:
    """Run one corpus case at each grain; every run is oracle-checked."""
    case = CORPUS[case_name]
    rng = random.Random(seed)
    # prefer an instance with enough blocks for the grains to differ
    instance = max((case.random_instance(rng) for _ in range(20)),
                   key=lambda i: i.grid.total)
    mk = case.compiled()
    expected = reference_outputs(case, instance)
    total = instance.grid.total

    rows: list[SweepRow] = []
    for g in grains:
        policy = Average() if g == "average" else Fixed(int(g))
        grain = resolve_grain(policy, total, pool, mk)
        times: list[float] = []
        row: Optional[SweepRow] = None
        for _ in range(repeats):
            start = time.perf_counter()
            outputs, task, counters = runtime_outputs(
                case, instance, pool_size=pool, policy=policy, compiled=mk)
            times.append(time.perf_counter() - start)
            if not outputs_equal(outputs, expected):
                raise OracleMismatch(case_name, str(g), seed)
            row = SweepRow(str(g), grain, task.fetches,
                           counters.busy_blocks.count(0),
                           counters.blocks_executed, 0.0)
        row.wall_time = statistics.median(times)
        rows.append(row)
    return SweepReport(case_name, pool, rows)


# ---------------------------------------------------------------------------
# reordering experiment
# ---------------------------------------------------------------------------

@dataclass
class ReorderReport:
    case: str
    config: CacheConfig
    original: CacheReport
    reordered: CacheReport
    outputs_match: bool

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "config": {"capacity": self.config.capacity,
                       "line_size": self.config.line_size,
                       "ways": self.config.associativity},
            "original": self.original.to_dict(),
            "outputs_match": self.outputs_match,
            "reordered": self.reordered.to_dict(),
        }


def big_stride_instance(case_name: str, cfg: CacheConfig,
                        scale: int = 32) -> Instance:
    """An instance whose strided working set is >= scale x cache capacity."""
    rng = random.Random(99)
    if case_name == "hist_stride":
        bx = 256
        elems = -(-scale * cfg.capacity // 4)
        k = -(-elems // bx)
        nbins = 16
        length = bx * k
        return Instance(
            Dim3(1), Dim3(bx), 0,
            [BufferSpec("pix", "i32", length, _rand_i32(rng, length)),
             BufferSpec("counts", "i32", nbins, [0] * nbins)],
            [("buf", "pix"), ("buf", "counts"), ("i32", k), ("i32", nbins)],
            ["counts"],
        )
    if case_name == "fir":
        bx = 256
        elems = -(-scale * cfg.capacity // 4)
        m = -(-elems // bx)
        taps = 4
        out_len = bx * m
        return Instance(
            Dim3(1), Dim3(bx), 0,
            [BufferSpec("x", "f32", out_len + taps, _rand_f32(rng, out_len + taps)),
             BufferSpec("y", "f32", out_len, [0.0] * out_len),
             BufferSpec("w", "f32", taps, _rand_f32(rng, taps))],
            [("buf", "x"), ("buf", "y"), ("buf", "w"), ("i32", taps), ("i32", m)],
            ["y"],
        )
    raise ValueError(f"case {case_name!r} has no grid-stride instance")


def run_reorder_experiment(case_name: str = "hist_stride",
                           cfg: CacheConfig = CacheConfig(32768, 64, 8),
                           scale: int = 32,
                           instance: Optional[Instance] = None) -> ReorderReport:
    """Trace the case before and after index reordering and simulate both."""
    case = CORPUS[case_name]
    if not case.grid_stride:
        raise ValueError(f"case {case_name!r} does not use grid-stride indexing")
    if instance is None:
        instance = big_stride_instance(case_name, cfg, scale)
    original = case.compiled()
    reordered = reorder_grid_stride(original)  # may raise PatternNotFound

    arena = DeviceArena()
    packed, handles = materialize(instance, arena)
    trace_orig = trace_accesses(original, instance.grid, instance.block,
                                packed, arena, instance.shmem)
    trace_reord = trace_accesses(reordered, instance.grid, instance.block,
                                 packed, arena, instance.shmem)
    report_orig = simulate(trace_orig, cfg)
    report_reord = simulate(trace_reord, cfg)

    expected = reference_outputs(case, instance)
    out_orig, _, _ = runtime_outputs(case, instance, compiled=original,
                                     pool_size=2)
    out_reord, _, _ = runtime_outputs(case, instance, compiled=reordered,
                                      pool_size=2)
    match = outputs_equal(out_orig, expected) and outputs_equal(out_reord, expected)
    return ReorderReport(case_name, cfg, report_orig, report_reord, match)
