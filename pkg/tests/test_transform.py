"""Fusion tests: section structure, variable expansion, barrier accounting."""

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockfuse.arena import DeviceArena
from blockfuse.bench import CORPUS, load_kernel
from blockfuse.executor import ArgSlot, make_context, run_block, run_mpmd, run_reference
from blockfuse.hostprog import PackedArgs
from blockfuse.parser import parse
from blockfuse.syntax import Dim3, Idx3
from blockfuse.transform import (
    LoopSection,
    ThreadSection,
    TransformError,
    transform,
)


class TestSectionStructure:
    def test_vecadd_single_section(self):
        mk = transform(load_kernel("vecadd"))
        assert len(mk.sections) == 1
        assert isinstance(mk.sections[0], ThreadSection)
        assert mk.expanded_vars == []
        assert mk.barrier_boundaries == set()

    def test_reverse_splits_at_barrier(self):
        mk = transform(load_kernel("reverse"))
        assert len(mk.sections) == 2
        assert all(isinstance(s, ThreadSection) for s in mk.sections)
        assert mk.barrier_boundaries == {0}
        # both locals are written before the barrier and read after it
        assert mk.expanded_names == {"t", "tr"}

    def test_reduce_loop_fission(self):
        mk = transform(load_kernel("reduce"))
        kinds = [type(s) for s in mk.sections]
        assert kinds == [ThreadSection, LoopSection, ThreadSection]
        loop = mk.sections[1]
        assert loop.var == "s"
        assert len(loop.phases) == 2  # barrier ends the loop body
        assert loop.phases[1] == []
        assert mk.barrier_boundaries == {0}
        assert mk.expanded_names == {"t"}  # id never crosses a split

    def test_empty_kernel_gets_one_section(self):
        mk = transform(parse("kernel k() { }"))
        assert len(mk.sections) == 1
        assert mk.sections[0].body == []

    def test_trailing_barrier_adds_empty_tail(self):
        mk = transform(parse("kernel k() { barrier; }"))
        assert len(mk.sections) == 2
        assert mk.barrier_boundaries == {0}

    def test_nested_barrier_loop_rejected(self):
        src = ("kernel k(n: i32) { for (i = 0; i < n; i += 1) "
               "{ for (j = 0; j < n; j += 1) { barrier; } } }")
        with pytest.raises(TransformError):
            transform(parse(src))

    def test_invalid_kernel_rejected(self):
        with pytest.raises(TransformError):
            transform(parse("kernel k() { let v: i32 = q; }"))


class TestKernelStats:
    def test_trip_counts_thread_mode(self):
        mk = transform(load_kernel("vecadd"))
        assert mk.loop_trip_counts(64) == (64,)

    def test_trip_counts_warp_mode(self):
        mk = transform(load_kernel("wreduce"), warp_mode=True, warp_size=32)
        assert mk.loop_trip_counts(64) == (2, 32)
        assert mk.loop_trip_counts(65) == (3, 32)

    def test_has_atomics(self):
        assert transform(load_kernel("hist")).has_atomics()
        assert not transform(load_kernel("vecadd")).has_atomics()

    def test_instruction_estimate_counts_nesting(self):
        mk = transform(parse(
            "kernel k(n: i32) { if (n) { let v: i32 = 0; } barrier; }"))
        # if + inner decl in section 0, empty tail section
        assert mk.static_instruction_estimate() == 2

    def test_to_dict_is_json_serializable(self):
        for name in CORPUS:
            mk = CORPUS[name].compiled()
            json.dumps(mk.to_dict(), sort_keys=True)


class TestBarrierEvents:
    def _run_one_block(self, mk, block_size, packed, arena):
        ctx = make_context(mk, Idx3(0), Dim3(block_size), Dim3(1), dyn_bytes=64)
        run_block(mk, ctx, arena, packed)
        return ctx.barrier_events

    def test_top_level_barrier_counted_once_per_block(self):
        mk = transform(load_kernel("reverse"))
        arena = DeviceArena()
        h = arena.alloc("i32", 8)
        packed = PackedArgs([ArgSlot("handle", h), ArgSlot("i32", 8)])
        assert self._run_one_block(mk, 8, packed, arena) == 1

    @pytest.mark.parametrize("block,expected_trips", [(1, 0), (2, 1), (64, 6),
                                                      (100, 7), (256, 8)])
    def test_in_loop_barrier_counted_per_trip(self, block, expected_trips):
        mk = transform(load_kernel("reduce"))
        arena = DeviceArena()
        x = arena.alloc("i32", block)
        out = arena.alloc("i32", 1)
        packed = PackedArgs([ArgSlot("handle", x), ArgSlot("handle", out),
                             ArgSlot("i32", block)])
        # one boundary barrier + one in-loop barrier per doubling trip
        assert self._run_one_block(mk, block, packed, arena) == 1 + expected_trips

    def test_run_mpmd_sums_blocks(self):
        mk = transform(load_kernel("reverse"))
        arena = DeviceArena()
        h = arena.alloc("i32", 8)
        packed = PackedArgs([ArgSlot("handle", h), ArgSlot("i32", 8)])
        assert run_mpmd(mk, Dim3(3), Dim3(8), packed, arena, dyn_bytes=32) == 3


# ---------------------------------------------------------------------------
# expansion soundness: a local live across a barrier reads back, per thread,
# exactly what the lockstep reference produces
# ---------------------------------------------------------------------------

_TEMPLATE = """
kernel gen(d: global i32[], e: global i32[]) {{
    let t: i32 = threadIdx.x;
    let v: i32 = t * {c1} + {c2};
    e[t] = d[t] + v;
    barrier;
    d[t] = e[(t + {c3}) % blockDim.x] + v;
}}
"""


class TestExpansionSoundness:
    @settings(max_examples=60, deadline=None)
    @given(c1=st.integers(-50, 50), c2=st.integers(-50, 50),
           c3=st.integers(0, 64), block=st.integers(1, 64),
           data=st.lists(st.integers(-1000, 1000), min_size=64, max_size=64))
    def test_matches_lockstep_reference(self, c1, c2, c3, block, data):
        kp = parse(_TEMPLATE.format(c1=c1, c2=c2, c3=c3))
        mk = transform(kp)
        assert mk.expanded_names >= {"v"}

        def fresh():
            arena = DeviceArena()
            d = arena.alloc("i32", block)
            e = arena.alloc("i32", block)
            arena.fill(d, data[:block])
            return arena, d, e

        a1, d1, e1 = fresh()
        packed = PackedArgs([ArgSlot("handle", d1), ArgSlot("handle", e1)])
        run_mpmd(mk, Dim3(1), Dim3(block), packed, a1)

        a2, d2, e2 = fresh()
        packed2 = PackedArgs([ArgSlot("handle", d2), ArgSlot("handle", e2)])
        run_reference(kp, Dim3(1), Dim3(block), packed2, a2)

        assert a1.to_list(d1) == a2.to_list(d2)
        assert a1.to_list(e1) == a2.to_list(e2)


class TestWarpModeIdentity:
    def test_intrinsic_free_kernel_unaffected_by_warp_mode(self):
        kp = load_kernel("reduce")
        data = list(range(300))
        results = []
        for warp_mode in (False, True):
            mk = transform(kp, warp_mode=warp_mode, warp_size=32)
            arena = DeviceArena()
            x = arena.alloc("i32", 300)
            out = arena.alloc("i32", 3)
            arena.fill(x, data)
            packed = PackedArgs([ArgSlot("handle", x), ArgSlot("handle", out),
                                 ArgSlot("i32", 300)])
            run_mpmd(mk, Dim3(3), Dim3(100), packed, arena)
            results.append(arena.to_list(out))
        assert results[0] == results[1]
        assert sum(results[0]) == sum(data)
