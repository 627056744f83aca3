"""Grid-stride reordering tests: rewrite shape, rejection cases, soundness."""

import random
from collections import Counter

import pytest

from blockfuse.arena import DeviceArena
from blockfuse.bench import (
    CORPUS,
    materialize,
    outputs_equal,
    reference_outputs,
)
from blockfuse.executor import trace_accesses
from blockfuse.parser import parse
from blockfuse.transform import (
    DependenceError,
    PatternNotFound,
    reorder_grid_stride,
    transform,
)

def _trace_multiset(mk, instance):
    arena = DeviceArena()
    packed, _ = materialize(instance, arena)
    trace = trace_accesses(mk, instance.grid, instance.block, packed, arena,
                           instance.shmem)
    return Counter((e.kind, e.address, e.size) for e in trace)


class TestRewriteShape:
    def test_hist_stride_index_rewritten(self):
        original = CORPUS["hist_stride"].compiled()
        reordered = reorder_grid_stride(original)
        orig_dump = str(original.to_dict())
        reord_dump = str(reordered.to_dict())
        assert "blockDim.x" in orig_dump
        # the strided pix index is gone; a contiguous per-thread chunk remains
        assert "j * blockDim.x" in orig_dump
        assert "j * blockDim.x" not in reord_dump

    def test_original_untouched(self):
        original = CORPUS["fir"].compiled()
        before = str(original.to_dict())
        reorder_grid_stride(original)
        assert str(original.to_dict()) == before

    def test_no_pattern_raises(self):
        with pytest.raises(PatternNotFound):
            reorder_grid_stride(CORPUS["vecadd"].compiled())

    def test_loop_carried_dependence_rejected(self):
        src = ("kernel shift(a: global i32[], m: i32) {\n"
               "  let t: i32 = threadIdx.x;\n"
               "  for (j = 0; j < m; j += 1) {\n"
               "    a[t + j * blockDim.x] = a[t + j * blockDim.x + 1];\n"
               "  }\n"
               "}\n")
        with pytest.raises(DependenceError):
            reorder_grid_stride(transform(parse(src)))

    def test_thread_variant_bound_not_rewritten(self):
        src = ("kernel k(a: global i32[]) {\n"
               "  let t: i32 = threadIdx.x;\n"
               "  for (j = 0; j < t; j += 1) {\n"
               "    a[t + j * blockDim.x] = 0;\n"
               "  }\n"
               "}\n")
        with pytest.raises(PatternNotFound):
            reorder_grid_stride(transform(parse(src)))


class TestSoundness:
    @pytest.mark.parametrize("case_name", ["hist_stride", "fir"])
    def test_address_multiset_preserved(self, case_name):
        case = CORPUS[case_name]
        rng = random.Random(7)
        instance = case.random_instance(rng)
        original = case.compiled()
        reordered = reorder_grid_stride(original)
        assert _trace_multiset(original, instance) == \
            _trace_multiset(reordered, instance)

    @pytest.mark.parametrize("case_name", ["hist_stride", "fir"])
    def test_outputs_match_oracle(self, case_name):
        case = CORPUS[case_name]
        rng = random.Random(21)
        instance = case.random_instance(rng)
        reordered = reorder_grid_stride(case.compiled())
        arena = DeviceArena()
        packed, handles = materialize(instance, arena)
        from blockfuse.executor import run_mpmd
        run_mpmd(reordered, instance.grid, instance.block, packed, arena,
                 instance.shmem)
        got = {name: arena.to_list(handles[name]) for name in instance.outputs}
        assert outputs_equal(got, reference_outputs(case, instance))
