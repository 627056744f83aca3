"""Experiment harness tests: sweeps, oracle checks, the reorder study."""

import random

import pytest

from blockfuse.bench import (
    CORPUS,
    EQUIVALENCE_CASES,
    big_stride_instance,
    outputs_equal,
    reference_outputs,
    run_reorder_experiment,
    run_sweep,
    runtime_outputs,
)
from blockfuse.cachesim import CacheConfig


class TestCorpus:
    def test_every_case_compiles(self):
        for case in CORPUS.values():
            mk = case.compiled()
            assert mk.name == case.name

    @pytest.mark.parametrize("name", EQUIVALENCE_CASES)
    def test_random_instance_matches_oracle(self, name):
        case = CORPUS[name]
        rng = random.Random(42)
        for _ in range(3):
            instance = case.random_instance(rng)
            outputs, _, _ = runtime_outputs(case, instance, pool_size=2)
            assert outputs_equal(outputs, reference_outputs(case, instance))


class TestSweep:
    def test_fetch_counts_follow_grain(self):
        report = run_sweep("vecadd", [1, 2, "average"], pool=2, repeats=1)
        total = report.rows[0].blocks_executed
        for row in report.rows:
            assert row.blocks_executed == total
            assert row.fetch_count == -(-total // row.grain)

    def test_grain_equal_to_grid_is_one_fetch(self):
        report = run_sweep("vecadd", [10 ** 6], pool=4, repeats=1)
        (row,) = report.rows
        assert row.grain == row.blocks_executed
        assert row.fetch_count == 1

    def test_report_dict_shape(self):
        report = run_sweep("hist", ["average"], pool=2, repeats=1)
        d = report.to_dict()
        assert d["case"] == "hist"
        assert {"grain", "fetch_count", "wall_time"} <= set(d["rows"][0])

    def test_unknown_case(self):
        with pytest.raises(KeyError):
            run_sweep("nope", [1], pool=1)


class TestReorderExperiment:
    CFG = CacheConfig(4096, 64, 4)

    def test_thrashing_working_set_improves(self):
        report = run_reorder_experiment("hist_stride", self.CFG, scale=8)
        assert report.outputs_match
        # contiguous per-thread chunks turn the strided sweep into unit stride
        assert report.reordered.load_misses < report.original.load_misses / 2

    def test_fitting_working_set_is_a_wash(self):
        # cache big enough for the whole working set: only compulsory misses
        # remain, and those are order-independent
        big = CacheConfig(1 << 22, 64, 8)
        instance = big_stride_instance("hist_stride", self.CFG, scale=2)
        report = run_reorder_experiment("hist_stride", big, scale=2,
                                        instance=instance)
        assert report.outputs_match
        assert report.reordered.load_misses == report.original.load_misses

    def test_non_stride_case_rejected(self):
        with pytest.raises(ValueError):
            run_reorder_experiment("vecadd", self.CFG)
