"""Cache simulator tests against hand-computable traces."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockfuse.arena import (
    TraceEvent,
    trace_from_bytes,
    trace_from_text,
    trace_to_bytes,
    trace_to_text,
)
from blockfuse.cachesim import CacheConfig, ConfigError, simulate


def R(addr, size=4):
    return TraceEvent("R", addr, size)


def W(addr, size=4):
    return TraceEvent("W", addr, size)


class TestConfig:
    def test_num_sets(self):
        assert CacheConfig(32768, 64, 8).num_sets == 64
        assert CacheConfig(1024, 64, 16).num_sets == 1  # fully associative

    def test_line_size_must_be_power_of_two(self):
        with pytest.raises(ConfigError):
            CacheConfig(1024, 48, 2)

    def test_capacity_must_divide(self):
        with pytest.raises(ConfigError):
            CacheConfig(1000, 64, 2)

    def test_associativity_positive(self):
        with pytest.raises(ConfigError):
            CacheConfig(1024, 64, 0)


class TestCounting:
    CFG = CacheConfig(1024, 64, 2)

    def test_repeated_line_hits(self):
        report = simulate([R(0)] * 100, self.CFG)
        assert report.loads == 100
        assert report.load_misses == 1

    def test_same_line_different_words(self):
        report = simulate([R(0), R(4), R(60)], self.CFG)
        assert report.load_misses == 1

    def test_sequential_sweep_is_all_compulsory(self):
        cfg = CacheConfig(1024, 64, 1)
        trace = [R(a) for a in range(0, 2048, 4)]  # 2x capacity, one pass
        report = simulate(trace, cfg)
        assert report.load_misses == 2048 // 64

    def test_thrash_direct_mapped(self):
        cfg = CacheConfig(1024, 64, 1)
        # two lines mapping to the same set, alternating: every access misses
        report = simulate([R(0), R(1024)] * 10, cfg)
        assert report.load_misses == 20

    def test_associativity_absorbs_the_same_pattern(self):
        cfg = CacheConfig(1024, 64, 2)
        report = simulate([R(0), R(1024)] * 10, cfg)
        assert report.load_misses == 2

    def test_lru_eviction_order(self):
        cfg = CacheConfig(128, 64, 2)  # one set, two ways
        # touch a, b, re-touch a, then c evicts b (the least recent)
        report = simulate([R(0), R(64), R(0), R(128), R(0)], cfg)
        assert report.load_misses == 3  # a, b, c; final R(0) still hits

    def test_store_miss_and_writeback(self):
        cfg = CacheConfig(128, 64, 1)  # direct-mapped, two sets
        report = simulate([W(0), R(64), W(64)], cfg)  # different sets
        assert report.stores == 2
        assert report.store_misses == 1  # W(64) hits the line R loaded
        assert report.writebacks == 0
        # now evict the dirty line at 0 with a conflicting clean load
        report = simulate([W(0), R(128)], CacheConfig(64, 64, 1))
        assert report.writebacks == 1

    def test_straddling_access_touches_both_lines(self):
        report = simulate([R(60, size=8)], self.CFG)
        assert report.loads == 2
        assert report.load_misses == 2

    def test_order_sensitivity(self):
        cfg = CacheConfig(128, 64, 1)
        strided = [R(a) for a in (0, 128, 64, 192)] * 5
        grouped = sorted(strided, key=lambda e: e.address)
        assert simulate(strided, cfg).load_misses > simulate(grouped, cfg).load_misses


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.integers(0, 4096)),
                    max_size=200))
    def test_conservation(self, events):
        trace = [TraceEvent("W" if w else "R", a * 4, 4) for w, a in events]
        report = simulate(trace, CacheConfig(512, 64, 2))
        assert report.loads + report.stores == len(trace)
        assert report.load_misses <= report.loads
        assert report.store_misses <= report.stores
        assert report.writebacks <= report.store_misses

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 10000), max_size=150))
    def test_bigger_fully_associative_cache_never_misses_more(self, addrs):
        trace = [R(a * 4) for a in addrs]
        small = simulate(trace, CacheConfig(256, 64, 4))
        large = simulate(trace, CacheConfig(1024, 64, 16))
        assert large.load_misses <= small.load_misses


class TestTraceSerialization:
    TRACE = [R(0), W(64), R(0x1000, size=8)]

    def test_text_round_trip(self):
        assert trace_from_text(trace_to_text(self.TRACE)) == self.TRACE

    def test_binary_round_trip(self):
        assert trace_from_bytes(trace_to_bytes(self.TRACE)) == self.TRACE

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            trace_from_text("X 0x0 4\n")
