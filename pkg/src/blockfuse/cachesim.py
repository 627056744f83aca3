"""Set-associative LRU cache simulator over memory traces.

Single-level, write-allocate, write-back accounting: a store to an absent
line counts as a store miss and fills the line; evicted dirty lines are
counted as write-backs.  Used to compare original vs reordered access
patterns of the same kernel.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from blockfuse.arena import MemoryTrace


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CacheConfig:
    capacity: int       # bytes
    line_size: int      # bytes, power of two
    associativity: int  # ways

    def __post_init__(self):
        if self.line_size < 1 or self.line_size & (self.line_size - 1):
            raise ConfigError(f"line size must be a power of two, got {self.line_size}")
        if self.associativity < 1:
            raise ConfigError(f"associativity must be >= 1, got {self.associativity}")
        if self.capacity % (self.line_size * self.associativity):
            raise ConfigError(
                f"capacity {self.capacity} not divisible by "
                f"line_size*ways = {self.line_size * self.associativity}")

    @property
    def num_sets(self) -> int:
        return self.capacity // (self.line_size * self.associativity)


@dataclass
class CacheReport:
    loads: int = 0
    load_misses: int = 0
    stores: int = 0
    store_misses: int = 0
    writebacks: int = 0

    def to_dict(self) -> dict:
        return {
            "load_misses": self.load_misses,
            "loads": self.loads,
            "store_misses": self.store_misses,
            "stores": self.stores,
            "writebacks": self.writebacks,
        }


def simulate(trace: MemoryTrace, cfg: CacheConfig) -> CacheReport:
    """Run the trace through one cache; multi-line accesses touch each line."""
    num_sets = cfg.num_sets
    # per set: line tag -> dirty flag, in LRU order (last = most recent)
    sets: list[OrderedDict[int, bool]] = [OrderedDict() for _ in range(num_sets)]
    report = CacheReport()

    for event in trace:
        is_store = event.kind == "W"
        first_line = event.address // cfg.line_size
        last_line = (event.address + max(event.size, 1) - 1) // cfg.line_size
        for line in range(first_line, last_line + 1):
            if is_store:
                report.stores += 1
            else:
                report.loads += 1
            ways = sets[line % num_sets]
            if line in ways:
                ways.move_to_end(line)
                if is_store:
                    ways[line] = True
                continue
            if is_store:
                report.store_misses += 1
            else:
                report.load_misses += 1
            if len(ways) >= cfg.associativity:
                _, dirty = ways.popitem(last=False)
                if dirty:
                    report.writebacks += 1
            ways[line] = is_store
    return report
