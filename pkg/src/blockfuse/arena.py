"""Handle-addressed buffer store standing in for GPU global memory.

Buffers live on the heap; handles are small integers that are never reused
within a run.  Each buffer also gets a synthetic base address (64-byte
aligned, contiguous, allocation-ordered) so memory traces are reproducible
across runs.
"""

from __future__ import annotations

import struct
import threading
from array import array
from dataclasses import dataclass
from typing import Iterable

from blockfuse.syntax import SCALAR_SIZE

_TYPECODE = {"i32": "i", "i64": "q", "f32": "f", "f64": "d"}

TRACE_ALIGN = 64


class Trap(Exception):
    """Runtime fault inside a kernel; always trapped, never undefined behavior."""

    def __init__(self, kind: str, message: str, *, kernel: str = "?",
                 section: int = -1, tid: int = -1, span=None):
        self.kind = kind  # OutOfBounds | DivByZero | TypeFault | NonUniformTrip
        self.message = message
        self.kernel = kernel
        self.section = section
        self.tid = tid
        self.span = span
        super().__init__(f"[{kind}] {message} (kernel={kernel}, section={section}, "
                         f"tid={tid}, span={span})")


def wrap_int(value: int, ty: str) -> int:
    bits = 32 if ty == "i32" else 64
    return (value + (1 << (bits - 1))) % (1 << bits) - (1 << (bits - 1))


def new_buffer(scalar: str, length: int) -> array:
    return array(_TYPECODE[scalar], bytes(length * SCALAR_SIZE[scalar]))


@dataclass
class _Buffer:
    scalar: str
    length: int
    storage: array
    base: int  # synthetic trace address


@dataclass
class TraceEvent:
    kind: str  # "R" | "W"
    address: int
    size: int


MemoryTrace = list  # of TraceEvent


class DeviceArena:
    """Global-memory buffers plus the lock that makes atomics indivisible."""

    def __init__(self):
        self._buffers: dict[int, _Buffer] = {}
        self._next_handle = 1
        self._next_base = 0
        self.atomic_lock = threading.Lock()

    def alloc(self, scalar: str, length: int) -> int:
        if length < 0:
            raise ValueError(f"negative buffer length {length}")
        handle = self._next_handle
        self._next_handle += 1
        base = self._next_base
        nbytes = length * SCALAR_SIZE[scalar]
        self._next_base += -(-max(nbytes, 1) // TRACE_ALIGN) * TRACE_ALIGN
        self._buffers[handle] = _Buffer(scalar, length, new_buffer(scalar, length), base)
        return handle

    def free(self, handle: int) -> None:
        del self._buffers[handle]

    def buffer(self, handle: int) -> _Buffer:
        buf = self._buffers.get(handle)
        if buf is None:
            raise Trap("OutOfBounds", f"dangling buffer handle {handle}")
        return buf

    def scalar_type(self, handle: int) -> str:
        return self.buffer(handle).scalar

    def length(self, handle: int) -> int:
        return self.buffer(handle).length

    def base_address(self, handle: int) -> int:
        return self.buffer(handle).base

    def read(self, handle: int, index: int) -> float | int:
        buf = self.buffer(handle)
        if not 0 <= index < buf.length:
            raise Trap("OutOfBounds",
                       f"load index {index} out of range [0, {buf.length})")
        return buf.storage[index]

    def write(self, handle: int, index: int, value) -> None:
        buf = self.buffer(handle)
        if not 0 <= index < buf.length:
            raise Trap("OutOfBounds",
                       f"store index {index} out of range [0, {buf.length})")
        buf.storage[index] = value

    def to_list(self, handle: int) -> list:
        return list(self.buffer(handle).storage)

    def fill(self, handle: int, values: Iterable) -> None:
        buf = self.buffer(handle)
        for i, v in enumerate(values):
            if i >= buf.length:
                break
            buf.storage[i] = v

    def to_bytes(self, handle: int) -> bytes:
        # array module stores native-endian; all supported targets are LE
        return self.buffer(handle).storage.tobytes()

    def snapshot(self) -> "DeviceArena":
        """Deep copy of all buffers; handles, bases, and counters are preserved.

        (A plain deepcopy would choke on the atomic lock.)
        """
        twin = DeviceArena()
        twin._next_handle = self._next_handle
        twin._next_base = self._next_base
        for handle, buf in self._buffers.items():
            twin._buffers[handle] = _Buffer(
                buf.scalar, buf.length, array(buf.storage.typecode, buf.storage),
                buf.base)
        return twin

    def from_bytes(self, handle: int, raw: bytes) -> None:
        buf = self.buffer(handle)
        expect = buf.length * SCALAR_SIZE[buf.scalar]
        if len(raw) != expect:
            raise ValueError(f"buffer file is {len(raw)} bytes, expected {expect}")
        buf.storage = array(buf.storage.typecode)
        buf.storage.frombytes(raw)


# ---------------------------------------------------------------------------
# trace serialization
# ---------------------------------------------------------------------------

def trace_to_text(trace: MemoryTrace) -> str:
    return "".join(f"{e.kind} 0x{e.address:x} {e.size}\n" for e in trace)


def trace_from_text(text: str) -> MemoryTrace:
    out: MemoryTrace = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        kind, addr, size = line.split()
        if kind not in ("R", "W"):
            raise ValueError(f"bad trace event kind {kind!r}")
        out.append(TraceEvent(kind, int(addr, 16), int(size)))
    return out


_BIN_EVENT = struct.Struct("<BQI")  # kind, address, size


def trace_to_bytes(trace: MemoryTrace) -> bytes:
    return b"".join(
        _BIN_EVENT.pack(0 if e.kind == "R" else 1, e.address, e.size) for e in trace)


def trace_from_bytes(raw: bytes) -> MemoryTrace:
    out: MemoryTrace = []
    for (kind, addr, size) in _BIN_EVENT.iter_unpack(raw):
        out.append(TraceEvent("R" if kind == 0 else "W", addr, size))
    return out
