"""blockfuse: run CUDA-style SPMD kernels on a multi-worker CPU runtime.

The toolkit has three layers:

* front end: parse and validate a small CUDA-like kernel language (`syntax`,
  `parser`, `validate`)
* compiler: block-fuse kernels into MPMD form, with loop fission at barriers,
  per-thread variable expansion, memory classification, and an optional
  access-reordering pass (`transform`)
* runtime: a worker pool pulling block ranges off a task queue (`runtime`),
  an interpreter for the fused form plus a lockstep reference interpreter
  (`executor`), host-script analysis (`hostprog`), a cache simulator
  (`cachesim`), and a benchmark harness (`bench`)
"""

from blockfuse.syntax import KernelProgram, Dim3
from blockfuse.parser import parse, parse_unit, ParseError
from blockfuse.validate import validate, Diagnostic
from blockfuse.transform import transform, map_memory, reorder_grid_stride, MpmdKernel

__all__ = [
    "KernelProgram",
    "Dim3",
    "parse",
    "parse_unit",
    "ParseError",
    "validate",
    "Diagnostic",
    "transform",
    "map_memory",
    "reorder_grid_stride",
    "MpmdKernel",
]
