"""AST for the kernel language, plus the pretty-printer.

Node equality is structural: source spans and inferred types are excluded
from comparison so that parse(pretty_print(ast)) == ast holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

SCALAR_TYPES = ("i32", "i64", "f32", "f64")
INT_TYPES = ("i32", "i64")
FLOAT_TYPES = ("f32", "f64")

SCALAR_SIZE = {"i32": 4, "i64": 8, "f32": 4, "f64": 8}

BUILTIN_BASES = ("threadIdx", "blockIdx", "blockDim", "gridDim")
AXES = ("x", "y", "z")

INTRINSICS = ("min", "max", "abs", "sqrt", "shfl_down", "vote_any", "vote_all")
WARP_INTRINSICS = ("shfl_down", "vote_any", "vote_all")


@dataclass(frozen=True)
class Span:
    line: int
    col: int


@dataclass
class Dim3:
    x: int = 1
    y: int = 1
    z: int = 1

    def __post_init__(self):
        if min(self.x, self.y, self.z) < 1:
            raise ValueError(f"dim3 components must be >= 1, got {self}")
        if self.x * self.y * self.z > 2**31 - 1:
            raise ValueError(f"dim3 product overflows i32: {self}")

    @property
    def total(self) -> int:
        return self.x * self.y * self.z

    def axis(self, axis: str) -> int:
        return getattr(self, axis)


@dataclass(frozen=True)
class Idx3:
    """A 0-based coordinate within a Dim3 extent (e.g. a block index)."""
    x: int = 0
    y: int = 0
    z: int = 0

    def axis(self, axis: str) -> int:
        return getattr(self, axis)


def linearize(x: int, y: int, z: int, dim: Dim3) -> int:
    """CUDA linearization: ((z*dim.y)+y)*dim.x + x."""
    return ((z * dim.y) + y) * dim.x + x


def delinearize(i: int, dim: Dim3) -> tuple[int, int, int]:
    x = i % dim.x
    y = (i // dim.x) % dim.y
    z = i // (dim.x * dim.y)
    return x, y, z


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass
class Expr:
    span: Optional[Span] = field(default=None, compare=False, kw_only=True)
    ty: Optional[str] = field(default=None, compare=False, kw_only=True)


@dataclass
class IntLit(Expr):
    value: int = 0


@dataclass
class FloatLit(Expr):
    value: float = 0.0


@dataclass
class VarRef(Expr):
    name: str = ""


@dataclass
class BuiltinRef(Expr):
    base: str = ""   # threadIdx | blockIdx | blockDim | gridDim
    axis: str = "x"  # x | y | z


@dataclass
class Index(Expr):
    array: str = ""
    index: Expr = None


@dataclass
class Binary(Expr):
    op: str = ""
    left: Expr = None
    right: Expr = None


@dataclass
class Unary(Expr):
    op: str = ""
    operand: Expr = None


@dataclass
class Call(Expr):
    func: str = ""
    args: list[Expr] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Statements
# ---------------------------------------------------------------------------

@dataclass
class LValue:
    name: str
    index: Optional[Expr] = None
    span: Optional[Span] = field(default=None, compare=False, kw_only=True)


@dataclass
class Stmt:
    span: Optional[Span] = field(default=None, compare=False, kw_only=True)


@dataclass
class LocalDecl(Stmt):
    name: str = ""
    ty: str = "i32"
    init: Expr = None


@dataclass
class Assign(Stmt):
    target: LValue = None
    value: Expr = None


@dataclass
class If(Stmt):
    cond: Expr = None
    then_body: list[Stmt] = field(default_factory=list)
    else_body: list[Stmt] = field(default_factory=list)


@dataclass
class For(Stmt):
    var: str = ""
    lo: Expr = None
    hi: Expr = None
    step: Expr = None
    body: list[Stmt] = field(default_factory=list)


@dataclass
class Barrier(Stmt):
    pass


@dataclass
class AtomicStmt(Stmt):
    kind: str = "add"  # add | cas
    target: LValue = None
    operand: Expr = None
    compare_to: Optional[Expr] = None  # cas only: atomic_cas(tgt, compare_to, operand)


@dataclass
class Noop(Stmt):
    pass


# ---------------------------------------------------------------------------
# Kernel-level declarations
# ---------------------------------------------------------------------------

@dataclass
class ParamType:
    scalar: str
    is_global: bool = False


@dataclass
class Param:
    name: str
    ptype: ParamType
    span: Optional[Span] = field(default=None, compare=False, kw_only=True)


@dataclass
class SharedDecl:
    name: str
    scalar: str
    length: int  # compile-time element count


@dataclass
class KernelProgram:
    name: str
    params: list[Param]
    static_shared: list[SharedDecl]
    dynamic_shared: Optional[tuple[str, str]]  # (name, scalar)
    body: list[Stmt]
    span: Optional[Span] = field(default=None, compare=False, kw_only=True)

    def param(self, name: str) -> Optional[Param]:
        for p in self.params:
            if p.name == name:
                return p
        return None


def count_barriers(stmts: list[Stmt]) -> int:
    n = 0
    for s in stmts:
        if isinstance(s, Barrier):
            n += 1
        elif isinstance(s, If):
            n += count_barriers(s.then_body) + count_barriers(s.else_body)
        elif isinstance(s, For):
            n += count_barriers(s.body)
    return n


# ---------------------------------------------------------------------------
# Pretty-printer (round-trips through the parser)
# ---------------------------------------------------------------------------

_PRECEDENCE = {
    "||": 1, "&&": 2,
    "==": 3, "!=": 3,
    "<": 4, "<=": 4, ">": 4, ">=": 4,
    "+": 5, "-": 5,
    "*": 6, "/": 6, "%": 6,
}


def expr_to_source(e: Expr, parent_prec: int = 0) -> str:
    if isinstance(e, IntLit):
        return str(e.value)
    if isinstance(e, FloatLit):
        return repr(e.value)
    if isinstance(e, VarRef):
        return e.name
    if isinstance(e, BuiltinRef):
        return f"{e.base}.{e.axis}"
    if isinstance(e, Index):
        return f"{e.array}[{expr_to_source(e.index)}]"
    if isinstance(e, Binary):
        prec = _PRECEDENCE[e.op]
        s = f"{expr_to_source(e.left, prec)} {e.op} {expr_to_source(e.right, prec + 1)}"
        return f"({s})" if prec < parent_prec else s
    if isinstance(e, Unary):
        return f"{e.op}{expr_to_source(e.operand, 7)}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(expr_to_source(a) for a in e.args)})"
    raise TypeError(f"unknown expr node {e!r}")


def _lvalue_to_source(lv: LValue) -> str:
    if lv.index is None:
        return lv.name
    return f"{lv.name}[{expr_to_source(lv.index)}]"


def _stmts_to_source(stmts: list[Stmt], out: list[str], indent: int) -> None:
    pad = "    " * indent
    for s in stmts:
        if isinstance(s, LocalDecl):
            out.append(f"{pad}let {s.name}: {s.ty} = {expr_to_source(s.init)};")
        elif isinstance(s, Assign):
            out.append(f"{pad}{_lvalue_to_source(s.target)} = {expr_to_source(s.value)};")
        elif isinstance(s, If):
            out.append(f"{pad}if ({expr_to_source(s.cond)}) {{")
            _stmts_to_source(s.then_body, out, indent + 1)
            if s.else_body:
                out.append(f"{pad}}} else {{")
                _stmts_to_source(s.else_body, out, indent + 1)
            out.append(f"{pad}}}")
        elif isinstance(s, For):
            head = (f"for ({s.var} = {expr_to_source(s.lo)}; "
                    f"{s.var} < {expr_to_source(s.hi)}; "
                    f"{s.var} += {expr_to_source(s.step)})")
            out.append(f"{pad}{head} {{")
            _stmts_to_source(s.body, out, indent + 1)
            out.append(f"{pad}}}")
        elif isinstance(s, Barrier):
            out.append(f"{pad}barrier;")
        elif isinstance(s, AtomicStmt):
            if s.kind == "add":
                out.append(f"{pad}atomic_add({_lvalue_to_source(s.target)}, "
                           f"{expr_to_source(s.operand)});")
            else:
                out.append(f"{pad}atomic_cas({_lvalue_to_source(s.target)}, "
                           f"{expr_to_source(s.compare_to)}, {expr_to_source(s.operand)});")
        elif isinstance(s, Noop):
            out.append(f"{pad};")
        else:
            raise TypeError(f"unknown stmt node {s!r}")


def to_source(k: KernelProgram) -> str:
    """Render a kernel back to surface syntax; re-parsing yields an equal AST."""
    params = []
    for p in k.params:
        if p.ptype.is_global:
            params.append(f"{p.name}: global {p.ptype.scalar}[]")
        else:
            params.append(f"{p.name}: {p.ptype.scalar}")
    out = [f"kernel {k.name}({', '.join(params)}) {{"]
    for d in k.static_shared:
        out.append(f"    shared {d.scalar} {d.name}[{d.length}];")
    if k.dynamic_shared is not None:
        name, scalar = k.dynamic_shared
        out.append(f"    extern shared {scalar} {name}[];")
    _stmts_to_source(k.body, out, 1)
    out.append("}")
    return "\n".join(out) + "\n"
