"""Semantic validation: name resolution, typing, barrier placement.

Validation annotates expression nodes with their inferred type (`Expr.ty`)
and computes which locals are thread-variant; the transform pass consumes
both.  Diagnostics are collected in source walk order, so the output is
deterministic for a given input.

Rules beyond plain typing:

* barriers are legal only at the top level of the kernel body or nested
  solely inside for-loops whose bounds are block-uniform
* warp intrinsics (shfl_down, vote_any, vote_all) require warp mode and the
  same uniform-context rule as barriers
* local names are kernel-unique (no shadowing); this keeps per-thread
  variable expansion a pure name-indexed rewrite
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from blockfuse.syntax import (
    FLOAT_TYPES,
    INT_TYPES,
    WARP_INTRINSICS,
    Assign,
    AtomicStmt,
    Barrier,
    Binary,
    BuiltinRef,
    Call,
    Expr,
    FloatLit,
    For,
    If,
    Index,
    IntLit,
    KernelProgram,
    LValue,
    LocalDecl,
    Noop,
    Span,
    Stmt,
    Unary,
    VarRef,
)

_ARITH_OPS = ("+", "-", "*", "/", "%")
_CMP_OPS = ("==", "!=", "<", "<=", ">", ">=")
_LOGIC_OPS = ("&&", "||")


def contains_warp_intrinsic(e: Expr) -> bool:
    if isinstance(e, Call):
        if e.func in WARP_INTRINSICS:
            return True
        return any(contains_warp_intrinsic(a) for a in e.args)
    if isinstance(e, Binary):
        return contains_warp_intrinsic(e.left) or contains_warp_intrinsic(e.right)
    if isinstance(e, Unary):
        return contains_warp_intrinsic(e.operand)
    if isinstance(e, Index):
        return contains_warp_intrinsic(e.index)
    return False


@dataclass
class Diagnostic:
    kind: str
    span: Optional[Span]
    message: str

    def __str__(self) -> str:
        loc = f"{self.span.line}:{self.span.col}" if self.span else "?"
        return f"{loc}: [{self.kind}] {self.message}"


@dataclass
class Analysis:
    """Side results of validation, consumed by the transform pass."""
    diagnostics: list[Diagnostic] = field(default_factory=list)
    local_types: dict[str, str] = field(default_factory=dict)   # locals + loop counters
    loop_counters: set[str] = field(default_factory=set)
    variant_locals: set[str] = field(default_factory=set)       # thread-dependent values


class _Validator:
    def __init__(self, k: KernelProgram, warp_mode: bool):
        self.k = k
        self.warp_mode = warp_mode
        self.info = Analysis()
        self.names: dict[str, str] = {}  # name -> "param"|"global"|"shared"|"dyn"|"local"|"counter"
        self.arrays: dict[str, str] = {}  # array name -> element type
        self.scalars: dict[str, str] = {}  # scalar name -> type

    def error(self, kind: str, span: Optional[Span], message: str) -> None:
        self.info.diagnostics.append(Diagnostic(kind, span, message))

    # -- declarations -------------------------------------------------------

    def declare_toplevel(self) -> None:
        k = self.k
        for p in k.params:
            if p.name in self.names:
                self.error("duplicate-name", p.span, f"duplicate parameter {p.name!r}")
                continue
            if p.ptype.is_global:
                self.names[p.name] = "global"
                self.arrays[p.name] = p.ptype.scalar
            else:
                self.names[p.name] = "param"
                self.scalars[p.name] = p.ptype.scalar
        for d in k.static_shared:
            if d.name in self.names:
                self.error("duplicate-name", k.span, f"duplicate shared array {d.name!r}")
                continue
            if d.length < 1:
                self.error("type-error", k.span,
                           f"shared array {d.name!r} must have positive length")
            self.names[d.name] = "shared"
            self.arrays[d.name] = d.scalar
        if k.dynamic_shared is not None:
            name, scalar = k.dynamic_shared
            if name in self.names:
                self.error("duplicate-dynamic-shared", k.span,
                           f"dynamic shared array {name!r} collides with another declaration")
            else:
                self.names[name] = "dyn"
                self.arrays[name] = scalar

    def declare_local(self, name: str, ty: str, span: Optional[Span], counter: bool) -> None:
        if name in self.names:
            self.error("duplicate-name", span, f"redeclaration of {name!r}")
            return
        self.names[name] = "counter" if counter else "local"
        self.scalars[name] = ty
        self.info.local_types[name] = ty
        if counter:
            self.info.loop_counters.add(name)

    # -- thread-variance ----------------------------------------------------

    def expr_variant(self, e: Expr) -> bool:
        if isinstance(e, BuiltinRef):
            return e.base == "threadIdx"
        if isinstance(e, VarRef):
            return e.name in self.info.variant_locals
        if isinstance(e, Index):
            return True  # memory contents are not provably uniform
        if isinstance(e, Binary):
            return self.expr_variant(e.left) or self.expr_variant(e.right)
        if isinstance(e, Unary):
            return self.expr_variant(e.operand)
        if isinstance(e, Call):
            if e.func in ("vote_any", "vote_all"):
                return False  # votes produce a warp-uniform value
            return any(self.expr_variant(a) for a in e.args)
        return False

    # -- typing -------------------------------------------------------------

    def peek_type(self, e: Expr) -> Optional[str]:
        """Natural type of an expression, None for pure-literal subtrees."""
        if isinstance(e, (IntLit, FloatLit)):
            return None
        if isinstance(e, VarRef):
            return self.scalars.get(e.name)
        if isinstance(e, BuiltinRef):
            return "i32"
        if isinstance(e, Index):
            return self.arrays.get(e.array)
        if isinstance(e, Binary):
            if e.op in _CMP_OPS or e.op in _LOGIC_OPS:
                return "i32"
            return self.peek_type(e.left) or self.peek_type(e.right)
        if isinstance(e, Unary):
            return "i32" if e.op == "!" else self.peek_type(e.operand)
        if isinstance(e, Call):
            if e.func in ("vote_any", "vote_all"):
                return "i32"
            if e.func == "sqrt":
                return (self.peek_type(e.args[0]) if e.args else None) or "f64"
            return self.peek_type(e.args[0]) if e.args else None
        return None

    def infer(self, e: Expr, expected: Optional[str] = None) -> str:
        ty = self._infer(e, expected)
        e.ty = ty
        return ty

    def _infer(self, e: Expr, expected: Optional[str]) -> str:
        if isinstance(e, IntLit):
            return expected or "i32"
        if isinstance(e, FloatLit):
            if expected in FLOAT_TYPES:
                return expected
            if expected is not None:
                self.error("type-error", e.span,
                           f"float literal used where {expected} expected")
            return "f64"
        if isinstance(e, VarRef):
            ty = self.scalars.get(e.name)
            if ty is None:
                if e.name in self.arrays:
                    self.error("type-error", e.span,
                               f"array {e.name!r} used without an index")
                else:
                    self.error("unresolved-name", e.span, f"unknown identifier {e.name!r}")
                return expected or "i32"
            self._check(ty, expected, e.span)
            return ty
        if isinstance(e, BuiltinRef):
            self._check("i32", expected, e.span)
            return "i32"
        if isinstance(e, Index):
            elem = self.arrays.get(e.array)
            if elem is None:
                self.error("unresolved-name", e.span, f"unknown array {e.array!r}")
                elem = expected or "i32"
            idx_ty = self.infer(e.index)
            if idx_ty not in INT_TYPES:
                self.error("type-error", e.span, f"array index must be integral, got {idx_ty}")
            self._check(elem, expected, e.span)
            return elem
        if isinstance(e, Binary):
            if e.op in _CMP_OPS:
                target = self.peek_type(e.left) or self.peek_type(e.right) or "i32"
                self.infer(e.left, target)
                self.infer(e.right, target)
                self._check("i32", expected, e.span)
                return "i32"
            if e.op in _LOGIC_OPS:
                for side in (e.left, e.right):
                    sty = self.infer(side, None)
                    if sty not in INT_TYPES:
                        self.error("type-error", side.span,
                                   f"logical operand must be integral, got {sty}")
                self._check("i32", expected, e.span)
                return "i32"
            target = expected or self.peek_type(e.left) or self.peek_type(e.right) or "i32"
            if e.op == "%" and target not in INT_TYPES:
                self.error("type-error", e.span,
                           f"modulo requires integer operands, got {target}")
                target = "i32"
            self.infer(e.left, target)
            self.infer(e.right, target)
            return target
        if isinstance(e, Unary):
            if e.op == "!":
                self.infer(e.operand, None)
                self._check("i32", expected, e.span)
                return "i32"
            return self.infer(e.operand, expected)
        if isinstance(e, Call):
            return self._infer_call(e, expected)
        raise TypeError(f"unknown expr node {e!r}")

    def _infer_call(self, e: Call, expected: Optional[str]) -> str:
        arity = {"min": 2, "max": 2, "abs": 1, "sqrt": 1,
                 "shfl_down": 2, "vote_any": 1, "vote_all": 1}
        want = arity.get(e.func)
        if want is None:
            self.error("unresolved-name", e.span, f"unknown intrinsic {e.func!r}")
            return expected or "i32"
        if len(e.args) != want:
            self.error("type-error", e.span,
                       f"{e.func} expects {want} argument(s), got {len(e.args)}")
            return expected or "i32"
        if e.func in WARP_INTRINSICS and not self.warp_mode:
            self.error("shuffle-without-warp-mode", e.span,
                       f"{e.func} requires warp mode")
        if e.func in ("min", "max"):
            target = expected or self.peek_type(e.args[0]) or self.peek_type(e.args[1]) or "i32"
            self.infer(e.args[0], target)
            self.infer(e.args[1], target)
            return target
        if e.func == "abs":
            target = expected or self.peek_type(e.args[0]) or "i32"
            self.infer(e.args[0], target)
            return target
        if e.func == "sqrt":
            target = expected or self.peek_type(e.args[0]) or "f64"
            if target not in FLOAT_TYPES:
                self.error("type-error", e.span, "sqrt requires a float operand")
                target = "f64"
            self.infer(e.args[0], target)
            return target
        if e.func == "shfl_down":
            target = expected or self.peek_type(e.args[0]) or "i32"
            self.infer(e.args[0], target)
            d_ty = self.infer(e.args[1], "i32")
            if d_ty not in INT_TYPES:
                self.error("type-error", e.span, "shfl_down delta must be integral")
            return target
        # vote_any / vote_all
        pred_ty = self.infer(e.args[0], None)
        if pred_ty not in INT_TYPES:
            self.error("type-error", e.span, f"{e.func} predicate must be integral")
        self._check("i32", expected, e.span)
        return "i32"

    def _check(self, actual: str, expected: Optional[str], span: Optional[Span]) -> None:
        if expected is not None and actual != expected:
            self.error("type-error", span, f"expected {expected}, got {actual}")

    # -- statements ---------------------------------------------------------

    def check_body(self) -> None:
        self.declare_toplevel()
        self.loop_depth = 0
        self.visit_block(self.k.body, uniform=True, in_if=False)

    def visit_block(self, stmts: list[Stmt], uniform: bool, in_if: bool) -> None:
        for s in stmts:
            self.visit_stmt(s, uniform, in_if)

    def _check_warp_context(self, s: Stmt, exprs: list[Expr], uniform: bool,
                            in_if: bool) -> None:
        # Lane exchanges are materialized at the inner-loop boundary, which
        # requires all lanes to reach the statement together.
        if any(e is not None and contains_warp_intrinsic(e) for e in exprs):
            if in_if or not uniform:
                self.error("warp-intrinsic-in-divergent-context", s.span,
                           "warp intrinsics are allowed only in block-uniform "
                           "contexts (top level or uniform for-loops)")

    def visit_stmt(self, s: Stmt, uniform: bool, in_if: bool) -> None:
        if isinstance(s, (LocalDecl, Assign)):
            self._check_warp_context(
                s, [s.init if isinstance(s, LocalDecl) else s.value], uniform, in_if)
        elif isinstance(s, AtomicStmt):
            self._check_warp_context(s, [s.operand, s.compare_to], uniform, in_if)
        elif isinstance(s, If):
            if contains_warp_intrinsic(s.cond):
                self.error("warp-intrinsic-in-divergent-context", s.span,
                           "warp intrinsics are not supported in branch conditions")
        elif isinstance(s, For):
            for bound in (s.lo, s.hi, s.step):
                if contains_warp_intrinsic(bound):
                    self.error("warp-intrinsic-in-divergent-context", s.span,
                               "warp intrinsics are not supported in loop bounds")
        if isinstance(s, LocalDecl):
            self.infer(s.init, s.ty)
            self.declare_local(s.name, s.ty, s.span, counter=False)
            if self.expr_variant(s.init) or not uniform:
                self.info.variant_locals.add(s.name)
        elif isinstance(s, Assign):
            ty = self.check_lvalue(s.target, allow_scalar=True)
            self.infer(s.value, ty)
            if s.target.index is None and s.target.name in self.info.local_types:
                if self.expr_variant(s.value) or not uniform:
                    self.info.variant_locals.add(s.target.name)
                if s.target.name in self.info.loop_counters:
                    self.error("invalid-lvalue", s.span,
                               "loop counter cannot be assigned inside the loop body")
        elif isinstance(s, If):
            cond_ty = self.infer(s.cond, None)
            if cond_ty not in INT_TYPES:
                self.error("type-error", s.span, "if condition must be integral")
            branch_uniform = uniform and not self.expr_variant(s.cond)
            self.visit_block(s.then_body, branch_uniform, in_if=True)
            self.visit_block(s.else_body, branch_uniform, in_if=True)
        elif isinstance(s, For):
            # C-style scoping: the counter is visible in the bound and step
            # expressions (re-evaluated every iteration) but not in `lo`
            self.infer(s.lo, "i32")
            self.declare_local(s.var, "i32", s.span, counter=True)
            self.infer(s.hi, "i32")
            self.infer(s.step, "i32")
            bounds_variant = (self.expr_variant(s.lo) or self.expr_variant(s.hi)
                              or self.expr_variant(s.step))
            if bounds_variant or not uniform:
                self.info.variant_locals.add(s.var)
            self.loop_depth += 1
            self.visit_block(s.body, uniform and not bounds_variant, in_if=in_if)
            self.loop_depth -= 1
        elif isinstance(s, Barrier):
            if in_if or not uniform or self.loop_depth > 1:
                self.error("barrier-in-divergent-context", s.span,
                           "barrier must be block-uniform: allowed only at top level "
                           "or directly inside a for-loop with block-uniform bounds")
        elif isinstance(s, AtomicStmt):
            ty = self.check_lvalue(s.target, allow_scalar=False)
            if s.kind == "cas" and ty not in INT_TYPES:
                self.error("type-error", s.span, "atomic_cas requires an integer target")
            self.infer(s.operand, ty)
            if s.compare_to is not None:
                self.infer(s.compare_to, ty)
        elif isinstance(s, Noop):
            pass
        else:
            raise TypeError(f"unknown stmt node {s!r}")

    def check_lvalue(self, lv: LValue, allow_scalar: bool) -> str:
        if lv.index is None:
            kind = self.names.get(lv.name)
            if kind is None:
                self.error("unresolved-name", lv.span, f"unknown identifier {lv.name!r}")
                return "i32"
            if kind not in ("local", "counter") or not allow_scalar:
                self.error("invalid-lvalue", lv.span,
                           f"{lv.name!r} is not an assignable local scalar")
                return self.scalars.get(lv.name, "i32")
            return self.scalars[lv.name]
        elem = self.arrays.get(lv.name)
        if elem is None:
            self.error("unresolved-name", lv.span, f"unknown array {lv.name!r}")
            return "i32"
        idx_ty = self.infer(lv.index)
        if idx_ty not in INT_TYPES:
            self.error("type-error", lv.span, "array index must be integral")
        return elem


def analyze(k: KernelProgram, warp_mode: bool = False) -> Analysis:
    """Validate and annotate a kernel, returning diagnostics plus analysis facts."""
    v = _Validator(k, warp_mode)
    v.check_body()
    return v.info


def validate(k: KernelProgram, warp_mode: bool = False) -> list[Diagnostic]:
    return analyze(k, warp_mode).diagnostics
