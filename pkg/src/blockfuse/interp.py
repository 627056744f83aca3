"""Expression and statement evaluation shared by both interpreters.

The MPMD executor and the lockstep reference interpreter differ in how they
schedule threads and where variables live; the language semantics themselves
(operator behavior, integer wrapping, traps) are defined once, here, against
an abstract environment.

Environment protocol (duck-typed):
    read_var(name) / write_var(name, value, ty)
    builtin(base, axis) -> int
    load(array, index, span) -> value
    store(array, index, value, span)
    atomic(kind, array, index, operand, compare, ty, span) -> None
"""

from __future__ import annotations

import math
from typing import Optional

from blockfuse.arena import Trap, wrap_int
from blockfuse.syntax import (
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
    LocalDecl,
    Noop,
    Stmt,
    Unary,
    VarRef,
)


def _int_div(a: int, b: int, span) -> int:
    if b == 0:
        raise Trap("DivByZero", "integer division by zero", span=span)
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _int_mod(a: int, b: int, span) -> int:
    if b == 0:
        raise Trap("DivByZero", "integer modulo by zero", span=span)
    return a - _int_div(a, b, span) * b


def apply_binary(op: str, ty: Optional[str], a, b, span):
    if op == "+":
        r = a + b
    elif op == "-":
        r = a - b
    elif op == "*":
        r = a * b
    elif op == "/":
        if ty in INT_TYPES:
            return wrap_int(_int_div(int(a), int(b), span), ty)
        if b == 0.0:
            raise Trap("DivByZero", "float division by zero", span=span)
        return a / b
    elif op == "%":
        if ty not in INT_TYPES:
            raise Trap("TypeFault", "modulo on non-integer operands", span=span)
        return wrap_int(_int_mod(int(a), int(b), span), ty)
    elif op == "==":
        return 1 if a == b else 0
    elif op == "!=":
        return 1 if a != b else 0
    elif op == "<":
        return 1 if a < b else 0
    elif op == "<=":
        return 1 if a <= b else 0
    elif op == ">":
        return 1 if a > b else 0
    elif op == ">=":
        return 1 if a >= b else 0
    else:
        raise Trap("TypeFault", f"unknown operator {op!r}", span=span)
    if ty in INT_TYPES:
        return wrap_int(int(r), ty)
    return r


def coerce(value, ty: Optional[str], span=None):
    if ty in INT_TYPES:
        if isinstance(value, float):
            value = int(value)
        return wrap_int(value, ty)
    return float(value)


def eval_expr(e: Expr, env, subst: Optional[dict] = None):
    if isinstance(e, IntLit):
        return coerce(e.value, e.ty or "i32", e.span)
    if isinstance(e, FloatLit):
        return e.value
    if isinstance(e, VarRef):
        return env.read_var(e.name)
    if isinstance(e, BuiltinRef):
        return env.builtin(e.base, e.axis)
    if isinstance(e, Index):
        idx = eval_expr(e.index, env, subst)
        return env.load(e.array, int(idx), e.span)
    if isinstance(e, Binary):
        if e.op == "&&":
            left = eval_expr(e.left, env, subst)
            if left == 0:
                return 0
            return 1 if eval_expr(e.right, env, subst) != 0 else 0
        if e.op == "||":
            left = eval_expr(e.left, env, subst)
            if left != 0:
                return 1
            return 1 if eval_expr(e.right, env, subst) != 0 else 0
        a = eval_expr(e.left, env, subst)
        b = eval_expr(e.right, env, subst)
        return apply_binary(e.op, e.ty, a, b, e.span)
    if isinstance(e, Unary):
        v = eval_expr(e.operand, env, subst)
        if e.op == "-":
            return coerce(-v, e.ty, e.span)
        return 1 if v == 0 else 0
    if isinstance(e, Call):
        if subst is not None and id(e) in subst:
            return subst[id(e)]
        if e.func in WARP_INTRINSICS:
            raise Trap("NonUniformTrip",
                       f"{e.func} evaluated outside a lane-lockstep context",
                       span=e.span)
        args = [eval_expr(a, env, subst) for a in e.args]
        if e.func == "min":
            return min(args)
        if e.func == "max":
            return max(args)
        if e.func == "abs":
            return coerce(abs(args[0]), e.ty, e.span)
        if e.func == "sqrt":
            if args[0] < 0:
                raise Trap("TypeFault", "sqrt of a negative value", span=e.span)
            return math.sqrt(args[0])
        raise Trap("TypeFault", f"unknown intrinsic {e.func!r}", span=e.span)
    raise Trap("TypeFault", f"unknown expression node {e!r}")


def exec_stmt(s: Stmt, env, subst: Optional[dict] = None) -> None:
    """Run one statement for one thread; barriers are illegal at this level."""
    if isinstance(s, LocalDecl):
        env.write_var(s.name, eval_expr(s.init, env, subst), s.ty)
    elif isinstance(s, Assign):
        value = eval_expr(s.value, env, subst)
        if s.target.index is None:
            env.write_var(s.target.name, value, None)
        else:
            idx = int(eval_expr(s.target.index, env, subst))
            env.store(s.target.name, idx, value, s.span)
    elif isinstance(s, If):
        if eval_expr(s.cond, env, subst) != 0:
            exec_block(s.then_body, env, subst)
        else:
            exec_block(s.else_body, env, subst)
    elif isinstance(s, For):
        env.write_var(s.var, coerce(eval_expr(s.lo, env, subst), "i32"), "i32")
        while env.read_var(s.var) < eval_expr(s.hi, env, subst):
            exec_block(s.body, env, subst)
            bumped = env.read_var(s.var) + eval_expr(s.step, env, subst)
            env.write_var(s.var, coerce(bumped, "i32"), "i32")
    elif isinstance(s, Barrier):
        raise Trap("NonUniformTrip", "barrier reached in per-thread execution",
                   span=s.span)
    elif isinstance(s, AtomicStmt):
        idx = None
        if s.target.index is not None:
            idx = int(eval_expr(s.target.index, env, subst))
        operand = eval_expr(s.operand, env, subst)
        compare = None
        if s.compare_to is not None:
            compare = eval_expr(s.compare_to, env, subst)
        env.atomic(s.kind, s.target.name, idx, operand, compare, s.span)
    elif isinstance(s, Noop):
        pass
    else:
        raise Trap("TypeFault", f"unknown statement node {s!r}")


def exec_block(stmts: list[Stmt], env, subst: Optional[dict] = None) -> None:
    for s in stmts:
        exec_stmt(s, env, subst)


# ---------------------------------------------------------------------------
# lane-lockstep helpers (warp intrinsics)
# ---------------------------------------------------------------------------

def stmt_exprs(s: Stmt) -> list[Expr]:
    if isinstance(s, LocalDecl):
        return [s.init]
    if isinstance(s, Assign):
        exprs = [s.value]
        if s.target.index is not None:
            exprs.append(s.target.index)
        return exprs
    if isinstance(s, AtomicStmt):
        exprs = [s.operand]
        if s.target.index is not None:
            exprs.append(s.target.index)
        if s.compare_to is not None:
            exprs.append(s.compare_to)
        return exprs
    if isinstance(s, If):
        return [s.cond]
    if isinstance(s, For):
        return [s.lo, s.hi, s.step]
    return []


def collect_warp_calls(e: Expr, out: list[Call]) -> None:
    if isinstance(e, Call):
        for a in e.args:
            collect_warp_calls(a, out)
        if e.func in WARP_INTRINSICS:
            out.append(e)  # post-order: inner calls first
    elif isinstance(e, Binary):
        collect_warp_calls(e.left, out)
        collect_warp_calls(e.right, out)
    elif isinstance(e, Unary):
        collect_warp_calls(e.operand, out)
    elif isinstance(e, Index):
        collect_warp_calls(e.index, out)


def stmt_warp_calls(s: Stmt) -> list[Call]:
    calls: list[Call] = []
    for e in stmt_exprs(s):
        collect_warp_calls(e, calls)
    # If/For bodies may not contain further intrinsics (validated), but the
    # recursion below keeps the defense-in-depth property.
    if isinstance(s, If):
        for inner in s.then_body + s.else_body:
            calls.extend(stmt_warp_calls(inner))
    elif isinstance(s, For):
        for inner in s.body:
            calls.extend(stmt_warp_calls(inner))
    return calls


def run_lockstep_stmt(s: Stmt, lanes: list[int], env_for_lane, warp_size: int) -> None:
    """Execute one warp-intrinsic statement over a warp's active lanes.

    Exchanges go through per-warp lane buffers: every lane first publishes
    the intrinsic operand, then all lanes read the exchanged values and the
    full statement runs per lane with intrinsic results substituted.
    Resolution is innermost-first so nested intrinsics compose.
    """
    calls = stmt_warp_calls(s)
    subst_by_lane: dict[int, dict] = {lane: {} for lane in lanes}
    lane_pos = {lane: i for i, lane in enumerate(lanes)}

    for call in calls:  # post-order: args of later calls may use earlier results
        if call.func == "shfl_down":
            values = []
            deltas = []
            for lane in lanes:
                env = env_for_lane(lane)
                values.append(eval_expr(call.args[0], env, subst_by_lane[lane]))
                deltas.append(int(eval_expr(call.args[1], env, subst_by_lane[lane])))
            for i, lane in enumerate(lanes):
                src = i + deltas[i]
                # out-of-range source lanes read their own value
                if 0 <= src < min(warp_size, len(lanes)):
                    result = values[src]
                else:
                    result = values[i]
                subst_by_lane[lane][id(call)] = result
        else:  # vote_any / vote_all
            preds = []
            for lane in lanes:
                env = env_for_lane(lane)
                preds.append(eval_expr(call.args[0], env, subst_by_lane[lane]) != 0)
            if call.func == "vote_any":
                result = 1 if any(preds) else 0
            else:
                result = 1 if all(preds) else 0
            for lane in lanes:
                subst_by_lane[lane][id(call)] = result

    for lane in lanes:
        exec_stmt(s, env_for_lane(lane), subst_by_lane[lane])


def run_warp_stmts(stmts: list[Stmt], lanes: list[int], env_for_lane,
                   warp_size: int) -> None:
    """Execute a barrier-free statement list over one warp's lanes.

    Intrinsic-free runs execute lane by lane; statements with warp
    intrinsics run in lane lockstep.  A uniform for-loop containing
    intrinsics is iterated sequentially at warp level so the exchange
    happens once per iteration.
    """
    for kind, item in split_lockstep_groups(stmts):
        if kind == "plain":
            for lane in lanes:
                exec_block(item, env_for_lane(lane))
            continue
        s = item
        if isinstance(s, For):
            env0 = env_for_lane(lanes[0])
            v = coerce(eval_expr(s.lo, env0), "i32")
            while True:
                for lane in lanes:
                    env_for_lane(lane).write_var(s.var, v, "i32")
                if not v < eval_expr(s.hi, env0):
                    break
                run_warp_stmts(s.body, lanes, env_for_lane, warp_size)
                v = coerce(v + eval_expr(s.step, env0), "i32")
        elif isinstance(s, If):
            raise Trap("NonUniformTrip",
                       "warp intrinsic under a branch is unsupported", span=s.span)
        else:
            run_lockstep_stmt(s, lanes, env_for_lane, warp_size)


def split_lockstep_groups(stmts: list[Stmt]) -> list[tuple[str, object]]:
    """Partition into ("plain", [stmts]) runs and ("lockstep", stmt) singletons."""
    groups: list[tuple[str, object]] = []
    run: list[Stmt] = []
    for s in stmts:
        if stmt_warp_calls(s):
            if run:
                groups.append(("plain", run))
                run = []
            groups.append(("lockstep", s))
        else:
            run.append(s)
    if run:
        groups.append(("plain", run))
    return groups
