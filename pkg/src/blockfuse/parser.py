"""Recursive-descent parser for the kernel language.

Grammar (one or more kernels per compilation unit):

    kernel  := "kernel" IDENT "(" params? ")" block
    param   := IDENT ":" type
    type    := "i32" | "i64" | "f32" | "f64" | "global" scalar "[]"
    decl    := "shared" scalar IDENT "[" INT "]" ";"
             | "extern" "shared" scalar IDENT "[]" ";"
    stmt    := "let" IDENT ":" scalar "=" expr ";"
             | lvalue "=" expr ";"
             | "if" "(" expr ")" block ("else" block)?
             | "for" "(" IDENT "=" expr ";" IDENT "<" expr ";" IDENT "+=" expr ")" block
             | "barrier" ";"
             | atomic ";"
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from blockfuse.syntax import (
    AXES,
    BUILTIN_BASES,
    INTRINSICS,
    SCALAR_TYPES,
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
    Param,
    ParamType,
    SharedDecl,
    Span,
    Stmt,
    Unary,
    VarRef,
)


class ParseError(Exception):
    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.expected = expected
        loc = f"{line}:{col}"
        exp = f" (expected one of: {', '.join(expected)})" if expected else ""
        super().__init__(f"{loc}: {message}{exp}")


@dataclass
class Token:
    kind: str  # IDENT | INT | FLOAT | PUNCT | EOF
    text: str
    line: int
    col: int

    @property
    def span(self) -> Span:
        return Span(self.line, self.col)


_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>//[^\n]*|\#[^\n]*)
    | (?P<float>(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
    | (?P<int>\d+)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<punct>\|\||&&|==|!=|<=|>=|\+=|[-+*/%<>=!(){}\[\];:,.])
    """,
    re.VERBOSE,
)


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, col)
        text = m.group(0)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            mapped = {"float": "FLOAT", "int": "INT", "ident": "IDENT", "punct": "PUNCT"}[kind]
            tokens.append(Token(mapped, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    tokens.append(Token("EOF", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    # -- token helpers ------------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok.text == text and tok.kind in ("PUNCT", "IDENT")

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.next()
            return True
        return False

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if not self.at(text):
            raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col, (text,))
        return self.next()

    def ident(self) -> Token:
        tok = self.peek()
        if tok.kind != "IDENT":
            raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col, ("identifier",))
        return self.next()

    # -- kernels ------------------------------------------------------------

    def unit(self) -> list[KernelProgram]:
        kernels = []
        while self.peek().kind != "EOF":
            kernels.append(self.kernel())
        return kernels

    def kernel(self) -> KernelProgram:
        start = self.expect("kernel")
        name = self.ident().text
        self.expect("(")
        params: list[Param] = []
        if not self.at(")"):
            params.append(self.param())
            while self.accept(","):
                params.append(self.param())
        self.expect(")")
        self.expect("{")
        static_shared: list[SharedDecl] = []
        dynamic_shared = None
        while self.at("shared") or self.at("extern"):
            if self.accept("extern"):
                self.expect("shared")
                scalar = self.scalar_type()
                dname = self.ident()
                self.expect("[")
                self.expect("]")
                self.expect(";")
                if dynamic_shared is not None:
                    raise ParseError("duplicate extern shared declaration",
                                     dname.line, dname.col)
                dynamic_shared = (dname.text, scalar)
            else:
                self.expect("shared")
                scalar = self.scalar_type()
                dname = self.ident()
                self.expect("[")
                length = self.peek()
                if length.kind != "INT":
                    raise ParseError("shared array length must be an integer literal",
                                     length.line, length.col, ("integer",))
                self.next()
                self.expect("]")
                self.expect(";")
                static_shared.append(SharedDecl(dname.text, scalar, int(length.text)))
        body = self.block_rest()
        return KernelProgram(name, params, static_shared, dynamic_shared, body,
                             span=start.span)

    def param(self) -> Param:
        name = self.ident()
        self.expect(":")
        if self.accept("global"):
            scalar = self.scalar_type()
            self.expect("[")
            self.expect("]")
            ptype = ParamType(scalar, is_global=True)
        else:
            ptype = ParamType(self.scalar_type())
        return Param(name.text, ptype, span=name.span)

    def scalar_type(self) -> str:
        tok = self.peek()
        if tok.text not in SCALAR_TYPES:
            raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col, SCALAR_TYPES)
        self.next()
        return tok.text

    # -- statements ---------------------------------------------------------

    def block(self) -> list[Stmt]:
        self.expect("{")
        return self.block_rest()

    def block_rest(self) -> list[Stmt]:
        stmts: list[Stmt] = []
        while not self.at("}"):
            if self.peek().kind == "EOF":
                tok = self.peek()
                raise ParseError("unexpected end of input", tok.line, tok.col, ("}",))
            stmts.append(self.stmt())
        self.expect("}")
        return stmts

    def stmt(self) -> Stmt:
        tok = self.peek()
        if self.accept(";"):
            return Noop(span=tok.span)
        if self.at("let"):
            return self.let_stmt()
        if self.at("if"):
            return self.if_stmt()
        if self.at("for"):
            return self.for_stmt()
        if self.at("barrier"):
            self.next()
            self.expect(";")
            return Barrier(span=tok.span)
        if self.at("atomic_add") or self.at("atomic_cas"):
            return self.atomic_stmt()
        # assignment
        target = self.lvalue()
        self.expect("=")
        value = self.expr()
        self.expect(";")
        return Assign(target, value, span=tok.span)

    def let_stmt(self) -> Stmt:
        start = self.expect("let")
        name = self.ident().text
        self.expect(":")
        ty = self.scalar_type()
        self.expect("=")
        init = self.expr()
        self.expect(";")
        return LocalDecl(name, ty, init, span=start.span)

    def if_stmt(self) -> Stmt:
        start = self.expect("if")
        self.expect("(")
        cond = self.expr()
        self.expect(")")
        then_body = self.block()
        else_body = self.block() if self.accept("else") else []
        return If(cond, then_body, else_body, span=start.span)

    def for_stmt(self) -> Stmt:
        start = self.expect("for")
        self.expect("(")
        var = self.ident().text
        self.expect("=")
        lo = self.expr()
        self.expect(";")
        v2 = self.ident()
        if v2.text != var:
            raise ParseError(f"for-loop condition must test {var!r}", v2.line, v2.col, (var,))
        self.expect("<")
        hi = self.expr()
        self.expect(";")
        v3 = self.ident()
        if v3.text != var:
            raise ParseError(f"for-loop step must update {var!r}", v3.line, v3.col, (var,))
        self.expect("+=")
        step = self.expr()
        self.expect(")")
        body = self.block()
        return For(var, lo, hi, step, body, span=start.span)

    def atomic_stmt(self) -> Stmt:
        tok = self.next()
        kind = "add" if tok.text == "atomic_add" else "cas"
        self.expect("(")
        target = self.lvalue()
        self.expect(",")
        first = self.expr()
        if kind == "cas":
            self.expect(",")
            second = self.expr()
            self.expect(")")
            self.expect(";")
            return AtomicStmt("cas", target, second, first, span=tok.span)
        self.expect(")")
        self.expect(";")
        return AtomicStmt("add", target, first, span=tok.span)

    def lvalue(self) -> LValue:
        name = self.ident()
        if self.accept("["):
            idx = self.expr()
            self.expect("]")
            return LValue(name.text, idx, span=name.span)
        return LValue(name.text, span=name.span)

    # -- expressions --------------------------------------------------------

    def expr(self) -> Expr:
        return self.binary(1)

    _LEVELS = [
        ("||",),
        ("&&",),
        ("==", "!="),
        ("<", "<=", ">", ">="),
        ("+", "-"),
        ("*", "/", "%"),
    ]

    def binary(self, level: int) -> Expr:
        if level > len(self._LEVELS):
            return self.unary()
        ops = self._LEVELS[level - 1]
        left = self.binary(level + 1)
        while self.peek().kind == "PUNCT" and self.peek().text in ops:
            op = self.next()
            right = self.binary(level + 1)
            left = Binary(op.text, left, right, span=op.span)
        return left

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "PUNCT" and tok.text in ("-", "!"):
            self.next()
            return Unary(tok.text, self.unary(), span=tok.span)
        return self.primary()

    def primary(self) -> Expr:
        tok = self.peek()
        if tok.kind == "INT":
            self.next()
            return IntLit(int(tok.text), span=tok.span)
        if tok.kind == "FLOAT":
            self.next()
            return FloatLit(float(tok.text), span=tok.span)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "IDENT":
            self.next()
            if tok.text in BUILTIN_BASES:
                self.expect(".")
                axis = self.ident()
                if axis.text not in AXES:
                    raise ParseError(f"unknown axis {axis.text!r}", axis.line, axis.col, AXES)
                return BuiltinRef(tok.text, axis.text, span=tok.span)
            if self.at("(") and tok.text in INTRINSICS:
                self.next()
                args = []
                if not self.at(")"):
                    args.append(self.expr())
                    while self.accept(","):
                        args.append(self.expr())
                self.expect(")")
                return Call(tok.text, args, span=tok.span)
            if self.accept("["):
                idx = self.expr()
                self.expect("]")
                return Index(tok.text, idx, span=tok.span)
            return VarRef(tok.text, span=tok.span)
        raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col,
                         ("expression",))


def parse_unit(source: str) -> dict[str, KernelProgram]:
    """Parse a compilation unit; kernel names must be unique."""
    kernels = _Parser(tokenize(source)).unit()
    by_name: dict[str, KernelProgram] = {}
    for k in kernels:
        if k.name in by_name:
            raise ParseError(f"duplicate kernel name {k.name!r}",
                             k.span.line if k.span else 0,
                             k.span.col if k.span else 0)
        by_name[k.name] = k
    return by_name


def parse(source: str) -> KernelProgram:
    """Parse a source containing exactly one kernel."""
    kernels = _Parser(tokenize(source)).unit()
    if len(kernels) != 1:
        tok_line = kernels[1].span.line if len(kernels) > 1 and kernels[1].span else 0
        raise ParseError(f"expected exactly one kernel, found {len(kernels)}", tok_line, 0)
    return kernels[0]
