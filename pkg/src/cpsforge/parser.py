"""Recursive-descent parser for MiniCPS source text.

Grammar (binary operators are MethodCall sugar, standard precedence):

    program := def* expr
    def     := "def" ID "(" (ID ":" type),* ")" ":" type "=" block
    block   := "{" expr (";" expr)* "}"
    expr    := "val" ID "=" expr ";" expr | "var" ID "=" expr ";" expr
             | ID "=" expr
             | "if" expr "then" expr "else" expr | "while" expr "do" expr
             | "match" expr "{" ("case" pat "=>" expr)+ "}"
             | "try" block ("catch" ID "=>" block)? ("finally" block)?
             | "throw" expr | "fun" "(" (ID ":" type),* ")" "=>" expr
             | "await" "(" expr ")" | "async" "[" ID "]" block
             | binary
    primary := INT | STRING | "true" | "false" | "unit" | "-" INT
             | ID ("(" expr,* ")")? | "(" expr ")" | block | "[" expr,* "]"
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .ast import (Apply, Assign, Async, Await, BindPat, Block, BOOL, FunDef,
                  FunT, If, INT, Lambda, ListLit, ListT, Lit, LitPat, Match,
                  MethodCall, MonadT, OP_TO_METHOD, OptionT, Program,
                  ReceiverT, RECEIVER_KINDS, STR, Throw, Try, Ty, UNIT, UNITT,
                  ValDef, Var, VarDef, While, WildPat)

KEYWORDS = {
    "def", "val", "var", "if", "then", "else", "while", "do", "match", "case",
    "try", "catch", "finally", "throw", "fun", "await", "async", "true",
    "false", "unit",
}

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<int>[0-9]+)
  | (?P<str>"(?:\\.|[^"\\])*")
  | (?P<id>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<punct>=>|->|==|!=|<=|>=|&&|\|\||[{}()\[\],;:.=<>+\-*/])
""", re.VERBOSE)


@dataclass
class Token:
    kind: str  # int | str | id | kw | punct | eof
    text: str
    span: tuple[int, int]


class ParseError(Exception):
    """First parse failure; no partial results."""

    def __init__(self, span, message, expected=()):
        self.span = span
        self.message = message
        self.expected = frozenset(expected)
        super().__init__(f"{span[0]}:{span[1]}: {message}")


def tokenize(text: str) -> list[Token]:
    toks = []
    line, col, pos = 1, 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError((line, col), f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        lexeme = m.group()
        if kind not in ("ws", "comment"):
            if kind == "id" and lexeme in KEYWORDS:
                kind = "kw"
            toks.append(Token(kind, lexeme, (line, col)))
        nl = lexeme.count("\n")
        if nl:
            line += nl
            col = len(lexeme) - lexeme.rfind("\n")
        else:
            col += len(lexeme)
        pos = m.end()
    toks.append(Token("eof", "", (line, col)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    # -- token plumbing ----------------------------------------------------

    def peek(self, k=0) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def at(self, kind, text=None) -> bool:
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def at_kw(self, word) -> bool:
        return self.at("kw", word)

    def expect(self, kind, text=None) -> Token:
        t = self.peek()
        if not self.at(kind, text):
            want = text or kind
            raise ParseError(t.span, f"expected {want!r}, found {t.text or 'end of input'!r}",
                             expected={want})
        return self.next()

    def fail_expr(self):
        t = self.peek()
        raise ParseError(t.span, f"expected expression, found {t.text or 'end of input'!r}",
                         expected={"expression"})

    # -- entry points -------------------------------------------------------

    def program(self) -> Program:
        defs = []
        while self.at_kw("def"):
            defs.append(self.fundef())
        main = self.expr()
        t = self.peek()
        if t.kind != "eof":
            raise ParseError(t.span, f"trailing input {t.text!r}", expected={"end of input"})
        return Program(defs, main)

    def fundef(self) -> FunDef:
        start = self.expect("kw", "def").span
        name = self.expect("id").text
        self.expect("punct", "(")
        params = self.param_list()
        self.expect("punct", ")")
        self.expect("punct", ":")
        ret = self.type_()
        self.expect("punct", "=")
        body = self.block()
        return FunDef(name, params, ret, body, span=start)

    def param_list(self):
        params = []
        while not self.at("punct", ")"):
            pname = self.expect("id").text
            self.expect("punct", ":")
            params.append((pname, self.type_()))
            if not self.at("punct", ","):
                break
            self.next()
        return params

    # -- types ---------------------------------------------------------------

    def type_(self) -> Ty:
        t = self.peek()
        if self.at("punct", "("):
            self.next()
            params = []
            while not self.at("punct", ")"):
                params.append(self.type_())
                if not self.at("punct", ","):
                    break
                self.next()
            self.expect("punct", ")")
            self.expect("punct", "->")
            return FunT(tuple(params), self.type_())
        if t.kind != "id":
            raise ParseError(t.span, f"expected type, found {t.text!r}", expected={"type"})
        name = self.next().text
        simple = {"Int": INT, "Bool": BOOL, "Str": STR, "Unit": UNITT}
        if name in simple:
            return simple[name]
        if self.at("punct", "["):
            self.next()
            elem = self.type_()
            self.expect("punct", "]")
            if name == "List":
                return ListT(elem)
            if name == "Option":
                return OptionT(elem)
            return MonadT(name, elem)
        if name in RECEIVER_KINDS:
            return ReceiverT(name)
        raise ParseError(t.span, f"unknown type {name!r}", expected={"type"})

    # -- expressions -----------------------------------------------------------

    def block(self) -> Block:
        start = self.expect("punct", "{").span
        stmts = self.stmt_seq()
        self.expect("punct", "}")
        return Block(stmts, span=start)

    def stmt_seq(self) -> list:
        """Statements up to `}`; val/var scope the remainder."""
        stmts = [self.expr()]
        while self.at("punct", ";"):
            self.next()
            stmts.append(self.expr())
        return stmts

    def _rest_of_scope(self, span) -> object:
        self.expect("punct", ";")
        rest = [self.expr()]
        while self.at("punct", ";"):
            self.next()
            rest.append(self.expr())
        return rest[0] if len(rest) == 1 else Block(rest, span=span)

    def expr(self):  # noqa: C901 - grammar dispatch
        t = self.peek()
        if self.at_kw("val") or self.at_kw("var"):
            kw = self.next()
            name = self.expect("id").text
            self.expect("punct", "=")
            rhs = self.expr()
            body = self._rest_of_scope(kw.span)
            cls = ValDef if kw.text == "val" else VarDef
            return cls(name, rhs, body, span=kw.span)
        if self.at_kw("if"):
            self.next()
            cond = self.expr()
            self.expect("kw", "then")
            then_e = self.expr()
            self.expect("kw", "else")
            return If(cond, then_e, self.expr(), span=t.span)
        if self.at_kw("while"):
            self.next()
            cond = self.expr()
            self.expect("kw", "do")
            return While(cond, self.expr(), span=t.span)
        if self.at_kw("match"):
            self.next()
            scrut = self.expr()
            self.expect("punct", "{")
            cases = []
            while self.at_kw("case"):
                self.next()
                pat = self.pattern()
                self.expect("punct", "=>")
                cases.append((pat, self.expr()))
            if not cases:
                raise ParseError(self.peek().span, "expected at least one case",
                                 expected={"case"})
            self.expect("punct", "}")
            return Match(scrut, cases, span=t.span)
        if self.at_kw("try"):
            self.next()
            body = self.block()
            catch_name = handler = finally_e = None
            if self.at_kw("catch"):
                self.next()
                catch_name = self.expect("id").text
                self.expect("punct", "=>")
                handler = self.block()
            if self.at_kw("finally"):
                self.next()
                finally_e = self.block()
            if catch_name is None and finally_e is None:
                raise ParseError(self.peek().span, "try needs a catch or finally clause",
                                 expected={"catch", "finally"})
            return Try(body, catch_name, handler, finally_e, span=t.span)
        if self.at_kw("throw"):
            self.next()
            return Throw(self.expr(), span=t.span)
        if self.at_kw("fun"):
            self.next()
            self.expect("punct", "(")
            params = self.param_list()
            self.expect("punct", ")")
            self.expect("punct", "=>")
            return Lambda(params, self.expr(), span=t.span)
        if self.at_kw("await"):
            self.next()
            self.expect("punct", "(")
            inner = self.expr()
            self.expect("punct", ")")
            return Await(inner, span=t.span)
        if self.at_kw("async"):
            self.next()
            self.expect("punct", "[")
            monad = self.expect("id").text
            self.expect("punct", "]")
            return Async(monad, self.block(), span=t.span)
        if t.kind == "id" and self.peek(1).kind == "punct" and self.peek(1).text == "=":
            name = self.next().text
            self.next()
            return Assign(name, self.expr(), span=t.span)
        return self.binary(1)

    def binary(self, min_prec: int):
        left = self.binary(min_prec + 1) if min_prec < 5 else self.postfix()
        while True:
            t = self.peek()
            if t.kind != "punct" or t.text not in OP_TO_METHOD:
                return left
            method, prec = OP_TO_METHOD[t.text]
            if prec != min_prec:
                return left
            self.next()
            right = self.binary(min_prec + 1) if min_prec < 5 else self.postfix()
            left = MethodCall(left, method, [right], span=t.span)

    def postfix(self):
        e = self.primary()
        while self.at("punct", "."):
            dot = self.next()
            method = self.expect("id").text
            self.expect("punct", "(")
            args = self.arg_list()
            self.expect("punct", ")")
            e = MethodCall(e, method, args, span=dot.span)
        return e

    def arg_list(self):
        args = []
        while not self.at("punct", ")"):
            args.append(self.expr())
            if not self.at("punct", ","):
                break
            self.next()
        return args

    def primary(self):  # noqa: C901
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Lit(int(t.text), span=t.span)
        if t.kind == "punct" and t.text == "-" and self.peek(1).kind == "int":
            self.next()
            num = self.next()
            return Lit(-int(num.text), span=t.span)
        if t.kind == "str":
            self.next()
            return Lit(_unescape(t.text), span=t.span)
        if self.at_kw("true") or self.at_kw("false"):
            self.next()
            return Lit(t.text == "true", span=t.span)
        if self.at_kw("unit"):
            self.next()
            return Lit(UNIT, span=t.span)
        if t.kind == "id":
            self.next()
            if self.at("punct", "("):
                self.next()
                args = self.arg_list()
                self.expect("punct", ")")
                return Apply(Var(t.text, span=t.span), args, span=t.span)
            return Var(t.text, span=t.span)
        if self.at("punct", "("):
            self.next()
            inner = self.expr()
            self.expect("punct", ")")
            return inner
        if self.at("punct", "{"):
            return self.block()
        if self.at("punct", "["):
            self.next()
            items = []
            while not self.at("punct", "]"):
                items.append(self.expr())
                if not self.at("punct", ","):
                    break
                self.next()
            self.expect("punct", "]")
            return ListLit(items, span=t.span)
        self.fail_expr()

    def pattern(self):
        t = self.peek()
        if t.kind == "int":
            self.next()
            return LitPat(int(t.text))
        if t.kind == "punct" and t.text == "-" and self.peek(1).kind == "int":
            self.next()
            return LitPat(-int(self.next().text))
        if t.kind == "str":
            self.next()
            return LitPat(_unescape(t.text))
        if self.at_kw("true") or self.at_kw("false"):
            self.next()
            return LitPat(t.text == "true")
        if t.kind == "id":
            self.next()
            if t.text == "_":
                return WildPat()
            return BindPat(t.text)
        raise ParseError(t.span, f"expected pattern, found {t.text!r}", expected={"pattern"})


def _unescape(lexeme: str) -> str:
    body = lexeme[1:-1]
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\" and i + 1 < len(body):
            nxt = body[i + 1]
            out.append({"n": "\n", "t": "\t", "r": "\r", '"': '"', "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def parse(text: str) -> Program:
    """Parse a whole program (defs then main expression)."""
    return _Parser(text).program()


def parse_expr(text: str):
    """Parse a single expression (convenience for tests and tools)."""
    p = _Parser(text)
    e = p.expr()
    t = p.peek()
    if t.kind != "eof":
        raise ParseError(t.span, f"trailing input {t.text!r}", expected={"end of input"})
    return e
