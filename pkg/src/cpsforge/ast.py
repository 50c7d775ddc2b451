"""MiniCPS abstract syntax.

Surface expression nodes (what the parser builds), the monadic primitive
nodes the transformer emits, the monomorphic type language, and the pretty
printer.  Every other module consumes or produces these values.

Nodes are mutable dataclasses with identity equality; use `struct_eq` for
structural comparison (it ignores spans, node ids and type annotations).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

Span = tuple[int, int]
NOSPAN: Span = (0, 0)


class Unit:
    """The single Unit value."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "unit"


UNIT = Unit()


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ty:
    pass


@dataclass(frozen=True)
class IntT(Ty):
    def __str__(self):
        return "Int"


@dataclass(frozen=True)
class BoolT(Ty):
    def __str__(self):
        return "Bool"


@dataclass(frozen=True)
class StrT(Ty):
    def __str__(self):
        return "Str"


@dataclass(frozen=True)
class UnitT(Ty):
    def __str__(self):
        return "Unit"


@dataclass(frozen=True)
class BottomT(Ty):
    """Type of `throw`: joins with anything."""

    def __str__(self):
        return "Nothing"


@dataclass(frozen=True)
class ListT(Ty):
    elem: Ty

    def __str__(self):
        return f"List[{self.elem}]"


@dataclass(frozen=True)
class OptionT(Ty):
    elem: Ty

    def __str__(self):
        return f"Option[{self.elem}]"


@dataclass(frozen=True)
class FunT(Ty):
    params: tuple[Ty, ...]
    ret: Ty

    def __str__(self):
        ps = ", ".join(str(p) for p in self.params)
        return f"({ps}) -> {self.ret}"


@dataclass(frozen=True)
class MonadT(Ty):
    monad: str
    elem: Ty

    def __str__(self):
        return f"{self.monad}[{self.elem}]"


@dataclass(frozen=True)
class ReceiverT(Ty):
    """Builtin object with methods: Range, Cache, Box, File."""

    kind: str

    def __str__(self):
        return self.kind


INT = IntT()
BOOL = BoolT()
STR = StrT()
UNITT = UnitT()
BOTTOM = BottomT()

RECEIVER_KINDS = ("Range", "Cache", "Box", "File")


def receiver_kind(ty: Ty) -> str | None:
    """Registry key for shifted-method lookup, or None."""
    if isinstance(ty, ListT):
        return "List"
    if isinstance(ty, ReceiverT):
        return ty.kind
    return None


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Pattern:
    pass


@dataclass(eq=False)
class LitPat(Pattern):
    value: object


@dataclass(eq=False)
class WildPat(Pattern):
    pass


@dataclass(eq=False)
class BindPat(Pattern):
    name: str


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Expr:
    span: Span = field(default=NOSPAN, kw_only=True, repr=False)
    nid: int = field(default=-1, kw_only=True, repr=False)
    ty: Ty | None = field(default=None, kw_only=True, repr=False)


@dataclass(eq=False)
class Lit(Expr):
    value: object  # int | bool | str | UNIT


@dataclass(eq=False)
class Var(Expr):
    name: str


@dataclass(eq=False)
class ListLit(Expr):
    items: list[Expr]


@dataclass(eq=False)
class Block(Expr):
    stmts: list[Expr]


@dataclass(eq=False)
class ValDef(Expr):
    name: str
    rhs: Expr
    body: Expr


@dataclass(eq=False)
class VarDef(Expr):
    name: str
    rhs: Expr
    body: Expr


@dataclass(eq=False)
class Assign(Expr):
    name: str
    rhs: Expr


@dataclass(eq=False)
class If(Expr):
    cond: Expr
    then_e: Expr
    else_e: Expr


@dataclass(eq=False)
class While(Expr):
    cond: Expr
    body: Expr


@dataclass(eq=False)
class Match(Expr):
    scrutinee: Expr
    cases: list[tuple[Pattern, Expr]]


@dataclass(eq=False)
class Try(Expr):
    body: Expr
    catch_name: str | None
    handler: Expr | None
    finally_e: Expr | None


@dataclass(eq=False)
class Throw(Expr):
    msg: Expr


@dataclass(eq=False)
class Lambda(Expr):
    params: list[tuple[str, Ty]]
    body: Expr


@dataclass(eq=False)
class Apply(Expr):
    fn: Expr
    args: list[Expr]


@dataclass(eq=False)
class MethodCall(Expr):
    recv: Expr
    method: str
    args: list[Expr]


@dataclass(eq=False)
class Await(Expr):
    inner: Expr


@dataclass(eq=False)
class Async(Expr):
    monad: str
    body: Expr


# Coloring pre-pass markers (source-level; cps.transform consumes them).

@dataclass(eq=False)
class MemoMarker(Expr):
    """F[T] -> F[F[T]] memoization point inserted by automatic coloring."""

    inner: Expr


@dataclass(eq=False)
class Discard(Expr):
    """Logged value discard of a non-final statement."""

    inner: Expr
    discard_ty: Ty | None = None


# ---------------------------------------------------------------------------
# Monadic primitive nodes (transformer output)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Pure(Expr):
    monad: str
    inner: Expr


@dataclass(eq=False)
class MapM(Expr):
    monad: str
    src: Expr
    param: str
    body: Expr  # plain-valued


@dataclass(eq=False)
class FlatMapM(Expr):
    monad: str
    src: Expr
    param: str
    body: Expr  # monadic-valued


@dataclass(eq=False)
class FlatMapTryM(Expr):
    monad: str
    src: Expr
    ok_param: str
    ok_body: Expr
    err_param: str
    err_body: Expr


@dataclass(eq=False)
class MonadErrorM(Expr):
    monad: str
    msg: Expr


@dataclass(eq=False)
class AdoptAwaitM(Expr):
    monad: str
    await_nid: int
    inner: Expr


@dataclass(eq=False)
class ConvertM(Expr):
    from_monad: str
    to_monad: str
    inner: Expr


@dataclass(eq=False)
class MemoizeM(Expr):
    monad: str
    inner: Expr


@dataclass(eq=False)
class WhileM(Expr):
    """whileHelper call: cond/body re-evaluated per iteration as thunks."""

    monad: str
    cond: Expr
    body: Expr


@dataclass(eq=False)
class MonadVal(Expr):
    """A transformed async block: evaluates to a MonadicValue of `monad`."""

    monad: str
    inner: Expr


@dataclass(eq=False)
class PlainArg:
    expr: Expr


@dataclass(eq=False)
class FnArg:
    params: list[tuple[str, Ty]]
    body: Expr  # monadic-valued


@dataclass(eq=False)
class ThunkArg:
    body: Expr  # monadic-valued


ShiftArg = PlainArg | FnArg | ThunkArg


@dataclass(eq=False)
class ShiftedCallM(Expr):
    monad: str
    recv_kind: str
    method: str
    case_tag: str     # asyncShift-fo | asyncShift-o | inplace-f | inplace
    return_kind: str  # plain | wrapped | callchain
    recv: Expr
    args: list[ShiftArg]


@dataclass(eq=False)
class ChainAppendM(Expr):
    """Plain-valued: extends a ChainBuilder with one more shifted op."""

    monad: str
    builder: Expr
    op: str
    fn: FnArg


@dataclass(eq=False)
class ChainFinishM(Expr):
    monad: str
    builder: Expr


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FunDef:
    name: str
    params: list[tuple[str, Ty]]
    ret_ty: Ty
    body: Expr
    span: Span = NOSPAN


@dataclass(eq=False)
class Program:
    defs: list[FunDef]
    main: Expr


# ---------------------------------------------------------------------------
# Generic traversal / structural equality
# ---------------------------------------------------------------------------

_SKIP_FIELDS = {"span", "nid", "ty"}


def _field_values(node):
    return [(f.name, getattr(node, f.name)) for f in fields(node) if f.name not in _SKIP_FIELDS]


def child_exprs(e: Expr):
    """Direct Expr children, in evaluation-ish order."""
    out = []

    def collect(v):
        if isinstance(v, Expr):
            out.append(v)
        elif isinstance(v, (list, tuple)):
            for x in v:
                collect(x)
        elif isinstance(v, (PlainArg, ThunkArg)):
            collect(v.expr if isinstance(v, PlainArg) else v.body)
        elif isinstance(v, FnArg):
            collect(v.body)

    for _, v in _field_values(e):
        collect(v)
    return out


def walk(e: Expr):
    """Preorder walk of an expression tree."""
    yield e
    for c in child_exprs(e):
        yield from walk(c)


def struct_eq(a, b) -> bool:
    """Structural equality ignoring spans, node ids and type annotations."""
    if type(a) is not type(b):
        return False
    if isinstance(a, (Expr, Pattern, FunDef, Program, PlainArg, FnArg, ThunkArg)):
        av, bv = _field_values(a), _field_values(b)
        return all(struct_eq(x[1], y[1]) for x, y in zip(av, bv))
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(struct_eq(x, y) for x, y in zip(a, b))
    return a == b


def contains(e: Expr, pred) -> bool:
    return any(pred(n) for n in walk(e))


# ---------------------------------------------------------------------------
# Pretty printer
# ---------------------------------------------------------------------------

# Binary-operator sugar: method name -> (surface operator, precedence).
SUGAR = {
    "or": ("||", 1), "and": ("&&", 2),
    "eq": ("==", 3), "ne": ("!=", 3), "lt": ("<", 3), "le": ("<=", 3),
    "gt": (">", 3), "ge": (">=", 3),
    "plus": ("+", 4), "minus": ("-", 4),
    "times": ("*", 5), "div": ("/", 5),
}
OP_TO_METHOD = {op: (name, prec) for name, (op, prec) in SUGAR.items()}

_KW = 0       # keyword-led expressions need parens inside operators
_POSTFIX = 6
_ATOM = 7


def _seq_stmts(e: Expr) -> list[Expr]:
    return e.stmts if isinstance(e, Block) else [e]


def render_ty(ty: Ty) -> str:
    return str(ty)


def pretty(e: Expr) -> str:
    """Concrete MiniCPS syntax; parse(pretty(p)) == p modulo spans."""
    return _pp(e, 0)


def pretty_program(p: Program) -> str:
    parts = []
    for d in p.defs:
        ps = ", ".join(f"{n}: {render_ty(t)}" for n, t in d.params)
        parts.append(f"def {d.name}({ps}): {render_ty(d.ret_ty)} = {_pp_block(d.body)}")
    parts.append(pretty(p.main))
    return "\n".join(parts)


def _pp_block(e: Expr) -> str:
    stmts = _seq_stmts(e)
    return "{ " + "; ".join(_pp(s, 0) for s in stmts) + " }"


def _paren(s: str, need: bool) -> str:
    return f"({s})" if need else s


def _pp_lit(v) -> str:
    if v is UNIT:
        return "unit"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"unprintable literal {v!r}")


def _pp_params(params) -> str:
    return ", ".join(f"{n}: {render_ty(t)}" for n, t in params)


def _pp(e: Expr, prec: int) -> str:  # noqa: C901 - one branch per node kind
    if isinstance(e, Lit):
        return _pp_lit(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, ListLit):
        return "[" + ", ".join(_pp(x, 0) for x in e.items) + "]"
    if isinstance(e, Block):
        return "{ " + "; ".join(_pp(s, 0) for s in e.stmts) + " }"
    if isinstance(e, (ValDef, VarDef)):
        kw = "val" if isinstance(e, ValDef) else "var"
        rhs = e.rhs
        rhs_s = _pp_block(rhs) if isinstance(rhs, (ValDef, VarDef)) else _pp(rhs, 0)
        body = "; ".join(_pp(s, 0) for s in _seq_stmts(e.body))
        return _paren(f"{kw} {e.name} = {rhs_s}; {body}", prec > _KW)
    if isinstance(e, Assign):
        return _paren(f"{e.name} = {_pp(e.rhs, 0)}", prec > _KW)
    if isinstance(e, If):
        s = f"if {_pp(e.cond, 0)} then {_pp(e.then_e, 0)} else {_pp(e.else_e, 0)}"
        return _paren(s, prec > _KW)
    if isinstance(e, While):
        return _paren(f"while {_pp(e.cond, 0)} do {_pp(e.body, 0)}", prec > _KW)
    if isinstance(e, Match):
        cases = " ".join(f"case {_pp_pat(p)} => {_pp(b, 0)}" for p, b in e.cases)
        return _paren(f"match {_pp(e.scrutinee, 0)} {{ {cases} }}", prec > _KW)
    if isinstance(e, Try):
        s = f"try {_pp_block(e.body)}"
        if e.catch_name is not None:
            s += f" catch {e.catch_name} => {_pp_block(e.handler)}"
        if e.finally_e is not None:
            s += f" finally {_pp_block(e.finally_e)}"
        return _paren(s, prec > _KW)
    if isinstance(e, Throw):
        return _paren(f"throw {_pp(e.msg, 0)}", prec > _KW)
    if isinstance(e, Lambda):
        return _paren(f"fun ({_pp_params(e.params)}) => {_pp(e.body, 0)}", prec > _KW)
    if isinstance(e, Apply):
        fn = e.fn.name if isinstance(e.fn, Var) else f"({_pp(e.fn, 0)})"
        return f"{fn}(" + ", ".join(_pp(a, 0) for a in e.args) + ")"
    if isinstance(e, MethodCall):
        if e.method in SUGAR and len(e.args) == 1:
            op, p = SUGAR[e.method]
            s = f"{_pp(e.recv, p)} {op} {_pp(e.args[0], p + 1)}"
            return _paren(s, prec > p)
        recv = _pp(e.recv, _POSTFIX)
        return f"{recv}.{e.method}(" + ", ".join(_pp(a, 0) for a in e.args) + ")"
    if isinstance(e, Await):
        return f"await({_pp(e.inner, 0)})"
    if isinstance(e, Async):
        return _paren(f"async[{e.monad}] {_pp_block(e.body)}", prec > _KW)

    # --- display-only forms below (not part of the surface grammar) ---
    if isinstance(e, MemoMarker):
        return f"memo({_pp(e.inner, 0)})"
    if isinstance(e, Discard):
        return f"discard({_pp(e.inner, 0)})"
    if isinstance(e, Pure):
        return f"pure({_pp(e.inner, 0)})"
    if isinstance(e, MapM):
        return f"map({_pp(e.src, 0)})(({e.param}) => {_pp(e.body, 0)})"
    if isinstance(e, FlatMapM):
        return f"flatMap({_pp(e.src, 0)})(({e.param}) => {_pp(e.body, 0)})"
    if isinstance(e, FlatMapTryM):
        return (f"flatMapTry({_pp(e.src, 0)})({{ case Success({e.ok_param}) => "
                f"{_pp(e.ok_body, 0)} case Failure({e.err_param}) => {_pp(e.err_body, 0)} }})")
    if isinstance(e, MonadErrorM):
        return f"error({_pp(e.msg, 0)})"
    if isinstance(e, AdoptAwaitM):
        return f"adopt({_pp(e.inner, 0)})"
    if isinstance(e, ConvertM):
        return f"convert[{e.from_monad},{e.to_monad}]({_pp(e.inner, 0)})"
    if isinstance(e, MemoizeM):
        return f"memoize({_pp(e.inner, 0)})"
    if isinstance(e, WhileM):
        return f"whileHelper(() => {_pp(e.cond, 0)}, () => {_pp(e.body, 0)})"
    if isinstance(e, MonadVal):
        return f"monadic[{e.monad}] {{ {_pp(e.inner, 0)} }}"
    if isinstance(e, ShiftedCallM):
        args = ", ".join(_pp_shift_arg(a) for a in e.args)
        recv = _pp(e.recv, _POSTFIX)
        if e.case_tag == "asyncShift-fo":
            return f"shift[{e.recv_kind}.{e.method}]({recv}, {e.monad})({args})"
        if e.case_tag == "asyncShift-o":
            return f"shift[{e.recv_kind}.{e.method}]({recv})({args})"
        if e.case_tag == "inplace-f":
            return f"{recv}.{e.method}Async[{e.monad}]({args})"
        return f"{recv}.{e.method}Async({args})"
    if isinstance(e, ChainAppendM):
        return f"chainAppend({_pp(e.builder, 0)}, {e.op}, {_pp_shift_arg(e.fn)})"
    if isinstance(e, ChainFinishM):
        return f"chainFinish({_pp(e.builder, 0)})"
    raise TypeError(f"unknown node {type(e).__name__}")


def _pp_shift_arg(a: ShiftArg) -> str:
    if isinstance(a, PlainArg):
        return _pp(a.expr, 0)
    if isinstance(a, FnArg):
        return f"({_pp_params(a.params)}) => {_pp(a.body, 0)}"
    return f"() => {_pp(a.body, 0)}"


def _pp_pat(p: Pattern) -> str:
    if isinstance(p, LitPat):
        return _pp_lit(p.value)
    if isinstance(p, WildPat):
        return "_"
    return p.name
