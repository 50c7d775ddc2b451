"""Type checker for MiniCPS.

Annotates every expression with a Ty, enforces await/async placement,
resolves builtin function and method signatures, and records an AwaitInfo
for every await (including whether a cross-monad conversion is needed).

Two modes:

* strict (default): plain bottom-up monomorphic checking.
* coloring: an expression of type F[T] (F = the enclosing async monad) is
  accepted where T is expected; the coercion is recorded by node id so the
  coloring pre-pass can classify variables and insert awaits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .ast import (Apply, Assign, Async, Await, BindPat, Block, BOOL, BOTTOM,
                  ChainAppendM, ChainFinishM, Discard, Expr, FunT, If, INT,
                  Lambda, ListLit, ListT, Lit, LitPat, Match, MemoMarker,
                  MethodCall, MonadT, MonadVal, Program, ReceiverT, STR,
                  Throw, Try, Ty, UNIT, UNITT, ValDef, Var, VarDef, While,
                  WildPat, receiver_kind, walk)
from .monads import ConversionRegistry, default_conversions, MONADS


class TypeCheckError(Exception):
    def __init__(self, span, message, found: Ty | None = None, expected: Ty | None = None):
        self.span = span
        self.message = message
        self.found = found
        self.expected = expected
        detail = message
        if found is not None and expected is not None:
            detail += f" (found {found}, expected {expected})"
        super().__init__(f"{span[0]}:{span[1]}: {detail}")


@dataclass
class AwaitInfo:
    await_nid: int
    inner_monad: str   # G
    enclosing_monad: str  # F
    conversion_needed: bool


@dataclass
class TypeInfo:
    program: Program
    await_infos: list[AwaitInfo]
    coerced: set[int] = field(default_factory=set)  # node ids implicitly awaited
    binding_sites: dict[int, "BindingInfo"] = field(default_factory=dict)


@dataclass
class BindingInfo:
    """Where a name was introduced (for coloring classification)."""

    name: str
    ty: Ty
    is_var: bool
    async_depth: int
    node_nid: int  # ValDef/VarDef nid, or -1 for def params


ERROR_MONADS = frozenset(n for n, d in MONADS.items() if d.has_error)

# By-name positions of builtin methods (0-based argument index).
BYNAME_POSITIONS = {
    ("List", "getOrElse"): frozenset({1}),
    ("Cache", "getOrUpdate"): frozenset({1}),
    ("Cache", "getOrElse"): frozenset({1}),
}

# Impure-for-substitution builtins: the optimizer must not drop or
# duplicate calls to these (counters, I/O, mutation, allocation identity).
IMPURE_FUNCS = frozenset({"effect", "mkfile", "open", "read", "write", "cache", "box"})
IMPURE_METHODS = frozenset({("Cache", "getOrUpdate"), ("Box", "update")})

_FILE = ReceiverT("File")
_RANGE = ReceiverT("Range")
_CACHE = ReceiverT("Cache")
_BOX = ReceiverT("Box")


def walk_same_async(e: Expr):
    """Walk e without descending into nested Async bodies."""
    yield e
    if isinstance(e, Async):
        return
    from .ast import child_exprs
    for c in child_exprs(e):
        yield from walk_same_async(c)


def contains_await(e: Expr) -> bool:
    return any(isinstance(n, (Await, MemoMarker)) for n in walk_same_async(e))


class _Env:
    def __init__(self, parent=None):
        self.parent = parent
        self.table: dict[str, BindingInfo] = {}

    def child(self):
        return _Env(self)

    def bind(self, info: BindingInfo):
        self.table[info.name] = info

    def lookup(self, name):
        env = self
        while env is not None:
            if name in env.table:
                return env.table[name]
            env = env.parent
        return None


class Typer:
    def __init__(self, program: Program, conversions: ConversionRegistry,
                 coloring: bool = False):
        self.program = program
        self.conversions = conversions
        self.coloring = coloring
        self.await_infos: list[AwaitInfo] = []
        self.coerced: set[int] = set()
        self.binding_sites: dict[int, BindingInfo] = {}
        self.monad_stack: list[str] = []
        self._nid = 0

    # -- helpers -------------------------------------------------------------

    def err(self, node, message, found=None, expected=None):
        span = node.span if isinstance(node, Expr) else node
        raise TypeCheckError(span, message, found, expected)

    def depth(self) -> int:
        return len(self.monad_stack)

    def enclosing(self) -> str | None:
        return self.monad_stack[-1] if self.monad_stack else None

    def assign_nids(self):
        self._nid = 0
        for d in self.program.defs:
            for n in walk(d.body):
                self._nid += 1
                n.nid = self._nid
        for n in walk(self.program.main):
            self._nid += 1
            n.nid = self._nid

    def coerce(self, node: Expr, found: Ty, expected: Ty) -> Ty:
        """Unify found against expected, allowing the coloring coercion."""
        if found == expected or found == BOTTOM:
            return expected
        if (self.coloring and self.enclosing() is not None
                and found == MonadT(self.enclosing(), expected)):
            self.coerced.add(node.nid)
            return expected
        self.err(node, "type mismatch", found=found, expected=expected)

    def join(self, node, a: Ty, b: Ty) -> Ty:
        if a == b:
            return a
        if a == BOTTOM:
            return b
        if b == BOTTOM:
            return a
        self.err(node, "branch type mismatch", found=b, expected=a)

    # -- entry ----------------------------------------------------------------

    def run(self) -> TypeInfo:
        self.assign_nids()
        self.defs = {}
        for d in self.program.defs:
            if d.name in self.defs:
                self.err(d.span, f"duplicate def {d.name!r}")
            self.defs[d.name] = d
        for d in self.program.defs:
            env = _Env()
            for pname, pty in d.params:
                info = BindingInfo(pname, pty, False, 0, -1)
                env.bind(info)
            got = self.type_expr(d.body, env)
            if got != d.ret_ty and got != BOTTOM:
                self.err(d.body, f"def {d.name!r} body type mismatch",
                         found=got, expected=d.ret_ty)
        self.type_expr(self.program.main, _Env())
        self.check_lambda_placement()
        return TypeInfo(self.program, self.await_infos, self.coerced, self.binding_sites)

    def check_lambda_placement(self):
        """A lambda containing await must be a direct call argument."""
        def scan(e: Expr, allowed: set[int]):
            for n in walk(e):
                if isinstance(n, Lambda) and n.nid not in allowed and contains_await(n.body):
                    self.err(n, "await in unsupported position: a lambda containing "
                                "await must be a direct call argument")

        allowed = set()
        roots = [d.body for d in self.program.defs] + [self.program.main]
        for root in roots:
            for n in walk(root):
                if isinstance(n, (Apply, MethodCall)):
                    for a in n.args:
                        if isinstance(a, Lambda):
                            allowed.add(a.nid)
        for root in roots:
            scan(root, allowed)

    # -- expressions ---------------------------------------------------------

    def type_expr(self, e: Expr, env: _Env) -> Ty:  # noqa: C901
        t = self._type_expr(e, env)
        e.ty = t
        return t

    def _type_expr(self, e: Expr, env: _Env) -> Ty:  # noqa: C901
        if isinstance(e, Lit):
            v = e.value
            if v is UNIT:
                return UNITT
            if isinstance(v, bool):
                return BOOL
            if isinstance(v, int):
                return INT
            if isinstance(v, str):
                return STR
            self.err(e, f"bad literal {v!r}")
        if isinstance(e, Var):
            info = env.lookup(e.name)
            if info is None:
                self.err(e, f"unknown identifier {e.name!r}")
            return info.ty
        if isinstance(e, ListLit):
            if not e.items:
                self.err(e, "cannot infer the element type of an empty list literal")
            tys = [self.type_expr(x, env) for x in e.items]
            for x, ty in zip(e.items[1:], tys[1:]):
                self.coerce(x, ty, tys[0])
            return ListT(tys[0])
        if isinstance(e, Block):
            last = UNITT
            for s in e.stmts:
                last = self.type_expr(s, env)
            return last
        if isinstance(e, (ValDef, VarDef)):
            rhs_ty = self.type_expr(e.rhs, env)
            if rhs_ty == BOTTOM:
                self.err(e.rhs, "binding a value of the bottom type")
            inner = env.child()
            info = BindingInfo(e.name, rhs_ty, isinstance(e, VarDef), self.depth(), e.nid)
            inner.bind(info)
            self.binding_sites[e.nid] = info
            return self.type_expr(e.body, inner)
        if isinstance(e, Assign):
            info = env.lookup(e.name)
            if info is None:
                self.err(e, f"unknown identifier {e.name!r}")
            if not info.is_var:
                self.err(e, f"cannot assign to val {e.name!r}")
            if info.async_depth != self.depth():
                self.err(e, f"assignment to {e.name!r} defined outside the "
                            "enclosing async block")
            rhs_ty = self.type_expr(e.rhs, env)
            self.coerce(e.rhs, rhs_ty, info.ty)
            return UNITT
        if isinstance(e, If):
            self.coerce(e.cond, self.type_expr(e.cond, env), BOOL)
            a = self.type_expr(e.then_e, env)
            b = self.type_expr(e.else_e, env)
            return self.join(e, a, b)
        if isinstance(e, While):
            self.coerce(e.cond, self.type_expr(e.cond, env), BOOL)
            self.type_expr(e.body, env)
            return UNITT
        if isinstance(e, Match):
            sty = self.type_expr(e.scrutinee, env)
            if not isinstance(e.cases[-1][0], (WildPat, BindPat)):
                self.err(e, "match must end with a catch-all pattern")
            result = None
            for pat, body in e.cases:
                inner = env.child()
                if isinstance(pat, LitPat):
                    lty = {bool: BOOL, int: INT, str: STR}[type(pat.value)]
                    if lty != sty:
                        self.err(body, "pattern type mismatch", found=lty, expected=sty)
                elif isinstance(pat, BindPat):
                    inner.bind(BindingInfo(pat.name, sty, False, self.depth(), body.nid))
                bty = self.type_expr(body, inner)
                result = bty if result is None else self.join(body, result, bty)
            return result
        if isinstance(e, Try):
            self._require_error_monad(e, "try")
            bty = self.type_expr(e.body, env)
            result = bty
            if e.catch_name is not None:
                inner = env.child()
                inner.bind(BindingInfo(e.catch_name, STR, False, self.depth(), -1))
                hty = self.type_expr(e.handler, inner)
                result = self.join(e, bty, hty)
            if e.finally_e is not None:
                self.type_expr(e.finally_e, env)
            return result
        if isinstance(e, Throw):
            self._require_error_monad(e, "throw")
            self.coerce(e.msg, self.type_expr(e.msg, env), STR)
            return BOTTOM
        if isinstance(e, Lambda):
            inner = env.child()
            for pname, pty in e.params:
                inner.bind(BindingInfo(pname, pty, False, self.depth(), -1))
            bty = self.type_expr(e.body, inner)
            return FunT(tuple(t for _, t in e.params), bty)
        if isinstance(e, Await):
            ity = self.type_expr(e.inner, env)
            F = self.enclosing()
            if F is None:
                self.err(e, "await outside async block")
            if not isinstance(ity, MonadT):
                self.err(e, "awaiting a non-monadic value", found=ity,
                         expected=MonadT(F, BOTTOM))
            G = ity.monad
            needed = G != F
            if needed and not self.conversions.has(G, F):
                self.err(e, f"no conversion registered from {G} to {F}")
            self.await_infos.append(AwaitInfo(e.nid, G, F, needed))
            return ity.elem
        if isinstance(e, Async):
            if e.monad not in MONADS:
                self.err(e, f"unknown monad {e.monad!r}")
            self.monad_stack.append(e.monad)
            bty = self.type_expr(e.body, env)
            self.monad_stack.pop()
            if bty == BOTTOM:
                bty = UNITT
            return MonadT(e.monad, bty)
        if isinstance(e, MemoMarker):
            ity = self.type_expr(e.inner, env)
            if not isinstance(ity, MonadT):
                self.err(e, "memoization of a non-monadic value", found=ity)
            return MonadT(ity.monad, ity)
        if isinstance(e, Discard):
            self.type_expr(e.inner, env)
            return UNITT
        if isinstance(e, Apply):
            return self.type_apply(e, env)
        if isinstance(e, MethodCall):
            return self.type_methodcall(e, env)
        self.err(e, f"cannot type node {type(e).__name__}")

    def _require_error_monad(self, e, what):
        F = self.enclosing()
        if F is None:
            self.err(e, f"{what} outside async block")
        if F not in ERROR_MONADS:
            self.err(e, f"{what} requires a monad with an error channel, not {F!r}")

    # -- applications -----------------------------------------------------------

    def type_apply(self, e: Apply, env: _Env) -> Ty:
        if isinstance(e.fn, Var):
            name = e.fn.name
            local = env.lookup(name)
            if local is None:
                if name in self.defs:
                    return self._type_def_call(e, self.defs[name], env)
                if name in BUILTIN_FUNCS:
                    return self._type_builtin_call(e, name, env)
                self.err(e, f"unknown function {name!r}")
            fty = local.ty
            e.fn.ty = fty
        else:
            fty = self.type_expr(e.fn, env)
        if not isinstance(fty, FunT):
            self.err(e, "calling a non-function value", found=fty)
        if len(e.args) != len(fty.params):
            self.err(e, f"expected {len(fty.params)} arguments, got {len(e.args)}")
        for a, pty in zip(e.args, fty.params):
            self.coerce(a, self.type_expr(a, env), pty)
        return fty.ret

    def _type_def_call(self, e: Apply, d, env) -> Ty:
        e.fn.ty = FunT(tuple(t for _, t in d.params), d.ret_ty)
        if len(e.args) != len(d.params):
            self.err(e, f"def {d.name!r} expects {len(d.params)} arguments, "
                        f"got {len(e.args)}")
        for a, (_, pty) in zip(e.args, d.params):
            self.coerce(a, self.type_expr(a, env), pty)
        return d.ret_ty

    def _type_builtin_call(self, e: Apply, name: str, env) -> Ty:
        args = e.args

        def arity(n):
            if len(args) != n:
                self.err(e, f"{name} expects {n} arguments, got {len(args)}")

        def arg(i, expected=None):
            t = self.type_expr(args[i], env)
            if expected is not None:
                self.coerce(args[i], t, expected)
                return expected
            return t

        if name == "some":
            arity(1)
            return MonadT("option", arg(0))
        if name == "none":
            arity(0)
            return MonadT("option", INT)
        if name == "opt_if":
            arity(2)
            arg(0, BOOL)
            return MonadT("option", arg(1))
        if name == "ok":
            arity(1)
            return MonadT("result", arg(0))
        if name == "err":
            arity(1)
            arg(0, STR)
            return MonadT("result", INT)
        if name == "res_if":
            arity(3)
            arg(0, BOOL)
            t = arg(1)
            arg(2, STR)
            return MonadT("result", t)
        if name == "choose":
            arity(1)
            t = arg(0)
            if not isinstance(t, ListT):
                self.err(args[0], "choose expects a list", found=t)
            return MonadT("nondet", t.elem)
        if name == "pure_ident":
            arity(1)
            return MonadT("ident", arg(0))
        if name == "delay":
            arity(1)
            return MonadT("eventual", arg(0))
        if name == "never":
            arity(0)
            return MonadT("eventual", INT)
        if name == "effect":
            arity(2)
            F = self.enclosing()
            if F is None:
                self.err(e, "effect used outside an async block")
            arg(0, STR)
            t = arg(1)
            e.builtin_monad = F
            return MonadT(F, t)
        if name == "mkfile":
            arity(2)
            arg(0, STR)
            arg(1, INT)
            return UNITT
        if name == "open":
            arity(2)
            arg(0, STR)
            arg(1, STR)
            return MonadT("resource", _FILE)
        if name == "read":
            arity(2)
            arg(0, _FILE)
            arg(1, INT)
            return MonadT("resource", STR)
        if name == "write":
            arity(2)
            arg(0, _FILE)
            arg(1, STR)
            return MonadT("resource", UNITT)
        if name == "range":
            arity(2)
            arg(0, INT)
            arg(1, INT)
            return _RANGE
        if name == "cache":
            arity(0)
            return _CACHE
        if name == "box":
            arity(1)
            arg(0, INT)
            return _BOX
        raise AssertionError(name)

    # -- method calls -------------------------------------------------------------

    def type_methodcall(self, e: MethodCall, env: _Env) -> Ty:  # noqa: C901
        rty = self.type_expr(e.recv, env)
        # Coloring: F[T] receivers are implicitly awaited (methods live on T).
        if (self.coloring and isinstance(rty, MonadT) and rty.monad == self.enclosing()
                and self._has_method(rty.elem, e.method)):
            self.coerced.add(e.recv.nid)
            rty = rty.elem
        m = e.method
        args = e.args

        def arity(n):
            if len(args) != n:
                self.err(e, f"{m} expects {n} arguments, got {len(args)}")

        def check(i, expected):
            self.coerce(args[i], self.type_expr(args[i], env), expected)

        def fn_arg(i, expect_params, ret_expected=None) -> Ty:
            """Type a function-typed argument; returns its result type."""
            t = self.type_expr(args[i], env)
            if not isinstance(t, FunT):
                self.err(args[i], f"{m} expects a function argument", found=t)
            if tuple(t.params) != tuple(expect_params):
                self.err(args[i], "function argument parameter type mismatch",
                         found=FunT(tuple(t.params), t.ret),
                         expected=FunT(tuple(expect_params), ret_expected or t.ret))
            if ret_expected is not None and t.ret != ret_expected:
                self.err(args[i], "function argument result type mismatch",
                         found=t.ret, expected=ret_expected)
            return t.ret

        if rty in (INT, STR, BOOL):
            return self._type_scalar_method(e, rty, env)
        if isinstance(rty, ListT):
            elem = rty.elem
            if m == "size":
                arity(0)
                return INT
            if m == "append":
                arity(1)
                check(0, elem)
                return rty
            if m == "getOrElse":
                arity(2)
                check(0, INT)
                check(1, elem)  # by-name
                return elem
            if m == "map":
                arity(1)
                return ListT(fn_arg(0, (elem,)))
            if m in ("filter", "withFilter"):
                arity(1)
                fn_arg(0, (elem,), BOOL)
                return rty
            if m == "foreach":
                arity(1)
                fn_arg(0, (elem,))
                return UNITT
            if m == "exists":
                arity(1)
                fn_arg(0, (elem,), BOOL)
                return BOOL
            if m == "fold":
                arity(2)
                acc = self.type_expr(args[0], env)
                fn_arg(1, (acc, elem), acc)
                return acc
            self.err(e, f"unknown method List.{m}")
        if rty == _RANGE:
            if m == "foreach":
                arity(1)
                fn_arg(0, (INT,))
                return UNITT
            if m == "filter":
                arity(1)
                fn_arg(0, (INT,), BOOL)
                return ListT(INT)
            if m == "map":
                arity(1)
                fn_arg(0, (INT,), INT)
                return ListT(INT)
            if m == "toList":
                arity(0)
                return ListT(INT)
            self.err(e, f"unknown method Range.{m}")
        if rty == _CACHE:
            if m == "getOrUpdate":
                arity(2)
                check(0, INT)
                check(1, INT)  # by-name
                return INT
            if m == "getOrElse":
                arity(2)
                check(0, INT)
                check(1, INT)  # by-name
                return INT
            self.err(e, f"unknown method Cache.{m}")
        if rty == _BOX:
            if m == "map":
                arity(1)
                fn_arg(0, (INT,), INT)
                return _BOX
            if m == "update":
                arity(1)
                fn_arg(0, (INT,), INT)
                return UNITT
            if m == "get":
                arity(0)
                return INT
            self.err(e, f"unknown method Box.{m}")
        self.err(e, f"type {rty} has no method {m!r}")

    def _type_scalar_method(self, e: MethodCall, rty: Ty, env) -> Ty:
        m, args = e.method, e.args
        if len(args) != 1 and m not in ("size",):
            self.err(e, f"{m} expects 1 argument")
        if rty == INT:
            if m in ("plus", "minus", "times", "div"):
                self.coerce(args[0], self.type_expr(args[0], env), INT)
                return INT
            if m in ("lt", "le", "gt", "ge", "eq", "ne"):
                self.coerce(args[0], self.type_expr(args[0], env), INT)
                return BOOL
        if rty == BOOL:
            if m in ("and", "or"):
                self.coerce(args[0], self.type_expr(args[0], env), BOOL)
                return BOOL
            if m in ("eq", "ne"):
                self.coerce(args[0], self.type_expr(args[0], env), BOOL)
                return BOOL
        if rty == STR:
            if m == "size":
                if args:
                    self.err(e, "size expects no arguments")
                return INT
            if m == "plus":
                self.coerce(args[0], self.type_expr(args[0], env), STR)
                return STR
            if m in ("eq", "ne"):
                self.coerce(args[0], self.type_expr(args[0], env), STR)
                return BOOL
        self.err(e, f"type {rty} has no method {e.method!r}")

    def _has_method(self, ty: Ty, method: str) -> bool:
        if isinstance(ty, ListT):
            return method in ("size", "append", "getOrElse", "map", "filter",
                              "withFilter", "foreach", "exists", "fold")
        if ty == _RANGE:
            return method in ("foreach", "filter", "map", "toList")
        if ty == _CACHE:
            return method in ("getOrUpdate", "getOrElse")
        if ty == _BOX:
            return method in ("map", "update", "get")
        if ty in (INT, BOOL, STR):
            return method in ("plus", "minus", "times", "div", "lt", "le", "gt",
                              "ge", "eq", "ne", "and", "or", "size")
        return False


BUILTIN_FUNCS = frozenset({
    "some", "none", "opt_if", "ok", "err", "res_if", "choose", "pure_ident",
    "delay", "never", "effect", "mkfile", "open", "read", "write", "range",
    "cache", "box",
})


def typecheck(program: Program, conversions: ConversionRegistry | None = None,
              coloring: bool = False) -> TypeInfo:
    """Type the program in place and return typing facts.

    Raises TypeCheckError at the first error in program order. Idempotent:
    node ids and annotations are recomputed deterministically.
    """
    if conversions is None:
        conversions = default_conversions()
    return Typer(program, conversions, coloring).run()


# -- side-effect analysis (used by the optimizer's substitution guard) -------

def _node_impure(e: Expr) -> bool:
    if isinstance(e, (Assign, Discard, MemoMarker)):
        return True
    if isinstance(e, Apply) and isinstance(e.fn, Var) and e.fn.name in IMPURE_FUNCS:
        return True
    if isinstance(e, MethodCall):
        kind = receiver_kind(e.recv.ty) if e.recv.ty is not None else None
        if kind is not None and (kind, e.method) in IMPURE_METHODS:
            return True
    return False


def compute_def_effects(program: Program) -> dict[str, bool]:
    """name -> True when calling the def may have observable side effects."""
    effects: dict[str, bool] = {}

    def body_impure(d, seen) -> bool:
        if d.name in effects:
            return effects[d.name]
        if d.name in seen:
            return True  # recursive: conservatively impure
        seen = seen | {d.name}
        for n in walk(d.body):
            if _node_impure(n) or isinstance(n, (Await, Throw, Async)):
                return True
            if isinstance(n, Apply) and isinstance(n.fn, Var):
                callee = next((x for x in program.defs if x.name == n.fn.name), None)
                if callee is not None and body_impure(callee, seen):
                    return True
        return False

    for d in program.defs:
        effects[d.name] = body_impure(d, frozenset())
    return effects


def has_side_effects(e: Expr, def_effects: dict[str, bool]) -> bool:
    """True when evaluating e twice (or zero times) is observable."""
    for n in walk(e):
        if _node_impure(n):
            return True
        if isinstance(n, (Await, Throw)):
            return True
        if isinstance(n, (Async, MonadVal, ChainAppendM, ChainFinishM)):
            return True  # value construction may schedule/count
        if isinstance(n, Apply) and isinstance(n.fn, Var) and def_effects.get(n.fn.name):
            return True
    return False
