"""The monadic CPS transformer.

Rewrites a typed async body into monadic style: no Await survives; control
flow becomes Pure / Map / FlatMap / FlatMapTry / MonadError / AdoptAwait /
Convert / whileHelper calls plus residual direct syntax.

With optimization on, unit-law merges apply: binds of pure sources are
substituted away (only when the substituted expression is side-effect
free), trivial subtrees collapse to a single pure(...), control flow is
specialized per the triviality of its parts, and nested binds are
reassociated so straight-line code normalizes to one FlatMap per await.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields as dc_fields

from .ast import (AdoptAwaitM, Apply, Assign, Async, Await, Block,
                  ChainAppendM, ChainFinishM, ConvertM, Discard, Expr, FlatMapM,
                  FlatMapTryM, FnArg, FunT, If, Lambda, ListLit, Lit, MapM,
                  Match, MemoizeM, MemoMarker, MethodCall, MonadErrorM,
                  MonadVal, Pattern, BindPat, PlainArg, Program, Pure,
                  ShiftedCallM, ThunkArg, Throw, Try, ValDef, Var, VarDef,
                  While, WhileM, receiver_kind, walk)
from .monads import while_helper  # noqa: F401  (runtime support, re-exported)
from .shiftlib import (CALLCHAIN, CHAIN_OP_NAMES, LambdaArgInfo, PLAIN,
                       Resolution, ShiftResolutionError, WITHFILTER_TWO_PASS,
                       monadic_lambda_ret, resolve)
from .typer import (BYNAME_POSITIONS, TypeInfo, compute_def_effects,
                    has_side_effects, walk_same_async)


@dataclass
class TransformOptions:
    optimize: bool = True
    coloring: bool = False
    trace: bool = False
    use_callchain: bool = True


@dataclass
class CpsResult:
    transformed: Expr
    is_trivial: bool
    rule_trace: list[tuple[int, tuple[int, int], str]]  # (nid, span, rule)


@dataclass
class Cps:
    expr: Expr
    trivial: bool = False
    chain: bool = False


def count_awaits(body: Expr) -> int:
    """Awaits belonging to this async body (nested async bodies excluded)."""
    return sum(1 for n in walk_same_async(body) if isinstance(n, Await))


def count_binds(transformed: Expr) -> int:
    """FlatMap + FlatMapTry + Map nodes, not descending into nested blocks."""
    def go(e):
        total = 1 if isinstance(e, (FlatMapM, FlatMapTryM, MapM)) else 0
        if isinstance(e, MonadVal):
            return total
        from .ast import child_exprs
        return total + sum(go(c) for c in child_exprs(e))
    return go(transformed)


# ---------------------------------------------------------------------------
# Capture-avoiding substitution
# ---------------------------------------------------------------------------

def free_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Assign):
        return {e.name} | free_vars(e.rhs)
    if isinstance(e, (ValDef, VarDef)):
        return free_vars(e.rhs) | (free_vars(e.body) - {e.name})
    if isinstance(e, Lambda):
        return free_vars(e.body) - {p for p, _ in e.params}
    if isinstance(e, Match):
        out = free_vars(e.scrutinee)
        for pat, body in e.cases:
            bound = {pat.name} if isinstance(pat, BindPat) else set()
            out |= free_vars(body) - bound
        return out
    if isinstance(e, Try):
        out = free_vars(e.body)
        if e.handler is not None:
            out |= free_vars(e.handler) - {e.catch_name}
        if e.finally_e is not None:
            out |= free_vars(e.finally_e)
        return out
    if isinstance(e, (FlatMapM, MapM)):
        return free_vars(e.src) | (free_vars(e.body) - {e.param})
    if isinstance(e, FlatMapTryM):
        return (free_vars(e.src) | (free_vars(e.ok_body) - {e.ok_param})
                | (free_vars(e.err_body) - {e.err_param}))
    if isinstance(e, ShiftedCallM):
        out = free_vars(e.recv)
        for a in e.args:
            if isinstance(a, PlainArg):
                out |= free_vars(a.expr)
            elif isinstance(a, FnArg):
                out |= free_vars(a.body) - {p for p, _ in a.params}
            else:
                out |= free_vars(a.body)
        return out
    if isinstance(e, ChainAppendM):
        return free_vars(e.builder) | (free_vars(e.fn.body)
                                       - {p for p, _ in e.fn.params})
    from .ast import child_exprs
    out = set()
    for c in child_exprs(e):
        out |= free_vars(c)
    return out


class _Subst:
    """Substitute a variable by a pure expression, avoiding capture."""

    def __init__(self, fresh):
        self.fresh = fresh

    def __call__(self, e: Expr, name: str, rep: Expr) -> Expr:
        self.rep_fv = free_vars(rep)
        return self.go(e, name, rep)

    def _clone(self, e: Expr, **updates) -> Expr:
        new = copy.copy(e)
        for k, v in updates.items():
            setattr(new, k, v)
        return new

    def _avoid(self, bound: str, e_body, name, rep):
        """Rename `bound` in e_body when it would capture rep's free vars."""
        if bound in self.rep_fv and name in free_vars(e_body):
            nb = self.fresh(bound)
            e_body = self.go(e_body, bound, Var(nb))
            return nb, e_body
        return bound, e_body

    def go(self, e: Expr, name: str, rep: Expr) -> Expr:  # noqa: C901
        if isinstance(e, Var):
            return copy.copy(rep) if e.name == name else e
        if isinstance(e, Assign):
            if e.name == name:
                if not isinstance(rep, Var):
                    raise AssertionError("substituting non-variable into assignment target")
                return self._clone(e, name=rep.name, rhs=self.go(e.rhs, name, rep))
            return self._clone(e, rhs=self.go(e.rhs, name, rep))
        if isinstance(e, (ValDef, VarDef)):
            rhs = self.go(e.rhs, name, rep)
            if e.name == name:
                return self._clone(e, rhs=rhs)
            bound, body = self._avoid(e.name, e.body, name, rep)
            return self._clone(e, name=bound, rhs=rhs, body=self.go(body, name, rep))
        if isinstance(e, Lambda):
            if any(p == name for p, _ in e.params):
                return e
            params, body = list(e.params), e.body
            for i, (p, t) in enumerate(params):
                p2, body = self._avoid(p, body, name, rep)
                params[i] = (p2, t)
            return self._clone(e, params=params, body=self.go(body, name, rep))
        if isinstance(e, Match):
            scrut = self.go(e.scrutinee, name, rep)
            cases = []
            for pat, body in e.cases:
                if isinstance(pat, BindPat):
                    if pat.name == name:
                        cases.append((pat, body))
                        continue
                    nb, body = self._avoid(pat.name, body, name, rep)
                    pat = BindPat(nb) if nb != pat.name else pat
                cases.append((pat, self.go(body, name, rep)))
            return self._clone(e, scrutinee=scrut, cases=cases)
        if isinstance(e, Try):
            body = self.go(e.body, name, rep)
            handler, catch = e.handler, e.catch_name
            if handler is not None and catch != name:
                catch, handler = self._avoid(catch, handler, name, rep)
                handler = self.go(handler, name, rep)
            fin = self.go(e.finally_e, name, rep) if e.finally_e is not None else None
            return self._clone(e, body=body, catch_name=catch, handler=handler,
                               finally_e=fin)
        if isinstance(e, (FlatMapM, MapM)):
            src = self.go(e.src, name, rep)
            if e.param == name:
                return self._clone(e, src=src)
            param, body = self._avoid(e.param, e.body, name, rep)
            return self._clone(e, src=src, param=param, body=self.go(body, name, rep))
        if isinstance(e, FlatMapTryM):
            src = self.go(e.src, name, rep)
            okp, okb = e.ok_param, e.ok_body
            if okp != name:
                okp, okb = self._avoid(okp, okb, name, rep)
                okb = self.go(okb, name, rep)
            errp, errb = e.err_param, e.err_body
            if errp != name:
                errp, errb = self._avoid(errp, errb, name, rep)
                errb = self.go(errb, name, rep)
            return self._clone(e, src=src, ok_param=okp, ok_body=okb,
                               err_param=errp, err_body=errb)
        if isinstance(e, ShiftedCallM):
            args = []
            for a in e.args:
                if isinstance(a, PlainArg):
                    args.append(PlainArg(self.go(a.expr, name, rep)))
                elif isinstance(a, FnArg):
                    if any(p == name for p, _ in a.params):
                        args.append(a)
                        continue
                    params, body = list(a.params), a.body
                    for i, (p, t) in enumerate(params):
                        p2, body = self._avoid(p, body, name, rep)
                        params[i] = (p2, t)
                    args.append(FnArg(params, self.go(body, name, rep)))
                else:
                    args.append(ThunkArg(self.go(a.body, name, rep)))
            return self._clone(e, recv=self.go(e.recv, name, rep), args=args)
        if isinstance(e, ChainAppendM):
            fn = e.fn
            if not any(p == name for p, _ in fn.params):
                params, body = list(fn.params), fn.body
                for i, (p, t) in enumerate(params):
                    p2, body = self._avoid(p, body, name, rep)
                    params[i] = (p2, t)
                fn = FnArg(params, self.go(body, name, rep))
            return self._clone(e, builder=self.go(e.builder, name, rep), fn=fn)
        # generic: rebuild Expr-bearing fields
        updates = {}
        for f in dc_fields(e):
            v = getattr(e, f.name)
            if isinstance(v, Expr):
                updates[f.name] = self.go(v, name, rep)
            elif isinstance(v, list) and v and isinstance(v[0], Expr):
                updates[f.name] = [self.go(x, name, rep) for x in v]
        return self._clone(e, **updates) if updates else e


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------

RULE_NAMES = {
    Block: "sequential", ValDef: "val", VarDef: "val", Assign: "assign",
    If: "condition", Match: "match", While: "while", Try: "try",
    Throw: "throw", Lambda: "lambda", Apply: "application",
    MethodCall: "application", ListLit: "application", Await: "await",
    MonadVal: "nested-async", MemoMarker: "memoize", Discard: "discard",
}


class Transformer:
    def __init__(self, monad: str, opts: TransformOptions, type_info: TypeInfo,
                 def_effects: dict[str, bool]):
        self.F = monad
        self.opts = opts
        self.awaits = {i.await_nid: i for i in type_info.await_infos}
        self.def_effects = def_effects
        self.trace: list[tuple[int, tuple[int, int], str]] = []
        self._fresh = 0
        self.subst = _Subst(self.fresh)

    # -- plumbing ----------------------------------------------------------

    def fresh(self, base: str) -> str:
        self._fresh += 1
        root = base.split("$")[0] or "t"
        return f"{root}${self._fresh}"

    def tr(self, e: Expr, rule: str):
        self.trace.append((e.nid, e.span, rule))

    def blocks_pure(self, e: Expr) -> bool:
        return any(isinstance(n, (Await, Throw, MemoMarker)) for n in walk(e))

    def substitutable(self, e: Expr) -> bool:
        return not has_side_effects(e, self.def_effects)

    def force(self, c: Cps) -> Expr:
        if c.chain:
            return ChainFinishM(self.F, c.expr)
        return c.expr

    # -- smart constructors -----------------------------------------------

    def mk_flatmap(self, src: Expr, param: str, body: Expr) -> Expr:
        if self.opts.optimize:
            if isinstance(src, Pure) and self.substitutable(src.inner):
                return self.subst(body, param, src.inner)
            if isinstance(src, FlatMapM):
                return FlatMapM(self.F, src.src, src.param,
                                self.mk_flatmap(src.body, param, body))
            if isinstance(src, MapM) and self.substitutable(src.body):
                return FlatMapM(self.F, src.src, src.param,
                                self.subst(body, param, src.body))
        return FlatMapM(self.F, src, param, body)

    def mk_map(self, src: Expr, param: str, body: Expr) -> Expr:
        if self.opts.optimize and isinstance(src, Pure) and self.substitutable(src.inner):
            return Pure(self.F, self.subst(body, param, src.inner))
        return MapM(self.F, src, param, body)

    def bind_chain(self, binds: list[tuple[str, Expr]], tail: Expr) -> Expr:
        for p, m in reversed(binds):
            tail = self.mk_flatmap(m, p, tail)
        return tail

    # -- transformation ------------------------------------------------------

    def transform(self, body: Expr) -> CpsResult:
        c = self.C(body)
        return CpsResult(self.force(c), c.trivial and not c.chain, self.trace)

    def C(self, e: Expr) -> Cps:  # noqa: C901
        rule = RULE_NAMES.get(type(e), "trivial")
        if isinstance(e, (Lit, Var)):
            self.tr(e, "trivial")
            return Cps(Pure(self.F, e), trivial=True)
        if isinstance(e, MonadVal):
            self.tr(e, "nested-async")
            return Cps(Pure(self.F, e), trivial=True)
        self.tr(e, rule)
        if self.opts.optimize and not self.blocks_pure(e):
            return Cps(Pure(self.F, e), trivial=True)

        if isinstance(e, Block):
            return self._seq(e.stmts)
        if isinstance(e, (ValDef, VarDef)):
            return self._valdef(e)
        if isinstance(e, Assign):
            rhs_c = self.C(e.rhs)
            if rhs_c.trivial:
                return Cps(Pure(self.F, e))
            v = self.fresh("a")
            tail = Pure(self.F, Assign(e.name, Var(v), span=e.span))
            return Cps(self.mk_flatmap(self.force(rhs_c), v, tail))
        if isinstance(e, If):
            return self._if(e)
        if isinstance(e, Match):
            return self._match(e)
        if isinstance(e, While):
            cond_c = self.C(e.cond)
            body_c = self.C(e.body)
            return Cps(WhileM(self.F, self.force(cond_c), self.force(body_c),
                              span=e.span))
        if isinstance(e, Try):
            return self._try(e)
        if isinstance(e, Throw):
            msg_c = self.C(e.msg)
            if msg_c.trivial:
                return Cps(MonadErrorM(self.F, e.msg, span=e.span))
            v = self.fresh("m")
            return Cps(self.mk_flatmap(self.force(msg_c), v,
                                       MonadErrorM(self.F, Var(v), span=e.span)))
        if isinstance(e, Lambda):
            # standalone lambdas are pure by the typer's placement rule
            return Cps(Pure(self.F, e), trivial=True)
        if isinstance(e, Await):
            return self._await(e)
        if isinstance(e, MemoMarker):
            inner_c = self.C(e.inner)
            if inner_c.trivial:
                return Cps(MemoizeM(self.F, e.inner, span=e.span))
            v = self.fresh("mm")
            return Cps(self.mk_flatmap(self.force(inner_c), v,
                                       MemoizeM(self.F, Var(v), span=e.span)))
        if isinstance(e, Discard):
            inner_c = self.C(e.inner)
            if inner_c.trivial:
                return Cps(Pure(self.F, e))
            v = self.fresh("d")
            tail = Pure(self.F, Discard(Var(v), e.discard_ty, span=e.span))
            return Cps(self.mk_flatmap(self.force(inner_c), v, tail))
        if isinstance(e, ListLit):
            binds, outs = self._bind_positional(e.items)
            lit = ListLit(outs, span=e.span)
            lit.ty = e.ty
            return self._wrap_call(binds, lit)
        if isinstance(e, Apply):
            return self._apply(e)
        if isinstance(e, MethodCall):
            return self._methodcall(e)
        raise AssertionError(f"untransformable node {type(e).__name__}")

    # -- individual rules ------------------------------------------------------

    def _seq(self, stmts: list[Expr]) -> Cps:
        if len(stmts) == 1:
            return self.C(stmts[0])
        head = self.C(stmts[0])
        rest = self._seq(stmts[1:])
        return Cps(self.mk_flatmap(self.force(head), "_", self.force(rest)))

    def _valdef(self, e) -> Cps:
        rhs_c = self.C(e.rhs)
        if isinstance(e, VarDef):
            body_c = self.C(e.body)
            if rhs_c.trivial and self.opts.optimize:
                return Cps(VarDef(e.name, e.rhs, self.force(body_c), span=e.span))
            v = self.fresh(e.name)
            return Cps(self.mk_flatmap(
                self.force(rhs_c), v,
                VarDef(e.name, Var(v), self.force(body_c), span=e.span)))
        x2 = self.fresh(e.name)
        body = self.subst(e.body, e.name, Var(x2))
        body_c = self.C(body)
        return Cps(self.mk_flatmap(self.force(rhs_c), x2, self.force(body_c)))

    def _if(self, e) -> Cps:
        cond_c = self.C(e.cond)
        then_c = self.C(e.then_e)
        else_c = self.C(e.else_e)
        if self.opts.optimize and cond_c.trivial:
            out = If(e.cond, self.force(then_c), self.force(else_c), span=e.span)
            return Cps(out)
        v = self.fresh("c")
        out = If(Var(v), self.force(then_c), self.force(else_c), span=e.span)
        return Cps(self.mk_flatmap(self.force(cond_c), v, out))

    def _match(self, e) -> Cps:
        scrut_c = self.C(e.scrutinee)
        cases = [(pat, self.force(self.C(body))) for pat, body in e.cases]
        if self.opts.optimize and scrut_c.trivial:
            return Cps(Match(e.scrutinee, cases, span=e.span))
        v = self.fresh("s")
        return Cps(self.mk_flatmap(self.force(scrut_c), v,
                                   Match(Var(v), cases, span=e.span)))

    def _try(self, e) -> Cps:
        body_c = self.C(e.body)
        okp = self.fresh("v")
        if e.catch_name is not None:
            err_param = e.catch_name
            err_body = self.force(self.C(e.handler))
        else:
            err_param = self.fresh("e")
            err_body = MonadErrorM(self.F, Var(err_param), span=e.span)
        core = FlatMapTryM(self.F, self.force(body_c), okp,
                           Pure(self.F, Var(okp)), err_param, err_body, span=e.span)
        if e.finally_e is not None:
            fin_c = self.C(e.finally_e)
            if not (self.opts.optimize and fin_c.trivial):
                x = self.fresh("x")
                core = self.mk_flatmap(core, x,
                                       self.mk_map(self.force(fin_c), "_", Var(x)))
        return Cps(core)

    def _await(self, e) -> Cps:
        info = self.awaits.get(e.nid)
        if info is None:
            raise AssertionError("await without AwaitInfo (typer skipped?)")
        inner_c = self.C(e.inner)

        def adopt(x: Expr) -> Expr:
            if info.conversion_needed:
                x = ConvertM(info.inner_monad, self.F, x, span=e.span)
            return AdoptAwaitM(self.F, e.nid, x, span=e.span)

        if inner_c.trivial:
            return Cps(adopt(e.inner))
        v = self.fresh("w")
        return Cps(self.mk_flatmap(self.force(inner_c), v, adopt(Var(v))))

    # -- applications ------------------------------------------------------------

    def _bind_positional(self, exprs: list[Expr]):
        """Pre-bind effectful (and order-sensitive impure) value arguments."""
        eff = [self.blocks_pure(x) for x in exprs]
        last = max((i for i, b in enumerate(eff) if b), default=-1)
        binds: list[tuple[str, Expr]] = []
        outs: list[Expr] = []
        for i, x in enumerate(exprs):
            must_bind = eff[i] or (not self.opts.optimize and not isinstance(x, Lambda))
            order_bind = (i < last and not self.substitutable(x))
            if must_bind or order_bind:
                p = self.fresh("a")
                mexpr = self.force(self.C(x)) if eff[i] else Pure(self.F, x)
                binds.append((p, mexpr))
                out = Var(p)
                out.ty = x.ty
                outs.append(out)
            else:
                outs.append(x)
        return binds, outs

    def _wrap_call(self, binds, residual: Expr) -> Cps:
        return Cps(self.bind_chain(binds, Pure(self.F, residual)))

    def _flatten_lambda(self, lam: Lambda) -> Lambda:
        """Monadic case: body already returns F[B']; flatten C(body)."""
        body_m = self.force(self.C(lam.body))
        v = self.fresh("h")
        flat = FlatMapM(self.F, body_m, v, Var(v))
        out = Lambda(lam.params, flat, span=lam.span)
        out.ty = lam.ty
        return out

    def _shift_fn_arg(self, arg: Expr) -> FnArg:
        if isinstance(arg, Lambda):
            return FnArg(arg.params, self.force(self.C(arg.body)))
        # function-valued expression: eta-expand into a shifted wrapper
        assert isinstance(arg.ty, FunT)
        params = [(self.fresh("p"), t) for t in arg.ty.params]
        call = Apply(arg, [Var(p) for p, _ in params])
        call.ty = arg.ty.ret
        return FnArg(params, Pure(self.F, call))

    def _lambda_infos(self, fn_slots: list[Expr]) -> list[LambdaArgInfo]:
        infos = []
        for a in fn_slots:
            eff = self.blocks_pure(a)
            mret = isinstance(a, Lambda) and monadic_lambda_ret(a.ty, self.F)
            infos.append(LambdaArgInfo(eff, mret))
        return infos

    def _apply(self, e: Apply) -> Cps:
        fn_is_name = isinstance(e.fn, Var)
        positional = [a for a in e.args if not isinstance(a, Lambda)]
        lambdas = [a for a in e.args if isinstance(a, Lambda)]
        infos = self._lambda_infos(lambdas)
        if any(i.effectful for i in infos):
            if not all(i.monadic_ret for i in infos if i.effectful):
                name = e.fn.name if fn_is_name else "<function>"
                err = ShiftResolutionError("function", name)
                err.span = e.span
                raise err
        pieces = positional if fn_is_name else [e.fn] + positional
        binds, outs = self._bind_positional(pieces)
        it = iter(outs if fn_is_name else outs[1:])
        fn_out = e.fn if fn_is_name else outs[0]
        new_args = []
        for a in e.args:
            if isinstance(a, Lambda):
                new_args.append(self._flatten_lambda(a) if self.blocks_pure(a) else a)
            else:
                new_args.append(next(it))
        call = Apply(fn_out, new_args, span=e.span)
        call.ty = e.ty
        if hasattr(e, "builtin_monad"):
            call.builtin_monad = e.builtin_monad
        return self._wrap_call(binds, call)

    def _methodcall(self, e: MethodCall) -> Cps:  # noqa: C901
        kind = receiver_kind(e.recv.ty)
        byname = BYNAME_POSITIONS.get((kind, e.method), frozenset())

        recv_c = self.C(e.recv)
        if recv_c.chain:
            if e.method in CHAIN_OP_NAMES and self.opts.use_callchain:
                fn = self._shift_fn_arg(e.args[0])
                out = ChainAppendM(self.F, recv_c.expr, e.method, fn, span=e.span)
                return Cps(out, chain=True)
            recv_c = Cps(ChainFinishM(self.F, recv_c.expr, span=e.span))

        fn_slots = [a for i, a in enumerate(e.args)
                    if isinstance(a, Lambda) or i in byname]
        plain_idx = [i for i, a in enumerate(e.args)
                     if not (isinstance(a, Lambda) or i in byname)]
        plain_exprs = [e.args[i] for i in plain_idx]

        binds: list[tuple[str, Expr]] = []
        args_effectful = any(self.blocks_pure(x) for x in plain_exprs)
        if not recv_c.trivial:
            p = self.fresh("r")
            binds.append((p, recv_c.expr))
            recv_out = Var(p)
            recv_out.ty = e.recv.ty
        elif args_effectful and not self.substitutable(e.recv):
            # impure receiver evaluates before effectful args: pre-bind it
            p = self.fresh("r")
            binds.append((p, Pure(self.F, e.recv)))
            recv_out = Var(p)
            recv_out.ty = e.recv.ty
        else:
            recv_out = e.recv

        arg_binds, plain_outs = self._bind_positional(plain_exprs)
        binds.extend(arg_binds)
        outs_by_idx = dict(zip(plain_idx, plain_outs))

        infos = self._lambda_infos(fn_slots)
        try:
            res = resolve(e.recv.ty, e.method, infos, self.F, self.opts.use_callchain)
        except ShiftResolutionError as err:
            err.span = e.span
            raise

        if res.kind in ("unchanged", "monadic"):
            new_args = []
            for i, a in enumerate(e.args):
                if isinstance(a, Lambda):
                    if res.kind == "monadic" and self.blocks_pure(a):
                        new_args.append(self._flatten_lambda(a))
                    else:
                        new_args.append(a)
                elif i in byname:
                    new_args.append(a)
                else:
                    new_args.append(outs_by_idx[i])
            call = MethodCall(recv_out, e.method, new_args, span=e.span)
            call.ty = e.ty
            return self._wrap_call(binds, call)

        entry = res.entry
        if entry.return_kind == CALLCHAIN and binds:
            # a chain source needing prior binds gains nothing: use two passes
            entry = WITHFILTER_TWO_PASS
        shift_args: list = []
        for i, a in enumerate(e.args):
            if isinstance(a, Lambda):
                shift_args.append(self._shift_fn_arg(a))
            elif i in byname:
                shift_args.append(ThunkArg(self.force(self.C(a))))
            elif isinstance(a.ty, FunT):
                shift_args.append(self._shift_fn_arg(outs_by_idx[i]))
            else:
                shift_args.append(PlainArg(outs_by_idx[i]))
        node = ShiftedCallM(self.F, entry.recv_kind, e.method, entry.case_tag,
                            entry.return_kind, recv_out, shift_args, span=e.span)
        node.ty = e.ty
        if entry.return_kind == CALLCHAIN:
            return Cps(node, chain=True)
        return Cps(self.bind_chain(binds, node))


# ---------------------------------------------------------------------------
# Whole-program transformation
# ---------------------------------------------------------------------------

def transform(body: Expr, monad: str, opts: TransformOptions,
              type_info: TypeInfo, def_effects=None) -> CpsResult:
    """Transform one typed async body for enclosing monad `monad`.

    The input tree is left untouched (the oracle may still need it).
    """
    if def_effects is None:
        def_effects = compute_def_effects(type_info.program)
    body = _rewrite_nested(copy.deepcopy(body), opts, type_info, def_effects)
    return Transformer(monad, opts, type_info, def_effects).transform(body)


def _map_children(e: Expr, fn):
    for f in dc_fields(e):
        v = getattr(e, f.name)
        if isinstance(v, Expr):
            setattr(e, f.name, fn(v))
        elif isinstance(v, list):
            new = []
            for x in v:
                if isinstance(x, Expr):
                    new.append(fn(x))
                elif isinstance(x, tuple) and len(x) == 2 and isinstance(x[1], Expr):
                    new.append((x[0], fn(x[1])))
                else:
                    new.append(x)
            setattr(e, f.name, new)
    return e


def _rewrite_nested(e: Expr, opts, type_info, def_effects) -> Expr:
    """Replace nested Async nodes (innermost first) by transformed values."""
    def go(n: Expr) -> Expr:
        _map_children(n, go)
        if isinstance(n, Async):
            inner = Transformer(n.monad, opts, type_info, def_effects).transform(n.body)
            out = MonadVal(n.monad, inner.transformed, span=n.span,
                           nid=n.nid, ty=n.ty)
            return out
        return n
    return _map_children(e, go)


def transform_program(program: Program, type_info: TypeInfo,
                      opts: TransformOptions) -> tuple[Program, list[CpsResult]]:
    """Deep-copy the program and rewrite every Async node to monadic form.

    Returns the transformed program and one CpsResult per Async node
    (program order, innermost last within each top-level walk).
    """
    prog = copy.deepcopy(program)
    def_effects = compute_def_effects(prog)
    results: list[CpsResult] = []

    def go(n: Expr) -> Expr:
        _map_children(n, go)
        if isinstance(n, Async):
            res = Transformer(n.monad, opts, type_info, def_effects).transform(n.body)
            results.append(res)
            return MonadVal(n.monad, res.transformed, span=n.span, nid=n.nid, ty=n.ty)
        return n

    for d in prog.defs:
        d.body = go(d.body)
    prog.main = go(prog.main)
    return prog, results
