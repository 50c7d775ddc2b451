"""Shifted higher-order calls: resolution, the builtin shifted library,
and call-chain fusion.

A "shifted" function argument has type A -> F[B] instead of A -> B.  When a
call site passes an effectful lambda, the transformer swaps the method for a
registered substitute whose implementation binds those monadic results.

Four substitution conventions (case tags), mirroring how the substitute is
declared:

* asyncShift-fo: external registry entry; receives the original object and
  the target monad in an extra parameter list.
* asyncShift-o:  external registry entry already parameterized by the monad.
* inplace-f:     method defined on the receiver itself, taking the monad.
* inplace:       method defined on the receiver itself.

Return-shape conventions: plain C (wrapped in pure by the caller), F[C], or
a ChainBuilder that accumulates fluent higher-order calls and traverses the
source once when finished.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .ast import FunT, ListT, MonadT, Ty, UNIT, receiver_kind
from .monads import (KernelFault, MonadDescriptor, RunCtx, flat_map, pure)


class ShiftResolutionError(Exception):
    """No substitution exists for a call that needs one (compile-time error)."""

    def __init__(self, kind: str, method: str):
        self.kind = kind
        self.method = method
        super().__init__(f"no shifted variant registered for {kind}.{method}")


PLAIN = "plain"
WRAPPED = "wrapped"
CALLCHAIN = "callchain"


@dataclass(frozen=True)
class ShiftEntry:
    recv_kind: str
    method: str
    case_tag: str      # asyncShift-fo | asyncShift-o | inplace-f | inplace
    return_kind: str   # plain | wrapped | callchain
    impl: object = None      # fo / inplace-f / inplace: (recv, m, ctx, *args)
    factory: object = None   # o: (m, ctx) -> (recv, *args) -> result


@dataclass
class LambdaArgInfo:
    """Effectfulness facts about one function/by-name argument."""

    effectful: bool
    monadic_ret: bool  # declared result type is already MonadT(F, _)


@dataclass
class Resolution:
    kind: str  # unchanged | monadic | shifted
    entry: ShiftEntry | None = None


# ---------------------------------------------------------------------------
# Receiver runtime values
# ---------------------------------------------------------------------------

@dataclass
class RangeObj:
    lo: int
    hi: int


@dataclass
class CacheObj:
    oid: int  # state dict lives in ctx.store.objects (snapshot-isolated)


@dataclass
class BoxObj:
    oid: int  # {"v": int}


@dataclass
class FileHandle:
    name: str
    oid: int  # {"pos": int}


class ChainBuilder:
    """Accumulates shifted ops over a list source; one traversal at finish."""

    def __init__(self, source: list):
        self.source = source
        self.ops: list[tuple[str, object]] = []
        self.finished = False


CHAIN_OP_NAMES = frozenset({"map", "filter", "foreach"})


def chain_append(b: ChainBuilder, op: str, f) -> ChainBuilder:
    if b.finished:
        raise KernelFault("chain builder used after finish")
    if op not in CHAIN_OP_NAMES:
        raise KernelFault(f"unsupported chain op {op!r}")
    b.ops.append((op, f))
    return b


def chain_finish(b: ChainBuilder, m: MonadDescriptor, ctx: RunCtx):
    """Traverse the source once, applying every pending op per element."""
    if b.finished:
        raise KernelFault("chain builder used after finish")
    b.finished = True
    src = b.source
    ops = b.ops
    unit_result = bool(ops) and ops[-1][0] == "foreach"

    def apply_ops(j, v):
        if j == len(ops):
            return pure(m, ("keep", v), ctx)
        op, f = ops[j]
        if op == "filter":
            return flat_map(m, f(v),
                            lambda keep: apply_ops(j + 1, v) if keep
                            else pure(m, ("drop", None), ctx), ctx)
        if op == "map":
            return flat_map(m, f(v), lambda v2: apply_ops(j + 1, v2), ctx)
        return flat_map(m, f(v), lambda _: apply_ops(j + 1, v), ctx)

    def go(i, acc):
        if i == len(src):
            return pure(m, UNIT if unit_result else list(acc), ctx)
        ctx.visit()
        return flat_map(m, apply_ops(0, src[i]),
                        lambda r: go(i + 1, acc + [r[1]] if r[0] == "keep" else acc),
                        ctx)

    return go(0, [])


# ---------------------------------------------------------------------------
# Builtin shifted implementations
# ---------------------------------------------------------------------------

def _list_map(recv, m, ctx, f):
    def go(i, acc):
        if i == len(recv):
            return pure(m, list(acc), ctx)
        ctx.visit()
        return flat_map(m, f(recv[i]), lambda v: go(i + 1, acc + [v]), ctx)
    return go(0, [])


def _list_filter(recv, m, ctx, p):
    def go(i, acc):
        if i == len(recv):
            return pure(m, list(acc), ctx)
        ctx.visit()
        x = recv[i]
        return flat_map(m, p(x), lambda keep: go(i + 1, acc + [x] if keep else acc), ctx)
    return go(0, [])


def _list_foreach(recv, m, ctx, f):
    def go(i):
        if i == len(recv):
            return pure(m, UNIT, ctx)
        ctx.visit()
        return flat_map(m, f(recv[i]), lambda _: go(i + 1), ctx)
    return go(0)


def _list_exists(recv, m, ctx, p):
    def go(i):
        if i == len(recv):
            return pure(m, False, ctx)
        ctx.visit()
        return flat_map(m, p(recv[i]), lambda found: pure(m, True, ctx) if found
                        else go(i + 1), ctx)
    return go(0)


def _list_fold(recv, m, ctx, init, f):
    def go(i, acc):
        if i == len(recv):
            return pure(m, acc, ctx)
        ctx.visit()
        return flat_map(m, f(acc, recv[i]), lambda acc2: go(i + 1, acc2), ctx)
    return go(0, init)


def _list_get_or_else(recv, m, ctx, idx, default_thunk):
    if 0 <= idx < len(recv):
        return pure(m, recv[idx], ctx)
    return default_thunk()


def _list_with_filter_chain(recv, m, ctx, p):
    b = ChainBuilder(recv)
    b.ops.append(("filter", p))
    return b


def _list_with_filter_two_pass(recv, m, ctx, p):
    # --no-callchain downgrade: a strict Wrapped filter (extra traversal).
    return _list_filter(recv, m, ctx, p)


def _cache_get_or_update(recv: CacheObj, m, ctx, k, when_absent):
    state = ctx.obj(recv.oid)
    if k in state:
        return pure(m, state[k], ctx)

    def store(v):
        ctx.obj(recv.oid)[k] = v
        return pure(m, v, ctx)

    return flat_map(m, when_absent(), store, ctx)


def _cache_get_or_else(recv: CacheObj, m, ctx, k, default):
    state = ctx.obj(recv.oid)
    if k in state:
        return pure(m, state[k], ctx)
    return default()


def _range_foreach(m, ctx):
    def impl(recv: RangeObj, f):
        def go(i):
            if i >= recv.hi:
                return pure(m, UNIT, ctx)
            return flat_map(m, f(i), lambda _: go(i + 1), ctx)
        return go(recv.lo)
    return impl


def _range_filter(m, ctx):
    def impl(recv: RangeObj, p):
        def go(i, acc):
            if i >= recv.hi:
                return pure(m, list(acc), ctx)
            return flat_map(m, p(i), lambda keep: go(i + 1, acc + [i] if keep else acc), ctx)
        return go(recv.lo, [])
    return impl


def _box_map_async(recv: BoxObj, m, ctx, f):
    def rebox(v):
        from .interp import make_box  # late import: allocation lives with the evaluator
        return pure(m, make_box(ctx, v), ctx)
    return flat_map(m, f(ctx.obj(recv.oid)["v"]), rebox, ctx)


def _box_update_async(recv: BoxObj, m, ctx, f):
    def store(v):
        ctx.obj(recv.oid)["v"] = v
        return pure(m, UNIT, ctx)
    return flat_map(m, f(ctx.obj(recv.oid)["v"]), store, ctx)


# (recv_kind, method) -> entry.  Keys are unique; inplace methods live in a
# separate table consulted first, mirroring same-scope definitions winning
# over external typeclass instances.
REGISTRY: dict[tuple[str, str], ShiftEntry] = {
    ("List", "map"): ShiftEntry("List", "map", "asyncShift-fo", WRAPPED, _list_map),
    ("List", "filter"): ShiftEntry("List", "filter", "asyncShift-fo", WRAPPED, _list_filter),
    ("List", "withFilter"): ShiftEntry("List", "withFilter", "asyncShift-fo", CALLCHAIN,
                                       _list_with_filter_chain),
    ("List", "foreach"): ShiftEntry("List", "foreach", "asyncShift-fo", WRAPPED, _list_foreach),
    ("List", "fold"): ShiftEntry("List", "fold", "asyncShift-fo", WRAPPED, _list_fold),
    ("List", "exists"): ShiftEntry("List", "exists", "asyncShift-fo", WRAPPED, _list_exists),
    ("List", "getOrElse"): ShiftEntry("List", "getOrElse", "asyncShift-fo", WRAPPED,
                                      _list_get_or_else),
    ("Cache", "getOrUpdate"): ShiftEntry("Cache", "getOrUpdate", "asyncShift-fo", WRAPPED,
                                         _cache_get_or_update),
    ("Cache", "getOrElse"): ShiftEntry("Cache", "getOrElse", "asyncShift-fo", WRAPPED,
                                       _cache_get_or_else),
    ("Range", "foreach"): ShiftEntry("Range", "foreach", "asyncShift-o", WRAPPED,
                                     factory=_range_foreach),
    ("Range", "filter"): ShiftEntry("Range", "filter", "asyncShift-o", WRAPPED,
                                    factory=_range_filter),
}

INPLACE: dict[tuple[str, str], ShiftEntry] = {
    ("Box", "map"): ShiftEntry("Box", "map", "inplace", WRAPPED, _box_map_async),
    ("Box", "update"): ShiftEntry("Box", "update", "inplace-f", WRAPPED, _box_update_async),
}

WITHFILTER_TWO_PASS = ShiftEntry("List", "withFilter", "asyncShift-fo", WRAPPED,
                                 _list_with_filter_two_pass)

def _chain_op_factory(op):
    def factory(m, ctx):
        return lambda recv, f: chain_append(recv, op, f)
    return factory


# Chain ops return the builder itself: the Plain return convention.
CHAIN_OPS: dict[str, ShiftEntry] = {
    op: ShiftEntry("ChainBuilder", op, "asyncShift-o", PLAIN, factory=_chain_op_factory(op))
    for op in sorted(CHAIN_OP_NAMES)
}


def resolve(recv_ty: Ty, method: str, lam_infos: list[LambdaArgInfo], monad: str,
            use_callchain: bool = True) -> Resolution:
    """Decide how a higher-order call site is translated.

    Pure function of its inputs.  Raises ShiftResolutionError when an
    effectful function argument has no substitution.
    """
    if not any(i.effectful for i in lam_infos):
        return Resolution("unchanged")
    if all(i.monadic_ret for i in lam_infos if i.effectful):
        return Resolution("monadic")
    kind = receiver_kind(recv_ty)
    if kind is not None:
        entry = INPLACE.get((kind, method))
        if entry is None:
            entry = REGISTRY.get((kind, method))
            if entry is not None and entry.return_kind == CALLCHAIN and not use_callchain:
                entry = WITHFILTER_TWO_PASS
        if entry is not None:
            return Resolution("shifted", entry)
    raise ShiftResolutionError(kind or str(recv_ty), method)


def shifted_call(entry: ShiftEntry, recv, m: MonadDescriptor, ctx: RunCtx, args: list):
    """Invoke a shifted implementation.

    Wrapped entries return the monadic value as-is; Plain results are
    wrapped in pure; CallChain results flow onward as builder values.
    """
    if entry.case_tag == "asyncShift-o":
        result = entry.factory(m, ctx)(recv, *args)
    else:
        result = entry.impl(recv, m, ctx, *args)
    if entry.return_kind == PLAIN:
        return pure(m, result, ctx)
    return result


def monadic_lambda_ret(lam_ty: Ty, monad: str) -> bool:
    return isinstance(lam_ty, FunT) and isinstance(lam_ty.ret, MonadT) and \
        lam_ty.ret.monad == monad
