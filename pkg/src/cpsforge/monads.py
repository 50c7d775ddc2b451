"""Runtime monad kernel.

Six monad instances (ident, option, result, nondet, eventual, resource),
the conversion registry, memoization, context hooks, a deterministic FIFO
scheduler for the simulated future, and the stack-safe while helper used
by transformed loops.

Design notes that matter for correctness:

* Everything is single-threaded and deterministic by contract.
* Nondet is state-threading: every element of a Nondet value carries a
  snapshot of the mutable store, so binds fork independent worlds exactly
  like the direct-style oracle does ("multi-shot" semantics).
* Resource is layered over Result; acquired finalizers carry unique ids
  and binds deduplicate on them, so each finalizer runs exactly once, in
  reverse acquisition order, on both success and error paths.
* Eventual cells complete at most once and cache their outcome; waiters
  are dispatched through the task queue, never by synchronous recursion,
  which keeps long bind chains stack-safe.
"""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

from .ast import UNIT


class KernelFault(Exception):
    """Internal programming error (ill-typed value reached the kernel)."""


class SchedulerDeadlock(Exception):
    def __init__(self, pending):
        self.pending = tuple(pending)
        super().__init__(f"scheduler deadlock; pending cells: {list(pending)}")


# ---------------------------------------------------------------------------
# Mutable store + run context
# ---------------------------------------------------------------------------

class Store:
    """Mutable world state: var cells, effect counters, receiver objects.

    Snapshotted per nondet path; cells/objects are keyed by monotonically
    increasing ids so snapshots are cheap dict copies.
    """

    def __init__(self):
        self.cells: dict[int, object] = {}
        self.counters: dict[str, int] = {}
        self.objects: dict[int, object] = {}

    def snapshot(self):
        return (dict(self.cells), dict(self.counters), copy.deepcopy(self.objects))

    def restore(self, snap):
        cells, counters, objects = snap
        self.cells = dict(cells)
        self.counters = dict(counters)
        self.objects = copy.deepcopy(objects)


class Scheduler:
    """Deterministic FIFO task queue plus the cell table for `eventual`."""

    def __init__(self):
        self.queue: deque = deque()
        self.cells: dict[int, "Cell"] = {}
        self.completion_order: list[int] = []
        self._next = 0

    def new_cell(self) -> "Cell":
        self._next += 1
        c = Cell(self._next)
        self.cells[c.cid] = c
        return c

    def submit(self, task):
        self.queue.append(task)

    def drain(self):
        while self.queue:
            self.queue.popleft()()

    def drive_until(self, cell: "Cell"):
        while not cell.done:
            if not self.queue:
                raise SchedulerDeadlock(sorted(c.cid for c in self.cells.values() if not c.done))
            self.queue.popleft()()

    def pending_ids(self):
        return sorted(c.cid for c in self.cells.values() if not c.done)


class RunCtx:
    """Everything one program evaluation mutates.

    Shared by the oracle and the transformed-code evaluator so that
    observables (counters, logs, scheduler traces) are directly comparable.
    """

    def __init__(self):
        self.store = Store()
        self.scheduler = Scheduler()
        self.visits = 0            # list-traversal pulls (fusion instrumentation)
        self.discard_log: list[tuple[str, object]] = []
        self.contexts: list[MonadContext] = []
        self._next_obj = 0
        self._next_cell_id = 0
        self.fs: dict[str, str] = {}         # in-memory files: name -> contents
        self._next_acq = 0

    def new_obj(self, state) -> int:
        self._next_obj += 1
        self.store.objects[self._next_obj] = state
        return self._next_obj

    def obj(self, oid: int):
        return self.store.objects[oid]

    def new_cellslot(self, value) -> int:
        self._next_cell_id += 1
        self.store.cells[self._next_cell_id] = value
        return self._next_cell_id

    def next_acq_id(self) -> int:
        self._next_acq += 1
        return self._next_acq

    def bump(self, tag: str):
        self.store.counters[tag] = self.store.counters.get(tag, 0) + 1

    def visit(self, n=1):
        self.visits += n


class MonadContext:
    """Per-async-block context; adoptAwait appends to its log."""

    def __init__(self, monad: str):
        self.monad = monad
        self.log: list[int] = []

    def adopt(self, await_nid: int, value):
        self.log.append(await_nid)
        return value


# ---------------------------------------------------------------------------
# Monadic values
# ---------------------------------------------------------------------------

@dataclass
class Ident:
    v: object


@dataclass
class Opt:
    present: bool
    v: object = None


@dataclass
class Res:
    ok: bool
    v: object = None
    msg: str = ""


@dataclass
class Nondet:
    elems: list  # list of (value, store-snapshot)


class Cell:
    """A simulated-future completion cell: completes at most once, caches."""

    def __init__(self, cid: int):
        self.cid = cid
        self.done = False
        self.ok = True
        self.v = None
        self.msg = ""
        self.waiters: list = []

    def _fire(self, sched: Scheduler):
        self.done = True
        sched.completion_order.append(self.cid)
        for w in self.waiters:
            sched.submit(lambda w=w: w(self))
        self.waiters.clear()

    def complete(self, v, sched: Scheduler):
        if self.done:
            return
        self.v = v
        self._fire(sched)

    def fail(self, msg: str, sched: Scheduler):
        if self.done:
            return
        self.ok = False
        self.msg = msg
        self._fire(sched)

    def on_done(self, cb, sched: Scheduler):
        if self.done:
            sched.submit(lambda: cb(self))
        else:
            self.waiters.append(cb)


@dataclass
class Resrc:
    """Result core plus an ordered, id-deduplicated finalizer stack."""

    res: Res
    fins: tuple = ()  # tuple of (acq_id, name) in acquisition order


def merge_fins(a: tuple, b: tuple) -> tuple:
    seen = {aid for aid, _ in a}
    return a + tuple(f for f in b if f[0] not in seen)


MONAD_NAMES = ("ident", "option", "result", "nondet", "eventual", "resource")


@dataclass(frozen=True)
class MonadDescriptor:
    name: str
    has_error: bool
    has_memo: bool
    multi_shot: bool


MONADS: dict[str, MonadDescriptor] = {
    "ident": MonadDescriptor("ident", False, True, False),
    "option": MonadDescriptor("option", False, True, False),
    "result": MonadDescriptor("result", True, True, False),
    "nondet": MonadDescriptor("nondet", False, False, True),
    "eventual": MonadDescriptor("eventual", True, True, False),
    "resource": MonadDescriptor("resource", True, True, False),
}


def descriptor(name: str) -> MonadDescriptor:
    try:
        return MONADS[name]
    except KeyError:
        raise KernelFault(f"unknown monad {name!r}") from None


# ---------------------------------------------------------------------------
# Kernel operations
# ---------------------------------------------------------------------------

def pure(m: MonadDescriptor, v, ctx: RunCtx):
    n = m.name
    if n == "ident":
        return Ident(v)
    if n == "option":
        return Opt(True, v)
    if n == "result":
        return Res(True, v)
    if n == "nondet":
        return Nondet([(v, ctx.store.snapshot())])
    if n == "eventual":
        c = ctx.scheduler.new_cell()
        c.complete(v, ctx.scheduler)
        return c
    if n == "resource":
        return Resrc(Res(True, v))
    raise KernelFault(n)


def monad_error(m: MonadDescriptor, msg: str, ctx: RunCtx):
    if not m.has_error:
        raise KernelFault(f"{m.name} has no error channel")
    if m.name == "result":
        return Res(False, msg=msg)
    if m.name == "eventual":
        c = ctx.scheduler.new_cell()
        c.fail(msg, ctx.scheduler)
        return c
    if m.name == "resource":
        return Resrc(Res(False, msg=msg))
    raise KernelFault(m.name)


def flat_map(m: MonadDescriptor, fa, f, ctx: RunCtx):
    n = m.name
    if n == "ident":
        return f(fa.v)
    if n == "option":
        return f(fa.v) if fa.present else fa
    if n == "result":
        return f(fa.v) if fa.ok else fa
    if n == "nondet":
        outer = ctx.store.snapshot()
        out = []
        for v, snap in fa.elems:
            ctx.store.restore(snap)
            out.extend(f(v).elems)
        ctx.store.restore(outer)
        return Nondet(out)
    if n == "eventual":
        result = ctx.scheduler.new_cell()

        def on_src(c):
            if not c.ok:
                result.fail(c.msg, ctx.scheduler)
                return
            b = f(c.v)
            b.on_done(lambda d: result.complete(d.v, ctx.scheduler) if d.ok
                      else result.fail(d.msg, ctx.scheduler), ctx.scheduler)

        fa.on_done(on_src, ctx.scheduler)
        return result
    if n == "resource":
        if not fa.res.ok:
            return fa
        out = f(fa.res.v)
        return Resrc(out.res, merge_fins(fa.fins, out.fins))
    raise KernelFault(n)


def map_(m: MonadDescriptor, fa, f, ctx: RunCtx):
    return flat_map(m, fa, lambda v: pure(m, f(v), ctx), ctx)


@dataclass
class Success:
    v: object


@dataclass
class Failure:
    msg: str


def flat_map_try(m: MonadDescriptor, fa, f, ctx: RunCtx):
    """f receives Success(v) or Failure(msg); only for error-capable monads."""
    if not m.has_error:
        raise KernelFault(f"{m.name} has no error channel")
    n = m.name
    if n == "result":
        return f(Success(fa.v) if fa.ok else Failure(fa.msg))
    if n == "eventual":
        result = ctx.scheduler.new_cell()

        def on_src(c):
            b = f(Success(c.v) if c.ok else Failure(c.msg))
            b.on_done(lambda d: result.complete(d.v, ctx.scheduler) if d.ok
                      else result.fail(d.msg, ctx.scheduler), ctx.scheduler)

        fa.on_done(on_src, ctx.scheduler)
        return result
    if n == "resource":
        out = f(Success(fa.res.v) if fa.res.ok else Failure(fa.res.msg))
        return Resrc(out.res, merge_fins(fa.fins, out.fins))
    raise KernelFault(n)


def memoize(m: MonadDescriptor, fa, ctx: RunCtx):
    """F[T] -> F[F[T]]: outer performs/caches, inner replays the outcome."""
    if not m.has_memo:
        raise KernelFault(f"{m.name} does not support memoization")
    handle = Resrc(fa.res) if m.name == "resource" else fa
    if m.name == "resource":
        return Resrc(Res(True, handle), fa.fins)
    return pure(m, handle, ctx)


# ---------------------------------------------------------------------------
# Conversions
# ---------------------------------------------------------------------------

class ConversionRegistry:
    def __init__(self):
        self._table: dict[tuple[str, str], object] = {}

    def register(self, g: str, f: str, fn):
        self._table[(g, f)] = fn

    def has(self, g: str, f: str) -> bool:
        return (g, f) in self._table

    def convert(self, g: str, f: str, v, ctx: RunCtx):
        try:
            fn = self._table[(g, f)]
        except KeyError:
            raise KernelFault(f"no conversion {g} -> {f}") from None
        return fn(v, ctx)


def default_conversions() -> ConversionRegistry:
    reg = ConversionRegistry()
    for target in MONAD_NAMES:
        if target != "ident":
            reg.register("ident", target,
                         lambda v, ctx, t=target: pure(descriptor(t), v.v, ctx))

    def opt_to_result(v, ctx):
        return Res(True, v.v) if v.present else Res(False, msg="empty")

    def opt_to_nondet(v, ctx):
        return Nondet([(v.v, ctx.store.snapshot())]) if v.present else Nondet([])

    def result_to_eventual(v, ctx):
        c = ctx.scheduler.new_cell()
        if v.ok:
            c.complete(v.v, ctx.scheduler)
        else:
            c.fail(v.msg, ctx.scheduler)
        return c

    reg.register("option", "result", opt_to_result)
    reg.register("option", "nondet", opt_to_nondet)
    reg.register("result", "eventual", result_to_eventual)
    return reg


# ---------------------------------------------------------------------------
# whileHelper (stack-safe loop support for transformed code)
# ---------------------------------------------------------------------------

def while_helper(m: MonadDescriptor, cond_thunk, body_thunk, ctx: RunCtx):
    """Bind cond; if true bind body and repeat; else pure unit.

    Semantically the recursive helper from the transformation rules, but
    implemented iteratively (or queue-driven for eventual) so loops of
    1e5+ iterations cannot overflow the host stack.
    """
    n = m.name
    if n in ("ident", "option", "result"):
        while True:
            c = cond_thunk()
            if n == "option" and not c.present:
                return c
            if n == "result" and not c.ok:
                return c
            if not c.v:
                return pure(m, UNIT, ctx)
            b = body_thunk()
            if n == "option" and not b.present:
                return b
            if n == "result" and not b.ok:
                return b
    if n == "resource":
        fins: tuple = ()
        while True:
            c = cond_thunk()
            fins = merge_fins(fins, c.fins)
            if not c.res.ok:
                return Resrc(c.res, fins)
            if not c.res.v:
                return Resrc(Res(True, UNIT), fins)
            b = body_thunk()
            fins = merge_fins(fins, b.fins)
            if not b.res.ok:
                return Resrc(b.res, fins)
    if n == "eventual":
        result = ctx.scheduler.new_cell()

        def step():
            c = cond_thunk()

            def on_cond(cc):
                if not cc.ok:
                    result.fail(cc.msg, ctx.scheduler)
                elif cc.v:
                    b = body_thunk()
                    b.on_done(lambda bb: step() if bb.ok
                              else result.fail(bb.msg, ctx.scheduler), ctx.scheduler)
                else:
                    result.complete(UNIT, ctx.scheduler)

            c.on_done(on_cond, ctx.scheduler)

        step()
        return result
    if n == "nondet":
        # Explicit DFS keeping lexicographic path order (results must align
        # with the oracle's choice-prefix enumeration order).
        outer = ctx.store.snapshot()
        results = []
        work = [("cond", outer)]
        while work:
            tag, item = work.pop()
            if tag == "emit":
                results.append(item)
                continue
            ctx.store.restore(item)
            if tag == "cond":
                c = cond_thunk()
                for cv, csnap in reversed(c.elems):
                    work.append(("body", csnap) if cv else ("emit", (UNIT, csnap)))
            else:
                b = body_thunk()
                for _, bsnap in reversed(b.elems):
                    work.append(("cond", bsnap))
        ctx.store.restore(outer)
        return Nondet(results)
    raise KernelFault(n)


# ---------------------------------------------------------------------------
# run: normal forms
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    kind: str                 # value | some | none | ok | err | paths
    value: object = None
    msg: str = ""
    paths: list = field(default_factory=list)  # (value, counters) per path
    finalizers: list = field(default_factory=list)


def run(m: MonadDescriptor, v, ctx: RunCtx) -> RunResult:
    """Drive v to its observable normal form."""
    n = m.name
    if n == "ident":
        return RunResult("value", v.v)
    if n == "option":
        return RunResult("some", v.v) if v.present else RunResult("none")
    if n == "result":
        return RunResult("ok", v.v) if v.ok else RunResult("err", msg=v.msg)
    if n == "nondet":
        paths = [(val, dict(snap[1])) for val, snap in v.elems]
        return RunResult("paths", paths=paths)
    if n == "eventual":
        ctx.scheduler.drain()
        if not v.done:
            raise SchedulerDeadlock(ctx.scheduler.pending_ids())
        return RunResult("ok", v.v) if v.ok else RunResult("err", msg=v.msg)
    if n == "resource":
        fin_names = [name for _, name in reversed(v.fins)]
        if v.res.ok:
            return RunResult("ok", v.res.v, finalizers=fin_names)
        return RunResult("err", msg=v.res.msg, finalizers=fin_names)
    raise KernelFault(n)


def is_monadic_value(v) -> bool:
    return isinstance(v, (Ident, Opt, Res, Nondet, Cell, Resrc))


def monad_of_value(v) -> str:
    if isinstance(v, Ident):
        return "ident"
    if isinstance(v, Opt):
        return "option"
    if isinstance(v, Res):
        return "result"
    if isinstance(v, Nondet):
        return "nondet"
    if isinstance(v, Cell):
        return "eventual"
    if isinstance(v, Resrc):
        return "resource"
    raise KernelFault(f"not a monadic value: {v!r}")
