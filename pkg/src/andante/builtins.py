"""Builtin predicates shared by both engines.

Deterministic builtins evaluate to a bool and never push a choice point;
``between/3`` is the one nondeterministic builtin and is driven by the
engines' choice-point machinery.  Arithmetic is machine-integer only.
"""

from __future__ import annotations

import time
from typing import Callable, Protocol

from .terms import (
    CONS,
    EMPTY_LIST,
    Struct,
    Term,
    Trail,
    VarCell,
    deref,
    struct_equal,
    term_text,
    unify,
)


class EvalError(Exception):
    """A runtime error in a builtin (type error, unknown builtin, bad mode)."""


class BuiltinContext(Protocol):
    trail: Trail

    def new_var(self) -> VarCell: ...
    def new_struct(self, functor: str, args: tuple) -> Struct: ...
    def sleep_ms(self, ms: int) -> None: ...
    def exists_table(self) -> frozenset: ...


def eval_arith(t: Term) -> int:
    t = deref(t)
    tt = type(t)
    if tt is int:
        return t
    if tt is Struct:
        f = t.functor
        n = len(t.args)
        if n == 2:
            a = eval_arith(t.args[0])
            b = eval_arith(t.args[1])
            if f == "+":
                return a + b
            if f == "-":
                return a - b
            if f == "*":
                return a * b
            if f == "//":
                if b == 0:
                    raise EvalError("division by zero")
                return a // b
            if f == "mod":
                if b == 0:
                    raise EvalError("division by zero")
                return a % b
    raise EvalError(f"cannot evaluate arithmetic expression: {term_text(t)}")


def _require_int(t: Term, what: str) -> int:
    t = deref(t)
    if type(t) is not int:
        raise EvalError(f"{what} must be an integer, got {term_text(t)}")
    return t


def _bi_unify(ctx, args) -> bool:
    return unify(args[0], args[1], ctx.trail)


def _bi_eq(ctx, args) -> bool:
    return struct_equal(args[0], args[1])


def _bi_neq(ctx, args) -> bool:
    return not struct_equal(args[0], args[1])


def _bi_lt(ctx, args) -> bool:
    return eval_arith(args[0]) < eval_arith(args[1])


def _bi_gt(ctx, args) -> bool:
    return eval_arith(args[0]) > eval_arith(args[1])


def _bi_le(ctx, args) -> bool:
    return eval_arith(args[0]) <= eval_arith(args[1])


def _bi_ge(ctx, args) -> bool:
    return eval_arith(args[0]) >= eval_arith(args[1])


def _bi_is(ctx, args) -> bool:
    return unify(args[0], eval_arith(args[1]), ctx.trail)


def _bi_pause(ctx, args) -> bool:
    ms = _require_int(args[0], "pause/1 argument")
    if ms > 0:
        ctx.sleep_ms(ms)
    return True


def _bi_exists(ctx, args) -> bool:
    key = deref(args[0])
    if type(key) is VarCell:
        raise EvalError("exists/1 argument must be bound")
    return key in ctx.exists_table()


def _bi_length(ctx, args) -> bool:
    lst = deref(args[0])
    n = deref(args[1])
    if type(lst) is VarCell:
        count = _require_int(n, "length/2 second argument")
        if count < 0:
            return False
        out: Term = EMPTY_LIST
        for _ in range(count):
            out = ctx.new_struct(CONS, (ctx.new_var(), out))
        return unify(lst, out, ctx.trail)
    count = 0
    while True:
        if lst == EMPTY_LIST:
            return unify(n, count, ctx.trail)
        if type(lst) is Struct and lst.functor == CONS and len(lst.args) == 2:
            count += 1
            lst = deref(lst.args[1])
            continue
        raise EvalError("length/2 first argument is not a proper list")


def _bi_true(ctx, args) -> bool:
    return True


def _bi_fail(ctx, args) -> bool:
    return False


DetFn = Callable[[BuiltinContext, tuple], bool]

# (name, arity) -> deterministic eval function
BUILTIN_SPECS: dict[tuple[str, int], DetFn] = {
    ("true", 0): _bi_true,
    ("fail", 0): _bi_fail,
    ("=", 2): _bi_unify,
    ("==", 2): _bi_eq,
    ("\\==", 2): _bi_neq,
    ("<", 2): _bi_lt,
    (">", 2): _bi_gt,
    ("=<", 2): _bi_le,
    (">=", 2): _bi_ge,
    ("is", 2): _bi_is,
    ("pause", 1): _bi_pause,
    ("exists", 1): _bi_exists,
    ("length", 2): _bi_length,
    ("between", 3): _bi_true,  # placeholder; dispatched by the engines
}

NONDET_BUILTINS = frozenset({("between", 3)})


def eval_builtin(name: str, args: tuple, ctx: BuiltinContext) -> bool:
    fn = BUILTIN_SPECS.get((name, len(args)))
    if fn is None:
        raise EvalError(f"unknown builtin {name}/{len(args)}")
    return fn(ctx, args)


def between_bounds(args: tuple) -> tuple[int, int, Term]:
    """Validate between/3 call modes; returns (lo, hi, target)."""
    lo = _require_int(args[0], "between/3 lower bound")
    hi = _require_int(args[1], "between/3 upper bound")
    return lo, hi, args[2]


def default_sleep(ms: int, scale: float, poll: Callable[[], None], slice_ms: float = 5.0) -> None:
    """Sleep ``ms * scale`` milliseconds in slices, polling between slices."""
    deadline = time.perf_counter() + (ms * scale) / 1000.0
    while True:
        poll()
        remaining = deadline - time.perf_counter()
        if remaining <= 0:
            return
        time.sleep(min(remaining, slice_ms / 1000.0))
