"""Sequential resolution with chronological backtracking.

This engine is the semantic oracle: left-to-right goal selection, source
clause order, and ``&`` read as plain conjunction.  It also provides the
resolution-step counter used as the recomputation baseline: one step per
clause-head unification attempt plus one per builtin evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .builtins import EvalError, between_bounds, default_sleep, eval_builtin
from .reader import Program, QuerySpec, instantiate_term, unify_head
from .terms import (
    Struct,
    Term,
    TermStore,
    Trail,
    VarCell,
    bind,
    canonical_tuple,
    deref,
    term_text,
)


class StepBudgetExceeded(Exception):
    """Step budget ran out; carries the partial answer list."""

    def __init__(self, answers: list, steps: int) -> None:
        super().__init__(f"step budget exhausted after {steps} steps")
        self.answers = answers
        self.steps = steps


@dataclass
class SeqResult:
    answers: list[tuple]
    steps: int
    exhausted: bool


class _CP:
    __slots__ = (
        "kind", "snapshot", "trail_mark", "cell_mark", "struct_mark",
        "call_args", "clauses", "cursor", "cell", "nxt", "hi",
    )

    def __init__(self, kind: str, snapshot: tuple, trail_mark: int, cell_mark: int, struct_mark: int) -> None:
        self.kind = kind
        self.snapshot = snapshot
        self.trail_mark = trail_mark
        self.cell_mark = cell_mark
        self.struct_mark = struct_mark


class SeqEngine:
    """One-shot sequential machine over a loaded program."""

    def __init__(self, program: Program, time_scale: float = 1.0, occurs_check: bool = False) -> None:
        self.program = program
        self.time_scale = time_scale
        self.occurs_check = occurs_check
        self.store = TermStore(0)
        self.trail = Trail()
        self.cps: list[_CP] = []
        self.steps = 0
        self.max_steps: int | None = None
        self.answers: list[tuple] = []

    # BuiltinContext protocol
    def new_var(self) -> VarCell:
        return self.store.new_var()

    def new_struct(self, functor: str, args: tuple) -> Struct:
        return self.store.new_struct(functor, args)

    def sleep_ms(self, ms: int) -> None:
        default_sleep(ms, self.time_scale, lambda: None)

    def exists_table(self) -> frozenset:
        return self.program.exists_table

    # -- machine -----------------------------------------------------------

    def _bump(self) -> None:
        self.steps += 1
        if self.max_steps is not None and self.steps > self.max_steps:
            raise StepBudgetExceeded(self.answers, self.steps)

    def _activate(self, body: tuple, env: list, barrier: int, goal_stack: list) -> None:
        instrs = self._instantiate_body(body, env, barrier)
        goal_stack.extend(reversed(instrs))

    def _instantiate_body(self, body: tuple, env: list, barrier: int) -> list:
        out: list = []
        for ins in body:
            op = ins[0]
            if op == "g":
                out.append(("g", instantiate_term(ins[1], env, self.store)))
            elif op in ("b", "nb"):
                out.append((op, ins[1], tuple(instantiate_term(a, env, self.store) for a in ins[2])))
            elif op == "cut":
                out.append(("cut", barrier))
            elif op == "fail":
                out.append(("fail",))
            elif op == "par":
                for branch in ins[1]:
                    out.extend(self._instantiate_body(branch, env, barrier))
            else:  # pragma: no cover
                raise EvalError(f"unknown instruction {op!r}")
        return out

    def _try_clauses(self, call_args: tuple, clauses: list, start: int, snapshot: tuple, goal_stack: list) -> bool:
        trail = self.trail
        mark = trail.mark()
        cell_mark, struct_mark = self.store.marks()
        i = start
        n = len(clauses)
        while i < n:
            clause = clauses[i]
            i += 1
            self._bump()
            env: list = [None] * clause.nvars
            if unify_head(call_args, clause.head_args, env, trail, self.store):
                barrier = len(self.cps)
                if i < n:
                    cp = _CP("c", snapshot, mark, cell_mark, struct_mark)
                    cp.call_args = call_args
                    cp.clauses = clauses
                    cp.cursor = i
                    self.cps.append(cp)
                self._activate(clause.body, env, barrier, goal_stack)
                return True
            trail.undo_to(mark)
        return False

    def solve(
        self,
        query: QuerySpec,
        max_answers: int | None = None,
        max_steps: int | None = None,
    ) -> SeqResult:
        self.max_steps = max_steps
        env: list = [None] * query.nvars
        goal_stack: list = []
        self._activate(query.body, env, 0, goal_stack)
        answer_cells = [env[i] if env[i] is not None else self.store.new_var() for i in query.var_slots]

        mode_back = False
        while True:
            if mode_back:
                if not self.cps:
                    return SeqResult(self.answers, self.steps, True)
                cp = self.cps[-1]
                self.trail.undo_to(cp.trail_mark)
                self.store.truncate(cp.cell_mark, cp.struct_mark)
                if cp.kind == "c":
                    self.cps.pop()
                    goal_stack = list(cp.snapshot)
                    if self._try_clauses(cp.call_args, cp.clauses, cp.cursor, cp.snapshot, goal_stack):
                        mode_back = False
                    continue
                # between/3 alternatives
                self._bump()
                if cp.nxt > cp.hi:
                    self.cps.pop()
                    continue
                bind(cp.cell, cp.nxt, self.trail)
                cp.nxt += 1
                if cp.nxt > cp.hi:
                    self.cps.pop()
                goal_stack = list(cp.snapshot)
                mode_back = False
                continue

            if not goal_stack:
                self.answers.append(canonical_tuple(answer_cells))
                if max_answers is not None and len(self.answers) >= max_answers:
                    return SeqResult(self.answers, self.steps, False)
                mode_back = True
                continue

            ins = goal_stack.pop()
            op = ins[0]
            if op == "g":
                term = deref(ins[1])
                tt = type(term)
                if tt is str:
                    key = (term, 0)
                    args: tuple = ()
                elif tt is Struct:
                    key = (term.functor, len(term.args))
                    args = term.args
                else:
                    raise EvalError(f"callable expected, got {term_text(term)}")
                clauses = self.program.clauses_for(*key)
                if clauses is None:
                    raise EvalError(f"unknown predicate {key[0]}/{key[1]}")
                snapshot = tuple(goal_stack)
                if not self._try_clauses(args, clauses, 0, snapshot, goal_stack):
                    mode_back = True
            elif op == "b":
                self._bump()
                if not eval_builtin(ins[1], ins[2], self):
                    mode_back = True
            elif op == "nb":
                self._bump()
                lo, hi, target = between_bounds(ins[2])
                d = deref(target)
                if type(d) is int:
                    if not (lo <= d <= hi):
                        mode_back = True
                    continue
                if type(d) is not VarCell:
                    raise EvalError("between/3 third argument must be an integer or variable")
                if lo > hi:
                    mode_back = True
                    continue
                if lo < hi:
                    cp = _CP("i", tuple(goal_stack), self.trail.mark(), *self.store.marks())
                    cp.cell = d
                    cp.nxt = lo + 1
                    cp.hi = hi
                    self.cps.append(cp)
                bind(d, lo, self.trail)
            elif op == "cut":
                del self.cps[ins[1]:]
            elif op == "fail":
                mode_back = True
            else:  # pragma: no cover
                raise EvalError(f"unknown instruction {op!r}")


def solve_seq(
    program: Program,
    query: QuerySpec,
    max_answers: int | None = None,
    max_steps: int | None = None,
    time_scale: float = 1.0,
) -> SeqResult:
    """Enumerate answers in strict sequential order (``&`` read as ``,``)."""
    return SeqEngine(program, time_scale=time_scale).solve(query, max_answers, max_steps)


def count_resolution_steps(program: Program, query: QuerySpec, time_scale: float = 0.0) -> int:
    """Run the query to exhaustion and return the resolution-step count."""
    return SeqEngine(program, time_scale=time_scale).solve(query).steps
