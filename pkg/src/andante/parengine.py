"""The parallel runtime: agents, goal handlers, frames, and the scheduler.

Execution model
---------------
A fixed set of agents each own a stack set.  A parallel conjunction forks one
handler per goal, publishes them on the forking agent's goal queue, runs the
still-unclaimed ones locally, and joins.  Each goal runs against a private
renaming (proxy cells) of its arguments, so backward execution of one goal
never disturbs the bindings the conjunction's consumer sees: answers are
captured into the frame's memo area as detached snapshots and reinstalled on
the consumer's trail under a ghost choice point during combination.

Backward execution is out of order: an agent backtracks whichever of its own
parked segments is on top of its stack.  First-answer priority can demand a
specific trapped segment; it is then relocated to the stack tops.  When a
goal finds a new answer during parallel backtracking, its siblings are
suspended (they park a resume choice point and return to the scheduler) and
the new answer is combined with the stored answers of the other goals,
tracked by per-goal last-combined cursors so racing producers lose nothing.

The recomputation baseline shares forward execution but drops memoization:
after the first combination the conjunction is re-enumerated sequentially,
recomputing goals to the right exactly as ordered right-to-left backtracking
would.

Stores are append-only for the duration of a query (reclaiming is a
non-goal); the sequential engine, which is single-threaded, does truncate.
"""

from __future__ import annotations

import itertools
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .builtins import EvalError, between_bounds, default_sleep, eval_builtin
from .memo import ReinstallConflict, MemoArea, reinstall
from .reader import Program, QuerySpec, instantiate_term, unify_head
from .stackset import ChoicePoint, CPKind, GoalSegment, StackSet
from .terms import (
    Struct,
    Term,
    VarCell,
    bind,
    canonical_tuple,
    deref,
    term_text,
)


class EngineStopped(Exception):
    pass


class GoalCancelled(Exception):
    pass


class InternalEngineError(Exception):
    """An engine invariant was violated; the run is unsound."""


class ProgramError(Exception):
    """A runtime error caused by the program (type error, unknown predicate)."""


class IndependenceError(ProgramError):
    """Debug mode found parallel goals sharing an unbound variable."""


class HState(Enum):
    NOT_EXECUTED = "not_executed"
    RUNNING = "running"
    HAS_ANSWER = "has_answer"
    SUSPENDED = "suspended"
    EXHAUSTED = "exhausted"
    FAILED = "failed"
    CANCELLED = "cancelled"


_PARKED = (HState.HAS_ANSWER, HState.SUSPENDED)
_DEAD = (HState.EXHAUSTED, HState.FAILED, HState.CANCELLED)


class PFStatus(Enum):
    FORWARD = "forward"
    COMBINING = "combining"
    BACKTRACKING = "backtracking"
    FAILING = "failing"
    DONE = "done"


@dataclass
class EngineConfig:
    agents: int = 1
    seed: int = 0
    mode: str = "parback"  # parback | recompute
    det_opt: bool = True
    speculative: bool = True
    ghost_retention: bool = False
    priority: bool = True
    local_goal: str = "first"  # first | last
    debug_independence: bool = False
    time_scale: float = 1.0
    trace: bool = False
    suspend_inject: float = 0.0
    inject_seed: int = 0


@dataclass
class RunStats:
    answers: int = 0
    wall_time: float = 0.0
    busy_time: list = field(default_factory=list)
    steps: int = 0
    memo_answers: int = 0
    memo_bytes: int = 0
    reinstalls: int = 0
    relocations: int = 0
    suspensions: int = 0
    combinations: int = 0
    parcalls: int = 0

    def as_dict(self) -> dict:
        return {
            "answers": self.answers,
            "wall_time_s": self.wall_time,
            "busy_time_s": list(self.busy_time),
            "resolution_steps": self.steps,
            "memo_answers_stored": self.memo_answers,
            "memo_bytes_copied": self.memo_bytes,
            "reinstalls": self.reinstalls,
            "relocations": self.relocations,
            "suspensions": self.suspensions,
            "combinations_emitted": self.combinations,
            "parcalls": self.parcalls,
        }


@dataclass
class RunResult:
    answers: list
    varnames: tuple
    exhausted: bool
    stats: RunStats
    handler_logs: dict = field(default_factory=dict)


class Handler:
    """Lifecycle record of one parallel goal."""

    _ids = itertools.count()

    __slots__ = (
        "hid", "pf", "pos", "instrs", "state", "owner", "ss", "segment",
        "answers", "last_combined", "det_live", "det_values", "proxy_map",
        "ncps", "suspend_requested", "cancel_requested", "open_frames",
        "start_tops", "seqno", "text", "answer_log", "wait_parked",
    )

    def __init__(self, pf, pos: int, instrs: list, proxy_map: list) -> None:
        self.hid = next(Handler._ids)
        self.pf = pf
        self.pos = pos
        self.instrs = instrs
        self.proxy_map = proxy_map  # [(real cell, proxy cell), ...]
        self.state = HState.NOT_EXECUTED
        self.owner: Optional[int] = None
        self.ss: Optional[StackSet] = None
        self.segment: Optional[GoalSegment] = None
        self.answers = 0
        self.last_combined = 0
        self.det_live = False
        self.det_values: Optional[list] = None
        self.ncps = 0
        self.suspend_requested = False
        self.cancel_requested = False
        self.open_frames: list = []
        self.start_tops: Optional[dict] = None
        self.seqno = 0
        self.text = ""
        self.answer_log: list = []
        self.wait_parked = False

    def alive(self) -> bool:
        """Can still produce answers."""
        if self.state in (HState.NOT_EXECUTED, HState.RUNNING, HState.SUSPENDED):
            return True
        if self.state is HState.HAS_ANSWER:
            return self.segment is not None and self.segment.cp_top > self.segment.cp_base
        return False

    def backtrackable(self) -> bool:
        if self.state is HState.SUSPENDED:
            return True
        return (
            self.state is HState.HAS_ANSWER
            and self.segment is not None
            and self.segment.cp_top > self.segment.cp_base
        )


class ParcallFrame:
    """Coordination record of one parallel conjunction."""

    _ids = itertools.count()

    def __init__(self, consumer: Handler, combiner_aid: int, snapshot: tuple, mode: str) -> None:
        self.pfid = next(ParcallFrame._ids)
        self.consumer = consumer  # activation whose body contains the conjunction
        self.combiner_aid = combiner_aid
        self.snapshot = snapshot
        self.mode = mode
        self.handlers: list[Handler] = []
        self.recompute_branches: list = []
        self.status = PFStatus.FORWARD
        self.demand = True  # a first combination is demanded from the start
        self.memo = MemoArea(self.pfid)
        self.failed_handler: Optional[Handler] = None
        self.batch: Optional[dict] = None
        self.gate_open = False  # recompute mode: first re-enumerated tuple is skipped

    def quiescent(self) -> bool:
        return all(h.state is not HState.RUNNING for h in self.handlers)

    def uncombined(self) -> Optional[Handler]:
        # combine from right to left
        for h in reversed(self.handlers):
            if h.answers > h.last_combined:
                return h
        return None

    def dead(self) -> bool:
        if self.batch is not None or self.uncombined() is not None:
            return False
        return all(not h.alive() for h in self.handlers)


class Engine:
    """Owns the agents, stack sets, frames, and all scheduling state."""

    def __init__(self, program: Program, cfg: Optional[EngineConfig] = None) -> None:
        self.program = program
        self.cfg = cfg or EngineConfig()
        if self.cfg.agents < 1:
            raise ValueError("at least one agent is required")
        self.cond = threading.Condition()
        self.stacksets = [StackSet(i) for i in range(self.cfg.agents)]
        self.agents = [Agent(self, i) for i in range(self.cfg.agents)]
        self._stop = False
        self._fatal: Optional[BaseException] = None
        self._seq = itertools.count()
        self.trace_events: list = []
        # root query plumbing
        self.root_pending: Optional[QuerySpec] = None
        self.root_answers: list = []
        self.root_done = False
        self.root_cmd: Optional[str] = None
        # counters (per-agent where hot)
        self.steps = [0] * self.cfg.agents
        self.busy = [0.0] * self.cfg.agents
        self.suspensions = 0
        self.combinations = 0
        self.parcalls = 0
        self.memo_answers = 0
        self.memo_bytes = 0
        self.reinstalls = 0
        self.handler_logs: dict = {}
        self._started = False

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        if not self._started:
            self._started = True
            for agent in self.agents:
                agent.thread.start()

    def close(self) -> None:
        with self.cond:
            self._stop = True
            self.cond.notify_all()
        for agent in self.agents:
            if agent.thread.is_alive():
                agent.thread.join(timeout=10.0)

    def __enter__(self) -> "Engine":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def fatal(self, exc: BaseException) -> None:
        with self.cond:
            if self._fatal is None:
                self._fatal = exc
            self._stop = True
            self.cond.notify_all()

    # -- tracing -----------------------------------------------------------------

    def trace(self, aid: int, event: str, **kw) -> None:
        if self.cfg.trace:
            kw["t"] = time.perf_counter()
            kw["agent"] = aid
            kw["event"] = event
            self.trace_events.append(kw)

    # -- scheduling state (call with self.cond held) --------------------------------

    def current_tops(self) -> dict[int, tuple[int, int]]:
        return {ss.store.sid: ss.store.marks() for ss in self.stacksets}

    def needed(self, h: Handler) -> bool:
        cur: Optional[Handler] = h
        while cur is not None:
            pf = cur.pf
            if pf is None:
                return True  # root activation always demands
            if pf.status in (PFStatus.FAILING, PFStatus.DONE) or not pf.demand:
                return False
            if pf.status is PFStatus.FORWARD and cur.answers > 0:
                return False  # before the join only first answers are needed
            cur = pf.consumer
        return True

    def publish(self, handlers: list[Handler], ss: StackSet) -> None:
        for h in handlers:
            h.seqno = next(self._seq)
            ss.queue.append(h)
        self.cond.notify_all()

    def try_claim(self, h: Handler, agent: "Agent") -> bool:
        if h.state is not HState.NOT_EXECUTED or h.cancel_requested:
            return False
        h.state = HState.RUNNING
        h.owner = agent.aid
        h.ss = agent.ss
        if h.start_tops is None:
            h.start_tops = self.current_tops()
        for ss in self.stacksets:
            try:
                ss.queue.remove(h)
            except ValueError:
                pass
        return True

    def _eligible_backtrack(self, h: Handler, agent: "Agent", allow_relocate: bool) -> bool:
        if h.ss is not agent.ss or not h.backtrackable() or h.cancel_requested:
            return False
        pf = h.pf
        if pf is None or pf.status not in (PFStatus.FORWARD, PFStatus.BACKTRACKING):
            return False
        seg = h.segment
        ss = agent.ss
        if seg.cp_top == len(ss.cps) and seg.trail_top == len(ss.trail):
            return True
        if not allow_relocate:
            return False
        return self._can_relocate(ss, h)

    def _can_relocate(self, ss: StackSet, h: Handler) -> bool:
        seg = h.segment
        if seg is None or seg.fragmented or seg.cp_top <= seg.cp_base:
            return False
        # every choice point from my base upward must be mine or belong to a
        # parked, contiguous segment lying wholly above me
        movers = set()
        for cp in ss.cps[seg.cp_base:]:
            o = cp.owner
            if o is h:
                continue
            if o is None or o.state not in _PARKED:
                return False
            oseg = o.segment
            if oseg is None or oseg.fragmented or oseg.cp_base < seg.cp_top:
                return False
            movers.add(id(o))
        # every trail position above my base must be mine, a mover's, or dead residue
        for pos in range(seg.trail_base, len(ss.trail)):
            if seg.trail_base <= pos < seg.trail_top:
                continue
            owner = self._trail_owner(ss, pos)
            if owner is None:
                return False
            if owner is h or id(owner) in movers:
                continue
            if owner.state in _DEAD:
                continue  # swept before the move
            return False
        return True

    def _trail_owner(self, ss: StackSet, pos: int) -> Optional[Handler]:
        for r in ss.residents:
            s = r.segment
            if s is not None and s.trail_base <= pos < s.trail_top:
                return r
        return None

    def sweep_dead(self, ss: StackSet) -> None:
        """Drop residue segments of finished goals (owner thread only)."""
        for r in list(ss.residents):
            if r.segment is None:
                continue
            if r.state in _DEAD and r.segment.cp_top == r.segment.cp_base:
                ss.excise_segment(r, undo_bindings=False)

    def find_work(self, agent: "Agent"):
        """Highest-priority available job under the four-class order."""
        cfg = self.cfg
        avail: set[int] = set()
        # classes 1/3: not-yet-executed goals, FIFO within class, stealing
        # round-robin over agents from a per-call random start
        n = len(self.stacksets)
        start = agent.rng.randrange(n) if n > 1 else 0
        best13: dict[int, Handler] = {}
        for k in range(n):
            ss = self.stacksets[(start + k) % n]
            for h in ss.queue:
                if h.state is not HState.NOT_EXECUTED or h.cancel_requested:
                    continue
                cls = 1 if (not cfg.priority or self.needed(h)) else 3
                avail.add(cls)
                if cls not in best13 or h.seqno < best13[cls].seqno:
                    best13[cls] = h
        # classes 2/4: backtrackable segments on my own stack, topmost first
        best2 = best4 = None
        blocked_needed = False
        for h in sorted(
            (r for r in agent.ss.residents if r.segment is not None and r.pf is not None),
            key=lambda r: -r.segment.cp_base,
        ):
            if not h.backtrackable():
                continue
            is_needed = not cfg.priority or self.needed(h)
            cls = 2 if is_needed else 4
            if cls == 4 and h.wait_parked:
                continue  # a parked coordination wait resumes only on demand
            if not self._eligible_backtrack(h, agent, allow_relocate=(cls == 2 and cfg.priority)):
                if cls == 2:
                    blocked_needed = True
                continue
            avail.add(cls)
            if cls == 2 and best2 is None:
                best2 = h
            elif cls == 4 and best4 is None:
                best4 = h
        if best2 is None and blocked_needed and agent.ss.cps:
            # a needed goal is trapped and cannot be moved: clear the way by
            # backtracking whatever is parked on top of this stack
            top = agent.ss.cps[-1].owner
            if (
                top is not None
                and top.pf is not None
                and top.backtrackable()
                and self._eligible_backtrack(top, agent, allow_relocate=False)
            ):
                best2 = top
                avail.add(2)
        if not cfg.speculative:
            best13.pop(3, None)
            best4 = None
            avail.discard(3)
            avail.discard(4)
        chosen = None
        for cls, h in ((1, best13.get(1)), (2, best2), (3, best13.get(3)), (4, best4)):
            if h is not None:
                chosen = (cls, h)
                break
        if chosen is None:
            return None
        cls, h = chosen
        if cls in (1, 3):
            if not self.try_claim(h, agent):
                return None
            job = ("run", h, cls)
        else:
            h.state = HState.RUNNING
            h.wait_parked = False
            job = ("react", h, cls)
        self.trace(agent.aid, "dispatch", handler=h.hid, cls=cls, avail=sorted(avail), goal=h.text)
        return job

    # -- events ----------------------------------------------------------------------

    def request_suspend(self, pf: ParcallFrame) -> None:
        """Ask every running goal of the frame to park (cond held)."""
        for h in pf.handlers:
            if h.state is HState.RUNNING and not h.suspend_requested:
                h.suspend_requested = True
        self.cond.notify_all()

    def cancel_subtree(self, pf: ParcallFrame) -> None:
        """Mark a failing frame and everything nested below it (cond held)."""
        if pf.status is PFStatus.DONE:
            return
        pf.status = PFStatus.FAILING
        for h in pf.handlers:
            if h.state is HState.NOT_EXECUTED:
                h.state = HState.CANCELLED
                h.cancel_requested = True
                for ss in self.stacksets:
                    try:
                        ss.queue.remove(h)
                    except ValueError:
                        pass
            else:
                h.cancel_requested = True
            for f in h.open_frames:
                self.cancel_subtree(f)
        self.cond.notify_all()

    # -- root query ----------------------------------------------------------------------

    def run(self, query: QuerySpec, max_answers: Optional[int] = None, timeout: Optional[float] = None) -> RunResult:
        """Execute a query, pulling combinations one at a time from the root."""
        if max_answers is not None and max_answers < 1:
            raise ValueError("max_answers must be >= 1")
        self.start()
        t0 = time.perf_counter()
        deadline = t0 + timeout if timeout is not None else None
        with self.cond:
            if self.root_pending is not None:
                raise InternalEngineError("engine already running a query")
            self.root_answers = []
            self.root_done = False
            self.root_cmd = None
            self.handler_logs = {}
            self.root_pending = query
            self.cond.notify_all()
            consumed = 0
            stopped = False
            while True:
                self._check_fatal()
                if deadline is not None and time.perf_counter() > deadline:
                    self._stop = True
                    self.cond.notify_all()
                    raise InternalEngineError("query timed out")
                if len(self.root_answers) > consumed:
                    consumed = len(self.root_answers)
                    if max_answers is not None and consumed >= max_answers:
                        self.root_cmd = "stop"
                        stopped = True
                        self.cond.notify_all()
                        break
                    self.root_cmd = "more"
                    self.cond.notify_all()
                    continue
                if self.root_done:
                    break
                self.cond.wait(0.05)
            while not self.root_done:
                self._check_fatal()
                if deadline is not None and time.perf_counter() > deadline:
                    self._stop = True
                    self.cond.notify_all()
                    raise InternalEngineError("query teardown timed out")
                self.cond.wait(0.05)
            self._check_fatal()
            answers = list(self.root_answers)
            stats = self._collect_stats(time.perf_counter() - t0, len(answers))
            logs = dict(self.handler_logs)
        return RunResult(
            answers=answers,
            varnames=query.varnames,
            exhausted=not stopped,
            stats=stats,
            handler_logs=logs,
        )

    def _check_fatal(self) -> None:
        if self._fatal is not None:
            exc = self._fatal
            if isinstance(exc, (ProgramError, EvalError)):
                raise exc
            raise InternalEngineError(repr(exc)) from exc

    def _collect_stats(self, wall: float, nanswers: int) -> RunStats:
        return RunStats(
            answers=nanswers,
            wall_time=wall,
            busy_time=list(self.busy),
            steps=sum(self.steps),
            memo_answers=self.memo_answers,
            memo_bytes=self.memo_bytes,
            reinstalls=self.reinstalls,
            relocations=sum(ss.relocations for ss in self.stacksets),
            suspensions=self.suspensions,
            combinations=self.combinations,
            parcalls=self.parcalls,
        )


class Agent:
    """One worker: a thread bound to one stack set."""

    def __init__(self, eng: Engine, aid: int) -> None:
        self.eng = eng
        self.aid = aid
        self.ss = eng.stacksets[aid]
        self.rng = random.Random((eng.cfg.seed << 8) ^ (aid * 2654435761 + 11))
        self.inject_rng = random.Random((eng.cfg.inject_seed << 8) ^ (aid * 40503 + 7))
        self.thread = threading.Thread(target=self._loop, name=f"agent-{aid}", daemon=True)

    def _loop(self) -> None:
        eng = self.eng
        try:
            while True:
                job = None
                with eng.cond:
                    while job is None:
                        if eng._stop:
                            return
                        self.service_cancels()
                        eng.sweep_dead(self.ss)
                        if eng.root_pending is not None:
                            query = eng.root_pending
                            eng.root_pending = None
                            job = ("root", query, 0)
                            break
                        job = eng.find_work(self)
                        if job is None:
                            eng.cond.wait(0.05)
                t0 = time.perf_counter()
                try:
                    self.execute_job(job)
                finally:
                    eng.busy[self.aid] += time.perf_counter() - t0
        except EngineStopped:
            pass
        except BaseException as exc:  # noqa: BLE001 - agents must not die silently
            eng.fatal(exc)

    def service_cancels(self) -> None:
        """Excise parked segments of goals cancelled by other agents (cond held)."""
        for r in list(self.ss.residents):
            if r.cancel_requested and r.state in _PARKED and r.segment is not None:
                self.ss.excise_segment(r, undo_bindings=True)
                r.state = HState.CANCELLED
                self.eng.cond.notify_all()

    def execute_job(self, job) -> None:
        kind = job[0]
        if kind == "root":
            self._execute_root(job[1])
        elif kind == "run":
            self._execute_handler(job[1], fresh=True)
        else:
            self._execute_handler(job[1], fresh=False)

    # -- root activation --------------------------------------------------------------

    def _execute_root(self, query: QuerySpec) -> None:
        eng = self.eng
        root = Handler(None, 0, [], [])
        root.text = "<root>"
        root.owner = self.aid
        root.ss = self.ss
        root.state = HState.RUNNING
        root.start_tops = eng.current_tops()
        env: list = [None] * query.nvars
        machine = Machine(self, root)
        machine.claim_segment()
        root.segment.fragmented = True  # the root activation is never relocated
        body = machine.instantiate_body(query.body, env)
        answer_cells = [env[i] if env[i] is not None else self.ss.store.new_var() for i in query.var_slots]
        machine.goal_stack = list(reversed(body))
        try:
            while True:
                out = machine.run()
                if out == "answer":
                    snap = canonical_tuple(answer_cells)
                    with eng.cond:
                        eng.root_answers.append(snap)
                        eng.cond.notify_all()
                        while eng.root_cmd is None:
                            if eng._stop:
                                raise EngineStopped()
                            eng.cond.wait(0.05)
                        cmd = eng.root_cmd
                        eng.root_cmd = None
                    if cmd == "stop":
                        raise GoalCancelled()
                    machine.backtrack_mode = True
                    continue
                if out == "exhausted":
                    break
                raise InternalEngineError(f"root activation yielded {out!r}")
        except GoalCancelled:
            machine.abort_open_frames()
        finally:
            with eng.cond:
                self._release_root(root)
                eng.root_done = True
                eng.cond.notify_all()

    def _release_root(self, root: Handler) -> None:
        seg = root.segment
        if seg is not None:
            for r in list(self.ss.residents):
                if r is not root and r.segment is not None:
                    self.ss.excise_segment(r, undo_bindings=False)
            self.ss.trail.undo_to(min(seg.trail_base, len(self.ss.trail)))
            del self.ss.cps[seg.cp_base:]
            if root in self.ss.residents:
                self.ss.residents.remove(root)
            root.segment = None
        root.state = HState.EXHAUSTED

    # -- handler activations ---------------------------------------------------------------

    def _execute_handler(self, h: Handler, fresh: bool) -> None:
        eng = self.eng
        machine = Machine(self, h)
        try:
            if fresh:
                machine.claim_segment()
                h.ncps = 0
                machine.goal_stack = list(reversed(list(h.instrs)))
            else:
                with eng.cond:
                    if self.ss.needs_restack(h):
                        eng.sweep_dead(self.ss)
                        was_trapped = self.ss.is_trapped(h)
                        self.ss.relocate_to_top(h)
                        if was_trapped:
                            eng.trace(self.aid, "relocate", handler=h.hid)
                machine.backtrack_mode = True
            out = machine.run()
        except GoalCancelled:
            machine.abort_open_frames()
            with eng.cond:
                machine.cleanup_cancelled()
                eng.cond.notify_all()
            return
        if out == "answer" or out == "suspended":
            return  # states settled at the park/suspension point
        with eng.cond:
            if h.answers == 0:
                h.state = HState.FAILED
                eng.trace(self.aid, "fail", handler=h.hid)
                if h.pf is not None and h.pf.status is not PFStatus.DONE:
                    h.pf.failed_handler = h
                    eng.cancel_subtree(h.pf)
            else:
                h.state = HState.EXHAUSTED
                eng.trace(self.aid, "exhaust", handler=h.hid)
            eng.cond.notify_all()


class Machine:
    """The resolution loop of one activation on one agent's stack set."""

    class _Suspend(Exception):
        pass

    def __init__(self, agent: Agent, handler: Handler) -> None:
        self.agent = agent
        self.eng = agent.eng
        self.ss = agent.ss
        self.h = handler
        self.goal_stack: list = []
        self.backtrack_mode = False

    # -- builtin context ----------------------------------------------------------------

    @property
    def trail(self):
        return self.ss.trail

    def new_var(self) -> VarCell:
        return self.ss.store.new_var()

    def new_struct(self, functor: str, args: tuple) -> Struct:
        return self.ss.store.new_struct(functor, args)

    def sleep_ms(self, ms: int) -> None:
        default_sleep(ms, self.eng.cfg.time_scale, self._poll_light)

    def exists_table(self) -> frozenset:
        return self.eng.program.exists_table

    # -- segment lifecycle -----------------------------------------------------------------

    def claim_segment(self) -> None:
        h = self.h
        h.segment = GoalSegment(len(self.ss.cps), len(self.ss.trail), h.start_tops or {})
        self.ss.residents.append(h)

    def _update_tops(self) -> None:
        seg = self.h.segment
        seg.cp_top = len(self.ss.cps)
        seg.trail_top = len(self.ss.trail)
        # empty segments cannot fragment anything
        seg.fragmented = any(
            o is not self.h
            and o.segment is not None
            and o.segment.cp_top > o.segment.cp_base
            and seg.cp_base <= o.segment.cp_base < seg.cp_top
            for o in self.ss.residents
        )

    def cleanup_cancelled(self) -> None:
        h = self.h
        seg = h.segment
        if seg is not None:
            ss = self.ss
            # goals of my cancelled subtree go first; live goals of other
            # frames parked above me (claimed while I waited) must survive
            for r in list(ss.residents):
                if r is not h and r.cancel_requested and r.state in _PARKED and r.segment is not None:
                    ss.excise_segment(r, undo_bindings=True)
                    r.state = HState.CANCELLED
            self._purge_region(seg.trail_base)
            for idx in range(len(ss.cps) - 1, seg.cp_base - 1, -1):
                if idx < len(ss.cps) and ss.cps[idx].owner is h:
                    ss.remove_cp_at(idx)
            if h in ss.residents:
                ss.residents.remove(h)
            h.segment = None
        h.state = HState.CANCELLED
        self.eng.trace(self.agent.aid, "cancelled", handler=h.hid)

    def abort_open_frames(self) -> None:
        """Tear down any conjunctions this activation still has open."""
        for pf in list(self.h.open_frames):
            self._fail_frame(pf, pop_release=False)

    # -- event polling --------------------------------------------------------------------

    def _poll_light(self) -> None:
        if self.eng._stop:
            raise EngineStopped()
        if self.h.cancel_requested:
            raise GoalCancelled()

    def _poll(self) -> None:
        eng = self.eng
        h = self.h
        if eng._stop:
            raise EngineStopped()
        if h.cancel_requested:
            raise GoalCancelled()
        if h.suspend_requested:
            raise Machine._Suspend()
        inj = eng.cfg.suspend_inject
        if inj > 0.0 and h.pf is not None and self.agent.inject_rng.random() < inj:
            h.suspend_requested = True
            raise Machine._Suspend()

    def _undo_trail(self, mark: int) -> None:
        """Undo to ``mark``, first dropping finished goals' residue above it.

        A finished goal may leave already-captured (private) bindings on the
        trail; they carry no information once the goal is dead, but their
        bookkeeping must not dangle when the trail shrinks past them.
        """
        ss = self.ss
        for r in list(ss.residents):
            s = r.segment
            if s is None or r.state not in _DEAD:
                continue
            if s.trail_top > mark or s.trail_base >= mark:
                if s.cp_top > s.cp_base:
                    raise InternalEngineError("dead goal still holds choice points")
                if s.trail_base < mark < s.trail_top:
                    raise InternalEngineError("undo mark inside a dead goal's slice")
                ss.excise_segment(r, undo_bindings=False)
        # Running residents are ancestors of this machine (one thread per
        # stack set); their recorded tops are stale while they wait and their
        # genuine bindings all sit below this activation's base.
        live = [
            r for r in ss.residents
            if r is not self.h and r.segment is not None
            and r.state in _PARKED
            and r.segment.trail_top > mark
            and r.segment.trail_top > r.segment.trail_base
        ]
        if live:
            detail = "; ".join(
                f"h{r.hid}[{r.state.value},cp {r.segment.cp_base}:{r.segment.cp_top},tr {r.segment.trail_base}:{r.segment.trail_top}]"
                for r in live
            )
            raise InternalEngineError(
                f"undo to {mark} (len {len(ss.trail)}) on agent {ss.aid} by h{self.h.hid} "
                f"({self.h.state.value}) would cross live slices: {detail}"
            )
        ss.trail.undo_to(min(mark, len(ss.trail)))

    def _purge_region(self, mark: int) -> None:
        """Drop my dead region above ``mark``, keeping live parked slices.

        Goals of other conjunctions claimed while this activation waited may
        still be parked above the mark; their slices compact downward and
        everything else is unbound and removed.
        """
        ss = self.ss
        keep = []
        for r in ss.residents:
            s = r.segment
            if r is self.h or s is None:
                continue
            if r.state in _PARKED and s.trail_top > s.trail_base and s.trail_base >= mark:
                keep.append(r)
            elif r.state in _DEAD and s.trail_base >= mark:
                s.trail_base = s.trail_top = mark  # entries die in the purge
        ss.purge_trail(mark, keep)
        for r in list(ss.residents):
            if r is not self.h and r.state in _DEAD and r.segment is not None \
                    and r.segment.cp_top == r.segment.cp_base and r.segment.trail_top <= mark:
                ss.excise_segment(r, undo_bindings=False)

    def _buried_back(self) -> None:
        """This activation's next choice point is buried under parked goals.

        A finished conjunction's release record can be dropped in place; any
        other buried choice point waits (helping) until the out-of-order
        discipline clears the goals parked on top.
        """
        h = self.h
        ss = self.ss
        eng = self.eng
        idx = None
        for i in range(len(ss.cps) - 1, -1, -1):
            if ss.cps[i].owner is h:
                idx = i
                break
        if idx is None:
            raise InternalEngineError("choice-point accounting out of sync")
        mine = ss.cps[idx]
        if mine.kind is CPKind.RELEASE:
            pf = mine.pf
            if pf.status is not PFStatus.DONE:
                out = self._pf_wait(pf)
                if out == "forward":
                    self.backtrack_mode = False
                return  # "fail"/"dead": next loop iteration resolves the record
            if idx < len(ss.cps):
                ss.remove_cp_at(ss.cps.index(mine))
            h.ncps -= 1
            if pf in h.open_frames:
                h.open_frames.remove(pf)
            return
        # wait until the goals parked above are backtracked away or excised
        while True:
            try:
                self._poll()
            except Machine._Suspend:
                self.goal_stack = [("redo",)]
                raise
            job = None
            with eng.cond:
                self.agent.service_cancels()
                eng.sweep_dead(ss)
                if ss.cps and ss.cps[-1].owner is h:
                    return
                job = eng.find_work(self.agent)
                if job is None:
                    if h.pf is not None and not eng.needed(h):
                        self.goal_stack = [("redo",)]
                        h.wait_parked = True
                        raise Machine._Suspend()
                    eng.cond.wait(0.05)
            if job is not None:
                self.agent.execute_job(job)

    # -- instruction instantiation ------------------------------------------------------------

    def instantiate_body(self, body: tuple, env: list, barrier: int = 0) -> list:
        out: list = []
        store = self.ss.store
        for ins in body:
            op = ins[0]
            if op == "g":
                out.append(("g", instantiate_term(ins[1], env, store)))
            elif op in ("b", "nb"):
                out.append((op, ins[1], tuple(instantiate_term(a, env, store) for a in ins[2])))
            elif op == "cut":
                out.append(("cut", barrier))
            elif op == "fail":
                out.append(("fail",))
            elif op == "par":
                out.append(("par", tuple(self.instantiate_body(b, env, barrier) for b in ins[1])))
            else:  # pragma: no cover
                raise InternalEngineError(f"unknown instruction {op!r}")
        return out

    # -- the loop ----------------------------------------------------------------------------

    def run(self) -> str:
        eng = self.eng
        ss = self.ss
        h = self.h
        steps = eng.steps
        aid = self.agent.aid
        try:
            while True:
                if self.backtrack_mode:
                    if h.ncps == 0:
                        self._on_exhausted()
                        return "exhausted"
                    cp = ss.cps[-1]
                    if cp.owner is not h:
                        self._buried_back()
                        continue
                    kind = cp.kind
                    if kind is CPKind.CLAUSE:
                        try:
                            self._poll()
                        except Machine._Suspend:
                            self.goal_stack = [("redo",)]
                            raise
                        self._undo_trail(cp.trail_mark)
                        if self._retry_clauses(cp):
                            self.backtrack_mode = False
                    elif kind is CPKind.INTS:
                        self._undo_trail(cp.trail_mark)
                        steps[aid] += 1
                        bind(cp.cell, cp.nxt, ss.trail)
                        cp.nxt += 1
                        if cp.nxt > cp.hi:
                            ss.pop_cp()
                            h.ncps -= 1
                        self.goal_stack = list(cp.snapshot)
                        self.backtrack_mode = False
                    elif kind is CPKind.RESUME:
                        self._undo_trail(cp.trail_mark)
                        ss.pop_cp()
                        h.ncps -= 1
                        self.goal_stack = list(cp.snapshot)
                        self.backtrack_mode = False
                    elif kind is CPKind.GHOST:
                        self._ghost_step(cp)
                    elif kind is CPKind.RELEASE:
                        self._release_step(cp)
                    else:  # pragma: no cover
                        raise InternalEngineError(f"unknown choice point kind {kind}")
                    continue

                if not self.goal_stack:
                    self._park_answer()
                    return "answer"
                ins = self.goal_stack.pop()
                op = ins[0]
                if op == "g":
                    try:
                        self._poll()
                    except Machine._Suspend:
                        self.goal_stack.append(ins)
                        raise
                    term = deref(ins[1])
                    tt = type(term)
                    if tt is str:
                        key = (term, 0)
                        args: tuple = ()
                    elif tt is Struct:
                        key = (term.functor, len(term.args))
                        args = term.args
                    else:
                        raise ProgramError(f"callable expected, got {term_text(term)}")
                    clauses = eng.program.clauses_for(*key)
                    if clauses is None:
                        raise ProgramError(f"unknown predicate {key[0]}/{key[1]}")
                    if not self._call_clauses(args, clauses):
                        self.backtrack_mode = True
                elif op == "b":
                    steps[aid] += 1
                    try:
                        ok = eval_builtin(ins[1], ins[2], self)
                    except EvalError as exc:
                        raise ProgramError(str(exc)) from exc
                    if not ok:
                        self.backtrack_mode = True
                elif op == "nb":
                    steps[aid] += 1
                    self._call_between(ins[2])
                elif op == "cut":
                    self._do_cut(ins[1])
                elif op == "fail":
                    self.backtrack_mode = True
                elif op == "par":
                    try:
                        self._poll()
                    except Machine._Suspend:
                        self.goal_stack.append(ins)
                        raise
                    if self._parcall(list(ins[1])) == "fail":
                        self.backtrack_mode = True
                elif op == "join":
                    if self._join_wait(ins[1]) == "fail":
                        self.backtrack_mode = True
                elif op == "wait":
                    out = self._pf_wait(ins[1])
                    if out != "forward":
                        self.backtrack_mode = True
                elif op == "gate":
                    pf = ins[1]
                    if pf.gate_open:
                        with eng.cond:
                            eng.combinations += 1
                    else:
                        pf.gate_open = True
                        self.backtrack_mode = True
                elif op == "redo":
                    self.backtrack_mode = True
                else:  # pragma: no cover
                    raise InternalEngineError(f"unknown instruction {op!r}")
        except Machine._Suspend:
            self._do_suspend()
            return "suspended"

    # -- clause resolution ----------------------------------------------------------------------

    def _call_clauses(self, call_args: tuple, clauses: list) -> bool:
        ss = self.ss
        trail = ss.trail
        mark = trail.mark()
        steps = self.eng.steps
        aid = self.agent.aid
        i = 0
        n = len(clauses)
        while i < n:
            clause = clauses[i]
            i += 1
            steps[aid] += 1
            env: list = [None] * clause.nvars
            if unify_head(call_args, clause.head_args, env, trail, ss.store):
                barrier = len(ss.cps)
                if i < n:
                    cell_mark, struct_mark = ss.store.marks()
                    cp = ChoicePoint(CPKind.CLAUSE, self.h, tuple(self.goal_stack), mark, cell_mark, struct_mark)
                    cp.call_args = call_args
                    cp.clauses = clauses
                    cp.cursor = i
                    ss.push_cp(cp)
                    self.h.ncps += 1
                body = self.instantiate_body(clause.body, env, barrier)
                self.goal_stack.extend(reversed(body))
                return True
            trail.undo_to(mark)
        return False

    def _retry_clauses(self, cp: ChoicePoint) -> bool:
        """Advance a clause choice point; pops it when the cursor empties."""
        ss = self.ss
        trail = ss.trail
        steps = self.eng.steps
        aid = self.agent.aid
        clauses = cp.clauses
        n = len(clauses)
        i = cp.cursor
        while i < n:
            clause = clauses[i]
            i += 1
            steps[aid] += 1
            env: list = [None] * clause.nvars
            if unify_head(cp.call_args, clause.head_args, env, trail, ss.store):
                if i < n:
                    cp.cursor = i
                    barrier = len(ss.cps) - 1  # cut prunes this choice point too
                else:
                    ss.pop_cp()
                    self.h.ncps -= 1
                    barrier = len(ss.cps)
                self.goal_stack = list(cp.snapshot)
                body = self.instantiate_body(clause.body, env, barrier)
                self.goal_stack.extend(reversed(body))
                return True
            trail.undo_to(cp.trail_mark)
        ss.pop_cp()
        self.h.ncps -= 1
        return False

    def _call_between(self, args: tuple) -> None:
        try:
            lo, hi, target = between_bounds(args)
        except EvalError as exc:
            raise ProgramError(str(exc)) from exc
        d = deref(target)
        if type(d) is int:
            if not (lo <= d <= hi):
                self.backtrack_mode = True
            return
        if type(d) is not VarCell:
            raise ProgramError("between/3 third argument must be an integer or variable")
        if lo > hi:
            self.backtrack_mode = True
            return
        ss = self.ss
        if lo < hi:
            cell_mark, struct_mark = ss.store.marks()
            cp = ChoicePoint(CPKind.INTS, self.h, tuple(self.goal_stack), ss.trail.mark(), cell_mark, struct_mark)
            cp.cell = d
            cp.nxt = lo + 1
            cp.hi = hi
            ss.push_cp(cp)
            self.h.ncps += 1
        bind(d, lo, ss.trail)

    def _do_cut(self, barrier: int) -> None:
        ss = self.ss
        if barrier < 0 or barrier > len(ss.cps):
            raise InternalEngineError("cut barrier out of range")
        # frames opened above the barrier are pruned: the current combination
        # is committed and their structures released
        for cp in list(ss.cps[barrier:]):
            if cp.kind is CPKind.RELEASE and cp.pf.status is not PFStatus.DONE:
                self._fail_frame(cp.pf, pop_release=False)
        del ss.cps[barrier:]
        self.h.ncps = sum(1 for cp in ss.cps if cp.owner is self.h)

    # -- answers / suspension -----------------------------------------------------------------------

    def _on_exhausted(self) -> None:
        h = self.h
        seg = h.segment
        if seg is not None and h.pf is not None:
            self._purge_region(seg.trail_base)
            seg.cp_top = seg.cp_base  # nothing of mine remains
            seg.trail_top = seg.trail_base
            seg.fragmented = False

    def _park_answer(self) -> None:
        eng = self.eng
        h = self.h
        if h.pf is None:
            return  # the root activation reports its answers itself
        self._update_tops()
        det_now = h.segment.cp_top == h.segment.cp_base and h.ncps == 0
        with eng.cond:
            if det_now and eng.cfg.det_opt and h.pf.mode == "parback" and h.answers == 0:
                h.det_live = True
                h.det_values = self._collect_det_values()
            elif h.pf.mode == "parback":
                pairs = []
                translate = {}
                for real, proxy in h.proxy_map:
                    translate[id(proxy)] = real
                    if deref(proxy) is not proxy:
                        pairs.append((real, proxy.binding if proxy.binding is not None else proxy))
                seq = h.pf.memo.memoize(h.pos, pairs, h.start_tops or {}, translate)
                eng.trace(self.agent.aid, "memoize", handler=h.hid, seq=seq)
            h.answers += 1
            h.answer_log.append(canonical_tuple([p for _, p in h.proxy_map]))
            eng.handler_logs.setdefault(h.hid, (h.text, h.answer_log))
            h.state = HState.EXHAUSTED if det_now else HState.HAS_ANSWER
            eng.trace(self.agent.aid, "answer", handler=h.hid, n=h.answers)
            eng.cond.notify_all()

    def _collect_det_values(self) -> list:
        out = []
        for real, proxy in self.h.proxy_map:
            d = deref(proxy)
            if d is proxy:
                continue
            out.append((real, self._translate_value(d)))
        return out

    def _translate_value(self, value: Term) -> Term:
        """Replace references to this goal's proxies with the real cells."""
        mapping = {id(p): r for r, p in self.h.proxy_map}

        def walk(t: Term) -> Term:
            t = deref(t)
            tt = type(t)
            if tt is VarCell:
                return mapping.get(id(t), t)
            if tt is Struct:
                new_args = tuple(walk(a) for a in t.args)
                if all(na is oa for na, oa in zip(new_args, t.args)):
                    return t
                return self.ss.store.new_struct(t.functor, new_args)
            return t

        return walk(value)

    def _do_suspend(self) -> None:
        eng = self.eng
        h = self.h
        ss = self.ss
        cell_mark, struct_mark = ss.store.marks()
        cp = ChoicePoint(CPKind.RESUME, h, tuple(self.goal_stack), ss.trail.mark(), cell_mark, struct_mark)
        ss.push_cp(cp)
        h.ncps += 1
        self._update_tops()
        with eng.cond:
            h.suspend_requested = False
            h.state = HState.SUSPENDED
            eng.suspensions += 1
            eng.trace(self.agent.aid, "suspend", handler=h.hid)
            eng.cond.notify_all()

    # -- parallel conjunctions ------------------------------------------------------------------------

    def _parcall(self, branches: list) -> str:
        eng = self.eng
        h = self.h
        ss = self.ss
        pf = ParcallFrame(
            consumer=h,
            combiner_aid=self.agent.aid,
            snapshot=tuple(self.goal_stack),
            mode=eng.cfg.mode,
        )
        pf.recompute_branches = [list(b) for b in branches]
        fork_tops = eng.current_tops()  # before renaming: proxy objects count as goal-young
        handlers: list[Handler] = []
        maps: list[list] = []
        for pos, branch in enumerate(branches):
            mapping: dict = {}
            if pf.mode == "recompute":
                # the baseline executes against the shared environment
                instrs = list(branch)
                if eng.cfg.debug_independence:
                    _collect_unbound(instrs, mapping)
                pmap: list = []
            else:
                instrs = self._proxy_instrs(list(branch), mapping)
                pmap = list(mapping.values())
            g = Handler(pf, pos, instrs, pmap)
            g.start_tops = fork_tops
            g.text = _instrs_text(instrs)
            handlers.append(g)
            maps.append(list(mapping.keys()))
        if eng.cfg.debug_independence:
            seen: dict = {}
            for pos, keys in enumerate(maps):
                for key in keys:
                    if key in seen:
                        raise IndependenceError(
                            f"parallel goals {seen[key]} and {pos} share an unbound variable"
                        )
                    seen[key] = pos
        pf.handlers = handlers
        cell_mark, struct_mark = ss.store.marks()
        release = ChoicePoint(CPKind.RELEASE, h, pf.snapshot, ss.trail.mark(), cell_mark, struct_mark)
        release.pf = pf
        ss.push_cp(release)
        h.ncps += 1
        h.open_frames.append(pf)
        with eng.cond:
            eng.parcalls += 1
            eng.publish(handlers, ss)
            eng.trace(self.agent.aid, "fork", pf=pf.pfid, goals=len(handlers))
        # local phase: the chosen goal first, then sweep the still-unclaimed rest
        local_first = handlers[0] if eng.cfg.local_goal == "first" else handlers[-1]
        self._run_local(local_first, pf)
        for g in handlers:
            if pf.status is PFStatus.FAILING:
                break
            if g is not local_first:
                self._run_local(g, pf)
        return self._join_wait(pf)

    def _proxy_instrs(self, instrs: list, mapping: dict) -> list:
        store = self.ss.store

        def walk(t: Term) -> Term:
            t = deref(t)
            tt = type(t)
            if tt is VarCell:
                got = mapping.get(id(t))
                if got is None:
                    proxy = store.new_var()
                    mapping[id(t)] = (t, proxy)
                    return proxy
                return got[1]
            if tt is Struct:
                new_args = tuple(walk(a) for a in t.args)
                if all(na is oa for na, oa in zip(new_args, t.args)):
                    return t
                return store.new_struct(t.functor, new_args)
            return t

        out: list = []
        for ins in instrs:
            op = ins[0]
            if op == "g":
                out.append(("g", walk(ins[1])))
            elif op in ("b", "nb"):
                out.append((op, ins[1], tuple(walk(a) for a in ins[2])))
            elif op == "par":
                out.append(("par", tuple(self._proxy_instrs(list(b), mapping) for b in ins[1])))
            else:
                out.append(ins)
        return out

    def _run_local(self, g: Handler, pf: ParcallFrame) -> None:
        eng = self.eng
        with eng.cond:
            if not eng.try_claim(g, self.agent):
                return
            eng.trace(self.agent.aid, "dispatch", handler=g.hid, cls=1, avail=[1], goal=g.text, local=True)
        self.agent._execute_handler(g, fresh=True)

    # -- join / combination ---------------------------------------------------------------------------------

    def _join_wait(self, pf: ParcallFrame) -> str:
        eng = self.eng
        while True:
            try:
                self._poll()
            except Machine._Suspend:
                self.goal_stack.append(("join", pf))
                self.h.wait_parked = True
                raise
            job = None
            action = None
            with eng.cond:
                if pf.status is PFStatus.FAILING:
                    action = "fail"
                elif all(g.answers >= 1 for g in pf.handlers):
                    if pf.quiescent():
                        action = "first"
                    else:
                        eng.request_suspend(pf)
                        eng.cond.wait(0.02)
                else:
                    job = eng.find_work(self.agent)
                    if job is None:
                        if self.h.pf is not None and not eng.needed(self.h):
                            self.h.wait_parked = True
                            raise Machine._Suspend()  # park; resumed on demand
                        eng.cond.wait(0.05)
            if action == "fail":
                self._fail_frame(pf, pop_release=True)
                return "fail"
            if action == "first":
                self._first_combination(pf)
                return "forward"
            if job is not None:
                self.agent.execute_job(job)

    def _first_combination(self, pf: ParcallFrame) -> None:
        """Every goal produced a first answer: install it and go forward."""
        eng = self.eng
        ss = self.ss
        cell_mark, struct_mark = ss.store.marks()
        ghost = ChoicePoint(CPKind.GHOST, self.h, pf.snapshot, ss.trail.mark(), cell_mark, struct_mark)
        ghost.pf = pf
        if eng.cfg.ghost_retention:
            ghost.retention_cache = {}
        ss.push_cp(ghost)
        self.h.ncps += 1
        for g in pf.handlers:
            self._bind_component(pf, ghost, g, 0)
            g.last_combined = 1
        with eng.cond:
            pf.status = PFStatus.FORWARD
            pf.demand = False
            eng.combinations += 1
            eng.trace(self.agent.aid, "combine", pf=pf.pfid, combo=[0] * len(pf.handlers))
            eng.cond.notify_all()

    def _bind_component(self, pf: ParcallFrame, ghost: ChoicePoint, g: Handler, k: int) -> None:
        eng = self.eng
        if pf.mode == "recompute":
            return  # first answers stay live; nothing is ever reinstalled
        if g.det_live:
            for real, value in g.det_values or []:
                if real.binding is not None:
                    raise InternalEngineError("combination found an external cell already bound")
                bind(real, value, self.ss.trail)
            return
        ans = pf.memo.get(g.pos, k)
        try:
            reinstall(
                ans,
                self.ss.store,
                self.ss.trail,
                cache=ghost.retention_cache,
                cache_key=(g.pos, k),
            )
        except ReinstallConflict as exc:
            raise InternalEngineError(str(exc)) from exc
        with eng.cond:
            pf.memo.reinstalls += 1
            eng.reinstalls += 1
        if ghost.retention_cache is not None:
            # protect the copies from the next undo cycle
            ghost.cell_mark, ghost.struct_mark = self.ss.store.marks()

    def _ghost_step(self, ghost: ChoicePoint) -> None:
        """Fail into the ghost choice point: next combination, or wait."""
        pf = ghost.pf
        ss = self.ss
        self._undo_trail(ghost.trail_mark)
        if pf.mode == "recompute":
            self._recompute_reenumerate(ghost)
            return
        nxt = self._next_batch_tuple(pf)
        if nxt is not None:
            for g, k in nxt:
                self._bind_component(pf, ghost, g, k)
            with self.eng.cond:
                self.eng.combinations += 1
                self.eng.trace(self.agent.aid, "combine", pf=pf.pfid, combo=[k for _, k in nxt])
                self.eng.cond.notify_all()
            self.goal_stack = list(ghost.snapshot)
            self.backtrack_mode = False
            return
        # nothing stored is pending: drop the ghost and wait for producers
        ss.pop_cp()
        self.h.ncps -= 1
        out = self._pf_wait(pf)
        if out == "forward":
            self.backtrack_mode = False
        # "dead"/"fail": keep backtracking below

    def _next_batch_tuple(self, pf: ParcallFrame) -> Optional[list]:
        """Advance the combination cursor; returns [(handler, seq), ...]."""
        with self.eng.cond:
            while True:
                batch = pf.batch
                if batch is None:
                    producer = pf.uncombined()
                    if producer is None:
                        return None
                    if not pf.quiescent():
                        self.eng.request_suspend(pf)
                        return None  # combine once the siblings are parked
                    pf.batch = {
                        "producer": producer,
                        "k": producer.last_combined,
                        "ranges": [(g, g.last_combined) for g in pf.handlers],
                        "counter": None,
                    }
                    pf.status = PFStatus.COMBINING
                    continue
                producer = batch["producer"]
                sizes = [n if g is not producer else 1 for g, n in batch["ranges"]]
                counter = batch["counter"]
                if counter is None:
                    counter = [0] * len(sizes)
                    batch["counter"] = counter
                else:
                    pos = len(sizes) - 1  # rightmost index varies fastest
                    while pos >= 0:
                        counter[pos] += 1
                        if counter[pos] < sizes[pos]:
                            break
                        counter[pos] = 0
                        pos -= 1
                    if pos < 0:
                        producer.last_combined = batch["k"] + 1
                        pf.batch = None
                        pf.status = PFStatus.BACKTRACKING
                        continue
                out = []
                for (g, _), digit in zip(batch["ranges"], counter):
                    out.append((g, batch["k"] if g is producer else digit))
                pf.status = PFStatus.FORWARD
                pf.demand = False
                return out

    def _pf_wait(self, pf: ParcallFrame) -> str:
        """Wait at an exhausted ghost/release: more answers may still come."""
        eng = self.eng
        with eng.cond:
            if pf.status not in (PFStatus.FAILING, PFStatus.DONE):
                pf.status = PFStatus.BACKTRACKING
                pf.demand = True
                eng.cond.notify_all()
        while True:
            try:
                self._poll()
            except Machine._Suspend:
                self.goal_stack = [("wait", pf)]
                self.h.wait_parked = True
                raise
            job = None
            action = None
            with eng.cond:
                if pf.status is PFStatus.FAILING:
                    action = "fail"
                elif pf.status is PFStatus.DONE:
                    action = "dead"
                elif pf.batch is not None or pf.uncombined() is not None:
                    if pf.quiescent():
                        action = "combine"
                    else:
                        eng.request_suspend(pf)
                        eng.cond.wait(0.02)
                elif pf.dead():
                    self._teardown_frame(pf)
                    action = "dead"
                else:
                    job = eng.find_work(self.agent)
                    if job is None:
                        if self.h.pf is not None and not eng.needed(self.h):
                            self.h.wait_parked = True
                            raise Machine._Suspend()  # park; resumed on demand
                        eng.cond.wait(0.05)
            if action == "fail":
                self._fail_frame(pf, pop_release=True)
                return "fail"
            if action == "dead":
                return "dead"
            if action == "combine":
                if self._resume_combination(pf):
                    return "forward"
                continue
            if job is not None:
                self.agent.execute_job(job)

    def _resume_combination(self, pf: ParcallFrame) -> bool:
        """A new answer arrived: push a fresh ghost and install one tuple."""
        eng = self.eng
        ss = self.ss
        cell_mark, struct_mark = ss.store.marks()
        ghost = ChoicePoint(CPKind.GHOST, self.h, pf.snapshot, ss.trail.mark(), cell_mark, struct_mark)
        ghost.pf = pf
        if eng.cfg.ghost_retention:
            ghost.retention_cache = {}
        nxt = self._next_batch_tuple(pf)
        if nxt is None:
            return False  # racing state change; caller keeps waiting
        ss.push_cp(ghost)
        self.h.ncps += 1
        for g, k in nxt:
            self._bind_component(pf, ghost, g, k)
        with eng.cond:
            eng.combinations += 1
            eng.trace(self.agent.aid, "combine", pf=pf.pfid, combo=[k for _, k in nxt])
            eng.cond.notify_all()
        self.goal_stack = list(ghost.snapshot)
        return True

    def _release_step(self, release: ChoicePoint) -> None:
        """Fail into the release record at the bottom of a conjunction."""
        pf = release.pf
        if pf.status is not PFStatus.DONE:
            out = self._pf_wait(pf)
            if out == "forward":
                self.backtrack_mode = False
                return
            if out == "fail":
                return  # _fail_frame already removed the release record
        ss = self.ss
        self._purge_region(release.trail_mark)
        if ss.cps and ss.cps[-1] is release:
            ss.pop_cp()
        elif release in ss.cps:
            ss.remove_cp_at(ss.cps.index(release))
        self.h.ncps -= 1
        if pf in self.h.open_frames:
            self.h.open_frames.remove(pf)

    def _teardown_frame(self, pf: ParcallFrame) -> None:
        """Release the memo area and residual segments (cond held)."""
        eng = self.eng
        if pf.status is PFStatus.DONE:
            return
        pf.status = PFStatus.DONE
        stats = pf.memo.release()
        eng.memo_answers += stats["answers_stored"]
        eng.memo_bytes += stats["bytes_copied"]
        eng.trace(self.agent.aid, "release", pf=pf.pfid, **stats)
        for g in pf.handlers:
            if g.segment is not None and g.ss is not None:
                if g.ss is self.ss:
                    g.ss.excise_segment(g, undo_bindings=True)
                else:
                    g.cancel_requested = True  # its owner sweeps the residue
            if g.state not in _DEAD:
                g.state = HState.EXHAUSTED
        eng.cond.notify_all()

    def _fail_frame(self, pf: ParcallFrame, pop_release: bool) -> None:
        """The conjunction failed or is pruned: cancel and release everything."""
        eng = self.eng
        with eng.cond:
            eng.cancel_subtree(pf)
        while True:
            with eng.cond:
                for g in pf.handlers:
                    if g.state is HState.NOT_EXECUTED:
                        g.state = HState.CANCELLED
                    elif g.state in _PARKED and g.ss is self.ss:
                        self.ss.excise_segment(g, undo_bindings=True)
                        g.state = HState.CANCELLED
                pending = [
                    g for g in pf.handlers
                    if g.state is HState.RUNNING or (g.state in _PARKED and g.ss is not self.ss)
                ]
                if not pending:
                    if not pf.memo.released:
                        stats = pf.memo.release()
                        eng.memo_answers += stats["answers_stored"]
                        eng.memo_bytes += stats["bytes_copied"]
                    pf.status = PFStatus.DONE
                    eng.cond.notify_all()
                    break
                if eng._stop:
                    raise EngineStopped()
                eng.cond.wait(0.05)
        if pop_release:
            ss = self.ss
            for idx in range(len(ss.cps) - 1, -1, -1):
                cp = ss.cps[idx]
                if cp.kind is CPKind.RELEASE and cp.pf is pf:
                    self._purge_region(cp.trail_mark)
                    # drop the release and anything of mine stranded above it
                    for j in range(len(ss.cps) - 1, idx - 1, -1):
                        c = ss.cps[j]
                        if c is cp or c.owner is self.h:
                            ss.remove_cp_at(j)
                    self.h.ncps = sum(1 for c in ss.cps if c.owner is self.h)
                    break
        if pf in self.h.open_frames:
            self.h.open_frames.remove(pf)

    # -- the recomputation baseline ----------------------------------------------------------------------------

    def _recompute_reenumerate(self, ghost: ChoicePoint) -> None:
        """Dissolve the frame into sequential right-to-left re-enumeration."""
        pf = ghost.pf
        ss = self.ss
        eng = self.eng
        ss.pop_cp()  # the ghost
        self.h.ncps -= 1
        with eng.cond:
            pf.status = PFStatus.DONE
            stats = pf.memo.release()
            eng.memo_answers += stats["answers_stored"]
            eng.memo_bytes += stats["bytes_copied"]
            remote = []
            for g in pf.handlers:
                if g.segment is not None and g.ss is not None:
                    if g.ss is self.ss:
                        self.ss.excise_segment(g, undo_bindings=True)
                    else:
                        g.cancel_requested = True
                        remote.append(g)
                if g.state not in _DEAD:
                    g.state = HState.EXHAUSTED
            eng.cond.notify_all()
        while remote:
            with eng.cond:
                remote = [g for g in remote if g.segment is not None]
                if remote:
                    if eng._stop:
                        raise EngineStopped()
                    eng.cond.wait(0.05)
        for idx in range(len(ss.cps) - 1, -1, -1):
            cp = ss.cps[idx]
            if cp.kind is CPKind.RELEASE and cp.pf is pf:
                self._purge_region(cp.trail_mark)
                if cp in ss.cps:
                    ss.remove_cp_at(ss.cps.index(cp))
                self.h.ncps -= 1
                break
        if pf in self.h.open_frames:
            self.h.open_frames.remove(pf)
        # sequential re-enumeration; the gate skips the already-emitted first tuple
        new_stack = list(pf.snapshot)
        new_stack.append(("gate", pf))
        for branch in reversed(pf.recompute_branches):
            for ins in reversed(branch):
                new_stack.append(ins)
        self.goal_stack = new_stack
        self.backtrack_mode = False


def _collect_unbound(instrs: list, mapping: dict) -> None:
    """Record ids of unbound cells reachable from the instruction terms."""

    def walk(t: Term) -> None:
        t = deref(t)
        tt = type(t)
        if tt is VarCell:
            mapping[id(t)] = t
        elif tt is Struct:
            for a in t.args:
                walk(a)

    for ins in instrs:
        if ins[0] == "g":
            walk(ins[1])
        elif ins[0] in ("b", "nb"):
            for a in ins[2]:
                walk(a)
        elif ins[0] == "par":
            for b in ins[1]:
                _collect_unbound(list(b), mapping)


def _instrs_text(instrs: list) -> str:
    parts = []
    for ins in instrs:
        if ins[0] == "g":
            parts.append(term_text(ins[1]))
        elif ins[0] in ("b", "nb"):
            if ins[2]:
                parts.append(f"{ins[1]}({','.join(term_text(a) for a in ins[2])})")
            else:
                parts.append(ins[1])
        elif ins[0] == "par":
            parts.append("(" + " & ".join(_instrs_text(list(b)) for b in ins[1]) + ")")
        elif ins[0] == "cut":
            parts.append("!")
        elif ins[0] == "fail":
            parts.append("fail")
    return ", ".join(parts) if parts else "true"


def run_query(
    program: Program,
    query: QuerySpec,
    cfg: Optional[EngineConfig] = None,
    max_answers: Optional[int] = None,
    timeout: Optional[float] = None,
) -> RunResult:
    """Convenience wrapper: one engine, one query, clean teardown."""
    eng = Engine(program, cfg)
    try:
        eng.start()
        return eng.run(query, max_answers=max_answers, timeout=timeout)
    finally:
        eng.close()
