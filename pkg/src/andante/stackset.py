"""Per-worker execution stacks with goal-segment bookkeeping.

A stack set bundles one worker's choice-point stack, trail, term store, and
goal queue.  Parallel goals executed on the stack claim contiguous segments
of the choice-point stack and trail; segments of distinct goals never
overlap.  Two structural operations keep out-of-order backtracking workable:

* :func:`relocate_to_top` moves a trapped goal's choice-point and trail
  slices to the stack tops (the slide-down form of stack reordering), and
* :func:`excise_segment` removes a dead goal's slices from mid-stack.

Term stores are never moved: after relocation the moved choice points'
store marks are raised to the current tops so backtracking over them cannot
reclaim other goals' objects.
"""

from __future__ import annotations

from collections import deque
from enum import Enum
from typing import Optional

from .terms import TermStore, Trail


class CPKind(Enum):
    CLAUSE = "clause"
    INTS = "ints"       # between/3 alternatives
    GHOST = "ghost"     # enumerates stored answer combinations
    RELEASE = "release" # pushed at fork; frees conjunction structures on failure
    RESUME = "resume"   # single alternative that resumes a suspended execution


class ChoicePoint:
    __slots__ = (
        "kind", "owner", "snapshot", "trail_mark", "cell_mark", "struct_mark",
        "call_args", "clauses", "cursor", "cell", "nxt", "hi", "pf", "retention_cache",
    )

    def __init__(
        self,
        kind: CPKind,
        owner,
        snapshot: tuple,
        trail_mark: int,
        cell_mark: int,
        struct_mark: int,
    ) -> None:
        self.kind = kind
        self.owner = owner
        self.snapshot = snapshot
        self.trail_mark = trail_mark
        self.cell_mark = cell_mark
        self.struct_mark = struct_mark
        self.pf = None
        self.retention_cache = None


class SegmentError(Exception):
    """A stack-segment invariant was violated (engine bug)."""


class GoalSegment:
    """Contiguous slices claimed by one parallel goal on one stack set."""

    __slots__ = ("cp_base", "cp_top", "trail_base", "trail_top", "start_tops", "fragmented")

    def __init__(self, cp_base: int, trail_base: int, start_tops: dict[int, tuple[int, int]]) -> None:
        self.cp_base = cp_base
        self.cp_top = cp_base
        self.trail_base = trail_base
        self.trail_top = trail_base
        self.start_tops = start_tops
        self.fragmented = False

    def cp_range(self) -> tuple[int, int]:
        return (self.cp_base, self.cp_top)


class StackSet:
    """One worker's stacks plus its queue of published parallel goals."""

    def __init__(self, aid: int) -> None:
        self.aid = aid
        self.cps: list[ChoicePoint] = []
        self.trail = Trail()
        self.store = TermStore(aid)
        self.queue: deque = deque()
        self.event_pending = False
        self.residents: list = []  # handlers whose segments live here
        self.relocations = 0

    # -- plain stack ops ----------------------------------------------------

    def push_cp(self, cp: ChoicePoint) -> int:
        self.cps.append(cp)
        return len(self.cps) - 1

    def pop_cp(self) -> ChoicePoint:
        if not self.cps:
            raise SegmentError("pop on empty choice-point stack")
        return self.cps.pop()

    def top_cp(self) -> Optional[ChoicePoint]:
        return self.cps[-1] if self.cps else None

    def undo_to_cp(self, cp: ChoicePoint) -> None:
        self.trail.undo_to(cp.trail_mark)
        self.store.truncate(cp.cell_mark, cp.struct_mark)

    # -- segments -----------------------------------------------------------

    def is_trapped(self, handler) -> bool:
        seg = handler.segment
        if seg is None or seg.cp_top <= seg.cp_base:
            return False
        return seg.cp_top != len(self.cps)

    def needs_restack(self, handler) -> bool:
        """True when the segment must move before backtracking into it.

        Beyond the buried-choice-point case, a resumed goal whose trail slice
        is no longer topmost must be rebased so its new bindings stay
        contiguous with its old ones.
        """
        seg = handler.segment
        if seg is None or seg.cp_top <= seg.cp_base:
            return False
        return seg.cp_top != len(self.cps) or seg.trail_top != len(self.trail)

    def can_relocate(self, handler) -> bool:
        """True when the handler's slices can be moved as one block."""
        seg = handler.segment
        if seg is None or seg.fragmented or seg.cp_top <= seg.cp_base:
            return False
        for other in self.residents:
            if other is handler or other.segment is None:
                continue
            o = other.segment
            if o.cp_base < seg.cp_top and o.cp_top > seg.cp_base:
                return False  # interleaved with someone else's segment
            if o.trail_base < seg.trail_top and o.trail_top > seg.trail_base:
                return False
        return True

    def relocate_to_top(self, handler) -> None:
        """Move a trapped goal's choice points and trail section to the tops.

        Four steps: copy both slices to the tops, slide everything that was
        above them down to close the gaps, remap the trail marks of every
        shifted choice point, and raise the moved choice points' store marks
        to the current store tops (stores stay in place).  Afterwards the
        goal is no longer trapped.
        """
        seg = handler.segment
        if seg is None:
            raise SegmentError("relocating a handler without a segment")
        if not self.needs_restack(handler):
            return
        if seg.fragmented:
            raise SegmentError("cannot relocate a fragmented segment")
        cb, ct = seg.cp_base, seg.cp_top
        tb, tt = seg.trail_base, seg.trail_top
        n_cp = ct - cb
        n_tr = tt - tb

        cps = self.cps
        moved_cps = cps[cb:ct]
        upper_cps = cps[ct:]
        cps[cb:] = upper_cps + moved_cps

        entries = self.trail.entries
        total = len(entries)
        moved_tr = entries[tb:tt]
        upper_tr = entries[tt:]
        entries[tb:] = upper_tr + moved_tr

        d_slice = total - tt  # moved entries shift up by this much
        cell_top, struct_top = self.store.marks()
        for cp in upper_cps:
            if cp.trail_mark >= tt:
                cp.trail_mark -= n_tr
            elif cp.trail_mark > tb:
                raise SegmentError("choice point above the slice marks into it")
        for cp in moved_cps:
            cp.trail_mark += d_slice
            cp.cell_mark = cell_top
            cp.struct_mark = struct_top

        for other in self.residents:
            o = other.segment
            if o is None or other is handler:
                continue
            if o.cp_base >= ct:
                o.cp_base -= n_cp
                o.cp_top -= n_cp
            if o.trail_base >= tt:
                o.trail_base -= n_tr
                o.trail_top -= n_tr
        seg.cp_base = len(cps) - n_cp
        seg.cp_top = len(cps)
        seg.trail_base = len(entries) - n_tr
        seg.trail_top = len(entries)
        self.relocations += 1

    def excise_segment(self, handler, undo_bindings: bool) -> None:
        """Remove a dead goal's slices from the stack, wherever they sit.

        The goal's store objects are not reclaimed here; buried objects are
        freed when backtracking below them eventually truncates the store.
        """
        seg = handler.segment
        if seg is None:
            return
        cb, ct = seg.cp_base, seg.cp_top
        tb, tt = seg.trail_base, seg.trail_top
        n_cp = ct - cb
        n_tr = tt - tb
        entries = self.trail.entries
        if undo_bindings:
            for i in range(tt - 1, tb - 1, -1):
                entries[i].binding = None
        del self.cps[cb:ct]
        del entries[tb:tt]
        for cp in self.cps[cb:]:
            if cp.trail_mark >= tt:
                cp.trail_mark -= n_tr
        for other in self.residents:
            o = other.segment
            if o is None or other is handler:
                continue
            if o.cp_base >= ct:
                o.cp_base -= n_cp
                o.cp_top -= n_cp
            if o.trail_base >= tt:
                o.trail_base -= n_tr
                o.trail_top -= n_tr
        seg.cp_base = seg.cp_top = 0
        seg.trail_base = seg.trail_top = 0
        if handler in self.residents:
            self.residents.remove(handler)
        handler.segment = None

    def purge_trail(self, mark: int, keep: list) -> None:
        """Drop trail entries at/above ``mark`` except kept handlers' slices.

        Dropped cells are unbound; kept slices compact downward preserving
        their order, and the kept owners' choice-point marks and segment
        bounds are remapped.  Kept slices must start at or above ``mark``.
        """
        entries = self.trail.entries
        slabs = []
        for r in keep:
            s = r.segment
            if s is None or s.trail_top <= s.trail_base:
                continue
            if s.trail_base < mark:
                raise SegmentError("kept slice starts below the purge mark")
            slabs.append((s.trail_base, s.trail_top, r))
        slabs.sort(key=lambda x: x[0])
        new: list = []
        cursor = mark
        for b, t, r in slabs:
            if b < cursor:
                raise SegmentError("kept slices overlap")
            for i in range(cursor, b):
                entries[i].binding = None
            new_base = mark + len(new)
            delta = new_base - b
            new.extend(entries[b:t])
            for cp in self.cps:
                if cp.owner is r:
                    if b <= cp.trail_mark <= t:
                        cp.trail_mark += delta
                    elif mark <= cp.trail_mark < b:
                        cp.trail_mark = new_base
            s = r.segment
            s.trail_base = new_base
            s.trail_top = new_base + (t - b)
            cursor = t
        for i in range(cursor, len(entries)):
            entries[i].binding = None
        entries[mark:] = new

    def remove_cp_at(self, index: int) -> ChoicePoint:
        """Drop a single buried choice point without undoing anything."""
        cp = self.cps.pop(index)
        for other in self.residents:
            o = other.segment
            if o is None:
                continue
            if o.cp_base > index:
                o.cp_base -= 1
            if o.cp_top > index:
                o.cp_top -= 1
        return cp

    # -- validation (used by tests and debug assertions) ---------------------

    def validate(self) -> None:
        prev = 0
        for cp in self.cps:
            if cp.trail_mark < prev:
                raise SegmentError("trail marks not nondecreasing bottom-to-top")
            prev = cp.trail_mark
            if cp.trail_mark > len(self.trail):
                raise SegmentError("trail mark beyond trail top")
        segs = sorted(
            (h.segment.cp_range() for h in self.residents if h.segment is not None),
            key=lambda r: r[0],
        )
        for (a0, a1), (b0, b1) in zip(segs, segs[1:]):
            if b0 < a1:
                raise SegmentError("handler segments overlap")
