"""Per-conjunction answer memo areas.

Answers are captured off the live stacks as detached immutable snapshots and
reinstalled on demand during answer combination.  Visibility is restricted to
the owning conjunction: each frame gets its own area, and the whole area is
dropped exactly once, when the conjunction is released.
"""

from __future__ import annotations

from .terms import CaptureStats, Term, TermStore, Trail, VarCell, bind, capture_answer, materialize


class MemoError(Exception):
    """Lifecycle misuse (double release, access after release)."""


class ReinstallConflict(Exception):
    """An external cell was already bound while reinstalling an answer."""


class MemoAnswer:
    """One captured answer: external-cell entries plus copied term snapshot."""

    __slots__ = ("entries", "seq", "nodes", "nbytes")

    def __init__(self, entries: tuple, seq: int, stats: CaptureStats) -> None:
        self.entries = entries
        self.seq = seq
        self.nodes = stats.structs + stats.cells
        self.nbytes = stats.nbytes


class MemoArea:
    """Ordered answer lists for the goals of one parallel conjunction."""

    def __init__(self, owner_id: int) -> None:
        self.owner_id = owner_id
        self._lists: dict[int, list[MemoAnswer]] = {}
        self.total_bytes = 0
        self.answers_stored = 0
        self.reinstalls = 0
        self.released = False

    def _check(self) -> None:
        if self.released:
            raise MemoError("memo area used after release")

    def memoize(
        self,
        handler_key: int,
        pairs: list[tuple[VarCell, object]],
        start_tops: dict,
        translate: dict | None = None,
    ) -> int:
        """Capture live entry values as the goal's next answer."""
        self._check()
        bucket = self._lists.setdefault(handler_key, [])
        entries, stats = capture_answer(pairs, start_tops, translate)
        ans = MemoAnswer(tuple(entries), len(bucket), stats)
        bucket.append(ans)
        self.total_bytes += stats.nbytes
        self.answers_stored += 1
        return ans.seq

    def get(self, handler_key: int, seq: int) -> MemoAnswer:
        self._check()
        return self._lists[handler_key][seq]

    def count(self, handler_key: int) -> int:
        self._check()
        return len(self._lists.get(handler_key, ()))

    def release(self) -> dict:
        """Drop every stored answer; returns the final accounting snapshot."""
        if self.released:
            raise MemoError("memo area released twice")
        stats = {
            "answers_stored": self.answers_stored,
            "bytes_copied": self.total_bytes,
            "reinstalls": self.reinstalls,
        }
        self._lists.clear()
        self.total_bytes = 0
        self.released = True
        return stats


def reinstall(
    ans: MemoAnswer,
    store: TermStore,
    trail: Trail,
    cache: dict | None = None,
    cache_key: tuple | None = None,
) -> None:
    """Bind the answer's external cells to copies of its snapshot terms.

    All bindings are trailed on ``trail`` so the caller's ghost choice point
    can undo them.  Every external cell must be unbound; a bound cell means
    the combination protocol was violated.  With ``cache`` provided (ghost
    retention), previously materialized copies are reused instead of copied
    again.
    """
    materialized = cache.get(cache_key) if cache is not None else None
    if materialized is None:
        slots: dict[int, VarCell] = {}
        materialized = [materialize(snap, store, slots) for _, snap in ans.entries]
        if cache is not None:
            cache[cache_key] = materialized
    for (cell, _), value in zip(ans.entries, materialized):
        if cell.binding is not None:
            raise ReinstallConflict(f"external cell {cell!r} already bound during reinstall")
        bind(cell, value, trail)


def answer_terms(ans: MemoAnswer, store: TermStore) -> list[tuple[VarCell, Term]]:
    """Materialize the snapshot without binding (for inspection/tests)."""
    slots: dict[int, VarCell] = {}
    return [(cell, materialize(snap, store, slots)) for cell, snap in ans.entries]
