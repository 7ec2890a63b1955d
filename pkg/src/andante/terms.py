"""Logic terms, binding cells, per-agent term stores, trails, and unification.

Terms are plain Python values:

* atoms      -> ``str``
* integers   -> ``int``
* variables  -> :class:`VarCell` (a term *is* its binding cell)
* structures -> :class:`Struct`

Lists use the usual ``'.'/2`` + ``'[]'`` encoding.  Runtime structures are
registered in the creating worker's :class:`TermStore` so their age (creation
index) is known; structures that come straight from program text are static
and belong to no store.  Cells are bound at most once between a trail record
and the corresponding undo, so trail entries carry no old value.
"""

from __future__ import annotations

from typing import Iterable, Optional, Union

STATIC = -1  # store id of objects that predate every execution


class VarCell:
    """A mutable binding cell.  Unbound when ``binding is None``."""

    __slots__ = ("sid", "idx", "binding")

    def __init__(self, sid: int, idx: int) -> None:
        self.sid = sid
        self.idx = idx
        self.binding: Optional[Term] = None

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        tail = "" if self.binding is None else f"->{term_text(self.binding)}"
        return f"_V{self.sid}_{self.idx}{tail}"


class Struct:
    """A compound term ``functor(args...)`` with arity >= 1."""

    __slots__ = ("functor", "args", "sid", "idx")

    def __init__(self, functor: str, args: tuple, sid: int = STATIC, idx: int = -1) -> None:
        self.functor = functor
        self.args = args
        self.sid = sid
        self.idx = idx

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return term_text(self)


Term = Union[str, int, VarCell, Struct]

EMPTY_LIST = "[]"
CONS = "."


class TermStore:
    """Append-only arenas of cells and structures owned by one worker.

    Truncating to a saved mark removes exactly the objects created after the
    mark; callers must guarantee (via the trail) that nothing older still
    references them.
    """

    __slots__ = ("sid", "cells", "structs")

    def __init__(self, sid: int) -> None:
        self.sid = sid
        self.cells: list[VarCell] = []
        self.structs: list[Struct] = []

    def new_var(self) -> VarCell:
        cell = VarCell(self.sid, len(self.cells))
        self.cells.append(cell)
        return cell

    def new_struct(self, functor: str, args: tuple) -> Struct:
        s = Struct(functor, args, self.sid, len(self.structs))
        self.structs.append(s)
        return s

    def marks(self) -> tuple[int, int]:
        return (len(self.cells), len(self.structs))

    def truncate(self, cell_mark: int, struct_mark: int) -> None:
        if cell_mark < len(self.cells):
            del self.cells[cell_mark:]
        if struct_mark < len(self.structs):
            del self.structs[struct_mark:]


class Trail:
    """Log of bound cells.  Binding is unconditional: every bind records."""

    __slots__ = ("entries",)

    def __init__(self) -> None:
        self.entries: list[VarCell] = []

    def __len__(self) -> int:
        return len(self.entries)

    def mark(self) -> int:
        return len(self.entries)

    def push(self, cell: VarCell) -> None:
        self.entries.append(cell)

    def undo_to(self, mark: int) -> None:
        entries = self.entries
        if mark > len(entries):
            raise InternalTermError("trail mark beyond top")
        for i in range(len(entries) - 1, mark - 1, -1):
            entries[i].binding = None
        del entries[mark:]


class InternalTermError(Exception):
    """Raised when a term-level invariant is violated (engine bug)."""


def deref(t: Term) -> Term:
    """Follow the binding chain to the first non-variable or unbound cell."""
    while type(t) is VarCell:
        b = t.binding
        if b is None:
            return t
        t = b
    return t


def bind(cell: VarCell, value: Term, trail: Trail) -> None:
    if cell.binding is not None:
        raise InternalTermError("double binding of cell")
    cell.binding = value
    trail.push(cell)


def _occurs(cell: VarCell, t: Term) -> bool:
    stack = [t]
    while stack:
        x = deref(stack.pop())
        if x is cell:
            return True
        if type(x) is Struct:
            stack.extend(x.args)
    return False


def unify(a: Term, b: Term, trail: Trail, occurs_check: bool = False) -> bool:
    """Unify two terms, trailing every binding.

    On failure all bindings made by this call are undone and the trail top is
    restored, so a failed unification is side-effect free.
    """
    mark = trail.mark()
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        x = deref(x)
        y = deref(y)
        if x is y:
            continue
        tx = type(x)
        ty = type(y)
        if tx is VarCell:
            if ty is VarCell:
                # Bind the younger cell so truncation can never strand it.
                if (y.sid, y.idx) > (x.sid, x.idx):
                    bind(y, x, trail)
                else:
                    bind(x, y, trail)
            else:
                if occurs_check and ty is Struct and _occurs(x, y):
                    trail.undo_to(mark)
                    return False
                bind(x, y, trail)
        elif ty is VarCell:
            if occurs_check and tx is Struct and _occurs(y, x):
                trail.undo_to(mark)
                return False
            bind(y, x, trail)
        elif tx is Struct and ty is Struct:
            if x.functor != y.functor or len(x.args) != len(y.args):
                trail.undo_to(mark)
                return False
            stack.extend(zip(x.args, y.args))
        else:
            if tx is not ty or x != y:
                trail.undo_to(mark)
                return False
    return True


def struct_equal(a: Term, b: Term) -> bool:
    """Structural equality after dereferencing (the ``==`` relation)."""
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        x = deref(x)
        y = deref(y)
        if x is y:
            continue
        tx = type(x)
        if tx is not type(y):
            return False
        if tx is VarCell:
            return False  # distinct unbound cells
        if tx is Struct:
            if x.functor != y.functor or len(x.args) != len(y.args):
                return False
            stack.extend(zip(x.args, y.args))
        elif x != y:
            return False
    return True


# ---------------------------------------------------------------------------
# Canonical answer forms
# ---------------------------------------------------------------------------

def canonical(t: Term, varmap: Optional[dict] = None):
    """Detached hashable form of a term; unbound cells numbered by first use.

    Produces nested tuples: ints stay ints, atoms become ``('a', name)``,
    structures ``('s', functor, args)``, variables ``('v', k)``.
    """
    if varmap is None:
        varmap = {}

    def walk(x: Term):
        x = deref(x)
        tx = type(x)
        if tx is int:
            return x
        if tx is str:
            return ("a", x)
        if tx is VarCell:
            k = varmap.get(id(x))
            if k is None:
                k = len(varmap)
                varmap[id(x)] = k
            return ("v", k)
        return ("s", x.functor, tuple(walk(arg) for arg in x.args))

    return walk(t)


def canonical_tuple(terms: Iterable[Term]) -> tuple:
    """Canonical form of several terms sharing one variable numbering."""
    varmap: dict = {}
    return tuple(canonical(t, varmap) for t in terms)


# ---------------------------------------------------------------------------
# Answer capture (snapshots detached from the live stacks)
# ---------------------------------------------------------------------------

class SnapStruct:
    """A structure node copied into an answer snapshot."""

    __slots__ = ("functor", "args")

    def __init__(self, functor: str, args: tuple) -> None:
        self.functor = functor
        self.args = args


class SnapVar:
    """A cell created by the captured goal and still unbound at answer time."""

    __slots__ = ("k",)

    def __init__(self, k: int) -> None:
        self.k = k


class CaptureStats:
    __slots__ = ("structs", "cells", "nbytes")

    def __init__(self) -> None:
        self.structs = 0
        self.cells = 0
        self.nbytes = 0


def capture_answer(
    pairs: list[tuple[VarCell, Term]],
    start_tops: dict[int, tuple[int, int]],
    translate: Optional[dict] = None,
) -> tuple[list[tuple[VarCell, object]], CaptureStats]:
    """Snapshot entry values off the live stacks.

    ``pairs`` maps each entry cell to the live value to capture for it.
    ``start_tops`` maps store id -> (cell top, struct top) recorded when the
    captured goal started.  Subterms created at or after those marks are
    deep-copied; older objects stay as direct references since backtracking
    over the goal cannot reclaim them.  Sharing among copied subterms is
    preserved, and unbound young cells become fresh slots so each reinstall
    yields independent variables.  ``translate`` rewrites references to
    specific old cells (the goal's argument renaming) back to the cells the
    conjunction actually shares.
    """
    stats = CaptureStats()
    memo: dict[int, object] = {}
    nslots = 0
    translate = translate or {}

    def is_new(sid: int, idx: int, which: int) -> bool:
        if sid == STATIC:
            return False
        tops = start_tops.get(sid)
        if tops is None:
            return True
        return idx >= tops[which]

    def walk(t: Term) -> object:
        nonlocal nslots
        t = deref(t)
        tt = type(t)
        if tt is int or tt is str:
            return t
        if tt is VarCell:
            # reachable only when unbound
            real = translate.get(id(t))
            if real is not None:
                return real  # the goal's private renaming of a shared cell
            if not is_new(t.sid, t.idx, 0):
                return t  # pre-existing cell: keep a reference
            got = memo.get(id(t))
            if got is None:
                got = SnapVar(nslots)
                nslots += 1
                memo[id(t)] = got
                stats.cells += 1
                stats.nbytes += 16
            return got
        # Struct
        if not is_new(t.sid, t.idx, 1):
            return t
        got = memo.get(id(t))
        if got is None:
            args = tuple(walk(a) for a in t.args)
            got = SnapStruct(t.functor, args)
            memo[id(t)] = got
            stats.structs += 1
            stats.nbytes += 16 + 8 * len(args)
        return got

    entries: list[tuple[VarCell, object]] = []
    for cell, value in pairs:
        entries.append((cell, walk(value)))
        stats.nbytes += 16
    return entries, stats


def materialize(snap: object, store: TermStore, slots: dict[int, VarCell]) -> Term:
    """Rebuild a snapshot value inside ``store``; fresh cells per SnapVar."""
    ts = type(snap)
    if ts is SnapStruct:
        return store.new_struct(snap.functor, tuple(materialize(a, store, slots) for a in snap.args))
    if ts is SnapVar:
        cell = slots.get(snap.k)
        if cell is None:
            cell = store.new_var()
            slots[snap.k] = cell
        return cell
    return snap  # int, atom, or reference to a pre-existing object


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _list_parts(t: Term) -> Optional[tuple[list, Optional[Term]]]:
    items = []
    t = deref(t)
    while True:
        if t == EMPTY_LIST:
            return items, None
        if type(t) is Struct and t.functor == CONS and len(t.args) == 2:
            items.append(t.args[0])
            t = deref(t.args[1])
            continue
        if items:
            return items, t
        return None


def term_text(t: Term, depth: int = 0) -> str:
    """Readable rendering with list sugar; no operator notation."""
    t = deref(t)
    tt = type(t)
    if tt is int:
        return str(t)
    if tt is str:
        return t
    if tt is VarCell:
        return f"_G{t.sid}_{t.idx}"
    if depth > 80:
        return "..."
    parts = _list_parts(t)
    if parts is not None:
        items, tail = parts
        body = ",".join(term_text(x, depth + 1) for x in items)
        if tail is None:
            return f"[{body}]"
        return f"[{body}|{term_text(tail, depth + 1)}]"
    args = ",".join(term_text(a, depth + 1) for a in t.args)
    return f"{t.functor}({args})"


def canon_text(c) -> str:
    """Render a canonical form back to readable text (for reports)."""
    if isinstance(c, int):
        return str(c)
    tag = c[0]
    if tag == "a":
        return c[1]
    if tag == "v":
        return f"_{c[1]}"
    f, args = c[1], c[2]
    if f == CONS and len(args) == 2:
        items = [args[0]]
        tail = args[1]
        while isinstance(tail, tuple) and tail[0] == "s" and tail[1] == CONS and len(tail[2]) == 2:
            items.append(tail[2][0])
            tail = tail[2][1]
        inner = ",".join(canon_text(x) for x in items)
        if tail == ("a", EMPTY_LIST):
            return f"[{inner}]"
        return f"[{inner}|{canon_text(tail)}]"
    return f"{f}({','.join(canon_text(a) for a in args)})"
