"""Parsing and clause compilation.

The accepted language is a Prolog subset: atoms, variables, integers, lists,
``,`` / ``&`` / ``:-`` / ``.``, ``!``, ``%`` line comments, and a fixed
operator table for arithmetic and comparison (no user operator declarations).
``&`` is the parallel conjunction; it binds tighter than ``,`` and looser
than argument commas.

Clauses compile to templates: clause variables become integer slots, ground
subterms are shared static structures, and bodies become instruction tuples
ready for the engines to instantiate per activation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .builtins import BUILTIN_SPECS, NONDET_BUILTINS
from .terms import CONS, EMPTY_LIST, STATIC, Struct

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class ReaderError(Exception):
    """Syntax or load-time error, with source position."""

    def __init__(self, message: str, line: int, col: int) -> None:
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>%[^\n]*)
  | (?P<int>\d+)
  | (?P<name>[a-z][A-Za-z0-9_]*)
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<punct>:-|=\.\.|\\==|==|=<|>=|//|[()\[\],|&.!=<>+\-*])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # int | name | var | punct | eof
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line = 1
    line_start = 0
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ReaderError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        chunk = m.group()
        if kind in ("ws", "comment"):
            nl = chunk.count("\n")
            if nl:
                line += nl
                line_start = m.start() + chunk.rindex("\n") + 1
        else:
            tokens.append(Token(kind, chunk, line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# ---------------------------------------------------------------------------
# Parser (Pratt, fixed operator table)
# ---------------------------------------------------------------------------


class PVar:
    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        self.name = name


class PStruct:
    __slots__ = ("functor", "args")

    def __init__(self, functor: str, args: tuple) -> None:
        self.functor = functor
        self.args = args


# (priority, type); xfy right-associative, yfx left-associative, xfx none
_INFIX = {
    ":-": (1200, "xfx"),
    ",": (1000, "xfy"),
    "&": (950, "xfy"),
    "=": (700, "xfx"),
    "==": (700, "xfx"),
    "\\==": (700, "xfx"),
    "<": (700, "xfx"),
    ">": (700, "xfx"),
    "=<": (700, "xfx"),
    ">=": (700, "xfx"),
    "is": (700, "xfx"),
    "+": (500, "yfx"),
    "-": (500, "yfx"),
    "*": (400, "yfx"),
    "//": (400, "yfx"),
    "mod": (400, "yfx"),
}


class _Parser:
    def __init__(self, tokens: list[Token]) -> None:
        self.tokens = tokens
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise ReaderError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.line, tok.col)
        return tok

    def at_clause_end(self) -> bool:
        return self.peek().text == "."

    # -- terms -------------------------------------------------------------

    def parse_term(self, max_prio: int):
        left = self.parse_primary()
        while True:
            tok = self.peek()
            op = tok.text
            if tok.kind not in ("punct", "name") or op not in _INFIX:
                return left
            prio, typ = _INFIX[op]
            if prio > max_prio:
                return left
            if op == ".":
                return left
            self.next()
            right_max = prio if typ == "xfy" else prio - 1
            right = self.parse_term(right_max)
            left = PStruct(op, (left, right))
            if typ != "yfx":
                # xfx/xfy operators cannot chain at the same priority on the left
                nxt = self.peek()
                if nxt.text == op and typ == "xfx":
                    raise ReaderError(f"operator {op!r} is not associative", nxt.line, nxt.col)

    def parse_primary(self):
        tok = self.next()
        if tok.kind == "int":
            return int(tok.text)
        if tok.kind == "var":
            return PVar(tok.text)
        if tok.kind == "name":
            if self.peek().text == "(":
                self.next()
                args = [self.parse_term(999)]
                while self.peek().text == ",":
                    self.next()
                    args.append(self.parse_term(999))
                self.expect(")")
                return PStruct(tok.text, tuple(args))
            return tok.text  # atom
        if tok.text == "(":
            inner = self.parse_term(1200)
            self.expect(")")
            return inner
        if tok.text == "[":
            return self.parse_list(tok)
        if tok.text == "-":
            nxt = self.peek()
            if nxt.kind == "int":
                self.next()
                return -int(nxt.text)
            operand = self.parse_term(200)
            return PStruct("-", (0, operand))  # unary minus as 0 - X
        if tok.text == "!":
            return "!"
        raise ReaderError(f"unexpected token {tok.text or 'end of input'!r}", tok.line, tok.col)

    def parse_list(self, open_tok: Token):
        if self.peek().text == "]":
            self.next()
            return EMPTY_LIST
        items = [self.parse_term(999)]
        while self.peek().text == ",":
            self.next()
            items.append(self.parse_term(999))
        tail = EMPTY_LIST
        if self.peek().text == "|":
            self.next()
            tail = self.parse_term(999)
        self.expect("]")
        out = tail
        for item in reversed(items):
            out = PStruct(CONS, (item, out))
        return out


# ---------------------------------------------------------------------------
# Goal trees and compiled clauses
# ---------------------------------------------------------------------------


class VarSlot:
    """Template placeholder for a clause-local variable."""

    __slots__ = ("i",)

    def __init__(self, i: int) -> None:
        self.i = i

    def __eq__(self, other) -> bool:
        return type(other) is VarSlot and other.i == self.i

    def __hash__(self) -> int:
        return hash(("slot", self.i))


class TStruct:
    """Non-ground structure template."""

    __slots__ = ("functor", "args")

    def __init__(self, functor: str, args: tuple) -> None:
        self.functor = functor
        self.args = args

    def __eq__(self, other) -> bool:
        return (
            type(other) is TStruct
            and other.functor == self.functor
            and other.args == self.args
        )

    def __hash__(self) -> int:
        return hash((self.functor, self.args))


# Body instructions (templates):
#   ('g', term)            call a user predicate
#   ('b', name, args)      deterministic builtin
#   ('nb', name, args)     nondeterministic builtin (between/3)
#   ('cut',)               prune to the activation barrier
#   ('fail',)
#   ('par', (branch, ...)) parallel conjunction; each branch is an instr tuple


@dataclass
class Clause:
    functor: str
    arity: int
    head_args: tuple
    body: tuple
    nvars: int
    varnames: tuple[str, ...]
    src: str = ""

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Clause)
            and (self.functor, self.arity, self.head_args, self.body, self.nvars)
            == (other.functor, other.arity, other.head_args, other.body, other.nvars)
        )


@dataclass
class Program:
    preds: dict[tuple[str, int], list[Clause]] = field(default_factory=dict)
    exists_table: frozenset = frozenset()

    def clauses_for(self, functor: str, arity: int) -> Optional[list[Clause]]:
        return self.preds.get((functor, arity))

    def __eq__(self, other) -> bool:
        return isinstance(other, Program) and self.preds == other.preds


@dataclass
class QuerySpec:
    body: tuple
    varnames: tuple[str, ...]
    var_slots: tuple[int, ...]  # slot index of each named variable
    nvars: int


class _ClauseCompiler:
    def __init__(self) -> None:
        self.slots: dict[str, int] = {}
        self.order: list[str] = []

    def slot(self, name: str) -> VarSlot:
        if name == "_":
            i = len(self.slots) + 1000_000  # anonymous: never shared
            self.order.append("_")
            self.slots[f"_#{i}"] = len(self.order) - 1
            return VarSlot(self.slots[f"_#{i}"])
        if name not in self.slots:
            self.slots[name] = len(self.order)
            self.order.append(name)
        return VarSlot(self.slots[name])

    def template(self, ast):
        if isinstance(ast, PVar):
            return self.slot(ast.name)
        if isinstance(ast, PStruct):
            args = tuple(self.template(a) for a in ast.args)
            if all(not isinstance(a, (VarSlot, TStruct)) for a in args):
                return Struct(ast.functor, args, STATIC, -1)
            return TStruct(ast.functor, args)
        return ast  # int or atom

    def body_instrs(self, ast, line: int, col: int) -> tuple:
        out: list = []
        self._emit(ast, out, line, col)
        return tuple(out)

    def _emit(self, ast, out: list, line: int, col: int) -> None:
        if isinstance(ast, PStruct) and ast.functor == "," and len(ast.args) == 2:
            self._emit(ast.args[0], out, line, col)
            self._emit(ast.args[1], out, line, col)
            return
        if isinstance(ast, PStruct) and ast.functor == "&" and len(ast.args) == 2:
            branches: list[tuple] = []
            self._flatten_par(ast, branches, line, col)
            out.append(("par", tuple(branches)))
            return
        if ast == "!":
            out.append(("cut",))
            return
        if ast == "true":
            out.append(("b", "true", ()))
            return
        if ast == "fail":
            out.append(("fail",))
            return
        name, arity, args = _goal_shape(ast, line, col)
        key = (name, arity)
        if key in BUILTIN_SPECS:
            targs = tuple(self.template(a) for a in args)
            kind = "nb" if key in NONDET_BUILTINS else "b"
            out.append((kind, name, targs))
            return
        out.append(("g", self.template(ast)))

    def _flatten_par(self, ast, branches: list, line: int, col: int) -> None:
        if isinstance(ast, PStruct) and ast.functor == "&" and len(ast.args) == 2:
            self._flatten_par(ast.args[0], branches, line, col)
            self._flatten_par(ast.args[1], branches, line, col)
            return
        branch: list = []
        self._emit(ast, branch, line, col)
        branches.append(tuple(branch))


def _goal_shape(ast, line: int, col: int):
    if isinstance(ast, str):
        return ast, 0, ()
    if isinstance(ast, PStruct):
        return ast.functor, len(ast.args), ast.args
    raise ReaderError(f"goal must be an atom or structure, not {ast!r}", line, col)


def _contains_cut(instrs: tuple) -> bool:
    for ins in instrs:
        if ins[0] == "cut":
            return True
        if ins[0] == "par":
            if any(_contains_cut(b) for b in ins[1]):
                return True
    return False


def parse_program(text: str) -> Program:
    """Parse and compile a program; raises :class:`ReaderError` on bad input."""
    parser = _Parser(tokenize(text))
    program = Program()
    exists: set = set()
    while parser.peek().kind != "eof":
        start = parser.peek()
        ast = parser.parse_term(1200)
        parser.expect(".")
        if isinstance(ast, PStruct) and ast.functor == ":-" and len(ast.args) == 2:
            head_ast, body_ast = ast.args
        else:
            head_ast, body_ast = ast, None  # a fact: empty body
        comp = _ClauseCompiler()
        name, arity, head_args = _goal_shape(head_ast, start.line, start.col)
        if (name, arity) in BUILTIN_SPECS:
            raise ReaderError(f"cannot redefine builtin {name}/{arity}", start.line, start.col)
        head_templates = tuple(comp.template(a) for a in head_args)
        body = () if body_ast is None else comp.body_instrs(body_ast, start.line, start.col)
        has_par = any(ins[0] == "par" for ins in body)
        if has_par and _contains_cut(body):
            raise ReaderError(
                f"cut is not allowed in a clause whose body contains '&' ({name}/{arity})",
                start.line,
                start.col,
            )
        clause = Clause(
            functor=name,
            arity=arity,
            head_args=head_templates,
            body=body,
            nvars=len(comp.order),
            varnames=tuple(comp.order),
        )
        program.preds.setdefault((name, arity), []).append(clause)
        if name == "known_file" and arity == 1 and not body:
            arg = head_templates[0]
            if isinstance(arg, (int, str)):
                exists.add(arg)
    program.exists_table = frozenset(exists)
    return program


def parse_query(text: str) -> QuerySpec:
    """Parse a single goal terminated by ``.`` into a query spec."""
    parser = _Parser(tokenize(text))
    start = parser.peek()
    if start.kind == "eof":
        raise ReaderError("empty query", start.line, start.col)
    ast = parser.parse_term(1200)
    parser.expect(".")
    tail = parser.peek()
    if tail.kind != "eof":
        raise ReaderError(f"trailing input after query: {tail.text!r}", tail.line, tail.col)
    comp = _ClauseCompiler()
    body = comp.body_instrs(ast, start.line, start.col)
    # first-occurrence order, duplicates impossible by construction
    pairs = tuple((n, i) for i, n in enumerate(comp.order) if n != "_")
    return QuerySpec(
        body=body,
        varnames=tuple(n for n, _ in pairs),
        var_slots=tuple(i for _, i in pairs),
        nvars=len(comp.order),
    )


# ---------------------------------------------------------------------------
# Template instantiation (shared by both engines)
# ---------------------------------------------------------------------------


def instantiate_term(t, env: list, store):
    """Build a runtime term from a template, allocating cells lazily."""
    tt = type(t)
    if tt is VarSlot:
        cell = env[t.i]
        if cell is None:
            cell = store.new_var()
            env[t.i] = cell
        return cell
    if tt is TStruct:
        return store.new_struct(t.functor, tuple(instantiate_term(a, env, store) for a in t.args))
    return t


def unify_head(call_args: tuple, head_templates: tuple, env: list, trail, store) -> bool:
    """Unify call arguments against a clause head template.

    First occurrences of head variables capture the argument directly without
    allocating a cell.  On failure every binding made here is undone.
    """
    from .terms import Struct as RStruct, VarCell, bind, deref, unify

    mark = trail.mark()

    def match(arg, tmpl) -> bool:
        tt = type(tmpl)
        if tt is VarSlot:
            seen = env[tmpl.i]
            if seen is None:
                env[tmpl.i] = arg
                return True
            return unify(seen, arg, trail)
        if tt is TStruct:
            d = deref(arg)
            if type(d) is VarCell:
                bind(d, instantiate_term(tmpl, env, store), trail)
                return True
            if type(d) is RStruct and d.functor == tmpl.functor and len(d.args) == len(tmpl.args):
                return all(match(a, t) for a, t in zip(d.args, tmpl.args))
            return False
        # ground template: int, atom, or static structure
        return unify(arg, tmpl, trail)

    for arg, tmpl in zip(call_args, head_templates):
        if not match(arg, tmpl):
            trail.undo_to(mark)
            return False
    return True


# ---------------------------------------------------------------------------
# Printing (canonical source form; parse . print . parse is a fixpoint)
# ---------------------------------------------------------------------------


def _tmpl_text(t, names: tuple[str, ...]) -> str:
    if isinstance(t, VarSlot):
        n = names[t.i] if t.i < len(names) else "_"
        return n if n != "_" else "_"
    if isinstance(t, int):
        return str(t)
    if isinstance(t, str):
        return t
    functor = t.functor
    args = t.args
    if functor == CONS and len(args) == 2:
        items = []
        cur = t
        while isinstance(cur, (Struct, TStruct)) and cur.functor == CONS and len(cur.args) == 2:
            items.append(cur.args[0])
            cur = cur.args[1]
        inner = ",".join(_tmpl_text(x, names) for x in items)
        if cur == EMPTY_LIST:
            return f"[{inner}]"
        return f"[{inner}|{_tmpl_text(cur, names)}]"
    if functor in _INFIX and len(args) == 2:
        return f"({_tmpl_text(args[0], names)} {functor} {_tmpl_text(args[1], names)})"
    return f"{functor}({','.join(_tmpl_text(a, names) for a in args)})"


def _instr_text(ins, names: tuple[str, ...]) -> str:
    op = ins[0]
    if op == "g":
        return _tmpl_text(ins[1], names)
    if op in ("b", "nb"):
        if not ins[2]:
            return ins[1]
        return f"{ins[1]}({','.join(_tmpl_text(a, names) for a in ins[2])})"
    if op == "cut":
        return "!"
    if op == "fail":
        return "fail"
    if op == "par":
        return " & ".join(f"({_body_text(b, names)})" for b in ins[1])
    raise ValueError(f"unknown instruction {op!r}")


def _body_text(body: tuple, names: tuple[str, ...]) -> str:
    if not body:
        return "true"
    return ", ".join(_instr_text(ins, names) for ins in body)


def program_text(program: Program) -> str:
    """Canonical source rendering of a compiled program."""
    lines = []
    for (name, arity), clauses in program.preds.items():
        for clause in clauses:
            if arity == 0:
                head = name
            else:
                head = f"{name}({','.join(_tmpl_text(a, clause.varnames) for a in clause.head_args)})"
            if clause.body:
                lines.append(f"{head} :- {_body_text(clause.body, clause.varnames)}.")
            else:
                lines.append(f"{head}.")
    return "\n".join(lines) + "\n"
