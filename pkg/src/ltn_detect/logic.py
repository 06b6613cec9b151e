"""First-order logic syntax: terms, formulas, knowledge bases and the axiom-file parser.

Concrete syntax (one statement per line is conventional, newlines are not
significant)::

    # comment
    pred Cat/1
    pred partOf/2
    axiom forall x,y: Cat(x) & partOf(y,x) -> Tail(y) | Head(y)

Precedence, tightest first: ``~``, ``&``, ``|``, ``->`` (right associative).
A ``forall`` body extends as far to the right as possible. Lowercase
identifiers in argument position are variables; anything else (uppercase
start, digits) is a constant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

__all__ = [
    "PredicateSymbol", "Variable", "Constant", "Atom", "Not", "And", "Or",
    "Implies", "ForAll", "Formula", "KnowledgeBase", "AxiomSyntaxError",
    "parse_axioms", "parse_formula", "free_variables", "validate",
    "format_formula", "format_kb",
]


@dataclass(frozen=True)
class PredicateSymbol:
    name: str
    arity: int


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Constant:
    id: str


Term = Union[Variable, Constant]


@dataclass(frozen=True)
class Atom:
    pred: PredicateSymbol
    args: tuple[Term, ...]


@dataclass(frozen=True)
class Not:
    body: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class ForAll:
    vars: tuple[str, ...]
    body: "Formula"


Formula = Union[Atom, Not, And, Or, Implies, ForAll]


@dataclass
class KnowledgeBase:
    predicates: list[PredicateSymbol] = field(default_factory=list)
    axioms: list[Formula] = field(default_factory=list)

    def symbol(self, name: str) -> PredicateSymbol:
        for p in self.predicates:
            if p.name == name:
                return p
        raise KeyError(name)


class AxiomSyntaxError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line = line
        self.col = col
        if line:
            message = f"line {line}, column {col}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# structural queries

def free_variables(f: Formula) -> set[str]:
    """Variables of ``f`` not bound by an enclosing ``forall``."""
    if isinstance(f, Atom):
        return {a.name for a in f.args if isinstance(a, Variable)}
    if isinstance(f, Not):
        return free_variables(f.body)
    if isinstance(f, (And, Or, Implies)):
        return free_variables(f.left) | free_variables(f.right)
    if isinstance(f, ForAll):
        return free_variables(f.body) - set(f.vars)
    raise TypeError(f"not a formula: {f!r}")


def iter_atoms(f: Formula) -> Iterator[Atom]:
    if isinstance(f, Atom):
        yield f
    elif isinstance(f, (Not, ForAll)):
        yield from iter_atoms(f.body)
    else:
        yield from iter_atoms(f.left)
        yield from iter_atoms(f.right)


def validate(kb: KnowledgeBase) -> list[str]:
    """Return every invariant violation in ``kb``; an empty list means ok."""
    diagnostics = []
    declared: dict[str, PredicateSymbol] = {}
    for p in kb.predicates:
        if p.name in declared:
            diagnostics.append(f"duplicate symbol: {p.name}")
        if p.arity < 1:
            diagnostics.append(f"invalid arity for {p.name}: {p.arity}")
        declared.setdefault(p.name, p)
    for i, ax in enumerate(kb.axioms):
        for atom in iter_atoms(ax):
            sym = declared.get(atom.pred.name)
            if sym is None:
                diagnostics.append(f"axiom {i}: undeclared predicate {atom.pred.name}")
                continue
            if len(atom.args) != sym.arity or atom.pred.arity != sym.arity:
                diagnostics.append(
                    f"axiom {i}: arity mismatch for {sym.name}: "
                    f"expected {sym.arity}, got {len(atom.args)}")
        free = free_variables(ax)
        if free:
            diagnostics.append(f"axiom {i}: free variable(s) {', '.join(sorted(free))}")
    return diagnostics


# ---------------------------------------------------------------------------
# pretty printing

_PREC = {ForAll: 0, Implies: 1, Or: 2, And: 3, Not: 4, Atom: 5}


def _fmt_term(t: Term) -> str:
    return t.name if isinstance(t, Variable) else t.id


def _wrap(f: Formula, min_prec: int) -> str:
    s = format_formula(f)
    # a quantifier nested under an operator always gets parentheses
    if _PREC[type(f)] < min_prec or (isinstance(f, ForAll) and min_prec > 0):
        return f"({s})"
    return s


def format_formula(f: Formula) -> str:
    if isinstance(f, Atom):
        return f"{f.pred.name}({','.join(_fmt_term(a) for a in f.args)})"
    if isinstance(f, Not):
        return "~" + _wrap(f.body, _PREC[Not])
    if isinstance(f, And):
        return f"{_wrap(f.left, 3)} & {_wrap(f.right, 4)}"
    if isinstance(f, Or):
        return f"{_wrap(f.left, 2)} | {_wrap(f.right, 3)}"
    if isinstance(f, Implies):
        return f"{_wrap(f.left, 2)} -> {_wrap(f.right, 1)}"
    if isinstance(f, ForAll):
        return f"forall {','.join(f.vars)}: {format_formula(f.body)}"
    raise TypeError(f"not a formula: {f!r}")


def format_kb(kb: KnowledgeBase) -> str:
    lines = [f"pred {p.name}/{p.arity}" for p in kb.predicates]
    lines += [f"axiom {format_formula(ax)}" for ax in kb.axioms]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<arrow>->)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<int>[0-9]+)
  | (?P<punct>[~&|():,/])
""", re.VERBOSE)

_KEYWORDS = {"pred", "axiom", "forall"}


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise AxiomSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        tok = m.group()
        if kind not in ("ws", "comment"):
            if kind == "ident" and tok in _KEYWORDS:
                kind = tok
            elif kind in ("punct", "arrow"):
                kind = tok
            tokens.append(_Token(kind, tok, line, pos - line_start + 1))
        nl = tok.count("\n")
        if nl:
            line += nl
            line_start = pos + tok.rindex("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, predicates: dict[str, PredicateSymbol] | None = None):
        self.toks = _tokenize(text)
        self.i = 0
        self.predicates: dict[str, PredicateSymbol] = dict(predicates or {})

    @property
    def tok(self) -> _Token:
        return self.toks[self.i]

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        return AxiomSyntaxError(message, tok.line, tok.col)

    def expect(self, kind: str) -> _Token:
        tok = self.tok
        if tok.kind != kind:
            found = tok.text or "end of input"
            raise self.error(f"expected {kind!r}, found {found!r}")
        self.i += 1
        return tok

    def accept(self, kind: str) -> bool:
        if self.tok.kind == kind:
            self.i += 1
            return True
        return False

    def knowledge_base(self) -> KnowledgeBase:
        kb = KnowledgeBase()
        while self.tok.kind != "eof":
            if self.accept("pred"):
                name_tok = self.expect("ident")
                self.expect("/")
                arity_tok = self.expect("int")
                arity = int(arity_tok.text)
                if arity < 1:
                    raise self.error("arity must be positive", arity_tok)
                if name_tok.text in self.predicates:
                    raise self.error(f"duplicate symbol {name_tok.text}", name_tok)
                sym = PredicateSymbol(name_tok.text, arity)
                self.predicates[sym.name] = sym
                kb.predicates.append(sym)
            elif self.tok.kind == "axiom":
                start = self.expect("axiom")
                f = self.formula()
                free = free_variables(f)
                if free:
                    raise self.error(f"free variable {', '.join(sorted(free))} in axiom", start)
                kb.axioms.append(f)
            else:
                raise self.error(f"expected 'pred' or 'axiom', found {self.tok.text!r}")
        return kb

    def formula(self) -> Formula:
        left = self.disjunction()
        if self.accept("->"):
            return Implies(left, self.formula())
        return left

    def disjunction(self) -> Formula:
        f = self.conjunction()
        while self.accept("|"):
            f = Or(f, self.conjunction())
        return f

    def conjunction(self) -> Formula:
        f = self.unary()
        while self.accept("&"):
            f = And(f, self.unary())
        return f

    def unary(self) -> Formula:
        if self.accept("~"):
            return Not(self.unary())
        if self.accept("forall"):
            names = [self.variable_name()]
            while self.accept(","):
                names.append(self.variable_name())
            self.expect(":")
            return ForAll(tuple(names), self.formula())
        if self.accept("("):
            f = self.formula()
            self.expect(")")
            return f
        return self.atom()

    def variable_name(self) -> str:
        tok = self.expect("ident")
        if not tok.text[0].islower():
            raise self.error(f"variable names must be lowercase: {tok.text}", tok)
        return tok.text

    def atom(self) -> Atom:
        name_tok = self.tok
        if name_tok.kind != "ident":
            raise self.error(f"expected a predicate, found {name_tok.text or 'end of input'!r}")
        self.i += 1
        self.expect("(")
        args = [self.term()]
        while self.accept(","):
            args.append(self.term())
        self.expect(")")
        sym = self.predicates.get(name_tok.text)
        if sym is None:
            raise self.error(f"undeclared predicate {name_tok.text}", name_tok)
        if len(args) != sym.arity:
            raise self.error(
                f"arity mismatch for {sym.name}: expected {sym.arity}, got {len(args)}", name_tok)
        return Atom(sym, tuple(args))

    def term(self) -> Term:
        tok = self.tok
        if tok.kind not in ("ident", "int"):
            raise self.error(f"expected a term, found {tok.text or 'end of input'!r}")
        self.i += 1
        if tok.kind == "ident" and tok.text[0].islower():
            return Variable(tok.text)
        return Constant(tok.text)


def parse_axioms(text: str) -> KnowledgeBase:
    """Parse an axiom file into a :class:`KnowledgeBase`.

    Raises :class:`AxiomSyntaxError` (with line and column) on malformed
    input, undeclared predicates, arity mismatches and free variables.
    """
    return _Parser(text).knowledge_base()


def parse_formula(text: str, predicates) -> Formula:
    """Parse a single formula against an iterable of declared symbols."""
    p = _Parser(text, {s.name: s for s in predicates})
    f = p.formula()
    p.expect("eof")
    return f
