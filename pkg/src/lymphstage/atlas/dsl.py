"""
Lexer, parser and AST for the region rule language.

A rule file is a sequence of statements::

    landmarks: liver, spleen, femur_left     # optional inventory
    define bones = femur_left | tibia_left   # named sub-expression
    region PoplitealL
      priority: 2
      expr: posterior_of(bbox(femur_left)) & inferior_of(centroid(femur_left))

See ``docs/rule-language.md`` for the full grammar and operator semantics.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, NamedTuple, Optional

from ..regions import REGIONS, RegionId

MAX_DEPTH = 32
# Guard against runaway recursion on pathological input such as thousands of
# parentheses; the semantic limit is MAX_DEPTH on the expression tree.
MAX_NESTING = 4 * MAX_DEPTH

KEYWORDS = frozenset({"landmarks", "define", "region", "priority", "expr"})
DIRECTIONS = ("anterior_of", "posterior_of", "left_of", "right_of", "superior_of", "inferior_of")
SET_FUNCTIONS = ("dilate", "hull", "slab", "left_side", "right_side") + DIRECTIONS
REF_KINDS = ("bbox", "centroid")


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + message)


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

class Node:
    @cached_property
    def depth(self) -> int:
        kids = list(self.children())
        return 1 + (max(k.depth for k in kids) if kids else 0)

    def children(self) -> Iterator["Node"]:
        return iter(())

    def landmarks(self) -> set[str]:
        out: set[str] = set()
        stack = [self]
        while stack:
            n = stack.pop()
            out.update(n.own_landmarks())
            stack.extend(n.children())
        return out

    def own_landmarks(self) -> tuple[str, ...]:
        return ()


@dataclass(frozen=True, eq=True)
class Landmark(Node):
    name: str

    def own_landmarks(self):
        return (self.name,)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Union(Node):
    items: tuple[Node, ...]

    def children(self):
        return iter(self.items)

    def __str__(self):
        return "(" + " | ".join(map(str, self.items)) + ")"


@dataclass(frozen=True)
class Intersect(Node):
    items: tuple[Node, ...]

    def children(self):
        return iter(self.items)

    def __str__(self):
        return "(" + " & ".join(map(str, self.items)) + ")"


@dataclass(frozen=True)
class Subtract(Node):
    base: Node
    removed: tuple[Node, ...]

    def children(self):
        yield self.base
        yield from self.removed

    def __str__(self):
        return "(" + " - ".join(map(str, (self.base,) + self.removed)) + ")"


@dataclass(frozen=True)
class Dilate(Node):
    operand: Node
    radius_mm: float

    def children(self):
        yield self.operand

    def __str__(self):
        return f"dilate({self.operand}, {self.radius_mm:g}mm)"


@dataclass(frozen=True)
class Hull(Node):
    """Axis-aligned world bounding box of the named landmarks."""
    names: tuple[str, ...]

    def own_landmarks(self):
        return self.names

    def __str__(self):
        return f"hull({', '.join(self.names)})"


@dataclass(frozen=True)
class Slab(Node):
    """All voxels whose superior-inferior coordinate lies within the
    combined S/I extent of the named landmarks."""
    names: tuple[str, ...]

    def own_landmarks(self):
        return self.names

    def __str__(self):
        return f"slab({', '.join(self.names)})"


@dataclass(frozen=True)
class MidlineSide(Node):
    side: str  # "left" | "right"
    name: str

    def own_landmarks(self):
        return (self.name,)

    def __str__(self):
        return f"{self.side}_side({self.name})"


@dataclass(frozen=True)
class HalfSpace(Node):
    direction: str  # one of DIRECTIONS, without the "_of"
    ref_kind: str  # "bbox" | "centroid"
    names: tuple[str, ...]
    offset_mm: float = 0.0

    def own_landmarks(self):
        return self.names

    def __str__(self):
        off = f", {self.offset_mm:g}mm" if self.offset_mm else ""
        return f"{self.direction}_of({self.ref_kind}({', '.join(self.names)}){off})"


@dataclass(frozen=True)
class RegionRule:
    region: RegionId
    priority: int
    expr: Node
    line: int


@dataclass(frozen=True)
class RuleSet:
    rules: dict[RegionId, RegionRule]
    landmark_inventory: Optional[tuple[str, ...]]
    defines: dict[str, Node] = field(default_factory=dict)
    source_hash: str = ""

    def __getitem__(self, region) -> RegionRule:
        return self.rules[RegionId(region)]

    def __len__(self):
        return len(self.rules)

    def referenced_landmarks(self) -> set[str]:
        out: set[str] = set()
        for r in self.rules.values():
            out |= r.expr.landmarks()
        return out


def rules_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------

class Token(NamedTuple):
    kind: str  # NAME, NUMBER, SYM, EOF
    value: str
    line: int
    column: int


_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r\f\v]+)|(?P<nl>\n)|(?P<comment>\#[^\n]*)"
    r"|(?P<number>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<sym>[|&\-(),:=])"
)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    n = len(text)
    match = _TOKEN_RE.match
    while pos < n:
        m = match(text, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "number":
            tokens.append(Token("NUMBER", m.group(), line, pos - line_start + 1))
        elif kind == "name":
            tokens.append(Token("NAME", m.group(), line, pos - line_start + 1))
        elif kind == "sym":
            tokens.append(Token("SYM", m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.pos = 0
        self.defines: dict[str, Node] = {}
        self.inventory: Optional[tuple[str, ...]] = None
        self.nesting = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        return RuleSyntaxError(msg, tok.line, tok.column)

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def is_sym(self, s: str) -> bool:
        t = self.tokens[self.pos]
        return t.kind == "SYM" and t.value == s

    def expect_sym(self, s: str) -> Token:
        if not self.is_sym(s):
            raise self.error(f"expected {s!r}, found {self._describe(self.tok)}")
        return self.advance()

    def expect_name(self, what: str = "a name") -> Token:
        t = self.tok
        if t.kind != "NAME":
            raise self.error(f"expected {what}, found {self._describe(t)}")
        if t.value in KEYWORDS:
            raise self.error(f"keyword {t.value!r} cannot be used as {what}")
        return self.advance()

    @staticmethod
    def _describe(t: Token) -> str:
        return "end of file" if t.kind == "EOF" else repr(t.value)

    def at_statement_start(self) -> bool:
        t = self.tok
        return t.kind == "EOF" or (t.kind == "NAME" and t.value in ("landmarks", "define", "region"))

    # statements
    def parse_file(self) -> RuleSet:
        rules: dict[RegionId, RegionRule] = {}
        while self.tok.kind != "EOF":
            t = self.tok
            if t.kind != "NAME" or t.value not in ("landmarks", "define", "region"):
                raise self.error(f"expected 'landmarks', 'define' or 'region', found {self._describe(t)}")
            if t.value == "landmarks":
                self.parse_inventory()
            elif t.value == "define":
                self.parse_define()
            else:
                rule = self.parse_region()
                if rule.region in rules:
                    raise RuleSyntaxError(f"duplicate region {rule.region.value!r} "
                                          f"(first defined on line {rules[rule.region].line})", t.line, t.column)
                rules[rule.region] = rule
        missing = [r.value for r in REGIONS if r not in rules]
        if missing:
            raise RuleSyntaxError(f"missing rules for region(s): {', '.join(missing)}")
        ordered = {r: rules[r] for r in REGIONS}
        return RuleSet(ordered, self.inventory, dict(self.defines))

    def parse_inventory(self):
        t = self.advance()
        if self.inventory is not None:
            raise self.error("landmark inventory declared twice", t)
        self.expect_sym(":")
        names = [self.expect_name("a landmark name").value]
        while self.is_sym(","):
            self.advance()
            names.append(self.expect_name("a landmark name").value)
        clash = [n for n in names if n in self.defines]
        if clash:
            raise self.error(f"landmark {clash[0]!r} collides with a define", t)
        self.inventory = tuple(names)

    def parse_define(self):
        self.advance()
        name_tok = self.expect_name("a define name")
        name = name_tok.value
        if name in self.defines:
            raise self.error(f"define {name!r} redeclared", name_tok)
        try:
            RegionId(name)
        except ValueError:
            pass
        else:
            raise self.error(f"define name {name!r} shadows a region name", name_tok)
        if self.inventory is not None and name in self.inventory:
            raise self.error(f"define {name!r} collides with a declared landmark", name_tok)
        self.expect_sym("=")
        self.defines[name] = self.parse_expr()

    def parse_region(self) -> RegionRule:
        start = self.advance()
        name_tok = self.tok
        if name_tok.kind != "NAME":
            raise self.error(f"expected a region name, found {self._describe(name_tok)}")
        self.advance()
        try:
            region = RegionId(name_tok.value)
        except ValueError:
            raise self.error(f"unknown region {name_tok.value!r}", name_tok) from None
        priority: Optional[int] = None
        expr: Optional[Node] = None
        while not self.at_statement_start():
            field_tok = self.tok
            if field_tok.kind != "NAME" or field_tok.value not in ("priority", "expr"):
                raise self.error(f"expected 'priority' or 'expr' in region {region.value}, "
                                 f"found {self._describe(field_tok)}")
            self.advance()
            self.expect_sym(":")
            if field_tok.value == "priority":
                if priority is not None:
                    raise self.error("priority given twice", field_tok)
                neg = False
                if self.is_sym("-"):
                    self.advance()
                    neg = True
                num = self.tok
                if num.kind != "NUMBER" or "." in num.value:
                    raise self.error(f"priority must be an integer, found {self._describe(num)}")
                self.advance()
                priority = -int(num.value) if neg else int(num.value)
            else:
                if expr is not None:
                    raise self.error("expr given twice", field_tok)
                expr = self.parse_expr()
        if priority is None:
            raise RuleSyntaxError(f"region {region.value} has no priority", start.line, start.column)
        if expr is None:
            raise RuleSyntaxError(f"region {region.value} has no expr", start.line, start.column)
        return RegionRule(region, priority, expr, start.line)

    # expressions
    def _checked(self, node: Node, tok: Token) -> Node:
        if node.depth > MAX_DEPTH:
            raise self.error(f"expression depth {node.depth} exceeds the maximum of {MAX_DEPTH}", tok)
        return node

    def parse_expr(self) -> Node:
        start = self.tok
        self.nesting += 1
        if self.nesting > MAX_NESTING:
            raise self.error(f"expression nesting exceeds the parser limit of {MAX_NESTING}")
        try:
            node = self.parse_term()
            union: list[Node] = [node]
            removed: list[Node] = []
            while self.tok.kind == "SYM" and self.tok.value in ("|", "-"):
                op = self.advance().value
                rhs = self.parse_term()
                if op == "|":
                    if removed:
                        union = [self._checked(Subtract(self._collapse(union), tuple(removed)), start)]
                        removed = []
                    union.append(rhs)
                else:
                    removed.append(rhs)
            node = self._collapse(union)
            if removed:
                node = Subtract(node, tuple(removed))
            return self._checked(node, start)
        finally:
            self.nesting -= 1

    @staticmethod
    def _collapse(items: list[Node]) -> Node:
        return items[0] if len(items) == 1 else Union(tuple(items))

    def parse_term(self) -> Node:
        start = self.tok
        items = [self.parse_atom()]
        while self.is_sym("&"):
            self.advance()
            items.append(self.parse_atom())
        return self._checked(items[0] if len(items) == 1 else Intersect(tuple(items)), start)

    def parse_atom(self) -> Node:
        t = self.tok
        if self.is_sym("("):
            self.advance()
            node = self.parse_expr()
            self.expect_sym(")")
            return node
        if t.kind != "NAME":
            raise self.error(f"expected a landmark, define or operator, found {self._describe(t)}")
        if t.value in KEYWORDS:
            raise self.error(f"keyword {t.value!r} cannot appear inside an expression")
        self.advance()
        if self.is_sym("("):
            return self.parse_call(t)
        if t.value in self.defines:
            return self.defines[t.value]
        if t.value in SET_FUNCTIONS or t.value in REF_KINDS:
            raise self.error(f"operator {t.value!r} needs an argument list", t)
        self._check_landmark(t)
        return Landmark(t.value)

    def _check_landmark(self, t: Token):
        if self.inventory is not None and t.value not in self.inventory:
            raise self.error(f"unresolved landmark {t.value!r} (not in the declared inventory)", t)

    def parse_names(self) -> tuple[str, ...]:
        names = []
        while True:
            t = self.expect_name("a landmark name")
            self._check_landmark(t)
            names.append(t.value)
            if not self.is_sym(","):
                return tuple(names)
            self.advance()

    def parse_length(self) -> float:
        neg = False
        if self.is_sym("-"):
            self.advance()
            neg = True
        t = self.tok
        if t.kind != "NUMBER":
            raise self.error(f"expected a length in mm, found {self._describe(t)}")
        self.advance()
        if self.tok.kind == "NAME" and self.tok.value == "mm":
            self.advance()
        value = float(t.value)
        return -value if neg else value

    def parse_call(self, fn: Token) -> Node:
        name = fn.value
        if name not in SET_FUNCTIONS:
            if name in REF_KINDS:
                raise self.error(f"{name}() is a reference and can only be used inside a direction operator", fn)
            raise self.error(f"unknown operator {name!r}", fn)
        self.expect_sym("(")
        try:
            if name == "dilate":
                operand = self.parse_expr()
                self.expect_sym(",")
                radius_tok = self.tok
                radius = self.parse_length()
                if radius < 0:
                    raise self.error("dilation radius must be non-negative", radius_tok)
                node: Node = Dilate(operand, radius)
            elif name == "hull":
                node = Hull(self.parse_names())
            elif name == "slab":
                node = Slab(self.parse_names())
            elif name in ("left_side", "right_side"):
                t = self.expect_name("a midline landmark")
                self._check_landmark(t)
                node = MidlineSide(name.split("_")[0], t.value)
            else:
                kind_tok = self.tok
                if kind_tok.kind != "NAME" or kind_tok.value not in REF_KINDS:
                    raise self.error(f"{name}() expects bbox(...) or centroid(...), "
                                     f"found {self._describe(kind_tok)}")
                self.advance()
                self.expect_sym("(")
                names = self.parse_names()
                self.expect_sym(")")
                offset = 0.0
                if self.is_sym(","):
                    self.advance()
                    offset = self.parse_length()
                node = HalfSpace(name[: -len("_of")], kind_tok.value, names, offset)
            self.expect_sym(")")
        except RecursionError:
            raise self.error("expression too deeply nested", fn) from None
        return self._checked(node, fn)


def parse_rules(text: str) -> RuleSet:
    """Parse a rule file into one rule per region.

    Raises :class:`RuleSyntaxError` (a ``ValueError``) with line and column
    on any malformed input.
    """
    if not isinstance(text, str):
        raise TypeError("rule text must be a str")
    rs = _Parser(text).parse_file()
    return RuleSet(rs.rules, rs.landmark_inventory, rs.defines, rules_hash(text))


def parse_expression(text: str, landmarks: Optional[tuple[str, ...]] = None) -> Node:
    """Parse a single region expression; ``landmarks`` optionally restricts
    which names resolve."""
    p = _Parser(text)
    p.inventory = tuple(landmarks) if landmarks is not None else None
    node = p.parse_expr()
    if p.tok.kind != "EOF":
        raise p.error(f"unexpected {p._describe(p.tok)} after expression")
    return node
