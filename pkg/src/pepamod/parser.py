"""Text format for Bio-PEPA systems (``.biopepa``) and its serializer.

The grammar is documented in ``docs/grammar.md``.  In short::

    location extra : 1 ul, C;
    parameter k1 = 0.004;
    rate v1 = fMA(k1);
    alpha@extra = v1 << alpha@extra + v2 (+) alpha@extra;
    info alpha@extra : step 50, max 1000;
    Module1_local = alpha@extra[1000] <*> Ste2@mem[1750];
    model Module1_local <*> Module1_IO;

Sections may appear in any order.  Parameters are evaluated in one pass
and may only refer to earlier parameters; every other name is resolved
once the whole document has been read.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .model import (
    FUNCTIONS,
    Amount,
    BinOp,
    BioPepaSystem,
    Call,
    Cooperation,
    Expr,
    Instance,
    Location,
    LocationKind,
    MassAction,
    ModelComponent,
    Name,
    Neg,
    Num,
    PrefixTerm,
    Role,
    SourceSpan,
    SpeciesComponent,
    SpeciesInfo,
    SpeciesRef,
    instances,
    neg,
)


class ParseError(Exception):
    def __init__(self, message: str, span: SourceSpan, expected: Iterable[str] = ()):
        self.span = span
        self.expected = tuple(sorted(set(expected)))
        self.message = message
        text = f"{span}: {message}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


@dataclass(frozen=True)
class Token:
    kind: str  # NUMBER, IDENT, OP, EOF
    text: str
    span: SourceSpan


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><\*>|\(\+\)|\(-\)|\(\.\)|<<|>>|\.\.|[<>()\[\]{},;:=@+\-*/^])
    """,
    re.VERBOSE,
)

KEYWORDS = {"location", "parameter", "rate", "info", "model"}


def tokenize(text: str, file: str = "<string>") -> list[Token]:
    tokens: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            span = SourceSpan(file, line, pos - line_start + 1, 1)
            raise ParseError(f"unexpected character {text[pos]!r}", span)
        kind = m.lastgroup
        value = m.group()
        span = SourceSpan(file, line, pos - line_start + 1, len(value))
        if kind == "number":
            tokens.append(Token("NUMBER", value, span))
        elif kind == "ident":
            tokens.append(Token("IDENT", value, span))
        elif kind == "op":
            tokens.append(Token("OP", value, span))
        newlines = value.count("\n")
        if newlines:
            line += newlines
            line_start = pos + value.rindex("\n") + 1
        pos = m.end()
    tokens.append(Token("EOF", "", SourceSpan(file, line, pos - line_start + 1, 0)))
    return tokens


_ROLE_OPS = {r.value: r for r in Role}


class _Parser:
    def __init__(self, text: str, file: str):
        self.toks = tokenize(text, file)
        self.i = 0
        self.file = file

    # -- token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, text: str) -> bool:
        return self.tok.kind in ("OP", "IDENT") and self.tok.text == text

    def next(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def fail(self, message: str, expected: Iterable[str] = ()) -> ParseError:
        found = self.tok.text or "end of input"
        return ParseError(f"{message}, found {found!r}", self.tok.span, expected)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.fail(f"expected {text!r}", [text])
        return self.next()

    def ident(self, what: str = "identifier") -> Token:
        if self.tok.kind != "IDENT":
            raise self.fail(f"expected {what}", [what])
        return self.next()

    def number(self) -> float:
        if self.tok.kind != "NUMBER":
            raise self.fail("expected number", ["number"])
        return float(self.next().text)

    def species_ref(self) -> SpeciesRef:
        name = self.ident("species name").text
        self.expect("@")
        loc = self.ident("location name").text
        return SpeciesRef(name, loc)

    # -- expressions
    def expr(self) -> Expr:
        left = self.term()
        while self.at("+") or self.at("-"):
            op = self.next().text
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.at("*") or self.at("/"):
            op = self.next().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.at("-"):
            self.next()
            return neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at("^"):
            self.next()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "NUMBER":
            self.next()
            return Num(float(tok.text))
        if self.at("("):
            self.next()
            inner = self.expr()
            self.expect(")")
            return inner
        if tok.kind == "IDENT":
            if self.peek().text == "@":
                return Amount(self.species_ref())
            if self.peek().text == "(":
                name = self.next().text
                self.next()
                args = [self.expr()]
                while self.at(","):
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if name == "fMA":
                    if len(args) != 1:
                        raise ParseError("fMA takes exactly one argument", tok.span)
                    return MassAction(args[0])
                if name not in FUNCTIONS:
                    raise ParseError(f"unknown function {name}", tok.span, sorted(FUNCTIONS) + ["fMA"])
                if len(args) != FUNCTIONS[name]:
                    raise ParseError(f"{name} takes {FUNCTIONS[name]} argument(s)", tok.span)
                return Call(name, tuple(args))
            self.next()
            return Name(tok.text)
        raise self.fail("expected expression", ["number", "identifier", "("])

    # -- species components
    def species_sum(self, subject: SpeciesRef) -> list[PrefixTerm]:
        terms = self.species_term(subject)
        while self.at("+"):
            self.next()
            terms += self.species_term(subject)
        return terms

    def species_term(self, subject: SpeciesRef) -> list[PrefixTerm]:
        start = self.tok
        if self.at("(") and self.peek().kind == "IDENT" and self.peek(2).text == ",":
            self.next()
            action = self.ident("action").text
            self.expect(",")
            kappa_tok = self.tok
            kappa = self.number()
            if kappa != int(kappa) or kappa < 1:
                raise ParseError("stoichiometry must be a positive integer", kappa_tok.span)
            self.expect(")")
            return [self.prefix_tail(action, int(kappa), subject, start.span)]
        if self.at("("):
            self.next()
            terms = self.species_sum(subject)
            self.expect(")")
            return terms
        action = self.ident("action").text
        return [self.prefix_tail(action, 1, subject, start.span)]

    def prefix_tail(self, action: str, kappa: int, subject: SpeciesRef, span: SourceSpan) -> PrefixTerm:
        if not (self.tok.kind == "OP" and self.tok.text in _ROLE_OPS):
            raise self.fail("expected prefix combinator", list(_ROLE_OPS))
        role = _ROLE_OPS[self.next().text]
        ref_tok = self.tok
        ref = self.species_ref()
        if ref != subject:
            raise ParseError(f"prefix names {ref} inside the definition of {subject}", ref_tok.span)
        return PrefixTerm(action, kappa, role, span)

    # -- model components
    def model_expr(self) -> "_MNode":
        left = self.model_atom()
        while self.at("<*>") or self.at("<"):
            tok = self.next()
            sync: Optional[frozenset[str]]
            if tok.text == "<*>":
                sync = None
            else:
                names: list[str] = []
                if not self.at(">"):
                    names.append(self.ident("action").text)
                    while self.at(","):
                        self.next()
                        names.append(self.ident("action").text)
                self.expect(">")
                sync = frozenset(names)
            right = self.model_atom()
            left = ("coop", left, right, sync, tok.span)
        return left

    def model_atom(self) -> "_MNode":
        if self.at("("):
            self.next()
            node = self.model_expr()
            self.expect(")")
            return node
        tok = self.tok
        if tok.kind == "IDENT" and self.peek().text == "@":
            ref = self.species_ref()
            self.expect("[")
            amount = self.expr()
            self.expect("]")
            return ("inst", ref, amount, tok.span)
        if tok.kind == "IDENT":
            self.next()
            return ("ref", tok.text, tok.span)
        raise self.fail("expected species instance or component name", ["Species@loc[...]", "name", "("])


# model nodes before name resolution: ("inst", ref, expr, span) |
# ("ref", name, span) | ("coop", left, right, sync, span)
_MNode = tuple


def evaluate_constant(expr: Expr, params: dict[str, float], span: SourceSpan) -> float:
    """Evaluate an expression over parameters only."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Name):
        if expr.name not in params:
            raise ParseError(f"unresolved name {expr.name}", span)
        return params[expr.name]
    if isinstance(expr, Neg):
        return -evaluate_constant(expr.operand, params, span)
    if isinstance(expr, BinOp):
        a = evaluate_constant(expr.left, params, span)
        b = evaluate_constant(expr.right, params, span)
        try:
            return _BINARY[expr.op](a, b)
        except (ZeroDivisionError, OverflowError, ValueError) as exc:
            raise ParseError(f"cannot evaluate constant: {exc}", span) from None
    if isinstance(expr, Call):
        args = [evaluate_constant(a, params, span) for a in expr.args]
        try:
            return _CALLS[expr.func](*args)
        except (OverflowError, ValueError) as exc:
            raise ParseError(f"cannot evaluate constant: {exc}", span) from None
    raise ParseError("species amounts and fMA are not allowed in constants", span)


_BINARY: dict[str, Callable[[float, float], float]] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": lambda a, b: a / b,
    "^": lambda a, b: float(a) ** b,
}
_CALLS: dict[str, Callable[..., float]] = {
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
    "min": min,
    "max": max,
}


def parse(text: str, file: str = "<string>") -> BioPepaSystem:
    """Parse a model document into a :class:`BioPepaSystem`.

    Raises :class:`ParseError` on malformed input or unresolved names in
    constant positions (initial amounts, step sizes, parameters).
    Cross-reference problems in rates and components are left to
    :func:`~pepamod.model.check_wellformed`.
    """
    p = _Parser(text, file)
    locations: dict[str, Location] = {}
    params: dict[str, float] = {}
    rates: dict[str, Expr] = {}
    rate_spans: dict[str, SourceSpan] = {}
    components: dict[SpeciesRef, SpeciesComponent] = {}
    infos: dict[SpeciesRef, tuple[dict[str, Expr], SourceSpan]] = {}
    named: dict[str, tuple[_MNode, SourceSpan]] = {}
    root: Optional[tuple[_MNode, SourceSpan]] = None

    def duplicate(what: str, tok: Token) -> ParseError:
        return ParseError(f"duplicate definition of {what} {tok.text}", tok.span)

    while p.tok.kind != "EOF":
        tok = p.tok
        if p.at("location") and p.peek().kind == "IDENT" and p.peek(2).text == ":":
            p.next()
            name = p.ident("location name")
            if name.text in locations:
                raise duplicate("location", name)
            p.expect(":")
            size = p.number()
            unit = "ul"
            if p.tok.kind == "IDENT":
                unit = p.next().text
            kind = LocationKind.COMPARTMENT
            if p.at(","):
                p.next()
                kind_tok = p.ident("C or M")
                if kind_tok.text not in ("C", "M"):
                    raise ParseError("location kind must be C or M", kind_tok.span, ["C", "M"])
                kind = LocationKind(kind_tok.text)
            p.expect(";")
            locations[name.text] = Location(name.text, size, kind, unit, name.span)
        elif p.at("parameter") and p.peek().kind == "IDENT" and p.peek(2).text == "=":
            p.next()
            name = p.ident("parameter name")
            if name.text in params:
                raise duplicate("parameter", name)
            p.expect("=")
            value = evaluate_constant(p.expr(), params, name.span)
            p.expect(";")
            params[name.text] = value
        elif p.at("rate") and p.peek().kind == "IDENT" and p.peek(2).text == "=":
            p.next()
            name = p.ident("action name")
            if name.text in rates:
                raise duplicate("rate", name)
            p.expect("=")
            rates[name.text] = p.expr()
            rate_spans[name.text] = name.span
            p.expect(";")
        elif p.at("info") and p.peek().kind == "IDENT" and p.peek(2).text == "@":
            p.next()
            ref = p.species_ref()
            if ref in infos:
                raise ParseError(f"duplicate species information for {ref}", tok.span)
            p.expect(":")
            items: dict[str, Expr] = {}
            while True:
                key = p.ident("step or max")
                if key.text not in ("step", "max"):
                    raise ParseError(f"unknown species information {key.text}", key.span, ["step", "max"])
                if key.text in items:
                    raise ParseError(f"duplicate {key.text}", key.span)
                items[key.text] = p.expr()
                if not p.at(","):
                    break
                p.next()
            p.expect(";")
            if "step" not in items:
                raise ParseError(f"species information for {ref} needs a step", tok.span, ["step"])
            infos[ref] = (items, tok.span)
        elif p.at("model") and p.peek().text not in ("=", "@"):
            p.next()
            if root is not None:
                raise ParseError("duplicate model component", tok.span)
            root = (p.model_expr(), tok.span)
            p.expect(";")
        elif tok.kind == "IDENT" and p.peek().text == "@":
            ref = p.species_ref()
            if ref in components:
                raise ParseError(f"duplicate species component {ref}", tok.span)
            p.expect("=")
            prefixes = p.species_sum(ref)
            p.expect(";")
            components[ref] = SpeciesComponent(ref, tuple(prefixes), tok.span)
        elif tok.kind == "IDENT" and p.peek().text == "=":
            p.next()
            p.next()
            if tok.text in named or tok.text in KEYWORDS:
                raise duplicate("component", tok)
            named[tok.text] = (p.model_expr(), tok.span)
            p.expect(";")
        else:
            raise p.fail("expected a definition",
                         ["location", "parameter", "rate", "info", "model", "Species@loc =", "Name ="])

    if root is None and named:
        raise ParseError("named model components but no 'model' definition", named[next(iter(named))][1], ["model"])

    def resolve(node: _MNode, stack: tuple[str, ...]) -> ModelComponent:
        if node[0] == "inst":
            _, ref, expr, span = node
            return Instance(ref, evaluate_constant(expr, params, span), span)
        if node[0] == "ref":
            _, name, span = node
            if name in stack:
                raise ParseError(f"cyclic model component {name}", span)
            if name not in named:
                raise ParseError(f"unknown model component {name}", span)
            return resolve(named[name][0], stack + (name,))
        _, left, right, sync, span = node
        return Cooperation(resolve(left, stack), resolve(right, stack), sync, span)

    model = resolve(root[0], ()) if root is not None else None

    species_info = []
    for ref, (items, span) in infos.items():
        step = evaluate_constant(items["step"], params, span)
        max_amount = evaluate_constant(items["max"], params, span) if "max" in items else None
        species_info.append(SpeciesInfo(ref, step, max_amount, span))

    return BioPepaSystem(
        locations=tuple(locations.values()),
        species_info=tuple(species_info),
        parameters=params,
        rates=rates,
        components=tuple(components.values()),
        model=model,
        rate_spans=rate_spans,
    )


def parse_file(path) -> BioPepaSystem:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), str(path))


# --- serialization ----------------------------------------------------------


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        text = str(int(x))
    else:
        text = repr(x)
    return f"({text})" if x < 0 or text.startswith("-") else text


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3
_ATOM = 5


def _prec(expr: Expr) -> int:
    if isinstance(expr, BinOp):
        return _PREC[expr.op]
    if isinstance(expr, Neg):
        return _NEG_PREC
    return _ATOM


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Num):
        return format_number(expr.value)
    if isinstance(expr, Name):
        return expr.name
    if isinstance(expr, Amount):
        return str(expr.ref)
    if isinstance(expr, MassAction):
        return f"fMA({format_expr(expr.constant)})"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(format_expr(a) for a in expr.args)})"
    if isinstance(expr, Neg):
        inner = format_expr(expr.operand)
        # operand of unary minus must bind at least as tightly as power
        if _prec(expr.operand) < _NEG_PREC:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[expr.op]
    left, right = format_expr(expr.left), format_expr(expr.right)
    if expr.op == "^":
        if _prec(expr.left) < _ATOM:
            left = f"({left})"
        if _prec(expr.right) < _NEG_PREC:
            right = f"({right})"
    else:
        if _prec(expr.left) < p:
            left = f"({left})"
        if _prec(expr.right) <= p:
            right = f"({right})"
    return f"{left} {expr.op} {right}"


def format_prefix(term: PrefixTerm, subject: SpeciesRef) -> str:
    head = term.action if term.stoichiometry == 1 else f"({term.action}, {term.stoichiometry})"
    return f"{head} {term.op.value} {subject}"


def format_model(node: ModelComponent) -> str:
    if isinstance(node, Instance):
        return f"{node.subject}[{format_number(node.initial)}]"
    op = "<*>" if node.sync is None else "<" + ", ".join(sorted(node.sync)) + ">"
    left = format_model(node.left)
    right = format_model(node.right)
    if isinstance(node.right, Cooperation):
        right = f"({right})"
    return f"{left} {op} {right}"


def serialize(system: BioPepaSystem) -> str:
    """Render a system in the concrete syntax accepted by :func:`parse`."""
    out = ["// locations"]
    for loc in system.locations:
        out.append(f"location {loc.name} : {format_number(loc.size)} {loc.unit}, {loc.kind.value};")
    out.append("")
    out.append("// parameters")
    for name, value in system.parameters.items():
        out.append(f"parameter {name} = {format_number(value)};")
    out.append("")
    out.append("// functional rates")
    for act, expr in system.rates.items():
        out.append(f"rate {act} = {format_expr(expr)};")
    out.append("")
    out.append("// species components")
    for comp in system.components:
        body = " + ".join(format_prefix(t, comp.subject) for t in comp.prefixes)
        out.append(f"{comp.subject} = {body};")
    out.append("")
    out.append("// species information")
    for info in system.species_info:
        line = f"info {info.subject} : step {format_number(info.step_size)}"
        if info.max_amount is not None:
            line += f", max {format_number(info.max_amount)}"
        out.append(line + ";")
    out.append("")
    out.append("// model component")
    if system.model is not None:
        out.append(f"model {format_model(system.model)};")
    return "\n".join(out) + "\n"


__all__ = [
    "ParseError",
    "Token",
    "tokenize",
    "parse",
    "parse_file",
    "serialize",
    "format_expr",
    "format_number",
    "evaluate_constant",
    "instances",
]
