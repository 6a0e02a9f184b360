"""Model formulas.

Grammar::

    formula  := NAME '~' trafo clause*
    trafo    := 'linear' '(' ')'
              | 'bernstein' '(' INT ')' [ '+' 'varying' '(' NAME ')' ]
              | 'tensor' '(' 'bernstein' '(' INT ')' ',' NAME ',' INT ')'
    clause   := '|' 'strata' '(' NAME (',' NAME)* ')'
              | '+' 'shift' '(' term ('+' term)* ')'
              | '@' ('probit' | 'logit')
    term     := NAME [ (':' | '*') NAME ]

Each clause may appear at most once.  Error positions are 1-based byte
offsets into the UTF-8 encoded formula.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .basis import BernsteinBasis, CompositeBasis, LinearBasis, Support, TensorBasis, VaryingCoefBasis
from .data import Dataset, ShiftTerm, shift_design, stratify
from .model import ModelSpec, get_link

__all__ = ["FormulaError", "LoweringError", "Trafo", "Formula", "parse", "lower", "RESPONSE_PAD"]

RESPONSE_PAD = 0.1
_TOKEN = re.compile(rb"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_.]*)|(?P<int>[0-9]+)|(?P<punct>[~()|+@,:*]))")


class FormulaError(ValueError):
    """Syntax error; ``offset`` is the 1-based byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class LoweringError(ValueError):
    """The formula does not fit the data (unknown or mistyped column)."""


@dataclass(frozen=True)
class Trafo:
    kind: str  # linear | bernstein | tensor | varying
    order: int | None = None
    variable: str | None = None
    order_x: int | None = None

    def __str__(self):
        if self.kind == "linear":
            return "linear()"
        if self.kind == "bernstein":
            return f"bernstein({self.order})"
        if self.kind == "tensor":
            return f"tensor(bernstein({self.order}), {self.variable}, {self.order_x})"
        return f"bernstein({self.order}) + varying({self.variable})"


@dataclass(frozen=True)
class Formula:
    response: str
    trafo: Trafo
    strata: tuple = ()
    shifts: tuple = ()
    link: str = "logit"

    def __str__(self):
        out = f"{self.response} ~ {self.trafo}"
        if self.strata:
            out += f" | strata({', '.join(self.strata)})"
        if self.shifts:
            out += f" + shift({' + '.join(str(t) for t in self.shifts)})"
        return out + f" @ {self.link}"

    @property
    def variables(self) -> tuple:
        names = [] if self.trafo.variable is None else [self.trafo.variable]
        names += list(self.strata)
        for t in self.shifts:
            names += list(t.variables)
        return tuple(dict.fromkeys(names))


class _Parser:
    def __init__(self, text: str):
        self.src = text.encode("utf-8")
        self.tokens = []
        pos = 0
        while True:
            m = _TOKEN.match(self.src, pos)
            if m is None or m.end() == pos:
                rest = self.src[pos:]
                if rest.strip() == b"":
                    break
                start = pos + len(rest) - len(rest.lstrip())
                raise FormulaError(f"unexpected character {self.src[start:start + 1].decode('utf-8', 'replace')!r}", start + 1)
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind).decode("utf-8"), m.start(kind) + 1))
            pos = m.end()
        self.end = len(self.src) + 1
        self.i = 0

    def peek(self, k=0):
        j = self.i + k
        return self.tokens[j] if j < len(self.tokens) else (None, None, self.end)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value=None, kind=None, what=None):
        k, v, off = self.next()
        if (value is not None and v != value) or (kind is not None and k != kind) or k is None:
            want = what or (repr(value) if value else kind)
            got = "end of input" if k is None else repr(v)
            raise FormulaError(f"expected {want}, got {got}", off)
        return v, off

    def integer(self, what):
        v, off = self.expect(kind="int", what=what)
        n = int(v)
        if n < 1:
            raise FormulaError(f"{what} must be >= 1", off)
        return n

    def parse(self) -> Formula:
        response, _ = self.expect(kind="name", what="response name")
        self.expect("~")
        trafo = self.trafo()
        strata, shifts, link = None, None, None
        while True:
            k, v, off = self.peek()
            if k is None:
                break
            if v == "|":
                self.next()
                if strata is not None:
                    raise FormulaError("duplicate strata clause", off)
                strata = self.strata()
            elif v == "+":
                self.next()
                fn, foff = self.expect(kind="name", what="'shift'")
                if fn != "shift":
                    raise FormulaError(f"unknown function {fn!r}", foff)
                if shifts is not None:
                    raise FormulaError("duplicate shift clause", off)
                shifts = self.shift()
            elif v == "@":
                self.next()
                if link is not None:
                    raise FormulaError("duplicate link clause", off)
                link, loff = self.expect(kind="name", what="link")
                if link not in ("probit", "logit"):
                    raise FormulaError(f"unknown link {link!r}", loff)
            else:
                raise FormulaError(f"unexpected {v!r}", off)
        strata = strata or ()
        shifts = shifts or ()
        for t, off in shifts:
            if t.op is None and t.variables[0] in strata:
                raise FormulaError(f"shift term {t} duplicates a stratum variable", off)
        return Formula(response, trafo, tuple(strata), tuple(t for t, _ in shifts), link or "logit")

    def trafo(self) -> Trafo:
        name, off = self.expect(kind="name", what="transformation term")
        self.expect("(")
        if name == "linear":
            self.expect(")")
            return Trafo("linear")
        if name == "bernstein":
            order = self.integer("Bernstein order")
            self.expect(")")
            k, v, _ = self.peek()
            k1, v1, _ = self.peek(1)
            if v == "+" and v1 == "varying":
                self.next()
                self.next()
                self.expect("(")
                var, _ = self.expect(kind="name", what="covariate name")
                self.expect(")")
                return Trafo("varying", order, var)
            return Trafo("bernstein", order)
        if name == "tensor":
            inner, ioff = self.expect(kind="name", what="'bernstein'")
            if inner != "bernstein":
                raise FormulaError(f"unknown function {inner!r}", ioff)
            self.expect("(")
            order = self.integer("Bernstein order")
            self.expect(")")
            self.expect(",")
            var, _ = self.expect(kind="name", what="covariate name")
            self.expect(",")
            order_x = self.integer("covariate order")
            self.expect(")")
            return Trafo("tensor", order, var, order_x)
        raise FormulaError(f"unknown function {name!r}", off)

    def strata(self):
        fn, off = self.expect(kind="name", what="'strata'")
        if fn != "strata":
            raise FormulaError(f"unknown function {fn!r}", off)
        self.expect("(")
        names = [self.expect(kind="name", what="variable name")[0]]
        while self.peek()[1] == ",":
            self.next()
            names.append(self.expect(kind="name", what="variable name")[0])
        self.expect(")")
        return names

    def shift(self):
        self.expect("(")
        terms = [self.term()]
        while self.peek()[1] == "+":
            self.next()
            terms.append(self.term())
        self.expect(")")
        return terms

    def term(self):
        a, off = self.expect(kind="name", what="variable name")
        if self.peek()[1] in (":", "*"):
            op = self.next()[1]
            b, _ = self.expect(kind="name", what="variable name")
            return ShiftTerm((a, b), op), off
        return ShiftTerm((a,)), off


def parse(text: str) -> Formula:
    """Parse a model formula; raises :class:`FormulaError` with a byte offset."""
    return _Parser(text).parse()


def _numeric(d: Dataset, name):
    try:
        c = d.column(name)
    except ValueError as e:
        raise LoweringError(str(e)) from None
    if c.is_categorical:
        raise LoweringError(f"covariate {name!r} of the transformation term must be numeric")
    return c.values


def lower(f: Formula | str, d: Dataset, response_support: Support | None = None) -> ModelSpec:
    """Translate a formula into a :class:`ModelSpec` on dataset ``d``.

    The response support is the data range widened by 10% on each side
    unless given; covariate supports for tensor and varying terms are the
    observed covariate range.
    """
    if isinstance(f, str):
        f = parse(f)
    if f.response != d.response_name:
        raise LoweringError(f"formula response {f.response!r} does not match data response {d.response_name!r}")
    for v in f.variables:
        if v not in d.covariates:
            raise LoweringError(f"unknown column {v!r}")
    sup = response_support or Support.from_data(d.response, RESPONSE_PAD)
    t = f.trafo
    if t.kind == "linear":
        trafo = LinearBasis(sup)
    elif t.kind == "bernstein":
        trafo = BernsteinBasis(t.order, sup)
    elif t.kind == "tensor":
        xs = Support.from_data(_numeric(d, t.variable), 0.0)
        trafo = TensorBasis(BernsteinBasis(t.order, sup), BernsteinBasis(t.order_x, xs), t.variable)
    else:
        xs = Support.from_data(_numeric(d, t.variable), 0.0)
        base = BernsteinBasis(t.order, sup)
        trafo = CompositeBasis(base, VaryingCoefBasis(base, t.variable, xs))
    strata = None
    if f.strata:
        try:
            strata = stratify(d, f.strata)
        except TypeError as e:
            raise LoweringError(str(e)) from None
    shifts = shift_design(d, f.shifts) if f.shifts else None
    return ModelSpec(get_link(f.link), trafo, strata, shifts, f.response, str(f))
