"""LPV system data model and file ingestion.

An LpvSystem bundles the state matrix A(rho), a semialgebraic parameter
set {g_i(rho) >= 0, h_i(rho) = 0} with a bounding box hull, and a model
for the admissible parameter derivatives (box vertices, or polynomial
vertex maps rho -> mu_j(rho) for state-dependent derivative cones).

This module also owns the polynomial text grammar:

    expression := ['-'] term (('+'|'-') term)*
    term       := factor ('*' factor)*
    factor     := primary ['^' integer]
    primary    := number | fraction | variable | '(' expression ')' | '-' primary
    fraction   := integer '/' integer          (a literal, e.g. 15/4)

Variables are named tau, rho1..rhoN, eta1..etaN.  System files are
line-oriented (see parse_system); `$name` tokens are substituted from
the [defaults] section or from caller overrides before parsing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .poly import Polynomial, PolyMatrix, var, var_name


class ParseError(ValueError):
    """Syntax or validation error, annotated with line/column when known."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(message + loc)
        self.line = line
        self.col = col


# ---------------------------------------------------------------------------
# polynomial expression parser
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*^()/]))"
)


def _tokenize(text: str, line: int | None):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise ParseError(f"unexpected character {text[pos:].strip()[0]!r}", line, pos + 1)
            break
        if m.group("num") is not None:
            tokens.append(("num", text[m.start():m.end()].strip(), m.start()))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start()))
        else:
            tokens.append(("op", m.group("op"), m.start()))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _ExprParser:
    def __init__(self, text: str, line: int | None = None):
        self.text = text
        self.line = line
        self.tokens = _tokenize(text, line)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message: str):
        raise ParseError(message, self.line, self.peek()[2] + 1)

    def parse(self) -> Polynomial:
        p = self.expression()
        if self.peek()[0] != "end":
            self.fail(f"trailing input {self.peek()[1]!r}")
        return p

    def expression(self) -> Polynomial:
        out = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.next()[1]
            rhs = self.term()
            out = out + rhs if op == "+" else out - rhs
        return out

    def term(self) -> Polynomial:
        out = self.factor()
        while self.peek()[:2] == ("op", "*"):
            self.next()
            out = out * self.factor()
        return out

    def factor(self) -> Polynomial:
        base = self.primary()
        if self.peek()[:2] == ("op", "^"):
            self.next()
            kind, text, _ = self.next()
            if kind != "num" or not text.isdigit():
                self.fail("exponent must be a nonnegative integer")
            return base ** int(text)
        return base

    def primary(self) -> Polynomial:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.next()
            return -self.primary()
        if kind == "num":
            self.next()
            value = float(text)
            if self.peek()[:2] == ("op", "/"):
                self.next()
                dkind, dtext, _ = self.next()
                if dkind != "num":
                    self.fail("fraction denominator must be a number")
                value /= float(dtext)
            return Polynomial.constant(value)
        if kind == "name":
            self.next()
            return Polynomial.variable(text)
        if kind == "op" and text == "(":
            self.next()
            inner = self.expression()
            if self.peek()[:2] != ("op", ")"):
                self.fail("missing closing parenthesis")
            self.next()
            return inner
        self.fail("expected a number, variable or parenthesized expression")


def parse_polynomial(text: str, line: int | None = None) -> Polynomial:
    """Parse one polynomial expression in the grammar above."""
    return _ExprParser(text, line).parse()


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

def rho_name(i: int) -> str:
    return f"rho{i + 1}"


def eta_name(i: int) -> str:
    return f"eta{i + 1}"


@dataclass(frozen=True)
class ParameterSet:
    """Semialgebraic parameter set {g_i >= 0, h_i = 0} with a box hull."""

    n_params: int
    hull: tuple[tuple[float, float], ...]
    inequalities: tuple[Polynomial, ...] = ()
    equalities: tuple[Polynomial, ...] = ()

    def rho_ids(self) -> tuple[int, ...]:
        return tuple(var(rho_name(i)) for i in range(self.n_params))

    def circle_hook(self) -> tuple[float, ...] | None:
        """Radius if the set is a circle h = a*(rho1^2 + rho2^2) - b, else None."""
        if self.n_params != 2 or len(self.equalities) != 1:
            return None
        h = self.equalities[0]
        r1, r2 = self.rho_ids()
        sq1, sq2 = ((r1, 2),), ((r2, 2),)
        extra = set(h.terms) - {sq1, sq2, ()}
        if extra:
            return None
        a1, a2, b = h.coefficient(sq1), h.coefficient(sq2), -h.coefficient(())
        if abs(a1 - a2) > 1e-12 or a1 <= 0 or b / a1 <= 0:
            return None
        return (math.sqrt(b / a1),)


@dataclass(frozen=True)
class DerivativeModel:
    """Admissible parameter derivative set.

    kind "box": mu ranges over an interval box, represented by its vertex
    set (degenerate intervals collapse).  kind "maps": mu is one of a
    finite list of polynomial maps rho -> mu_j(rho), covering
    state-dependent derivative cones.  Box vertices are exposed as
    constant maps so downstream code has a single path.
    """

    kind: str
    box: tuple[tuple[float, float], ...] = ()
    maps: tuple[tuple[Polynomial, ...], ...] = ()

    def vertex_maps(self) -> tuple[tuple[Polynomial, ...], ...]:
        """Distinct derivative vertex maps, each a vector of N polynomials."""
        if self.kind == "maps":
            vertices = self.maps
        else:
            vertices = [()]
            for lo, hi in self.box:
                values = (lo,) if lo == hi else (lo, hi)
                vertices = [v + (x,) for v in vertices for x in values]
            vertices = [tuple(Polynomial.constant(x) for x in v) for v in vertices]
        seen, out = set(), []
        for v in vertices:
            if v not in seen:
                seen.add(v)
                out.append(v)
        return tuple(out)

    def is_static_zero(self) -> bool:
        return all(all(p.is_zero() for p in v) for v in self.vertex_maps())


@dataclass(frozen=True)
class LpvSystem:
    """System xdot = A(rho) x with parameter set and derivative model."""

    n: int
    a_matrix: PolyMatrix
    params: ParameterSet
    derivs: DerivativeModel
    label: str = ""

    def rho_ids(self) -> tuple[int, ...]:
        return self.params.rho_ids()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

SAMPLE_ATTEMPT_CAP = 20000


def sample_parameter(params: ParameterSet, rng, count: int = 1) -> np.ndarray:
    """Draw points from the parameter set (g_i >= -1e-9, |h_i| <= 1e-9).

    rng is a seed or a numpy Generator.  Circle equality sets use an
    angle parametrization; other equality descriptions rely on rejection
    and fail with "set appears empty or thin" when nothing is found.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if params.n_params == 0:
        return np.zeros((count, 0))
    names = [rho_name(i) for i in range(params.n_params)]
    circle = params.circle_hook()
    lo = np.array([b[0] for b in params.hull])
    hi = np.array([b[1] for b in params.hull])
    out = np.empty((count, params.n_params))
    found = 0
    attempts = 0
    while found < count:
        if attempts >= SAMPLE_ATTEMPT_CAP:
            raise ValueError("parameter set appears empty or thin "
                             f"(no feasible point in {attempts} attempts)")
        attempts += 1
        if circle is not None:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            pt = circle[0] * np.array([math.cos(angle), math.sin(angle)])
        else:
            pt = rng.uniform(lo, hi)
        assign = dict(zip(names, pt))
        if any(g.evaluate(assign) < -1e-9 for g in params.inequalities):
            continue
        if circle is None and any(abs(h.evaluate(assign)) > 1e-9 for h in params.equalities):
            continue
        out[found] = pt
        found += 1
    return out[0] if count == 1 else out


# ---------------------------------------------------------------------------
# system file format
# ---------------------------------------------------------------------------

_SECTIONS = ("defaults", "system", "matrix", "parameters",
             "inequalities", "equalities", "derivatives")
_SUBST = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*)")


def _substitute_templates(text: str, overrides: Mapping[str, float] | None):
    """Replace $name tokens from [defaults] and overrides; overrides win."""
    defaults: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line.lower() == "[defaults]":
            collecting = lineno
            break
    else:
        collecting = None
    if collecting is not None:
        for lineno, raw in enumerate(text.splitlines(), 1):
            if lineno <= collecting:
                continue
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                break
            if "=" not in line:
                raise ParseError("defaults entries must look like 'name = value'", lineno)
            name, value = (s.strip() for s in line.split("=", 1))
            defaults[name] = value
    table = dict(defaults)
    if overrides:
        table.update({k: repr(float(v)) for k, v in overrides.items()})

    def repl(m, lineno):
        name = m.group(1)
        if name not in table:
            raise ParseError(f"no value for template ${name}", lineno)
        return f"({table[name]})"

    out_lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        out_lines.append(_SUBST.sub(lambda m: repl(m, lineno), raw))
    return "\n".join(out_lines)


def parse_system(text: str, overrides: Mapping[str, float] | None = None) -> LpvSystem:
    """Parse a system spec file (text) into a validated LpvSystem."""
    text = _substitute_templates(text, overrides)
    sections: dict[str, list[tuple[int, str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            name = line.strip("[]").strip().lower()
            if name not in _SECTIONS:
                raise ParseError(f"unknown section [{name}]", lineno)
            if name in sections:
                raise ParseError(f"duplicate section [{name}]", lineno)
            current = name
            sections[name] = []
            continue
        if current is None:
            raise ParseError("content before the first section header", lineno)
        sections[current].append((lineno, line))

    for required in ("system", "matrix", "parameters"):
        if required not in sections:
            raise ParseError(f"missing required section [{required}]")

    def keyvals(section: str) -> dict[str, tuple[int, str]]:
        out = {}
        for lineno, line in sections.get(section, []):
            if "=" not in line:
                raise ParseError(f"expected 'key = value' in [{section}]", lineno)
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.lower()] = (lineno, v)
        return out

    sysvals = keyvals("system")
    if "n" not in sysvals:
        raise ParseError("missing 'n' in [system]")
    lineno, ntext = sysvals["n"]
    try:
        n = int(ntext)
    except ValueError:
        raise ParseError(f"invalid state dimension {ntext!r}", lineno)
    if n < 1:
        raise ParseError("state dimension must be >= 1", lineno)
    label = sysvals.get("label", (0, ""))[1]

    # parameters: N plus one hull line per parameter
    pvals = sections["parameters"]
    n_params = None
    hull: list[tuple[float, float]] = []
    for lineno, line in pvals:
        low = line.lower()
        if low.startswith("n"):
            if "=" not in line:
                raise ParseError("expected 'N = <count>'", lineno)
            n_params = int(line.split("=", 1)[1])
        elif low.startswith("hull:"):
            parts = line.split(":", 1)[1].split()
            if len(parts) != 2:
                raise ParseError("hull line must be 'hull: lo hi'", lineno)
            lo_v, hi_v = (parse_polynomial(p, lineno).constant_value() for p in parts)
            if not (math.isfinite(lo_v) and math.isfinite(hi_v)) or lo_v > hi_v:
                raise ParseError("invalid hull interval", lineno)
            hull.append((lo_v, hi_v))
        else:
            raise ParseError(f"unexpected line in [parameters]: {line!r}", lineno)
    if n_params is None:
        raise ParseError("missing 'N = <count>' in [parameters]")
    if len(hull) != n_params:
        raise ParseError(f"expected {n_params} hull lines, found {len(hull)}")

    rho_ids = [var(rho_name(i)) for i in range(n_params)]

    def parse_poly_line(lineno: int, text: str, context: str) -> Polynomial:
        p = parse_polynomial(text, lineno)
        bad = [var_name(v) for v in p.variables() if v not in rho_ids]
        if bad:
            raise ParseError(f"unknown variable(s) {bad} in {context}", lineno)
        return p

    ineqs = [parse_poly_line(ln, s, "[inequalities]")
             for ln, s in sections.get("inequalities", [])]
    eqs = [parse_poly_line(ln, s, "[equalities]")
           for ln, s in sections.get("equalities", [])]

    # matrix: n rows of n comma separated expressions
    mrows = sections["matrix"]
    if len(mrows) != n:
        raise ParseError(f"[matrix] must contain {n} rows, found {len(mrows)}")
    grid = []
    for lineno, line in mrows:
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != n:
            raise ParseError(f"matrix row needs {n} entries, found {len(cells)}", lineno)
        grid.append([parse_poly_line(lineno, cell, "[matrix]") for cell in cells])
    a_matrix = PolyMatrix(grid)

    # derivatives: either box lines (one per parameter) or map lines
    dlines = sections.get("derivatives", [])
    box: list[tuple[float, float]] = []
    maps: list[tuple[Polynomial, ...]] = []
    for lineno, line in dlines:
        low = line.lower()
        if low.startswith("box:"):
            parts = line.split(":", 1)[1].split()
            if len(parts) != 2:
                raise ParseError("box line must be 'box: lo hi'", lineno)
            lo_v, hi_v = (parse_polynomial(p, lineno).constant_value() for p in parts)
            if lo_v > hi_v:
                raise ParseError("invalid derivative interval", lineno)
            box.append((lo_v, hi_v))
        elif low.startswith("map:"):
            cells = [c.strip() for c in line.split(":", 1)[1].split(",")]
            if len(cells) != n_params:
                raise ParseError(f"map needs {n_params} components", lineno)
            maps.append(tuple(parse_poly_line(lineno, c, "[derivatives]") for c in cells))
        else:
            raise ParseError(f"unexpected line in [derivatives]: {line!r}", lineno)
    if box and maps:
        raise ParseError("mix of box and map derivative lines")
    if box:
        if len(box) != n_params:
            raise ParseError(f"expected {n_params} box lines, found {len(box)}")
        derivs = DerivativeModel(kind="box", box=tuple(box))
    elif maps:
        derivs = DerivativeModel(kind="maps", maps=tuple(maps))
    else:
        derivs = DerivativeModel(kind="box", box=tuple((0.0, 0.0) for _ in range(n_params)))

    params = ParameterSet(n_params=n_params, hull=tuple(hull),
                          inequalities=tuple(ineqs), equalities=tuple(eqs))
    system = LpvSystem(n=n, a_matrix=a_matrix, params=params, derivs=derivs, label=label)
    # nonemptiness check by sampling (raises "empty or thin" otherwise)
    sample_parameter(params, rng=0)
    return system


def print_system(system: LpvSystem) -> str:
    """Render a system back to the file format (parse(print(s)) == s)."""
    lines = ["[system]", f"n = {system.n}"]
    if system.label:
        lines.append(f"label = {system.label}")
    lines.append("[matrix]")
    for row in system.a_matrix.entries:
        lines.append(", ".join(str(p) for p in row))
    lines.append("[parameters]")
    lines.append(f"N = {system.params.n_params}")
    for lo, hi in system.params.hull:
        lines.append(f"hull: {lo!r} {hi!r}")
    if system.params.inequalities:
        lines.append("[inequalities]")
        lines.extend(str(g) for g in system.params.inequalities)
    if system.params.equalities:
        lines.append("[equalities]")
        lines.extend(str(h) for h in system.params.equalities)
    lines.append("[derivatives]")
    if system.derivs.kind == "box":
        for lo, hi in system.derivs.box:
            lines.append(f"box: {lo!r} {hi!r}")
    else:
        for m in system.derivs.maps:
            lines.append("map: " + ", ".join(str(p) for p in m))
    return "\n".join(lines) + "\n"


def load_system(path, overrides: Mapping[str, float] | None = None) -> LpvSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_system(fh.read(), overrides)
