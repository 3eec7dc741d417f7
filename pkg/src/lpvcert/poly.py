"""Multivariate polynomial and polynomial-matrix arithmetic.

A polynomial is stored sparsely as {monomial: coefficient} with double
precision coefficients.  A monomial is a sorted tuple of (variable id,
exponent) pairs holding no zero exponents, so the representation is
canonical: two equal polynomials always carry equal term maps.
Coefficients with magnitude below COEFF_EPS are dropped after every
arithmetic operation.

Variables are interned integer ids with string names ("tau", "rho1",
"eta1", ...).  Monomials are ordered graded lexicographically by
variable id, which gives a stable, deterministic basis enumeration
everywhere downstream.

All values are immutable after construction and safe to share between
concurrent tasks; every operation is a pure function.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

COEFF_EPS = 1e-12

# Sorted tuple of (variable id, exponent>0) pairs.  () is the unit monomial.
Monomial = tuple

_VAR_NAMES: list[str] = []
_VAR_IDS: dict[str, int] = {}


def var(name: str) -> int:
    """Intern a variable name and return its integer id."""
    vid = _VAR_IDS.get(name)
    if vid is None:
        if not name or not (name[0].isalpha() or name[0] == "_"):
            raise ValueError(f"invalid variable name: {name!r}")
        vid = len(_VAR_NAMES)
        _VAR_NAMES.append(name)
        _VAR_IDS[name] = vid
    return vid


def var_name(vid: int) -> str:
    """Return the name of an interned variable id."""
    return _VAR_NAMES[vid]


def _as_vid(v: Union[int, str]) -> int:
    return var(v) if isinstance(v, str) else v


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    """Product of two monomials (exponents add)."""
    if not a:
        return b
    if not b:
        return a
    exps: dict[int, int] = dict(a)
    for vid, e in b:
        exps[vid] = exps.get(vid, 0) + e
    return tuple(sorted(exps.items()))


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_key(m: Monomial):
    """Graded lexicographic sort key (by total degree, then variable ids)."""
    return (mono_degree(m), tuple((vid, -e) for vid, e in m))


def mono_str(m: Monomial) -> str:
    if not m:
        return "1"
    parts = []
    for vid, e in m:
        parts.append(var_name(vid) if e == 1 else f"{var_name(vid)}^{e}")
    return "*".join(parts)


def _fmt_coeff(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return str(int(c))
    return repr(c)


class Polynomial:
    """Sparse multivariate polynomial with real coefficients."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[Monomial, float] | None = None):
        clean: dict[Monomial, float] = {}
        if terms:
            for m, c in terms.items():
                if abs(c) >= COEFF_EPS:
                    clean[m] = float(c)
        self.terms = clean

    @staticmethod
    def zero() -> "Polynomial":
        return Polynomial()

    @staticmethod
    def constant(c: float) -> "Polynomial":
        return Polynomial({(): c})

    @staticmethod
    def variable(v: Union[int, str]) -> "Polynomial":
        return Polynomial({((_as_vid(v), 1),): 1.0})

    @staticmethod
    def monomial(m: Monomial, c: float = 1.0) -> "Polynomial":
        return Polynomial({m: c})

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        """Total degree; 0 for the zero polynomial."""
        if not self.terms:
            return 0
        return max(mono_degree(m) for m in self.terms)

    def variables(self) -> tuple[int, ...]:
        """Sorted ids of variables occurring with nonzero exponent."""
        vids: set[int] = set()
        for m in self.terms:
            for vid, _ in m:
                vids.add(vid)
        return tuple(sorted(vids))

    def coefficient(self, m: Monomial) -> float:
        return self.terms.get(m, 0.0)

    def constant_value(self) -> float:
        """Value of a constant polynomial; raises if any variable remains."""
        if self.variables():
            raise ValueError("polynomial is not constant")
        return self.terms.get((), 0.0)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self.terms.items(), key=lambda t: mono_key(t[0]))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Polynomial":
        other = _coerce(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(out)

    def __radd__(self, other) -> "Polynomial":
        return self.__add__(other)

    def __sub__(self, other) -> "Polynomial":
        return self.__add__(-_coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return (-self).__add__(other)

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self.terms.items()})

    def __mul__(self, other) -> "Polynomial":
        other = _coerce(other)
        if not self.terms or not other.terms:
            return Polynomial()
        out: dict[Monomial, float] = {}
        for ma, ca in self.terms.items():
            for mb, cb in other.terms.items():
                m = mono_mul(ma, mb)
                out[m] = out.get(m, 0.0) + ca * cb
        return Polynomial(out)

    def __rmul__(self, other) -> "Polynomial":
        return self.__mul__(other)

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("negative polynomial power")
        out = Polynomial.constant(1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def differentiate(self, v: Union[int, str]) -> "Polynomial":
        """Partial derivative with respect to one variable."""
        vid = _as_vid(v)
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            for i, (mv, e) in enumerate(m):
                if mv == vid:
                    rest = m[:i] + ((mv, e - 1),) + m[i + 1:] if e > 1 else m[:i] + m[i + 1:]
                    out[rest] = out.get(rest, 0.0) + c * e
                    break
        return Polynomial(out)

    def substitute(self, v: Union[int, str], expr) -> "Polynomial":
        """Replace a variable by a polynomial (or number) everywhere."""
        vid = _as_vid(v)
        expr = _coerce(expr)
        out = Polynomial()
        for m, c in self.terms.items():
            term = Polynomial.constant(c)
            power = 0
            for mv, e in m:
                if mv == vid:
                    power = e
                else:
                    term = term * Polynomial.monomial(((mv, e),))
            if power:
                term = term * expr ** power
            out = out + term
        return out

    def rename(self, mapping: Mapping[Union[int, str], Union[int, str]]) -> "Polynomial":
        """Rename variables (a bijective substitution by fresh variables)."""
        table = {_as_vid(a): _as_vid(b) for a, b in mapping.items()}
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            nm = tuple(sorted((table.get(vid, vid), e) for vid, e in m))
            out[nm] = out.get(nm, 0.0) + c
        return Polynomial(out)

    def evaluate(self, assignment: Mapping[Union[int, str], float]) -> float:
        """Evaluate at a point; every present variable must be assigned."""
        values = {_as_vid(k): float(v) for k, v in assignment.items()}
        total = 0.0
        for m, c in self.terms.items():
            t = c
            for vid, e in m:
                if vid not in values:
                    raise KeyError(f"no value for variable {var_name(vid)!r}")
                t *= values[vid] ** e
            total += t
        return total

    # -- comparisons / formatting -------------------------------------------

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.constant(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.terms == other.terms

    def __hash__(self) -> int:
        return hash(tuple(self.sorted_terms()))

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.sorted_terms():
            mag = _fmt_coeff(abs(c))
            if m:
                body = mono_str(m) if mag == "1" else f"{mag}*{mono_str(m)}"
            else:
                body = mag
            parts.append(("-" if c < 0 else "+", body))
        sign, body = parts[0]
        text = ("-" if sign == "-" else "") + body
        for sign, body in parts[1:]:
            text += f" {sign} {body}"
        return text

    def __repr__(self) -> str:
        return f"Polynomial({self})"


def _coerce(x) -> Polynomial:
    if isinstance(x, Polynomial):
        return x
    if isinstance(x, (int, float)):
        return Polynomial.constant(float(x))
    raise TypeError(f"cannot treat {type(x).__name__} as a polynomial")


def monomial_basis(var_ids: Sequence[Union[int, str]], max_degree: int) -> list[Monomial]:
    """All monomials of total degree <= max_degree, in graded lex order."""
    vids = sorted(_as_vid(v) for v in var_ids)
    out: list[Monomial] = [()]
    frontier: list[dict[int, int]] = [{}]
    for _ in range(max_degree):
        nxt = []
        seen = set()
        for exps in frontier:
            for vid in vids:
                e = dict(exps)
                e[vid] = e.get(vid, 0) + 1
                m = tuple(sorted(e.items()))
                if m not in seen:
                    seen.add(m)
                    nxt.append(e)
                    out.append(m)
        frontier = nxt
    return sorted(set(out), key=mono_key)


class PolyMatrix:
    """Dense matrix of polynomials, the carrier for A(rho), S(tau, rho) and
    every multiplier matrix.  Immutable; the symmetric flag is computed at
    construction and requires exact entrywise equality."""

    __slots__ = ("rows", "cols", "entries", "symmetric")

    def __init__(self, entries: Sequence[Sequence[Polynomial]]):
        rows = len(entries)
        cols = len(entries[0]) if rows else 0
        grid = []
        for r in entries:
            if len(r) != cols:
                raise ValueError("ragged polynomial matrix")
            grid.append(tuple(_coerce(p) for p in r))
        self.rows = rows
        self.cols = cols
        self.entries = tuple(grid)
        sym = rows == cols
        if sym:
            for i in range(rows):
                for j in range(i + 1, cols):
                    if self.entries[i][j] != self.entries[j][i]:
                        sym = False
                        break
                if not sym:
                    break
        self.symmetric = sym

    @staticmethod
    def zeros(rows: int, cols: int) -> "PolyMatrix":
        z = Polynomial.zero()
        return PolyMatrix([[z] * cols for _ in range(rows)])

    @staticmethod
    def identity(n: int, scale: float = 1.0) -> "PolyMatrix":
        return PolyMatrix([[Polynomial.constant(scale) if i == j else Polynomial.zero()
                            for j in range(n)] for i in range(n)])

    @staticmethod
    def from_numeric(array) -> "PolyMatrix":
        a = np.asarray(array, dtype=float)
        return PolyMatrix([[Polynomial.constant(a[i, j]) for j in range(a.shape[1])]
                           for i in range(a.shape[0])])

    def entry(self, i: int, j: int) -> Polynomial:
        return self.entries[i][j]

    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def degree(self) -> int:
        return max((p.degree() for row in self.entries for p in row), default=0)

    def variables(self) -> tuple[int, ...]:
        vids: set[int] = set()
        for row in self.entries:
            for p in row:
                vids.update(p.variables())
        return tuple(sorted(vids))

    def is_zero(self) -> bool:
        return all(p.is_zero() for row in self.entries for p in row)

    def _map(self, fn) -> "PolyMatrix":
        return PolyMatrix([[fn(p) for p in row] for row in self.entries])

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.shape() != other.shape():
            raise ValueError(f"dimension mismatch: {self.shape()} + {other.shape()}")
        return PolyMatrix([[self.entries[i][j] + other.entries[i][j]
                            for j in range(self.cols)] for i in range(self.rows)])

    def __sub__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.shape() != other.shape():
            raise ValueError(f"dimension mismatch: {self.shape()} - {other.shape()}")
        return PolyMatrix([[self.entries[i][j] - other.entries[i][j]
                            for j in range(self.cols)] for i in range(self.rows)])

    def __neg__(self) -> "PolyMatrix":
        return self._map(lambda p: -p)

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.cols != other.rows:
            raise ValueError(f"dimension mismatch: {self.shape()} @ {other.shape()}")
        out = []
        for i in range(self.rows):
            row = []
            for j in range(other.cols):
                acc = Polynomial.zero()
                for k in range(self.cols):
                    acc = acc + self.entries[i][k] * other.entries[k][j]
                row.append(acc)
            out.append(row)
        return PolyMatrix(out)

    def scale(self, c) -> "PolyMatrix":
        """Multiply every entry by a scalar or scalar polynomial."""
        c = _coerce(c)
        return self._map(lambda p: p * c)

    def transpose(self) -> "PolyMatrix":
        return PolyMatrix([[self.entries[j][i] for j in range(self.rows)]
                           for i in range(self.cols)])

    @property
    def T(self) -> "PolyMatrix":
        return self.transpose()

    def differentiate(self, v: Union[int, str]) -> "PolyMatrix":
        return self._map(lambda p: p.differentiate(v))

    def substitute(self, v: Union[int, str], expr) -> "PolyMatrix":
        return self._map(lambda p: p.substitute(v, expr))

    def rename(self, mapping: Mapping[Union[int, str], Union[int, str]]) -> "PolyMatrix":
        return self._map(lambda p: p.rename(mapping))

    def evaluate(self, assignment: Mapping[Union[int, str], float]) -> np.ndarray:
        out = np.empty((self.rows, self.cols))
        for i in range(self.rows):
            for j in range(self.cols):
                out[i, j] = self.entries[i][j].evaluate(assignment)
        return out

    def compile(self, var_order: Sequence[Union[int, str]]) -> "CompiledPolyMatrix":
        return CompiledPolyMatrix(self, [_as_vid(v) for v in var_order])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        return self.shape() == other.shape() and self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def __str__(self) -> str:
        return "\n".join(", ".join(str(p) for p in row) for row in self.entries)

    def __repr__(self) -> str:
        return f"PolyMatrix({self.rows}x{self.cols})"


def he(m: PolyMatrix) -> PolyMatrix:
    """Hermitian-like symmetrizer: m + m^T."""
    return m + m.transpose()


class CompiledPolyMatrix:
    """Vectorized evaluator for a PolyMatrix over batches of points.

    Used wherever polynomial matrices are sampled thousands of times
    (certificate grid verification, simulation traces)."""

    def __init__(self, matrix: PolyMatrix, var_ids: Sequence[int]):
        known = set(var_ids)
        missing = [var_name(v) for v in matrix.variables() if v not in known]
        if missing:
            raise KeyError(f"no value for variables {missing}")
        pos = {vid: k for k, vid in enumerate(var_ids)}
        exps, coeffs, slots = [], [], []
        for i in range(matrix.rows):
            for j in range(matrix.cols):
                for m, c in matrix.entries[i][j].terms.items():
                    row = [0] * len(var_ids)
                    for vid, e in m:
                        row[pos[vid]] = e
                    exps.append(row)
                    coeffs.append(c)
                    slots.append(i * matrix.cols + j)
        self.shape = (matrix.rows, matrix.cols)
        self.nvars = len(var_ids)
        self.exps = np.asarray(exps, dtype=float).reshape(len(exps), self.nvars)
        self.coeffs = np.asarray(coeffs)
        self.slots = np.asarray(slots, dtype=int)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape (k, nvars); returns (k, rows, cols)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = pts.shape[0]
        out = np.zeros((k, self.shape[0] * self.shape[1]))
        if self.coeffs.size:
            powers = pts[:, None, :] ** self.exps[None, :, :]
            terms = self.coeffs[None, :] * powers.prod(axis=2)
            np.add.at(out, (slice(None), self.slots), terms)
        return out.reshape(k, *self.shape)
