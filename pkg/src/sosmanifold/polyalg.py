"""Sparse multivariate polynomials with real coefficients.

Polynomials are immutable mappings from exponent tuples to floats. Arithmetic
never rounds away small coefficients; only exact zeros are pruned. Use
:meth:`Polynomial.chop` to clean up numerical noise after a solve.

Monomials are ordered graded-lexicographically: first by total degree, then
lexicographically on the exponent tuple, so in two variables the order is
``1, x2, x1, x2^2, x1*x2, x1^2, ...``.
"""

from __future__ import annotations

import json
import math
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

ExponentVec = tuple  # tuple[int, ...]


class DimensionError(ValueError):
    """Operands live in polynomial rings with different numbers of variables."""


def grlex_key(exp: ExponentVec):
    return (sum(exp), exp)


class Polynomial:
    """Sparse polynomial in ``nvars`` indeterminates."""

    __slots__ = ("nvars", "_terms", "_hash")

    def __init__(self, nvars: int, terms: Mapping[ExponentVec, float] | None = None):
        if nvars < 0:
            raise ValueError("nvars must be nonnegative")
        self.nvars = int(nvars)
        clean = {}
        for exp, c in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != nvars:
                raise DimensionError(f"exponent {exp} does not have length {nvars}")
            if any(e < 0 for e in exp):
                raise ValueError(f"negative exponent in {exp}")
            c = float(c)
            if c != 0.0:
                clean[exp] = clean.get(exp, 0.0) + c
                if clean[exp] == 0.0:
                    del clean[exp]
        self._terms = clean
        self._hash = None

    @classmethod
    def _from_clean(cls, nvars: int, terms: dict) -> "Polynomial":
        obj = cls.__new__(cls)
        obj.nvars = nvars
        obj._terms = terms
        obj._hash = None
        return obj

    # -- constructors ---------------------------------------------------
    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls._from_clean(nvars, {})

    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, index: int, nvars: int) -> "Polynomial":
        if not 0 <= index < nvars:
            raise IndexError(f"variable index {index} out of range for {nvars} variables")
        exp = [0] * nvars
        exp[index] = 1
        return cls._from_clean(nvars, {tuple(exp): 1.0})

    @classmethod
    def monomial(cls, exp: Sequence[int], coeff: float = 1.0) -> "Polynomial":
        return cls(len(exp), {tuple(exp): coeff})

    # -- container protocol ---------------------------------------------
    @property
    def terms(self) -> dict:
        return dict(self._terms)

    def items(self):
        """Terms in graded-lex order."""
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]))

    def exponents(self) -> list:
        return sorted(self._terms, key=grlex_key)

    def coefficient(self, exp: Sequence[int]) -> float:
        return self._terms.get(tuple(exp), 0.0)

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        if not self._terms:
            return 0
        return max(sum(e) for e in self._terms)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # -- arithmetic -----------------------------------------------------
    def _check(self, other: "Polynomial") -> None:
        if self.nvars != other.nvars:
            raise DimensionError(f"nvars mismatch: {self.nvars} vs {other.nvars}")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.nvars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for exp, c in other._terms.items():
            s = out.get(exp, 0.0) + c
            if s == 0.0:
                out.pop(exp, None)
            else:
                out[exp] = s
        return Polynomial._from_clean(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._from_clean(self.nvars, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            if s == 0.0:
                return Polynomial.zero(self.nvars)
            return Polynomial._from_clean(self.nvars, {e: c * s for e, c in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out: dict = {}
        for ea, ca in self._terms.items():
            for eb, cb in other._terms.items():
                e = tuple(i + j for i, j in zip(ea, eb))
                out[e] = out.get(e, 0.0) + ca * cb
        return Polynomial._from_clean(self.nvars, {e: c for e, c in out.items() if c != 0.0})

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __pow__(self, k: int):
        if k < 0 or int(k) != k:
            raise ValueError("only nonnegative integer powers are supported")
        result = Polynomial.constant(self.nvars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.nvars, frozenset(self._terms.items())))
        return self._hash

    def __repr__(self):
        if not self._terms:
            return f"Polynomial({self.nvars}, 0)"
        parts = []
        for exp, c in self.items():
            mono = "*".join(
                f"x{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(exp) if e
            )
            parts.append(f"{c:+.6g}" + (f"*{mono}" if mono else ""))
        return f"Polynomial({self.nvars}, {' '.join(parts)})"

    # -- calculus / evaluation -------------------------------------------
    def differentiate(self, var: int) -> "Polynomial":
        return differentiate(self, var)

    def __call__(self, point) -> float:
        return evaluate(self, point)

    def chop(self, tol: float = 1e-12) -> "Polynomial":
        """Drop terms with ``|coeff| <= tol``."""
        return Polynomial._from_clean(
            self.nvars, {e: c for e, c in self._terms.items() if abs(c) > tol}
        )

    def max_abs_diff(self, other: "Polynomial") -> float:
        return (self - other).max_abs_coeff()

    # -- serialization ----------------------------------------------------
    def to_records(self) -> list:
        return [{"exponents": list(e), "coeff": c} for e, c in self.items()]

    @classmethod
    def from_records(cls, records: Iterable[Mapping], nvars: int | None = None) -> "Polynomial":
        records = list(records)
        if nvars is None:
            if not records:
                raise ValueError("cannot infer nvars from an empty record list")
            nvars = len(records[0]["exponents"])
        return cls(nvars, {tuple(r["exponents"]): r["coeff"] for r in records})

    def to_json(self) -> str:
        return json.dumps(self.to_records())

    @classmethod
    def from_json(cls, text: str, nvars: int | None = None) -> "Polynomial":
        return cls.from_records(json.loads(text), nvars)


class PolyVector(tuple):
    """Ordered tuple of polynomials over a common ring."""

    def __new__(cls, entries: Iterable[Polynomial]):
        entries = tuple(entries)
        if entries:
            n = entries[0].nvars
            for p in entries:
                if not isinstance(p, Polynomial):
                    raise TypeError("PolyVector entries must be Polynomial")
                if p.nvars != n:
                    raise DimensionError("PolyVector entries must share nvars")
        return super().__new__(cls, entries)

    @property
    def nvars(self) -> int:
        return self[0].nvars if self else 0

    @property
    def degree(self) -> int:
        return max((p.degree for p in self), default=0)

    def __call__(self, point) -> np.ndarray:
        return np.array([evaluate(p, point) for p in self])

    def to_records(self) -> list:
        return [p.to_records() for p in self]

    @classmethod
    def from_records(cls, records, nvars: int) -> "PolyVector":
        return cls(Polynomial.from_records(r, nvars) for r in records)


# ---------------------------------------------------------------------------
# free-function API


def poly_add(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    return a + b


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    a._check(b)
    return a * b


def differentiate(p: Polynomial, var: int) -> Polynomial:
    if not 0 <= var < p.nvars:
        raise IndexError(f"variable index {var} out of range for {p.nvars} variables")
    out = {}
    for exp, c in p._terms.items():
        k = exp[var]
        if k:
            e = list(exp)
            e[var] = k - 1
            out[tuple(e)] = c * k
    return Polynomial._from_clean(p.nvars, out)


def gradient(p: Polynomial) -> PolyVector:
    return PolyVector(differentiate(p, i) for i in range(p.nvars))


def gradient_inner(V: Polynomial, f: Sequence[Polynomial]) -> Polynomial:
    """Lie derivative ``sum_i dV/dx_i * f_i``."""
    if len(f) != V.nvars:
        raise DimensionError(f"vector field has {len(f)} entries, V has {V.nvars} variables")
    out = Polynomial.zero(V.nvars)
    for i, fi in enumerate(f):
        if fi.nvars != V.nvars:
            raise DimensionError("vector field entry has wrong nvars")
        out = out + differentiate(V, i) * fi
    return out


def evaluate(p: Polynomial, point) -> float:
    x = np.asarray(point, dtype=float).ravel()
    if x.shape[0] != p.nvars:
        raise DimensionError(f"point has length {x.shape[0]}, expected {p.nvars}")
    total = 0.0
    xs = [float(v) for v in x]
    for exp, c in p.items():
        term = c
        for xi, e in zip(xs, exp):
            if e:
                term *= xi**e
        total += term
    return total


def substitute_affine(p: Polynomial, A, b) -> Polynomial:
    """Return ``q`` with ``q(x) = p(A x + b)``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    n = p.nvars
    if A.shape != (n, n) or b.shape != (n,):
        raise DimensionError(f"expected A {(n, n)} and b ({n},), got {A.shape} and {b.shape}")
    if not np.all(np.isfinite(A)) or abs(np.linalg.det(A)) == 0.0 or np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("affine substitution matrix is singular")
    lin = []
    for i in range(n):
        terms = {(0,) * n: b[i]}
        for j in range(n):
            if A[i, j] != 0.0:
                e = [0] * n
                e[j] = 1
                terms[tuple(e)] = A[i, j]
        lin.append(Polynomial(n, terms))
    powers: list[dict] = [{0: Polynomial.constant(n, 1.0)} for _ in range(n)]

    def power(i, k):
        cache = powers[i]
        if k not in cache:
            cache[k] = power(i, k - 1) * lin[i]
        return cache[k]

    out: dict = {}
    for exp, c in p.items():
        term = Polynomial.constant(n, c)
        for i, k in enumerate(exp):
            if k:
                term = term * power(i, k)
        for e, v in term._terms.items():
            out[e] = out.get(e, 0.0) + v
    return Polynomial._from_clean(n, {e: v for e, v in out.items() if v != 0.0})


def substitute_affine_vector(f: Sequence[Polynomial], A, b) -> PolyVector:
    return PolyVector(substitute_affine(fi, A, b) for fi in f)


def chop(p: Polynomial, tol: float = 1e-12) -> Polynomial:
    return p.chop(tol)


class MonomialBasis(tuple):
    """Graded-lex ordered tuple of exponent vectors."""

    def __new__(cls, exponents: Iterable[ExponentVec], nvars: int | None = None):
        exps = tuple(tuple(int(v) for v in e) for e in exponents)
        obj = super().__new__(cls, exps)
        if nvars is None:
            nvars = len(exps[0]) if exps else 0
        obj.nvars = nvars
        for e in exps:
            if len(e) != nvars:
                raise DimensionError("basis exponent has wrong length")
        keys = [grlex_key(e) for e in exps]
        if any(k1 >= k2 for k1, k2 in zip(keys, keys[1:])):
            raise ValueError("basis must be strictly increasing in graded-lex order")
        return obj

    @property
    def maxdeg(self) -> int:
        return max((sum(e) for e in self), default=0)

    def index(self, exp) -> int:  # type: ignore[override]
        return super().index(tuple(exp))

    def evaluate(self, point) -> np.ndarray:
        x = np.asarray(point, dtype=float)
        return np.array([np.prod(x ** np.array(e)) for e in self])

    def to_lists(self) -> list:
        return [list(e) for e in self]


def exponents_of_degree(nvars: int, deg: int) -> list:
    """All exponent tuples of total degree exactly ``deg`` in ascending lex order."""
    out = []
    for combo in combinations_with_replacement(range(nvars), deg):
        e = [0] * nvars
        for i in combo:
            e[i] += 1
        out.append(tuple(e))
    out.sort()
    return out


def monomial_basis(nvars: int, maxdeg: int, mindeg: int = 0) -> MonomialBasis:
    if nvars < 1 or maxdeg < 0:
        raise ValueError("need nvars >= 1 and maxdeg >= 0")
    exps = []
    for d in range(mindeg, maxdeg + 1):
        exps.extend(exponents_of_degree(nvars, d))
    return MonomialBasis(exps, nvars)


def basis_size(nvars: int, maxdeg: int) -> int:
    return math.comb(nvars + maxdeg, maxdeg)


def from_coefficients(basis: Sequence[ExponentVec], coeffs, nvars: int) -> Polynomial:
    return Polynomial(nvars, {tuple(e): float(c) for e, c in zip(basis, coeffs)})


def sum_squares(nvars: int, indices: Iterable[int] | None = None) -> Polynomial:
    """``sum_i x_i^2`` over the chosen indices (all by default)."""
    idx = range(nvars) if indices is None else indices
    terms = {}
    for i in idx:
        e = [0] * nvars
        e[i] = 2
        terms[tuple(e)] = 1.0
    return Polynomial(nvars, terms)


def shifted_norm_sq(point) -> Polynomial:
    """``||x - point||^2`` as a polynomial."""
    point = np.asarray(point, dtype=float)
    n = point.size
    out = Polynomial.zero(n)
    for i in range(n):
        xi = Polynomial.variable(i, n) - float(point[i])
        out = out + xi * xi
    return out


class CompiledPolys:
    """Vectorized evaluator for a list of polynomials over a shared term table.

    Evaluates all polynomials on a batch of points ``X`` of shape ``(N, nvars)``
    and returns an array of shape ``(N, npolys)``.
    """

    def __init__(self, polys: Sequence[Polynomial]):
        polys = list(polys)
        if not polys:
            raise ValueError("need at least one polynomial")
        self.nvars = polys[0].nvars
        exps = sorted({e for p in polys for e in p._terms}, key=grlex_key)
        if not exps:
            exps = [(0,) * self.nvars]
        index = {e: k for k, e in enumerate(exps)}
        self.exps = np.array(exps, dtype=np.int64).reshape(len(exps), self.nvars)
        self.coeffs = np.zeros((len(exps), len(polys)))
        for j, p in enumerate(polys):
            for e, c in p._terms.items():
                self.coeffs[index[e], j] = c
        self.maxpow = int(self.exps.max()) if self.exps.size else 0

    def monomials(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n_pts = X.shape[0]
        out = np.ones((n_pts, self.exps.shape[0]))
        for j in range(self.nvars):
            col = self.exps[:, j]
            if not col.any():
                continue
            pw = np.ones((n_pts, self.maxpow + 1))
            for k in range(1, self.maxpow + 1):
                pw[:, k] = pw[:, k - 1] * X[:, j]
            out *= pw[:, col]
        return out

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.monomials(X) @ self.coeffs
