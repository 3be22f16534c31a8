"""SOS program for almost-global stability certificates and its SDP lowering.

Given ``f`` on ``{h = 0}`` with equilibria ``x_1 = 0, x_2, ..., x_k``, search for

    V - eps1 |x|^2                                   = z1^T G1 z1,   G1 PSD
    -<grad V, f> + p h - eps2 prod_i |x - x_i|^2     = z2^T G2 z2,   G2 PSD

with ``V`` free without constant term and ``p`` a free multiplier.

Both right-hand sides vanish at the equilibria (the first one at the origin),
so their Gram matrices have no interior. The lowering removes that face
explicitly: the bases are restricted to polynomials vanishing at the affected
equilibria, and the value and gradient equations at those points are moved
onto the free variables. Certificates are always reported over plain monomial
bases.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linprog

from .attdyn import ModelError, PolySystem
from .polyalg import (
    MonomialBasis,
    Polynomial,
    evaluate,
    gradient_inner,
    grlex_key,
    monomial_basis,
    shifted_norm_sq,
    sum_squares,
)
from .sdp import SQRT2, SdpProblem, SdpSolution, Status, svec_dim

log = logging.getLogger(__name__)

RESIDUAL_OK = 1e-6
RESIDUAL_FLAG = 1e-4


class SpecificationError(ValueError):
    pass


class CertificateError(RuntimeError):
    """No certificate can be extracted (solver did not reach optimality)."""


@dataclass(frozen=True)
class SosProgramSpec:
    system: PolySystem
    deg_V: int = 4
    deg_p: int = 6
    eps1: float = 1e-5
    eps2: float = 1e-5
    prune: bool = True
    objective: str = "feasibility"  # or "trace" (minimize trace of G2)
    half_degree: int | None = None  # override for d; must respect the budget

    def __post_init__(self):
        if self.deg_V < 2 or self.deg_V % 2:
            raise SpecificationError(f"deg_V must be an even integer >= 2, got {self.deg_V}")
        if self.deg_p < 0:
            raise SpecificationError("deg_p must be nonnegative")
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise SpecificationError("eps1 and eps2 must be positive")
        if self.objective not in ("trace", "feasibility"):
            raise SpecificationError(f"unknown objective {self.objective!r}")


def degree_budget(spec: SosProgramSpec) -> int:
    """Smallest even ``2d`` with ``2d >= max(d_f + d_V - 1, d_p + d_h, 2k)``."""
    sys = spec.system
    need = max(sys.f.degree + spec.deg_V - 1, spec.deg_p + sys.h.degree, 2 * sys.k)
    return need + (need % 2)


# ---------------------------------------------------------------------------
# Gram parameterization


@dataclass(frozen=True)
class QuadraticForm:
    """Coefficient map of ``z^T Q z``: exponent -> ((i, j, weight), ...) with ``i <= j``.

    ``weight`` is 1 on the diagonal and 2 off it, so the coefficient of ``x^a``
    equals ``sum weight * Q[i, j]``.
    """

    basis: MonomialBasis
    terms: dict

    @property
    def nparams(self) -> int:
        return svec_dim(len(self.basis))

    def coefficient_expr(self, exp) -> tuple:
        return self.terms.get(tuple(exp), ())

    def expand(self, Q: np.ndarray) -> Polynomial:
        Q = np.asarray(Q, dtype=float)
        out = {}
        for exp, entries in self.terms.items():
            out[exp] = sum(w * Q[i, j] for i, j, w in entries)
        return Polynomial(self.basis.nvars, out)


def gram_parameterize(basis: MonomialBasis) -> QuadraticForm:
    if len(basis) == 0:
        raise ValueError("empty basis")
    terms: dict = {}
    for i, ei in enumerate(basis):
        for j in range(i, len(basis)):
            exp = tuple(a + b for a, b in zip(ei, basis[j]))
            terms.setdefault(exp, []).append((i, j, 1.0 if i == j else 2.0))
    return QuadraticForm(basis, {e: tuple(v) for e, v in terms.items()})


# ---------------------------------------------------------------------------
# basis selection


def _in_hull(point: np.ndarray, pts: np.ndarray) -> bool:
    m = pts.shape[0]
    A_eq = np.vstack([pts.T, np.ones((1, m))])
    b_eq = np.concatenate([point, [1.0]])
    res = linprog(np.zeros(m), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0


def newton_prune(candidates, support) -> MonomialBasis:
    """Keep monomials ``a`` with ``2a`` in the convex hull of ``support``, then
    repeatedly drop ``a`` whose square can neither match ``support`` nor cancel
    against a cross term of the remaining basis."""
    support = {tuple(s) for s in support}
    if not support:
        return MonomialBasis([], len(candidates[0]) if candidates else 0)
    pts = np.array(sorted(support), dtype=float)
    keep = []
    for a in candidates:
        two_a = tuple(2 * v for v in a)
        if two_a in support or _in_hull(np.array(two_a, dtype=float), pts):
            keep.append(tuple(a))
    changed = True
    while changed:
        changed = False
        sums: dict = {}
        for i, a in enumerate(keep):
            for b in keep[i + 1 :]:
                e = tuple(u + v for u, v in zip(a, b))
                sums[e] = sums.get(e, 0) + 1
        for a in list(keep):
            two_a = tuple(2 * v for v in a)
            if two_a not in support and two_a not in sums:
                keep.remove(a)
                changed = True
                break
    nvars = len(candidates[0])
    return MonomialBasis(sorted(keep, key=grlex_key), nvars)


def reduce_support(candidates, cols, rhs_terms, rhs_scale: float, tol: float = 1e-10):
    """Alternate Newton-polytope pruning with elimination of free variables.

    ``cols`` are the coefficient maps of the free variables, ``rhs_terms`` the
    fixed part. Monomials outside every Gram product give equations on the free
    variables alone; variables these equations pin to zero are dropped, which
    can shrink the support and allow further pruning.
    Returns the basis and a boolean mask of free variables still active.
    """
    active = np.ones(len(cols), dtype=bool)
    while True:
        support = set(rhs_terms)
        for j in np.flatnonzero(active):
            support.update(e for e, c in cols[j].items() if c != 0.0)
        basis = newton_prune(candidates, support)
        gram_support = set()
        for i, a in enumerate(basis):
            for b in basis[i:]:
                gram_support.add(tuple(u + v for u, v in zip(a, b)))
        frows = sorted(support - gram_support, key=grlex_key)
        if not frows:
            return basis, active
        rindex = {e: i for i, e in enumerate(frows)}
        touch = [j for j in np.flatnonzero(active) if any(e in rindex for e in cols[j])]
        if not touch:
            return basis, active
        B = np.zeros((len(frows), len(touch)))
        for t, j in enumerate(touch):
            for e, c in cols[j].items():
                if e in rindex:
                    B[rindex[e], t] = c
        rhs = np.array([rhs_scale * rhs_terms.get(e, 0.0) for e in frows])
        _, sv, Vt = np.linalg.svd(B)
        rank = int(np.sum(sv > tol * max(sv[0], 1e-300)))
        null = Vt[rank:].T
        pinned = np.linalg.norm(null, axis=1) <= 1e-9 if null.size else np.ones(len(touch), dtype=bool)
        y = np.linalg.lstsq(B, rhs, rcond=None)[0]
        zero = pinned & (np.abs(y) <= tol * max(1.0, float(np.max(np.abs(y), initial=0.0))))
        if not zero.any():
            return basis, active
        active[np.asarray(touch)[zero]] = False


def vanishing_reduction(basis: MonomialBasis, points) -> np.ndarray:
    """Matrix ``N`` whose columns span ``{c : c . z(x) = 0 for x in points}``.

    Each column has a unit entry on a free monomial plus corrections on pivot
    monomials; pivots are chosen by magnitude so corrections stay bounded by 1.
    """
    m = len(basis)
    if not points:
        return np.eye(m)
    E = np.array([basis.evaluate(x) for x in points], dtype=float)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(E))))
    pivot_row: dict = {}
    for t in range(E.shape[0]):
        row = np.abs(E[t])
        row[list(pivot_row)] = 0.0
        j = int(np.argmax(row))
        if row[j] <= tol:
            continue
        E[t] /= E[t, j]
        for s in range(E.shape[0]):
            if s != t and E[s, j] != 0.0:
                E[s] -= E[s, j] * E[t]
        pivot_row[j] = t
    free = [j for j in range(m) if j not in pivot_row]
    N = np.zeros((m, len(free)))
    for col, j in enumerate(free):
        N[j, col] = 1.0
        for p, t in pivot_row.items():
            N[p, col] = -E[t, j]
    return N


# ---------------------------------------------------------------------------
# program assembly


@dataclass
class ProgramMaps:
    nvars: int
    basis1: MonomialBasis
    basis2: MonomialBasis
    N1: np.ndarray  # basis1 x reduced-1 block
    N2: np.ndarray
    v_exps: list
    p_exps: list
    col_g1: int
    col_g2: int
    col_v: int
    col_p: int
    row_keys: list
    product_term: Polynomial
    half_degree: int
    info: dict = field(default_factory=dict)


def _lie_monomial(beta, f_terms, n) -> dict:
    """Coefficients of ``-<grad x^beta, f>``."""
    out: dict = {}
    for i in range(n):
        bi = beta[i]
        if not bi:
            continue
        for e, c in f_terms[i].items():
            exp = tuple(beta[k] + e[k] - (1 if k == i else 0) for k in range(n))
            out[exp] = out.get(exp, 0.0) - bi * c
    return out


def _shift(terms: dict, gamma) -> dict:
    return {tuple(a + b for a, b in zip(e, gamma)): c for e, c in terms.items()}


def product_term(sys: PolySystem) -> Polynomial:
    out = Polynomial.constant(sys.n, 1.0)
    for eq in sys.equilibria:
        out = out * shifted_norm_sq(eq)
    return out


def build_agas_program(spec: SosProgramSpec):
    """Lower the SOS conditions to an :class:`SdpProblem` plus index maps."""
    sys = spec.system
    n = sys.n
    for eq in sys.equilibria:
        if abs(evaluate(sys.h, eq)) > 1e-9:
            raise ModelError(f"equilibrium {eq} is off the manifold")
    if np.any(np.asarray(sys.equilibria[0]) != 0):
        raise ModelError("first equilibrium must be the origin")
    if abs(evaluate(sys.h, np.zeros(n))) > 1e-12:
        raise ModelError("h(0) must vanish")
    two_d = degree_budget(spec)
    d = two_d // 2
    if spec.half_degree is not None:
        if 2 * spec.half_degree < two_d:
            raise SpecificationError(f"half degree {spec.half_degree} violates the budget 2d >= {two_d}")
        d = spec.half_degree
    dv = spec.deg_V
    f_terms = [fi.terms for fi in sys.f]
    h_terms = sys.h.terms
    Pi = product_term(sys)

    # bases and free-variable supports
    mindeg = 1 if spec.prune else 0
    basis1 = monomial_basis(n, dv // 2, mindeg)
    q1 = gram_parameterize(basis1)
    if spec.prune:
        v_exps = sorted((e for e in q1.terms if sum(e) >= 1), key=grlex_key)
    else:
        v_exps = list(monomial_basis(n, dv, 1))
    p_exps = list(monomial_basis(n, spec.deg_p, 0))

    v_cols = [_lie_monomial(b, f_terms, n) for b in v_exps]
    p_cols = [_shift(h_terms, g) for g in p_exps]

    full2 = monomial_basis(n, d, 0)
    n_fixed = 0
    if spec.prune:
        basis2, active = reduce_support(list(full2), v_cols + p_cols, Pi.terms, spec.eps2)
        n_fixed = int(np.sum(~active))
        keep_v, keep_p = active[: len(v_exps)], active[len(v_exps) :]
        v_exps = [e for e, a in zip(v_exps, keep_v) if a]
        v_cols = [c for c, a in zip(v_cols, keep_v) if a]
        p_exps = [e for e, a in zip(p_exps, keep_p) if a]
        p_cols = [c for c, a in zip(p_cols, keep_p) if a]
        N2 = vanishing_reduction(basis2, [tuple(map(float, e)) for e in sys.equilibria])
        N1 = np.eye(len(basis1))
    else:
        basis2 = full2
        N2 = np.eye(len(basis2))
        N1 = np.eye(len(basis1))
    free_support = set(Pi.terms)
    for col in v_cols + p_cols:
        free_support.update(e for e, c in col.items() if c != 0.0)
    q2 = gram_parameterize(basis2)

    # rows
    g1_exps = sorted(set(q1.terms) | set(v_exps) | {e for e in sum_squares(n).terms}, key=grlex_key)
    g2_exps = sorted(free_support | set(q2.terms), key=grlex_key)
    row_keys = [("g1", e) for e in g1_exps] + [("g2", e) for e in g2_exps]
    r1 = {e: i for i, e in enumerate(g1_exps)}
    off2 = len(g1_exps)
    r2 = {e: off2 + i for i, e in enumerate(g2_exps)}
    nrows = len(row_keys)

    m1t, m2t = N1.shape[1], N2.shape[1]
    col_g1 = 0
    col_g2 = svec_dim(m1t)
    col_v = col_g2 + svec_dim(m2t)
    col_p = col_v + len(v_exps)
    ncols = col_p + len(p_exps)

    rows, cols, vals = [], [], []

    def gram_entries(basis, N, rmap, col0):
        polys = []
        for k in range(N.shape[1]):
            nz = np.flatnonzero(N[:, k])
            polys.append([(basis[i], N[i, k]) for i in nz])
        mt = N.shape[1]
        idx = 0
        for k in range(mt):
            for l in range(k, mt):
                w = 1.0 if k == l else SQRT2
                acc: dict = {}
                for ea, ca in polys[k]:
                    for eb, cb in polys[l]:
                        e = tuple(a + b for a, b in zip(ea, eb))
                        acc[e] = acc.get(e, 0.0) + ca * cb
                for e, c in acc.items():
                    if c != 0.0:
                        rows.append(rmap[e])
                        cols.append(col0 + idx)
                        vals.append(-w * c)
                idx += 1

    gram_entries(basis1, N1, r1, col_g1)
    gram_entries(basis2, N2, r2, col_g2)
    for t, (beta, col) in enumerate(zip(v_exps, v_cols)):
        rows.append(r1[beta])
        cols.append(col_v + t)
        vals.append(1.0)
        for e, c in col.items():
            if c != 0.0:
                rows.append(r2[e])
                cols.append(col_v + t)
                vals.append(c)
    for t, col in enumerate(p_cols):
        for e, c in col.items():
            if c != 0.0:
                rows.append(r2[e])
                cols.append(col_p + t)
                vals.append(c)
    b = np.zeros(nrows)
    for e, c in sum_squares(n).terms.items():
        b[r1[e]] += spec.eps1 * c
    for e, c in Pi.terms.items():
        b[r2[e]] += spec.eps2 * c
    A = sp.csr_matrix((vals, (rows, cols)), shape=(nrows, ncols))
    A.sum_duplicates()

    info = {"rows_transformed": 0, "fixed_free_vars": n_fixed}
    if spec.prune and sys.k > 1:
        A, b, info["rows_transformed"] = _equilibrium_rows(A, b, g2_exps, off2, sys, col_v)

    c = np.zeros(ncols)
    if spec.objective == "trace":
        T = N2.T @ N2
        iu = np.triu_indices(m2t)
        tv = T[iu].copy()
        tv[iu[0] != iu[1]] *= SQRT2
        c[col_g2:col_v] = tv

    prob = SdpProblem((m1t, m2t), len(v_exps) + len(p_exps), A, b, c)
    maps = ProgramMaps(
        nvars=n,
        basis1=basis1,
        basis2=basis2,
        N1=N1,
        N2=N2,
        v_exps=v_exps,
        p_exps=p_exps,
        col_g1=col_g1,
        col_g2=col_g2,
        col_v=col_v,
        col_p=col_p,
        row_keys=row_keys,
        product_term=Pi,
        half_degree=d,
        info=info,
    )
    info.update(rows=nrows, cols=ncols, block1=m1t, block2=m2t, basis2=len(basis2))
    return prob, maps


def _equilibrium_rows(A, b, g2_exps, off2, sys: PolySystem, col_free: int):
    """Replace pivot rows by the value and gradient equations at nonzero equilibria.

    With the reduced basis these combinations carry no Gram entries; they are
    cleared exactly so the Gram rows stay well conditioned.
    """
    n = sys.n
    E = np.array(g2_exps, dtype=float)
    funcs = []
    for eq in sys.equilibria[1:]:
        x = np.asarray(eq, dtype=float)
        funcs.append(np.prod(x**E, axis=1))
        for j in range(n):
            Ej = E.copy()
            Ej[:, j] = np.maximum(E[:, j] - 1, 0)
            funcs.append(E[:, j] * np.prod(x**Ej, axis=1))
    F = np.array(funcs)
    _, R, pr = sla.qr(F.T, mode="economic", pivoting=True)
    dg = np.abs(np.diag(R))
    rank = int(np.sum(dg > 1e-10 * dg[0]))
    Fsel = F[np.sort(pr[:rank])]
    _, _, pc = sla.qr(Fsel, mode="economic", pivoting=True)
    pivots = pc[:rank]
    A2 = A[off2:, :].tocsr()
    M = (sp.csr_matrix(Fsel) @ A2).toarray()
    gram_part = M[:, :col_free]
    bound = 1e-9 * np.max(np.abs(A2.data), initial=1.0) * np.max(np.abs(Fsel))
    if np.max(np.abs(gram_part), initial=0.0) > bound:
        raise ModelError("equilibrium functionals do not annihilate the reduced Gram block")
    M[:, :col_free] = 0.0
    bnew = Fsel @ b[off2:]
    A = A.tolil()
    for t, p in enumerate(pivots):
        A[off2 + p, :] = M[t]
        b[off2 + p] = bnew[t]
    A = A.tocsr()
    A.eliminate_zeros()
    return A, b, rank


# ---------------------------------------------------------------------------
# certificates


@dataclass
class LyapunovCertificate:
    V: Polynomial
    p: Polynomial
    gram_posdef: tuple  # (MonomialBasis, matrix)
    gram_decrease: tuple
    eps1: float
    eps2: float
    product_term: Polynomial
    residuals: dict = field(default_factory=dict)
    status: str = "valid"  # valid | flagged | failed
    system: str = ""

    @property
    def nvars(self) -> int:
        return self.V.nvars

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "nvars": self.nvars,
            "V": self.V.to_records(),
            "p": self.p.to_records(),
            "eps1": self.eps1,
            "eps2": self.eps2,
            "product_term": self.product_term.to_records(),
            "gram": [
                {"name": name, "basis": basis.to_lists(), "matrix": np.asarray(G).tolist()}
                for name, (basis, G) in (("posdef", self.gram_posdef), ("decrease", self.gram_decrease))
            ],
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "status": self.status,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "LyapunovCertificate":
        n = d["nvars"]
        grams = {}
        for g in d["gram"]:
            grams[g.get("name", len(grams))] = (MonomialBasis([tuple(e) for e in g["basis"]], n), np.asarray(g["matrix"], dtype=float))
        keys = list(grams)
        return cls(
            V=Polynomial.from_records(d["V"], n),
            p=Polynomial.from_records(d["p"], n),
            gram_posdef=grams.get("posdef", grams[keys[0]]),
            gram_decrease=grams.get("decrease", grams[keys[-1]]),
            eps1=float(d["eps1"]),
            eps2=float(d["eps2"]),
            product_term=Polynomial.from_records(d["product_term"], n),
            residuals=dict(d.get("residuals", {})),
            status=d.get("status", "valid"),
            system=d.get("system", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "LyapunovCertificate":
        return cls.from_dict(json.loads(text))


def _relative_residual(parts, gram_poly: Polynomial) -> tuple:
    """Max-coefficient residual of ``sum(parts) - gram_poly``, absolute and relative
    to the largest coefficient of any individual term."""
    diff = -gram_poly
    for q in parts:
        diff = diff + q
    scale = max([q.max_abs_coeff() for q in parts] + [gram_poly.max_abs_coeff(), 1e-300])
    return diff.max_abs_coeff(), diff.max_abs_coeff() / scale


def certificate_residuals(cert: LyapunovCertificate, sys: PolySystem) -> dict:
    """Recompute both SOS identities by expanding ``z^T G z``."""
    n = sys.n
    b1, G1 = cert.gram_posdef
    b2, G2 = cert.gram_decrease
    parts1 = [cert.V, -sum_squares(n) * cert.eps1]
    parts2 = [-gradient_inner(cert.V, sys.f), cert.p * sys.h, -cert.product_term * cert.eps2]
    a1, r1 = _relative_residual(parts1, gram_parameterize(b1).expand(G1))
    a2, r2 = _relative_residual(parts2, gram_parameterize(b2).expand(G2))
    return {
        "posdef_abs": a1,
        "posdef_rel": r1,
        "decrease_abs": a2,
        "decrease_rel": r2,
        "min_eig_posdef": float(np.linalg.eigvalsh(G1)[0]),
        "min_eig_decrease": float(np.linalg.eigvalsh(G2)[0]),
    }


def classify(res: dict) -> str:
    worst = max(res["posdef_rel"], res["decrease_rel"])
    if worst <= RESIDUAL_OK:
        return "valid"
    if worst <= RESIDUAL_FLAG:
        return "flagged"
    return "failed"


def extract_certificate(solution: SdpSolution, maps: ProgramMaps, spec: SosProgramSpec) -> LyapunovCertificate:
    if solution.status != Status.OPTIMAL:
        raise CertificateError(f"solver status {solution.status.value}; no certificate")
    n = maps.nvars
    y = solution.free_vals
    nv = len(maps.v_exps)
    V = Polynomial(n, dict(zip(maps.v_exps, y[:nv])))
    p = Polynomial(n, dict(zip(maps.p_exps, y[nv:])))
    Gt1, Gt2 = solution.blocks
    G1 = maps.N1 @ Gt1 @ maps.N1.T
    G2 = maps.N2 @ Gt2 @ maps.N2.T
    cert = LyapunovCertificate(
        V=V,
        p=p,
        gram_posdef=(maps.basis1, 0.5 * (G1 + G1.T)),
        gram_decrease=(maps.basis2, 0.5 * (G2 + G2.T)),
        eps1=spec.eps1,
        eps2=spec.eps2,
        product_term=maps.product_term,
        system=spec.system.name,
    )
    cert.residuals = certificate_residuals(cert, spec.system)
    cert.status = classify(cert.residuals)
    if cert.status != "valid":
        log.warning(
            "certificate %s: relative residuals %.2e / %.2e",
            cert.status,
            cert.residuals["posdef_rel"],
            cert.residuals["decrease_rel"],
        )
    return cert


def certify(spec: SosProgramSpec, opts=None):
    """Assemble, solve and extract. Returns ``(certificate or None, solution, maps)``."""
    from .sdp import solve

    prob, maps = build_agas_program(spec)
    sol = solve(prob, opts)
    cert = extract_certificate(sol, maps, spec) if sol.status == Status.OPTIMAL else None
    return cert, sol, maps
