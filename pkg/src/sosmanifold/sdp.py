"""Primal-dual interior-point solver for equality-constrained semidefinite programs.

Problem form (all PSD blocks stacked in ``svec`` order, then free variables)::

    minimize    <C, X> + c_f . y
    subject to  A(X) + B y = b,    X = diag(X_1, ..., X_K) PSD,   y free

with dual ``maximize b . lam  s.t.  C - A*(lam) = S PSD,  B^T lam = c_f``.

``svec`` stacks the upper triangle row by row and scales off-diagonal entries
by ``sqrt(2)`` so that ``<X, Y> = svec(X) . svec(Y)``.

The method works on the homogeneous self-dual embedding with Nesterov-Todd
scaling and a Mehrotra predictor-corrector, so an infeasible problem ends with
a Farkas-type certificate instead of an iteration stall. The Schur complement
is formed and factored densely.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# svec helpers


def svec_dim(m: int) -> int:
    return m * (m + 1) // 2


def _triu(m: int):
    return np.triu_indices(m)


def svec(X: np.ndarray) -> np.ndarray:
    m = X.shape[0]
    iu = _triu(m)
    v = X[iu].astype(float)
    v[iu[0] != iu[1]] *= SQRT2
    return v


def smat(v: np.ndarray, m: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if m is None:
        m = int(round((math.sqrt(8 * v.size + 1) - 1) / 2))
    if svec_dim(m) != v.size:
        raise ValueError("vector length is not a triangular number")
    iu = _triu(m)
    X = np.zeros((m, m))
    vals = v.copy()
    vals[iu[0] != iu[1]] /= SQRT2
    X[iu] = vals
    X[(iu[1], iu[0])] = vals
    return X


def svec_index(m: int, i: int, j: int) -> int:
    """Position of entry ``(i, j)`` (any order) inside ``svec`` of an ``m x m`` matrix."""
    if i > j:
        i, j = j, i
    return i * m - i * (i - 1) // 2 + (j - i)


# ---------------------------------------------------------------------------
# data types


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SdpProblem:
    blocks: tuple
    free_vars: int
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(m) for m in self.blocks))
        object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        c = np.zeros(self.ncols) if self.c is None else np.asarray(self.c, dtype=float).ravel()
        object.__setattr__(self, "c", c)
        if self.A.shape != (self.b.size, self.ncols):
            raise ShapeError(f"A has shape {self.A.shape}, expected ({self.b.size}, {self.ncols})")
        if self.c.size != self.ncols:
            raise ShapeError("objective vector has the wrong length")
        if any(m < 1 for m in self.blocks) or self.free_vars < 0:
            raise ShapeError("block sizes must be positive and free_vars nonnegative")

    @property
    def psd_cols(self) -> int:
        return sum(svec_dim(m) for m in self.blocks)

    @property
    def ncols(self) -> int:
        return self.psd_cols + self.free_vars

    @property
    def block_offsets(self) -> list:
        offs, o = [], 0
        for m in self.blocks:
            offs.append(o)
            o += svec_dim(m)
        return offs

    def to_dict(self) -> dict:
        coo = self.A.tocoo()
        return {
            "blocks": list(self.blocks),
            "free_vars": self.free_vars,
            "shape": list(self.A.shape),
            "A": {"row": coo.row.tolist(), "col": coo.col.tolist(), "val": coo.data.tolist()},
            "b": self.b.tolist(),
            "c": self.c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdpProblem":
        A = d["A"]
        if isinstance(A, dict):
            A = sp.coo_matrix((A["val"], (A["row"], A["col"])), shape=tuple(d["shape"]))
        else:
            A = np.asarray(A, dtype=float)
        return cls(tuple(d["blocks"]), int(d["free_vars"]), A, np.asarray(d["b"]), np.asarray(d["c"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SdpProblem":
        return cls.from_dict(json.loads(text))

    def split(self, v: np.ndarray):
        """Split a column-space vector into block matrices and the free part."""
        mats = [smat(v[o : o + svec_dim(m)], m) for o, m in zip(self.block_offsets, self.blocks)]
        return mats, np.asarray(v[self.psd_cols :], dtype=float)

    def join(self, mats, free) -> np.ndarray:
        parts = [svec(X) for X in mats] + [np.asarray(free, dtype=float).ravel()]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.99
    regularization: float = 1e-12
    refine_steps: int = 8
    batch: int = 64
    verbose: bool = False


@dataclass
class SdpSolution:
    blocks: list
    free_vals: np.ndarray
    dual: np.ndarray
    status: Status
    residuals: dict
    iterations: int = 0
    infeasibility: str | None = None  # "primal" or "dual" when status is Infeasible
    history: list = field(default_factory=list, repr=False)

    def x(self) -> np.ndarray:
        return np.concatenate([svec(X) for X in self.blocks] + [self.free_vals])

    def to_dict(self) -> dict:
        return {
            "blocks": [svec(X).tolist() for X in self.blocks],
            "block_dims": [int(X.shape[0]) for X in self.blocks],
            "free_vals": np.asarray(self.free_vals).tolist(),
            "dual": np.asarray(self.dual).tolist(),
            "status": self.status.value,
            "residuals": {k: _jsonable(v) for k, v in self.residuals.items()},
            "iterations": self.iterations,
            "infeasibility": self.infeasibility,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SdpSolution":
        return cls(
            blocks=[smat(np.asarray(v), m) for v, m in zip(d["blocks"], d["block_dims"])],
            free_vals=np.asarray(d["free_vals"], dtype=float),
            dual=np.asarray(d["dual"], dtype=float),
            status=Status(d["status"]),
            residuals=d["residuals"],
            iterations=d.get("iterations", 0),
            infeasibility=d.get("infeasibility"),
        )


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [float(t) for t in v]
    return float(v)


# ---------------------------------------------------------------------------
# independent residual report


def residuals(p: SdpProblem, s: SdpSolution) -> dict:
    """Feasibility and optimality measures of ``s`` computed from the problem data only."""
    if len(s.blocks) != len(p.blocks) or any(X.shape != (m, m) for X, m in zip(s.blocks, p.blocks)):
        raise ShapeError("solution blocks do not match the problem")
    if np.asarray(s.free_vals).size != p.free_vars or np.asarray(s.dual).size != p.b.size:
        raise ShapeError("solution vectors do not match the problem")
    x = s.x()
    lam = np.asarray(s.dual, dtype=float)
    r_primal = p.A @ x - p.b
    zmat = p.c - p.A.T @ lam
    S_blocks, z_free = p.split(zmat)
    min_eig_X = [float(np.linalg.eigvalsh(X)[0]) for X in s.blocks]
    min_eig_S = [float(np.linalg.eigvalsh(S)[0]) for S in S_blocks]
    pobj = float(p.c @ x)
    dobj = float(p.b @ lam)
    comp = float(sum(np.sum(X * S) for X, S in zip(s.blocks, S_blocks)))
    return {
        "primal": float(np.max(np.abs(r_primal), initial=0.0)),
        "dual_free": float(np.max(np.abs(z_free), initial=0.0)),
        "dual_cone": float(max([0.0] + [-e for e in min_eig_S])),
        "min_eig_X": min_eig_X,
        "min_eig_S": min_eig_S,
        "complementarity": comp,
        "primal_objective": pobj,
        "dual_objective": dobj,
        "gap": abs(pobj - dobj),
    }


# ---------------------------------------------------------------------------
# presolve


@dataclass
class _Presolved:
    keep: np.ndarray  # original row indices kept
    infeasible_row: int | None = None


def _presolve(p: SdpProblem, tol: float) -> _Presolved:
    A = p.A.tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    nnz_per_row = np.diff(A.indptr)
    bscale = 1.0 + np.max(np.abs(p.b), initial=0.0)
    keep = []
    seen: dict = {}
    for i in range(A.shape[0]):
        if nnz_per_row[i] == 0:
            if abs(p.b[i]) > tol * bscale:
                return _Presolved(np.array(keep, dtype=int), infeasible_row=i)
            continue
        lo, hi = A.indptr[i], A.indptr[i + 1]
        key = (A.indices[lo:hi].tobytes(), A.data[lo:hi].tobytes())
        if key in seen:
            j = seen[key]
            if abs(p.b[i] - p.b[j]) > tol * bscale:
                return _Presolved(np.array(keep, dtype=int), infeasible_row=i)
            continue
        seen[key] = i
        keep.append(i)
    keep = np.array(keep, dtype=int)

    # rows touching only free variables: drop linearly dependent ones
    if p.free_vars and keep.size:
        Ak = A[keep]
        psd_nnz = np.diff(Ak[:, : p.psd_cols].tocsr().indptr)
        f_rows = np.flatnonzero(psd_nnz == 0)
        if f_rows.size:
            BF = Ak[f_rows][:, p.psd_cols :].toarray()
            _, R, piv = sla.qr(BF.T, mode="economic", pivoting=True)
            d = np.abs(np.diag(R))
            rank = int(np.sum(d > 1e-11 * max(d[0], 1e-300))) if d.size else 0
            if rank < f_rows.size:
                indep = np.sort(piv[:rank])
                bF = p.b[keep[f_rows]]
                sol, *_ = np.linalg.lstsq(BF[indep], bF[indep], rcond=None)
                if np.max(np.abs(BF @ sol - bF)) > tol * bscale * 10:
                    bad = keep[f_rows[np.argmax(np.abs(BF @ sol - bF))]]
                    return _Presolved(keep, infeasible_row=int(bad))
                drop = set(keep[f_rows[np.setdiff1d(np.arange(f_rows.size), indep)]].tolist())
                keep = np.array([i for i in keep if i not in drop], dtype=int)
    return _Presolved(keep)


# ---------------------------------------------------------------------------
# solver


class _Block:
    """Constraint data of one PSD block: per-row dense submatrices on their support."""

    def __init__(self, A_blk: sp.csr_matrix, m: int, rows_P: np.ndarray):
        self.m = m
        self.iu = _triu(m)
        self.offdiag = self.iu[0] != self.iu[1]
        self.A = A_blk  # (q_P x svec_dim) in svec coordinates
        iu0, iu1 = self.iu
        coo = A_blk.tocoo()
        self.entries = []  # (row, support indices, dense symmetric submatrix)
        order = np.argsort(coo.row, kind="stable")
        r_sorted, c_sorted, v_sorted = coo.row[order], coo.col[order], coo.data[order]
        bounds = np.flatnonzero(np.diff(r_sorted)) + 1
        for rs, cs, vs in zip(
            np.split(r_sorted, bounds), np.split(c_sorted, bounds), np.split(v_sorted, bounds)
        ):
            if rs.size == 0:
                continue
            ii, jj = iu0[cs], iu1[cs]
            vals = np.where(ii == jj, vs, vs / SQRT2)
            K = np.unique(np.concatenate([ii, jj]))
            pos = {k: t for t, k in enumerate(K)}
            sub = np.zeros((K.size, K.size))
            for a, bb, v in zip(ii, jj, vals):
                sub[pos[a], pos[bb]] += v
                if a != bb:
                    sub[pos[bb], pos[a]] += v
            self.entries.append((int(rs[0]), K, sub))

    def svec(self, X):
        v = X[self.iu]
        v = v.copy()
        v[self.offdiag] *= SQRT2
        return v

    def smat(self, v):
        X = np.zeros((self.m, self.m))
        vals = v.copy()
        vals[self.offdiag] /= SQRT2
        X[self.iu] = vals
        X.T[self.iu] = vals
        return X

    def apply(self, X) -> np.ndarray:
        return self.A @ self.svec(X)

    def adjoint(self, lam) -> np.ndarray:
        return self.smat(self.A.T @ lam)

    def schur_add(self, M: np.ndarray, W: np.ndarray, batch: int) -> None:
        """``M[i, j] += <A_i, W A_j W>`` for all rows touching this block."""
        ents = self.entries
        for start in range(0, len(ents), batch):
            chunk = ents[start : start + batch]
            T = np.empty((len(chunk), self.iu[0].size))
            cols = np.empty(len(chunk), dtype=int)
            for t, (r, K, sub) in enumerate(chunk):
                WK = W[:, K]
                Ti = (WK @ sub) @ WK.T
                T[t] = Ti[self.iu]
                cols[t] = r
            T[:, self.offdiag] *= SQRT2
            M[:, cols] += self.A @ T.T


def _nt_scaling(Xt: np.ndarray, St: np.ndarray):
    """NT scaling of a PD pair: ``R`` with ``R^-1 X R^-T = R^T S R = diag(lam)``."""
    L1 = np.linalg.cholesky(Xt)
    L2 = np.linalg.cholesky(St)
    U, lam, Vt = np.linalg.svd(L2.T @ L1)
    isq = 1.0 / np.sqrt(lam)
    R = (L1 @ Vt.T) * isq
    return R, lam


def _inv_congruence(lu, D: np.ndarray) -> np.ndarray:
    """``R^-1 D R^-T`` for symmetric ``D`` given the LU factors of ``R``."""
    Y = sla.lu_solve(lu, D, check_finite=False)
    return sla.lu_solve(lu, Y.T, check_finite=False)


def _max_step(lam: np.ndarray, D: np.ndarray) -> float:
    """Largest ``a`` with ``diag(lam) + a D`` PSD."""
    isq = 1.0 / np.sqrt(lam)
    e = np.linalg.eigvalsh(isq[:, None] * D * isq[None, :])[0]
    return math.inf if e >= 0 else -1.0 / e


class _KKT:
    """Factorization of ``[[M, B], [B^T, 0]]`` with rows lacking PSD entries treated apart."""

    def __init__(self, M, B_P, B_F, reg, apply_M=None):
        self.M = M
        # refinement residuals use the exact operator when given; the formed M
        # carries rounding error of order eps * |W|^2
        self.apply_M = apply_M or (lambda v: M @ v)
        self.B_P, self.B_F = B_P, B_F
        self.nP, self.nf, self.nF = M.shape[0], B_P.shape[1], B_F.shape[0]
        # shift only when the plain factorization breaks down; a standing shift
        # of order reg * |M| stalls refinement once M is ill conditioned
        scale = max(1.0, float(np.diag(M).max(initial=0.0)))
        self.L = None
        for delta in (0.0, reg, 1e2 * reg, 1e4 * reg):
            try:
                self.L = sla.cholesky(M + delta * scale * np.eye(self.nP), lower=True, check_finite=False)
                break
            except np.linalg.LinAlgError:
                continue
        if self.L is None:
            raise np.linalg.LinAlgError("Schur complement not positive definite")
        if self.nf:
            self.Z = sla.solve_triangular(self.L, B_P, lower=True, check_finite=False)
            S = self.Z.T @ self.Z
            small = np.zeros((self.nf + self.nF, self.nf + self.nF))
            small[: self.nf, : self.nf] = S
            small[: self.nf, self.nf :] = -B_F.T
            small[self.nf :, : self.nf] = B_F
            scale = max(1.0, float(np.max(np.abs(np.diag(S)), initial=0.0)))
            small[: self.nf, : self.nf] += reg * scale * np.eye(self.nf)
            self.small_lu = sla.lu_factor(small, check_finite=False)
            if not np.all(np.isfinite(self.small_lu[0])):
                raise np.linalg.LinAlgError("singular reduced KKT system")

    def _solve_once(self, rP, rF, ry):
        zr = sla.solve_triangular(self.L, rP, lower=True, check_finite=False)
        if not self.nf:
            lamP = sla.solve_triangular(self.L.T, zr, lower=False, check_finite=False)
            return lamP, np.zeros(0), np.zeros(0)
        g = self.Z.T @ zr - ry
        sol = sla.lu_solve(self.small_lu, np.concatenate([g, rF]), check_finite=False)
        dy, lamF = sol[: self.nf], sol[self.nf :]
        lamP = sla.solve_triangular(self.L.T, zr - self.Z @ dy, lower=False, check_finite=False)
        return lamP, lamF, dy

    def _apply(self, lamP, lamF, dy):
        return (
            self.apply_M(lamP) + self.B_P @ dy,
            self.B_F @ dy,
            self.B_P.T @ lamP + self.B_F.T @ lamF,
        )

    def solve(self, rP, rF, ry, refine: int):
        sol = self._solve_once(rP, rF, ry)
        for _ in range(refine):
            got = self._apply(*sol)
            corr = self._solve_once(rP - got[0], rF - got[1], ry - got[2])
            sol = tuple(s + c for s, c in zip(sol, corr))
        return sol


class _HsdSolver:
    def __init__(self, p: SdpProblem, keep: np.ndarray, opts: SolverOptions):
        self.p, self.opts = p, opts
        A = p.A.tocsr()[keep]
        self.b = p.b[keep]
        psd = A[:, : p.psd_cols].tocsc()
        has_psd = np.diff(psd.tocsr().indptr) > 0
        self.P = np.flatnonzero(has_psd)
        self.F = np.flatnonzero(~has_psd)
        self.q = A.shape[0]
        Bfull = A[:, p.psd_cols :].toarray() if p.free_vars else np.zeros((self.q, 0))
        self.B = Bfull
        self.B_P, self.B_F = Bfull[self.P], Bfull[self.F]
        self.blocks = []
        self.C = []
        psd_P = psd.tocsr()[self.P]
        for o, m in zip(p.block_offsets, p.blocks):
            blkA = psd_P[:, o : o + svec_dim(m)].tocsr()
            self.blocks.append(_Block(blkA, m, self.P))
            self.C.append(smat(p.c[o : o + svec_dim(m)], m))
        self.c_f = p.c[p.psd_cols :]
        self.nu = sum(p.blocks)
        self.bnorm = max(1.0, np.max(np.abs(self.b), initial=0.0))
        self.cnorm = max(1.0, np.max(np.abs(p.c), initial=0.0))

    # linear maps on the kept rows -------------------------------------------
    def A_op(self, Xs, y):
        out = np.zeros(self.q)
        psd = np.zeros(self.P.size)
        for blk, X in zip(self.blocks, Xs):
            psd += blk.apply(X)
        out[self.P] = psd
        if y.size:
            out += self.B @ y
        return out

    def A_psd(self, Xs):
        out = np.zeros(self.q)
        acc = np.zeros(self.P.size)
        for blk, X in zip(self.blocks, Xs):
            acc += blk.apply(X)
        out[self.P] = acc
        return out

    def A_adj(self, lam):
        lp = lam[self.P]
        return [blk.adjoint(lp) for blk in self.blocks]

    def _schur_op(self, W):
        def op(lamP):
            acc = np.zeros(self.P.size)
            for blk, Wk in zip(self.blocks, W):
                T = blk.smat(blk.A.T @ lamP)
                acc += blk.apply(Wk @ T @ Wk)
            return acc

        return op

    # main loop ------------------------------------------------------------
    def run(self):
        opts = self.opts
        nb = len(self.blocks)
        R = [np.eye(blk.m) for blk in self.blocks]
        lam_s = [np.ones(blk.m) for blk in self.blocks]
        y = np.zeros(self.B.shape[1])
        lam = np.zeros(self.q)
        tau = kappa = 1.0
        history = []
        status = Status.MAX_ITER
        kind = None
        small_steps = 0
        it = 0
        # X and S are kept in original coordinates and updated additively so
        # the residuals follow the linearized equations exactly; the NT factor R
        # only has to be accurate relative to them, not to eps * |R|^4
        X = [np.eye(blk.m) for blk in self.blocks]
        S = [np.eye(blk.m) for blk in self.blocks]
        for it in range(opts.max_iter + 1):
            ATlam = self.A_adj(lam)
            rp = self.A_op(X, y) - self.b * tau
            rd = [a + s - c * tau for a, s, c in zip(ATlam, S, self.C)]
            rf = self.B.T @ lam - self.c_f * tau
            cx = sum(np.sum(c * x) for c, x in zip(self.C, X)) + self.c_f @ y
            blam = self.b @ lam
            rg = blam - cx - kappa
            xs = sum(float(lk @ lk) for lk in lam_s)
            mu = (xs + tau * kappa) / (self.nu + 1)

            pres = np.max(np.abs(rp), initial=0.0) / tau / self.bnorm
            dres = max(
                max((np.max(np.abs(r)) for r in rd), default=0.0),
                np.max(np.abs(rf), initial=0.0),
            ) / tau / self.cnorm
            pobj, dobj = cx / tau, blam / tau
            gap = abs(pobj - dobj)
            comp = xs / tau**2
            gap_scale = max(1.0, min(abs(pobj), abs(dobj)))
            rec = dict(it=it, pres=pres, dres=dres, pobj=pobj, dobj=dobj, gap=gap, mu=mu, tau=tau, kappa=kappa)
            history.append(rec)
            if opts.verbose:
                log.info(
                    "it %3d pres %.2e dres %.2e gap %.2e pobj %.8e mu %.2e tau %.2e kap %.2e",
                    it, pres, dres, gap, pobj, mu, tau, kappa,
                )
            if pres <= opts.feas_tol and dres <= opts.feas_tol and max(gap, comp) <= opts.gap_tol * gap_scale:
                status = Status.OPTIMAL
                break
            # infeasibility certificates
            if blam > 0:
                ray = max(
                    max((np.max(np.abs(a + s)) for a, s in zip(ATlam, S)), default=0.0),
                    np.max(np.abs(self.B.T @ lam), initial=0.0),
                ) / blam
                if ray <= opts.feas_tol * self.cnorm:
                    status, kind = Status.INFEASIBLE, "primal"
                    break
            if cx < 0:
                ray = np.max(np.abs(self.A_op(X, y)), initial=0.0) / -cx
                if ray <= opts.feas_tol * self.bnorm:
                    status, kind = Status.INFEASIBLE, "dual"
                    break
            if it == opts.max_iter:
                break

            # Newton systems ------------------------------------------------
            W = [Rk @ Rk.T for Rk in R]
            try:
                M = np.zeros((self.P.size, self.P.size))
                for blk, Wk in zip(self.blocks, W):
                    blk.schur_add(M, Wk, opts.batch)
                M = 0.5 * (M + M.T)
                kkt = _KKT(M, self.B_P, self.B_F, opts.regularization, self._schur_op(W))
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("KKT factorization failed: %s", exc)
                status = Status.NUMERICAL_FAILURE
                break

            # Direction per unit dtau. With C = (A*lam + S - rd) / tau its dual
            # part is p = lam / tau + pt, and every quantity below stays of the
            # size of the iterates instead of |W|^2 (forming W C W directly
            # loses all accuracy once X nears a singular optimum).
            E = [Rk.T @ r @ Rk for Rk, r in zip(R, rd)]
            G = [np.diag(lk) - e for lk, e in zip(lam_s, E)]
            hp = self.b + self.A_psd([Rk @ g @ Rk.T for Rk, g in zip(R, G)]) / tau
            ptP, ptF, qy = kkt.solve(hp[self.P], self.b[self.F], -rf / tau, opts.refine_steps)
            pt = np.zeros(self.q)
            pt[self.P], pt[self.F] = ptP, ptF
            p_dir = lam / tau + pt
            dSt_p = [g / tau - Rk.T @ a @ Rk for g, Rk, a in zip(G, R, self.A_adj(pt))]
            dXt_p = [-d for d in dSt_p]
            N_p = self.b @ pt + rf @ qy / tau - sum(np.sum(g * d) for g, d in zip(G, dXt_p)) / tau

            def newton(eta, Tmats, t_tk):
                Th = [2.0 * T / (lk[:, None] + lk[None, :]) for lk, T in zip(lam_s, Tmats)]
                base = [Rk @ (t + eta * e) @ Rk.T for Rk, t, e in zip(R, Th, E)]
                g1 = -eta * rp - self.A_psd(base)
                uP, uF, v = kkt.solve(g1[self.P], g1[self.F], -eta * rf, opts.refine_steps)
                u = np.zeros(self.q)
                u[self.P], u[self.F] = uP, uF
                dSt_u = [-eta * e - Rk.T @ a @ Rk for e, Rk, a in zip(E, R, self.A_adj(u))]
                dXt_u = [t - d for t, d in zip(Th, dSt_u)]
                N_u = (
                    self.b @ u
                    + eta * (lam @ rp) / tau
                    + rf @ v / tau
                    - sum(np.sum(g * d) for g, d in zip(G, dXt_u)) / tau
                )
                dtau = (-eta * rg + t_tk / tau - N_u) / (N_p + kappa / tau)
                dlam = u + dtau * p_dir
                dy = v + dtau * qy
                dXt = [a + dtau * b for a, b in zip(dXt_u, dXt_p)]
                dSt = [a + dtau * b for a, b in zip(dSt_u, dSt_p)]
                dkap = (t_tk - kappa * dtau) / tau
                return dXt, dSt, dlam, dy, dtau, dkap

            def step_len(dXt, dSt, dtau, dkap):
                a = math.inf
                for lk, dx, ds in zip(lam_s, dXt, dSt):
                    a = min(a, _max_step(lk, 0.5 * (dx + dx.T)), _max_step(lk, 0.5 * (ds + ds.T)))
                if dtau < 0:
                    a = min(a, -tau / dtau)
                if dkap < 0:
                    a = min(a, -kappa / dkap)
                return a

            # predictor
            T_aff = [-np.diag(lk**2) for lk in lam_s]
            try:
                aff = newton(1.0, T_aff, -tau * kappa)
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("predictor solve failed: %s", exc)
                status = Status.NUMERICAL_FAILURE
                break
            dXa, dSa, _, _, dtau_a, dkap_a = aff
            alpha_a = min(1.0, step_len(dXa, dSa, dtau_a, dkap_a))
            mu_aff = (
                sum(
                    np.sum((np.diag(lk) + alpha_a * dx) * (np.diag(lk) + alpha_a * ds))
                    for lk, dx, ds in zip(lam_s, dXa, dSa)
                )
                + (tau + alpha_a * dtau_a) * (kappa + alpha_a * dkap_a)
            ) / (self.nu + 1)
            sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

            # corrector
            T_cor = []
            for lk, dx, ds in zip(lam_s, dXa, dSa):
                sym = 0.5 * (dx @ ds + ds @ dx)
                T_cor.append(sigma * mu * np.eye(lk.size) - np.diag(lk**2) - sym)
            t_tk = sigma * mu - tau * kappa - dtau_a * dkap_a
            try:
                dXt, dSt, dlam, dy, dtau, dkap = newton(1.0 - sigma, T_cor, t_tk)
            except (np.linalg.LinAlgError, ValueError) as exc:
                log.warning("corrector solve failed: %s", exc)
                status = Status.NUMERICAL_FAILURE
                break
            alpha = min(1.0, opts.step_fraction * step_len(dXt, dSt, dtau, dkap))

            # update in scaled coordinates, then refresh the NT scaling
            dX = [Rk @ (0.5 * (d + d.T)) @ Rk.T for Rk, d in zip(R, dXt)]
            dS = [c * dtau - a - (1.0 - sigma) * r for c, a, r in zip(self.C, self.A_adj(dlam), rd)]
            for attempt in range(6):
                try:
                    newR, newlam, newX, newS = [], [], [], []
                    for k in range(nb):
                        Xt = np.diag(lam_s[k]) + alpha * dXt[k]
                        St = np.diag(lam_s[k]) + alpha * dSt[k]
                        Rt, _ = _nt_scaling(0.5 * (Xt + Xt.T), 0.5 * (St + St.T))
                        Rk = R[k] @ Rt
                        Xk = X[k] + alpha * dX[k]
                        Sk = S[k] + alpha * dS[k]
                        Xk, Sk = 0.5 * (Xk + Xk.T), 0.5 * (Sk + Sk.T)
                        # re-derive the scaling from the additive iterates,
                        # working in the frame of the predicted factor
                        lu = sla.lu_factor(Rk, check_finite=False)
                        Xr = _inv_congruence(lu, Xk)
                        Sr = Rk.T @ Sk @ Rk
                        Rt2, lt = _nt_scaling(0.5 * (Xr + Xr.T), 0.5 * (Sr + Sr.T))
                        newR.append(Rk @ Rt2)
                        newlam.append(lt)
                        newX.append(Xk)
                        newS.append(Sk)
                    break
                except np.linalg.LinAlgError:
                    alpha *= 0.5
            else:
                status = Status.NUMERICAL_FAILURE
                break
            R, lam_s, X, S = newR, newlam, newX, newS
            lam = lam + alpha * dlam
            y = y + alpha * dy
            tau = tau + alpha * dtau
            kappa = kappa + alpha * dkap
            small_steps = small_steps + 1 if alpha < 1e-8 else 0
            if small_steps >= 5 or not np.isfinite(tau):
                status = Status.NUMERICAL_FAILURE
                break

        if kind == "primal":
            scale = 1.0 / max(self.b @ lam, 1e-300)
            return [np.zeros_like(x) for x in X], np.zeros_like(y), lam * scale, status, kind, it, history
        if kind == "dual":
            cx = sum(np.sum(c * x) for c, x in zip(self.C, X)) + self.c_f @ y
            scale = 1.0 / max(-cx, 1e-300)
            return [x * scale for x in X], y * scale, np.zeros_like(lam), status, kind, it, history
        return [x / tau for x in X], y / tau, lam / tau, status, kind, it, history


def solve(p: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve ``p`` and return blocks, free values, duals and a residual report."""
    opts = opts or SolverOptions()
    pre = _presolve(p, opts.feas_tol)
    if pre.infeasible_row is not None:
        dual = np.zeros(p.b.size)
        dual[pre.infeasible_row] = np.sign(p.b[pre.infeasible_row]) or 1.0
        sol = SdpSolution(
            blocks=[np.zeros((m, m)) for m in p.blocks],
            free_vals=np.zeros(p.free_vars),
            dual=dual,
            status=Status.INFEASIBLE,
            residuals={},
            infeasibility="primal",
        )
        sol.residuals = residuals(p, sol)
        return sol
    if pre.keep.size == 0:
        X = [np.zeros((m, m)) for m in p.blocks]
        sol = SdpSolution(X, np.zeros(p.free_vars), np.zeros(p.b.size), Status.OPTIMAL, {})
        sol.residuals = residuals(p, sol)
        if np.any(p.c != 0):
            log.warning("unconstrained problem with nonzero objective; returning the zero point")
        return sol
    # a small right-hand side (e.g. proportional to a margin constant) is
    # normalized so the stopping tests act relative to the data
    beta = float(np.max(np.abs(p.b[pre.keep]), initial=0.0))
    beta = beta if 0.0 < beta < 1.0 else 1.0
    work = p if beta == 1.0 else SdpProblem(p.blocks, p.free_vars, p.A, p.b / beta, p.c)
    solver = _HsdSolver(work, pre.keep, opts)
    X, y, lam_k, status, kind, iters, history = solver.run()
    if kind != "primal":
        X, y = [x * beta for x in X], y * beta
    dual = np.zeros(p.b.size)
    dual[pre.keep] = lam_k
    sol = SdpSolution(
        blocks=[0.5 * (x + x.T) for x in X],
        free_vals=y,
        dual=dual,
        status=status,
        residuals={},
        iterations=iters,
        infeasibility=kind,
        history=history,
    )
    sol.residuals = residuals(p, sol)
    return sol
