"""Numerical corroboration of certificates: sampled predicates and trajectories.

Sampling cannot establish a condition for every point of an unbounded state
space; the PSD Gram matrices are the actual guarantee. The checks here catch
extraction or modelling errors and provide trajectory-level evidence.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attdyn import PolySystem, count_unstable, tangent_jacobian_eigs
from .polyalg import CompiledPolys, Polynomial, gradient_inner, shifted_norm_sq
from .soscert import LyapunovCertificate, certificate_residuals

SLACK = 1e-7
MONO_SLACK = 1e-9
GRAM_TOL = 1e-8

HIERARCHY_NOTE = (
    "PSD Gram matrices are the global guarantee; sampled predicates and "
    "trajectories are corroborating evidence only."
)


class UnsupportedConstraint(ValueError):
    pass


class IntegrationError(RuntimeError):
    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last valid time {last_time:g})")
        self.last_time = last_time


# ---------------------------------------------------------------------------
# manifold helpers


def _sphere_poly(sys: PolySystem) -> Polynomial:
    """The shifted unit-sphere constraint implied by ``scale``, ``shift`` and ``sphere_dim``."""
    n, m = sys.n, sys.sphere_dim
    out = Polynomial.constant(n, -1.0)
    for i in range(m):
        xi = Polynomial.variable(i, n) * (1.0 / sys.scale[i]) + float(sys.shift[i])
        out = out + xi * xi
    return out


def _check_sphere(sys: PolySystem) -> None:
    if sys.sphere_dim not in (2, 3, 4):
        raise UnsupportedConstraint(f"sphere dimension {sys.sphere_dim} not supported")
    ref = _sphere_poly(sys)
    hs = sys.h
    # h may be any nonzero multiple of the reference constraint
    c_ref = ref.coefficient((0,) * sys.n)
    factor = hs.coefficient((0,) * sys.n) / c_ref if c_ref else 0.0
    if factor == 0.0:
        exp, cr = max(ref.terms.items(), key=lambda kv: abs(kv[1]))
        factor = hs.coefficient(exp) / cr
    if factor == 0.0 or (hs - ref * factor).max_abs_coeff() > 1e-12 * max(1.0, hs.max_abs_coeff()):
        raise UnsupportedConstraint("constraint is not a shifted unit sphere in the leading coordinates")


def project_to_manifold(sys: PolySystem, X: np.ndarray) -> np.ndarray:
    """Rescale the constrained block of each row back onto the unit sphere."""
    X = np.array(X, dtype=float, copy=True)
    m = sys.sphere_dim
    sc = np.asarray(sys.scale[:m])
    sh = np.asarray(sys.shift[:m])
    u = X[..., :m] / sc + sh
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    X[..., :m] = sc * (u - sh)
    return X


def sample_manifold(sys: PolySystem, n: int, rate_box: float = 1.0, seed: int = 0) -> np.ndarray:
    """``n`` states: uniform on the sphere block, uniform in ``[-rate_box, rate_box]`` elsewhere."""
    if n < 1:
        raise ValueError("n must be positive")
    _check_sphere(sys)
    rng = np.random.default_rng(seed)
    m = sys.sphere_dim
    g = rng.standard_normal((n, m))
    u = g / np.linalg.norm(g, axis=1, keepdims=True)
    X = np.empty((n, sys.n))
    X[:, :m] = np.asarray(sys.scale[:m]) * (u - np.asarray(sys.shift[:m]))
    if sys.n > m:
        X[:, m:] = rng.uniform(-rate_box, rate_box, size=(n, sys.n - m))
    return X


# ---------------------------------------------------------------------------
# predicates


@dataclass
class ValidationReport:
    n_samples: int
    V_at_origin: float
    min_V_off_origin: float
    positivity_fail_fraction: float
    max_decrease_violation: float  # max of <grad V, f> + eps2 * prod, should be <= slack
    decrease_fail_fraction: float
    radial_min_margin: float  # min of V - eps1 |x|^2 over ball samples
    gram_min_eigs: list
    identity_residuals: dict
    certificate_status: str
    slack: float = SLACK
    gram_tol: float = GRAM_TOL
    mono_slack: float = MONO_SLACK
    n_trajectories: int = 0
    monotonicity_violations: int = 0
    max_final_norm: float = 0.0
    final_norm_tol: float = 1e-3
    secondary_instability: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    note: str = HIERARCHY_NOTE

    def recompute_verdicts(self) -> dict:
        v = {
            "V_origin_zero": self.V_at_origin == 0.0,
            "positivity": self.min_V_off_origin > 0.0,
            "decrease": self.max_decrease_violation <= self.slack,
            "radial": self.radial_min_margin >= -self.slack,
            "gram_psd": all(e >= -self.gram_tol for e in self.gram_min_eigs),
            "identity": self.certificate_status in ("valid", "flagged")
            and max(self.identity_residuals.get("posdef_rel", 0.0), self.identity_residuals.get("decrease_rel", 0.0))
            <= 1e-4,
        }
        if self.n_trajectories:
            v["monotone_V"] = self.monotonicity_violations == 0
            v["convergence"] = self.max_final_norm <= self.final_norm_tol
        if self.secondary_instability:
            v["secondary_instability"] = bool(self.secondary_instability.get("holds", False))
        self.verdicts = v
        return v

    @property
    def passed(self) -> bool:
        return all(self.recompute_verdicts().values())

    def to_dict(self) -> dict:
        self.recompute_verdicts()
        d = asdict(self)
        d["passed"] = all(self.verdicts.values())
        return _plain(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


@dataclass
class _Evaluators:
    V: CompiledPolys
    lie: CompiledPolys
    prod: CompiledPolys


def _evaluators(cert: LyapunovCertificate, sys: PolySystem) -> _Evaluators:
    lie = gradient_inner(cert.V, sys.f)
    return _Evaluators(CompiledPolys([cert.V]), CompiledPolys([lie]), CompiledPolys([cert.product_term]))


def check_conditions(
    cert: LyapunovCertificate,
    sys: PolySystem,
    samples: np.ndarray,
    ball_samples: np.ndarray | None = None,
    slack: float = SLACK,
) -> ValidationReport:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != sys.n or cert.nvars != sys.n:
        raise ValueError("certificate, system and samples disagree on the state dimension")
    ev = _evaluators(cert, sys)
    V = ev.V(samples)[:, 0]
    lie = ev.lie(samples)[:, 0]
    prod = ev.prod(samples)[:, 0]
    off = np.linalg.norm(samples, axis=1) > 1e-9
    viol = lie + cert.eps2 * prod
    V0 = float(ev.V(np.zeros((1, sys.n)))[0, 0])
    if ball_samples is None:
        rng = np.random.default_rng(12345)
        g = rng.standard_normal((10_000, sys.n))
        r = 10.0 * rng.uniform(size=(10_000, 1)) ** (1.0 / sys.n)
        ball_samples = r * g / np.linalg.norm(g, axis=1, keepdims=True)
    Vb = ev.V(ball_samples)[:, 0]
    radial = Vb - cert.eps1 * np.sum(ball_samples**2, axis=1)
    res = certificate_residuals(cert, sys)
    rep = ValidationReport(
        n_samples=int(samples.shape[0]),
        V_at_origin=V0,
        min_V_off_origin=float(np.min(V[off])) if off.any() else math.inf,
        positivity_fail_fraction=float(np.mean(V[off] <= 0.0)) if off.any() else 0.0,
        max_decrease_violation=float(np.max(viol)),
        decrease_fail_fraction=float(np.mean(viol > slack)),
        radial_min_margin=float(np.min(radial / np.maximum(1.0, np.abs(Vb)))),
        gram_min_eigs=[res["min_eig_posdef"], res["min_eig_decrease"]],
        identity_residuals={k: res[k] for k in ("posdef_rel", "decrease_rel", "posdef_abs", "decrease_abs")},
        certificate_status=cert.status,
        slack=slack,
    )
    rep.recompute_verdicts()
    return rep


def instability_summary(sys: PolySystem) -> dict:
    """Tangent-space linearization at every non-origin equilibrium."""
    out = {"equilibria": [], "holds": True}
    for i in range(1, sys.k):
        eigs = tangent_jacobian_eigs(sys, i)
        n_unst = count_unstable(eigs)
        out["equilibria"].append(
            {
                "index": i,
                "point": list(map(float, sys.equilibria[i])),
                "eigenvalues_real": [float(e.real) for e in eigs],
                "eigenvalues_imag": [float(e.imag) for e in eigs],
                "n_positive_real": int(n_unst),
            }
        )
        out["holds"] = out["holds"] and n_unst > 0
    return out


# ---------------------------------------------------------------------------
# simulation


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), n)
    renorm_applied: bool
    max_drift: float = 0.0  # largest |h| before a renormalization

    def to_csv(self, V: np.ndarray | None = None, extra: dict | None = None) -> str:
        n = self.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)]
        cols = [self.times[:, None], self.states]
        if V is not None:
            header.append("V")
            cols.append(np.asarray(V)[:, None])
        for name, values in (extra or {}).items():
            header.append(name)
            cols.append(np.asarray(values)[:, None])
        data = np.hstack(cols)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()


def _rk4_step(F, X, dt):
    k1 = F(X)
    k2 = F(X + 0.5 * dt * k1)
    k3 = F(X + 0.5 * dt * k2)
    k4 = F(X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _drift(sys: PolySystem, X: np.ndarray) -> np.ndarray:
    m = sys.sphere_dim
    u = X[..., :m] / np.asarray(sys.scale[:m]) + np.asarray(sys.shift[:m])
    return np.abs(np.sum(u * u, axis=-1) - 1.0)


def simulate(sys: PolySystem, x0, dt: float, t_end: float, renormalize: bool = True) -> Trajectory:
    """Classical RK4 with projection of the sphere block after each step."""
    if dt <= 0 or t_end < 0:
        raise ValueError("need dt > 0 and t_end >= 0")
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != sys.n:
        raise ValueError("initial state has the wrong dimension")
    hfun = CompiledPolys([sys.h])
    if abs(hfun(x0[None])[0, 0]) > 1e-9:
        raise ValueError("initial state is not on the manifold")
    F = _field(sys)
    steps = int(round(t_end / dt))
    times = np.arange(steps + 1) * dt
    states = np.empty((steps + 1, sys.n))
    states[0] = x0
    x = x0[None, :]
    drift = 0.0
    for k in range(steps):
        x_new = _rk4_step(F, x, dt)
        if not np.all(np.isfinite(x_new)):
            raise IntegrationError("nonfinite state", times[k])
        if renormalize:
            drift = max(drift, float(_drift(sys, x_new)[0]))
            x_new = project_to_manifold(sys, x_new)
        x = x_new
        states[k + 1] = x[0]
    return Trajectory(times, states, renormalize, drift)


def _field(sys: PolySystem):
    comp = CompiledPolys(list(sys.f))
    return lambda X: comp(X)


@dataclass
class VSeries:
    values: np.ndarray
    increases: int
    max_increase: float
    final_norm: float

    @property
    def monotone(self) -> bool:
        return self.increases == 0


def v_along_trajectory(cert: LyapunovCertificate, traj: Trajectory, slack: float = MONO_SLACK) -> VSeries:
    if traj.states.shape[1] != cert.nvars:
        raise ValueError("trajectory and certificate dimensions differ")
    V = CompiledPolys([cert.V])(traj.states)[:, 0]
    dV = np.diff(V)
    return VSeries(
        values=V,
        increases=int(np.sum(dV > slack)),
        max_increase=float(np.max(dV, initial=-math.inf)),
        final_norm=float(np.linalg.norm(traj.states[-1])),
    )


@dataclass
class BatchResult:
    x0: np.ndarray
    final: np.ndarray
    final_norms: np.ndarray
    increases: np.ndarray  # per trajectory count of V increases beyond slack
    max_increase: float
    max_drift: float
    t_final: float
    steps: int
    stopped_early: bool


def simulate_batch(
    sys: PolySystem,
    X0: np.ndarray,
    dt: float,
    t_end: float,
    cert: LyapunovCertificate | None = None,
    slack: float = MONO_SLACK,
    settle_norm: float = 0.0,
) -> BatchResult:
    """Integrate many initial states at once, tracking V monotonicity on the fly.

    If ``settle_norm > 0`` the loop ends once every state norm is below it.
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    F = _field(sys)
    Vf = CompiledPolys([cert.V]) if cert is not None else None
    steps = int(round(t_end / dt))
    X = X0.copy()
    V_prev = Vf(X)[:, 0] if Vf else None
    inc = np.zeros(X.shape[0], dtype=int)
    max_inc = -math.inf
    drift = 0.0
    k = 0
    stopped = False
    for k in range(1, steps + 1):
        Xn = _rk4_step(F, X, dt)
        if not np.all(np.isfinite(Xn)):
            raise IntegrationError("nonfinite state", (k - 1) * dt)
        drift = max(drift, float(np.max(_drift(sys, Xn))))
        X = project_to_manifold(sys, Xn)
        if Vf is not None:
            Vn = Vf(X)[:, 0]
            d = Vn - V_prev
            inc += d > slack
            max_inc = max(max_inc, float(d.max()))
            V_prev = Vn
        if settle_norm > 0 and k % 100 == 0 and np.max(np.linalg.norm(X, axis=1)) < settle_norm:
            stopped = True
            break
    norms = np.linalg.norm(X, axis=1)
    return BatchResult(X0, X, norms, inc, max_inc, drift, k * dt, k, stopped)
