"""Polynomial closed-loop attitude systems on unit-constraint manifolds.

Three systems are provided, all shifted so the equilibrium of interest sits at
the origin and the constraint reads ``h(x) = 2 x1 + x1^2 + ... + xm^2``:

* :func:`circle_toy_system` -- the flow ``theta' = -sin(theta)`` embedded on S^1.
* :func:`build_example1` -- two-axis aerostability of a feathered cubesat
  (direction vector on S^2 plus body rates, aerodynamic torque from a
  polynomial fit of Sentman's flat-plate coefficients, rate damping).
* :func:`build_example2` -- quaternion PD control with gravity-gradient torque
  in a circular orbit (unit quaternion on S^3 plus body rates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import null_space
from scipy.special import erf, erfc

from .polyalg import (
    Polynomial,
    PolyVector,
    differentiate,
    evaluate,
    substitute_affine,
    sum_squares,
)

K_BOLTZMANN = 1.380649e-23

# reference values of the transformed aerostability dynamics
REFERENCE_AERO_COEFFS = {"x3": 0.00226, "x2^2 x3": 0.00807, "x3^3": 0.00799, "x2^4 x3": 0.00389}


class ModelError(ValueError):
    """A generated system violates its structural invariants."""


class DegenerateConstraintError(ValueError):
    """The constraint gradient vanishes at the requested point."""


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class AeroEnv:
    rho: float = 1.88e-11  # kg/m^3
    V_i: float = 7725.84  # m/s
    s_i: float = 7.86
    alpha_E: float = 0.95
    T_w: float = 300.0  # K
    m_T: float = 2.65e-26  # kg, atomic oxygen
    k_B: float = K_BOLTZMANN

    def __post_init__(self):
        for name in ("rho", "V_i", "s_i", "alpha_E", "T_w", "m_T", "k_B"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AeroEnv.{name} must be positive")

    @property
    def dynamic_pressure(self) -> float:
        return 0.5 * self.rho * self.V_i**2


@dataclass(frozen=True)
class Panel:
    r: tuple  # center of pressure, m
    n_hat: tuple  # unit normal
    area: float  # m^2

    def __post_init__(self):
        if abs(np.linalg.norm(self.n_hat) - 1.0) > 1e-12:
            raise ValueError("panel normal must be a unit vector")
        if self.area <= 0:
            raise ValueError("panel area must be positive")


@dataclass(frozen=True)
class PanelGeometry:
    panels: tuple

    @classmethod
    def feathered_cross(cls, x_cp: float = -0.1310, r_perp: float = 0.3350, area: float = 0.0342):
        """Four wings: normals +-y at (x_cp, +-r_perp, 0), normals +-z at (x_cp, 0, +-r_perp)."""
        return cls(
            (
                Panel((x_cp, r_perp, 0.0), (0.0, 1.0, 0.0), area),
                Panel((x_cp, -r_perp, 0.0), (0.0, -1.0, 0.0), area),
                Panel((x_cp, 0.0, r_perp), (0.0, 0.0, 1.0), area),
                Panel((x_cp, 0.0, -r_perp), (0.0, 0.0, -1.0), area),
            )
        )


@dataclass(frozen=True)
class SatelliteParams:
    inertia: tuple = (0.0288, 0.0392, 0.0392)  # diagonal, kg m^2 (or full 3x3 nested tuple)
    k_D: float = 0.016
    k_p: float = 0.0064
    k_d: float = 0.08
    omega_0: float = 0.0011  # rad/s

    @property
    def Theta(self) -> np.ndarray:
        th = np.asarray(self.inertia, dtype=float)
        if th.ndim == 1:
            th = np.diag(th)
        if th.shape != (3, 3) or not np.allclose(th, th.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(th).min() <= 0:
            raise ValueError("inertia must be positive definite")
        return th

    def __post_init__(self):
        self.Theta  # validate
        for name in ("k_D", "k_p", "k_d", "omega_0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SatelliteParams.{name} must be positive")


# ---------------------------------------------------------------------------
# system container


@dataclass(frozen=True)
class PolySystem:
    """Polynomial vector field ``f`` on the manifold ``{h = 0}``.

    ``equilibria`` are in transformed coordinates with the origin first.
    ``scale`` and ``shift`` record the map ``x = diag(scale) (xbar - shift)``
    from the physical state ``xbar``. The first ``sphere_dim`` coordinates
    carry the shifted unit-sphere constraint.
    """

    f: PolyVector
    h: Polynomial
    equilibria: tuple
    scale: tuple
    shift: tuple
    sphere_dim: int
    name: str = "system"
    rate_indices: tuple = ()

    def __post_init__(self):
        n = len(self.f)
        if self.h.nvars != n or self.f.nvars != n:
            raise ModelError("f and h must share the state dimension")
        if not self.equilibria or np.any(np.asarray(self.equilibria[0]) != 0):
            raise ModelError("the first equilibrium must be the origin")
        for eq in self.equilibria:
            if abs(evaluate(self.h, eq)) > 1e-9:
                raise ModelError(f"equilibrium {eq} is not on the manifold")
            if np.max(np.abs(self.f(eq))) > 1e-9:
                raise ModelError(f"f does not vanish at equilibrium {eq}")

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def k(self) -> int:
        return len(self.equilibria)

    def to_original(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) / np.asarray(self.scale) + np.asarray(self.shift)

    def from_original(self, xbar) -> np.ndarray:
        return np.asarray(self.scale) * (np.asarray(xbar, dtype=float) - np.asarray(self.shift))

    def rescaled(self, scale) -> "PolySystem":
        """The same dynamics in coordinates ``x' = diag(scale) x``."""
        s = np.asarray(scale, dtype=float)
        A = np.diag(1.0 / s)
        zero = np.zeros(self.n)
        f = PolyVector(substitute_affine(fi, A, zero) * float(si) for fi, si in zip(self.f, s))
        h = substitute_affine(self.h, A, zero)
        return PolySystem(
            f=f,
            h=h,
            equilibria=tuple(tuple(s * np.asarray(e)) for e in self.equilibria),
            scale=tuple(s * np.asarray(self.scale)),
            shift=self.shift,
            sphere_dim=self.sphere_dim,
            name=f"{self.name}-rescaled",
            rate_indices=self.rate_indices,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "f": self.f.to_records(),
            "h": self.h.to_records(),
            "equilibria": [list(map(float, e)) for e in self.equilibria],
            "scale": list(map(float, self.scale)),
            "shift": list(map(float, self.shift)),
            "sphere_dim": self.sphere_dim,
            "rate_indices": list(self.rate_indices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolySystem":
        n = d["n"]
        return cls(
            f=PolyVector.from_records(d["f"], n),
            h=Polynomial.from_records(d["h"], n),
            equilibria=tuple(tuple(e) for e in d["equilibria"]),
            scale=tuple(d["scale"]),
            shift=tuple(d["shift"]),
            sphere_dim=d["sphere_dim"],
            name=d.get("name", "system"),
            rate_indices=tuple(d.get("rate_indices", ())),
        )


def shifted_sphere(n: int, m: int) -> Polynomial:
    """``2 x1 + x1^2 + ... + xm^2`` in ``n`` variables."""
    return sum_squares(n, range(m)) + 2.0 * Polynomial.variable(0, n)


def _transform(fbar, hbar, scale, shift):
    """Push ``xbar' = fbar(xbar)``, ``hbar`` through ``x = S (xbar - shift)``."""
    s = np.asarray(scale, dtype=float)
    A = np.diag(1.0 / s)
    b = np.asarray(shift, dtype=float)
    f = PolyVector(substitute_affine(fi, A, b) * float(si) for fi, si in zip(fbar, s))
    h = substitute_affine(hbar, A, b)
    return f, h


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]


def _matvec(M, v, n):
    out = []
    for i in range(3):
        acc = Polynomial.zero(n)
        for j in range(3):
            if M[i, j] != 0.0:
                acc = acc + v[j] * float(M[i, j])
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# toy system


def circle_toy_system() -> PolySystem:
    """``theta' = -sin(theta)`` embedded as ``(cos, sin) - (1, 0)`` on the unit circle."""
    x1, x2 = Polynomial.variable(0, 2), Polynomial.variable(1, 2)
    f = PolyVector([x2 * x2, -(x1 + 1.0) * x2])
    return PolySystem(
        f=f,
        h=shifted_sphere(2, 2),
        equilibria=((0.0, 0.0), (-2.0, 0.0)),
        scale=(1.0, 1.0),
        shift=(1.0, 0.0),
        sphere_dim=2,
        name="circle",
    )


# ---------------------------------------------------------------------------
# Sentman free-molecular flat plate


def temperature_ratio(C, env: AeroEnv):
    C = np.asarray(C, dtype=float)
    s = env.s_i
    wall = env.alpha_E * (2.0 * env.k_B * env.T_w) / (env.m_T * env.V_i**2) * s**2
    g = s * C * math.sqrt(math.pi) * erfc(-s * C)
    frac = g / (np.exp(-(s**2) * C**2) + g)
    return wall + (1.0 - env.alpha_E) * (1.0 + s**2 / 2.0 + 0.25 * frac)


def sentman_H(c, env: AeroEnv):
    """Normal (``H1``) and flow-direction (``H2``) force coefficients at ``cos(delta) = c``."""
    c = np.asarray(c, dtype=float)
    s = env.s_i
    rp, rm = temperature_ratio(c, env), temperature_ratio(-c, env)
    t_plus, t_minus = rp + rm, rp - rm
    gauss = np.exp(-(s**2) * c**2)
    e = erf(s * c)
    k = math.sqrt(math.pi) * c / (2.0 * s)
    H1 = -gauss * t_minus / (2.0 * s**2) - e * (1.0 / s**2 + k * t_minus) - k * t_plus
    H2 = 2.0 / (math.sqrt(math.pi) * s) * gauss + 2.0 * c * e
    if H1.ndim == 0:
        return float(H1), float(H2)
    return H1, H2


@dataclass(frozen=True)
class HFit:
    H1: Polynomial  # univariate in c
    H2: Polynomial
    rms_H1: float
    rms_H2: float
    grid: np.ndarray = field(repr=False, compare=False, default=None)

    def coefficients(self):
        """Ascending-power coefficient lists ``(H1, H2)``."""
        return (
            [self.H1.coefficient((k,)) for k in range(3)],
            [self.H2.coefficient((k,)) for k in range(5)],
        )


def _lstsq_poly(x, y, deg):
    V = np.vander(x, deg + 1, increasing=True)
    if np.linalg.matrix_rank(V) < deg + 1:
        raise np.linalg.LinAlgError("rank-deficient least-squares fit")
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    coef[np.abs(coef) <= 1e-12 * np.max(np.abs(coef))] = 0.0
    rms = float(np.sqrt(np.mean((V @ coef - y) ** 2)))
    return Polynomial(1, {(k,): float(a) for k, a in enumerate(coef)}), rms


def fit_H(env: AeroEnv, grid_size: int = 401, deg_H1: int = 2, deg_H2: int = 4) -> HFit:
    """Least-squares polynomial fits of ``H1`` and ``H2`` on a uniform grid over [-1, 1].

    On a symmetric grid the fits inherit the parity of the fitted function,
    so the degree-2 fit of the odd ``H1`` degenerates to a linear one.
    Coefficients below ``1e-12`` times the largest are set to zero.
    """
    if grid_size < 50:
        raise ValueError("grid_size must be at least 50")
    c = np.linspace(-1.0, 1.0, grid_size)
    H1, H2 = sentman_H(c, env)
    p1, r1 = _lstsq_poly(c, H1, deg_H1)
    p2, r2 = _lstsq_poly(c, H2, deg_H2)
    return HFit(p1, p2, r1, r2, c)


def _compose_univariate(p: Polynomial, arg: Polynomial) -> Polynomial:
    out = Polynomial.zero(arg.nvars)
    power = Polynomial.constant(arg.nvars, 1.0)
    for k in range(p.degree + 1):
        a = p.coefficient((k,))
        if a:
            out = out + power * a
        power = power * arg
    return out


def aero_torque_poly(geom: PanelGeometry, env: AeroEnv, fits: HFit, nvars: int = 3, offset: int = 0):
    """Aerodynamic torque as polynomials in the flow direction ``w = -v_hat``.

    ``w`` occupies variables ``offset .. offset+2`` of an ``nvars``-variable ring.
    """
    w = [Polynomial.variable(offset + i, nvars) for i in range(3)]
    q = env.dynamic_pressure
    tau = [Polynomial.zero(nvars) for _ in range(3)]
    for panel in geom.panels:
        n_hat = np.asarray(panel.n_hat, dtype=float)
        r = [Polynomial.constant(nvars, float(v)) for v in panel.r]
        cosd = Polynomial.zero(nvars)
        for i in range(3):
            if n_hat[i]:
                cosd = cosd + w[i] * float(n_hat[i])
        h1 = _compose_univariate(fits.H1, cosd)
        h2 = _compose_univariate(fits.H2, cosd)
        force = [(h1 * float(n_hat[i]) - h2 * w[i]) * (q * panel.area) for i in range(3)]
        arm = _cross(r, force)
        tau = [t + a for t, a in zip(tau, arm)]
    return PolyVector(tau)


def build_example1(
    params: SatelliteParams | None = None,
    geom: PanelGeometry | None = None,
    env: AeroEnv | None = None,
    fits: HFit | None = None,
    scale=(1, 1, 1, 20, 20, 20),
    max_degree: int = 5,
) -> PolySystem:
    """Aerostability under rate damping ``tau_c = -k_D Theta omega``.

    Physical state ``(w, omega)``; ``w' = w x omega`` and
    ``Theta omega' = -omega x Theta omega + tau_aero(w) + tau_c``.
    """
    params = params or SatelliteParams()
    geom = geom or PanelGeometry.feathered_cross()
    env = env or AeroEnv()
    fits = fits or fit_H(env)
    n = 6
    xb = [Polynomial.variable(i, n) for i in range(n)]
    w, om = xb[:3], xb[3:]
    Th = params.Theta
    Th_inv = np.linalg.inv(Th)
    tau_aero = aero_torque_poly(geom, env, fits, nvars=n, offset=0)
    gyro = _cross(om, _matvec(Th, om, n))
    net = [-g + ta for g, ta in zip(gyro, tau_aero)]
    omdot = [a - o * params.k_D for a, o in zip(_matvec(Th_inv, net, n), om)]
    fbar = _cross(w, om) + omdot
    hbar = sum_squares(n, range(3)) - 1.0
    shift = (1.0, 0, 0, 0, 0, 0)
    f, h = _transform(fbar, hbar, scale, shift)
    f = PolyVector(fi.chop(1e-15) for fi in f)
    if f.degree > max_degree:
        raise ModelError(f"torque polynomial degree {f.degree} exceeds {max_degree}")
    s = np.asarray(scale, dtype=float)
    x2 = s * (np.array([-1.0, 0, 0, 0, 0, 0]) - np.asarray(shift))
    return PolySystem(
        f=f,
        h=h,
        equilibria=((0.0,) * n, tuple(x2)),
        scale=tuple(map(float, scale)),
        shift=shift,
        sphere_dim=3,
        name="aero",
        rate_indices=(3, 4, 5),
    )


def dcm_from_quaternion(q0, qv):
    """``(2 q0^2 - 1) I + 2 (qv qv^T - q0 [qv x])`` with polynomial (or numeric) entries."""
    rows = [[None] * 3 for _ in range(3)]
    skew = [[None, -qv[2], qv[1]], [qv[2], None, -qv[0]], [-qv[1], qv[0], None]]
    for i in range(3):
        for j in range(3):
            val = 2.0 * (qv[i] * qv[j])
            if skew[i][j] is not None:
                val = val - 2.0 * (q0 * skew[i][j])
            if i == j:
                val = val + (2.0 * (q0 * q0) - 1.0)
            rows[i][j] = val
    return rows


def build_example2(params: SatelliteParams | None = None, scale=(1, 1, 1, 1, 15, 15, 15)) -> PolySystem:
    """Quaternion PD control with gravity-gradient torque in a circular orbit.

    State ``(q0, qv, omega)`` with ``omega`` the body rate relative to the
    orbital frame, expressed in body axes.
    """
    params = params or SatelliteParams()
    n = 7
    xb = [Polynomial.variable(i, n) for i in range(n)]
    q0, qv, om = xb[0], xb[1:4], xb[4:7]
    Th = params.Theta
    Th_inv = np.linalg.inv(Th)
    w0 = params.omega_0
    T = dcm_from_quaternion(q0, qv)
    y_hat = [T[i][1] for i in range(3)]
    z_hat = [T[i][2] for i in range(3)]

    q0dot = -0.5 * (om[0] * qv[0] + om[1] * qv[1] + om[2] * qv[2])
    om_x_qv = _cross(om, qv)
    qvdot = [0.5 * (om[i] * q0 - om_x_qv[i]) for i in range(3)]

    rel = [om[i] - y_hat[i] * w0 for i in range(3)]
    gyro = _cross(rel, _matvec(Th, rel, n))
    coriolis = _cross(_matvec(Th, om, n), y_hat)
    gg = _cross(z_hat, _matvec(Th, z_hat, n))
    ctrl_p = _matvec(Th, qv, n)
    ctrl_d = _matvec(Th, om, n)
    net = [
        -gyro[i] - coriolis[i] * w0 + gg[i] * (3.0 * w0**2) - ctrl_p[i] * params.k_p - ctrl_d[i] * params.k_d
        for i in range(3)
    ]
    omdot = _matvec(Th_inv, net, n)
    fbar = [q0dot] + qvdot + omdot
    hbar = sum_squares(n, range(4)) - 1.0
    shift = (1.0, 0, 0, 0, 0, 0, 0)
    f, h = _transform(fbar, hbar, scale, shift)
    f = PolyVector(fi.chop(1e-15) for fi in f)
    s = np.asarray(scale, dtype=float)
    x2 = s * (np.array([-1.0, 0, 0, 0, 0, 0, 0]) - np.asarray(shift))
    return PolySystem(
        f=f,
        h=h,
        equilibria=((0.0,) * n, tuple(x2)),
        scale=tuple(map(float, scale)),
        shift=shift,
        sphere_dim=4,
        name="quat",
        rate_indices=(4, 5, 6),
    )


# ---------------------------------------------------------------------------
# linearization


def jacobian(f, point) -> np.ndarray:
    n = len(f)
    return np.array([[evaluate(differentiate(fi, j), point) for j in range(n)] for fi in f])


def tangent_jacobian_eigs(sys: PolySystem, eq_index: int) -> np.ndarray:
    """Eigenvalues of the linearization restricted to the tangent space of ``{h = 0}``."""
    x = np.asarray(sys.equilibria[eq_index], dtype=float)
    if abs(evaluate(sys.h, x)) > 1e-9:
        raise ModelError("point is not on the manifold")
    grad_h = np.array([evaluate(differentiate(sys.h, j), x) for j in range(sys.n)])
    if np.linalg.norm(grad_h) == 0.0:
        raise DegenerateConstraintError("constraint gradient vanishes at the equilibrium")
    H = null_space(grad_h[None, :])
    J = jacobian(sys.f, x)
    return np.linalg.eigvals(H.T @ J @ H)


def count_unstable(eigs, tol: float = 0.0) -> int:
    return int(np.sum(np.real(eigs) > tol))


# ---------------------------------------------------------------------------
# reference comparison / calibration


def aero_coefficients(sys: PolySystem) -> dict:
    """Magnitudes of the aerodynamic terms of the pitch-rate row in transformed coordinates."""
    f5 = sys.f[4]
    return {
        "x3": -f5.coefficient((0, 0, 1, 0, 0, 0)),
        "x2^2 x3": -f5.coefficient((0, 2, 1, 0, 0, 0)),
        "x3^3": -f5.coefficient((0, 0, 3, 0, 0, 0)),
        "x2^4 x3": f5.coefficient((0, 4, 1, 0, 0, 0)),
    }


def calibrate_wall_temperature(
    params: SatelliteParams | None = None,
    geom: PanelGeometry | None = None,
    env: AeroEnv | None = None,
    bounds=(50.0, 3000.0),
) -> AeroEnv:
    """Pick ``T_w`` minimizing the squared relative mismatch of :data:`REFERENCE_AERO_COEFFS`."""
    from scipy.optimize import minimize_scalar

    env = env or AeroEnv()

    def mismatch(t_w):
        e = replace(env, T_w=float(t_w))
        got = aero_coefficients(build_example1(params, geom, e))
        return sum((got[k] / v - 1.0) ** 2 for k, v in REFERENCE_AERO_COEFFS.items())

    res = minimize_scalar(mismatch, bounds=bounds, method="bounded", options={"xatol": 1e-3})
    return replace(env, T_w=float(res.x))
