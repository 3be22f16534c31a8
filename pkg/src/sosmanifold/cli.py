"""Command-line front end: fit-aero, certify, validate, simulate.

Exit codes: 0 pass, 1 validation failure, 2 no certificate (infeasible or
solver failure), 3 flagged or failed residuals, 4 input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attdyn import AeroEnv, PolySystem, SatelliteParams, build_example1, build_example2, circle_toy_system, fit_H, sentman_H
from .sdp import SolverOptions, Status
from .soscert import LyapunovCertificate, SosProgramSpec, SpecificationError, certify, degree_budget
from .validate import (
    IntegrationError,
    instability_summary,
    check_conditions,
    sample_manifold,
    simulate,
    simulate_batch,
    v_along_trajectory,
)

log = logging.getLogger("sosmanifold")

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_RESIDUAL, EXIT_INPUT = 0, 1, 2, 3, 4

EXAMPLES = ("circle", "aero", "quat")
DEFAULT_T_END = {"circle": 20.0, "aero": 2000.0, "quat": 20000.0}
CSV_MAX_ROWS = 2001


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    example: str = "circle"
    degree_v: int = 4
    degree_p: int = 6
    eps1: float = 1e-5
    eps2: float = 1e-5
    gains: dict = field(default_factory=dict)  # SatelliteParams overrides
    env: dict = field(default_factory=dict)  # AeroEnv overrides
    seed: int = 0
    out: str = "out"
    objective: str = "feasibility"
    prune: bool = True
    max_iter: int = 200
    grid_size: int = 401
    samples: int = 10_000
    rate_box: float = 1.0
    trajectories: int = 100
    dt: float = 0.1
    t_end: float | None = None
    csv_trajectories: int = 1
    csv_stride: int | None = None

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise InputError(f"unknown example {self.example!r}; choose from {', '.join(EXAMPLES)}")
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise InputError("eps must be positive")
        if self.dt <= 0 or (self.t_end is not None and self.t_end < 0):
            raise InputError("need dt > 0 and t_end >= 0")
        if self.samples < 1 or self.trajectories < 0 or self.grid_size < 50:
            raise InputError("samples >= 1, trajectories >= 0 and grid_size >= 50 required")
        known_gains = {f.name for f in fields(SatelliteParams)}
        known_env = {f.name for f in fields(AeroEnv)}
        if set(self.gains) - known_gains:
            raise InputError(f"unknown gain keys {sorted(set(self.gains) - known_gains)}")
        if set(self.env) - known_env:
            raise InputError(f"unknown environment keys {sorted(set(self.env) - known_env)}")

    @property
    def horizon(self) -> float:
        return DEFAULT_T_END[self.example] if self.t_end is None else self.t_end

    def aero_env(self) -> AeroEnv:
        try:
            return AeroEnv(**self.env)
        except (TypeError, ValueError) as e:
            raise InputError(str(e)) from None

    def params(self) -> SatelliteParams:
        g = dict(self.gains)
        if "inertia" in g:
            g["inertia"] = _tuplify(g["inertia"])
        try:
            return SatelliteParams(**g)
        except (TypeError, ValueError) as e:
            raise InputError(str(e)) from None

    def system(self) -> PolySystem:
        if self.example == "circle":
            return circle_toy_system()
        if self.example == "aero":
            env = self.aero_env()
            return build_example1(self.params(), env=env, fits=fit_H(env, self.grid_size))
        return build_example2(self.params())

    def program(self) -> SosProgramSpec:
        try:
            spec = SosProgramSpec(
                self.system(),
                deg_V=self.degree_v,
                deg_p=self.degree_p,
                eps1=self.eps1,
                eps2=self.eps2,
                prune=self.prune,
                objective=self.objective,
            )
            degree_budget(spec)
        except SpecificationError as e:
            raise InputError(str(e)) from None
        return spec


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


# ---------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--example", choices=EXAMPLES)
    p.add_argument("--degree-v", type=int, dest="degree_v")
    p.add_argument("--degree-p", type=int, dest="degree_p")
    p.add_argument("--eps", type=float, help="sets both eps1 and eps2")
    p.add_argument("--eps1", type=float)
    p.add_argument("--eps2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--grid-size", type=int, dest="grid_size")
    p.add_argument("--damping", type=float, dest="k_D", help="rate damping gain k_D")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sosmanifold", description="SOS certificates for almost global stability on spheres")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit-aero", help="fit H1/H2 polynomials to the flat-plate model")
    _shared(p)

    p = sub.add_parser("certify", help="search for a Lyapunov certificate")
    _shared(p)
    p.add_argument("--objective", choices=("feasibility", "trace"))
    p.add_argument("--no-prune", action="store_false", dest="prune", default=None)
    p.add_argument("--max-iter", type=int, dest="max_iter")

    p = sub.add_parser("validate", help="check a certificate by sampling and simulation")
    _shared(p)
    p.add_argument("--certificate", type=Path, help="defaults to OUT/certificate.json")
    p.add_argument("--samples", type=int)
    p.add_argument("--rate-box", type=float, dest="rate_box")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-end", type=float, dest="t_end")
    p.add_argument("--csv-trajectories", type=int, dest="csv_trajectories")
    p.add_argument("--csv-stride", type=int, dest="csv_stride")

    p = sub.add_parser("simulate", help="integrate one trajectory")
    _shared(p)
    p.add_argument("--x0", type=str, help="comma-separated initial state in system coordinates")
    p.add_argument("--certificate", type=Path, help="adds a V column")
    p.add_argument("--rate-box", type=float, dest="rate_box")
    p.add_argument("--dt", type=float)
    p.add_argument("--t-end", type=float, dest="t_end")
    p.add_argument("--csv-stride", type=int, dest="csv_stride")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config is not None:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(base, dict):
            raise InputError("config must be a JSON object")
        unknown = set(base) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
    ov = {k: v for k, v in vars(args).items() if v is not None and k in {f.name for f in fields(RunConfig)}}
    if getattr(args, "eps", None) is not None:
        ov.setdefault("eps1", args.eps)
        ov.setdefault("eps2", args.eps)
    merged = {**base, **ov}
    if getattr(args, "k_D", None) is not None:
        merged["gains"] = {**merged.get("gains", {}), "k_D": args.k_D}
    try:
        return RunConfig(**merged)
    except TypeError as e:
        raise InputError(str(e)) from None


# ---------------------------------------------------------------------------
# output helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()


def _stride(cfg: RunConfig) -> int:
    if cfg.csv_stride is not None:
        if cfg.csv_stride < 1:
            raise InputError("csv_stride must be positive")
        return cfg.csv_stride
    steps = int(round(cfg.horizon / cfg.dt))
    return max(1, math.ceil(steps / (CSV_MAX_ROWS - 1)))


def trajectory_csv(system: PolySystem, traj, V=None, stride: int = 1) -> str:
    """State columns plus physical body rates in rad/s and deg/s."""
    idx = np.arange(0, len(traj.times), stride)
    if idx[-1] != len(traj.times) - 1:
        idx = np.append(idx, len(traj.times) - 1)
    extra = {}
    for j, i in enumerate(system.rate_indices):
        rad = traj.states[idx, i] / system.scale[i] + system.shift[i]
        extra[f"omega{j + 1}_rad_s"] = rad
        extra[f"omega{j + 1}_deg_s"] = np.degrees(rad)
    sub = type(traj)(traj.times[idx], traj.states[idx], traj.renorm_applied, traj.max_drift)
    return sub.to_csv(None if V is None else np.asarray(V)[idx], extra)


def _load_certificate(path: Path, system: PolySystem) -> LyapunovCertificate:
    try:
        cert = LyapunovCertificate.from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"cannot read certificate {path}: {e}") from None
    if cert.nvars != system.n:
        raise InputError(f"certificate has {cert.nvars} variables, system {system.name} has {system.n}")
    return cert


# ---------------------------------------------------------------------------
# commands


def cmd_fit_aero(cfg: RunConfig) -> int:
    env = cfg.aero_env()
    fits = fit_H(env, cfg.grid_size)
    h1, h2 = fits.coefficients()
    out = Path(cfg.out)
    _write(
        out / "fit_aero.json",
        _dump(
            {
                "env": asdict(env),
                "grid_size": cfg.grid_size,
                "H1": h1,
                "H2": h2,
                "rms_H1": fits.rms_H1,
                "rms_H2": fits.rms_H2,
            }
        ),
    )
    c = fits.grid
    t1, t2 = sentman_H(c, env)
    f1 = np.polynomial.polynomial.polyval(c, h1)
    f2 = np.polynomial.polynomial.polyval(c, h2)
    _write(out / "fit_aero.csv", _csv(["cos_delta", "H1", "H1_fit", "H2", "H2_fit"], zip(c, t1, f1, t2, f2)))
    return EXIT_OK


def cmd_certify(cfg: RunConfig) -> int:
    spec = cfg.program()
    t0 = time.perf_counter()
    cert, sol, maps = certify(spec, SolverOptions(max_iter=cfg.max_iter))
    log.info("solver %s after %d iterations (%.2f s)", sol.status.value, sol.iterations, time.perf_counter() - t0)
    out = Path(cfg.out)
    report = {
        "example": cfg.example,
        "status": sol.status.value,
        "iterations": sol.iterations,
        "infeasibility": sol.infeasibility,
        "solver_residuals": sol.residuals,
        "program": maps.info,
        "degree_budget": degree_budget(spec),
        "certificate_status": None if cert is None else cert.status,
    }
    _write(out / "solver_report.json", _dump(_jsonable(report)))
    if cert is None:
        log.error("no certificate: solver status %s", sol.status.value)
        return EXIT_INFEASIBLE
    _write(out / "certificate.json", cert.to_json() + "\n")
    if sol.status != Status.OPTIMAL or cert.status != "valid":
        log.error("certificate residual status %s", cert.status)
        return EXIT_RESIDUAL
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def cmd_validate(cfg: RunConfig, certificate: Path | None = None) -> int:
    system = cfg.system()
    out = Path(cfg.out)
    cert = _load_certificate(certificate or out / "certificate.json", system)
    X = sample_manifold(system, cfg.samples, cfg.rate_box, seed=cfg.seed)
    rep = check_conditions(cert, system, X)
    rep.secondary_instability = instability_summary(system)
    if cfg.trajectories:
        X0 = sample_manifold(system, cfg.trajectories, cfg.rate_box, seed=cfg.seed + 1)
        t0 = time.perf_counter()
        try:
            batch = simulate_batch(system, X0, cfg.dt, cfg.horizon, cert)
        except IntegrationError as e:
            log.error("%s", e)
            return EXIT_VALIDATION
        log.info("%d trajectories to t = %g in %.1f s", cfg.trajectories, cfg.horizon, time.perf_counter() - t0)
        rep.n_trajectories = cfg.trajectories
        rep.monotonicity_violations = int(batch.increases.sum())
        rep.max_final_norm = float(batch.final_norms.max())
        stride = _stride(cfg)
        for i in range(min(cfg.csv_trajectories, cfg.trajectories)):
            traj = simulate(system, X0[i], cfg.dt, cfg.horizon)
            vs = v_along_trajectory(cert, traj)
            _write(out / f"trajectory_{i:03d}.csv", trajectory_csv(system, traj, vs.values, stride))
    _write(out / "validation.json", rep.to_json() + "\n")
    failed = [k for k, ok in rep.verdicts.items() if not ok]
    if failed:
        log.error("failed verdicts: %s", ", ".join(failed))
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, x0: str | None = None, certificate: Path | None = None) -> int:
    system = cfg.system()
    if x0 is not None:
        try:
            x = np.array([float(v) for v in x0.split(",")])
        except ValueError:
            raise InputError(f"cannot parse --x0 {x0!r}") from None
        if x.size != system.n:
            raise InputError(f"x0 has {x.size} entries, system {system.name} has {system.n}")
    else:
        x = sample_manifold(system, 1, cfg.rate_box, seed=cfg.seed)[0]
    cert = _load_certificate(certificate, system) if certificate is not None else None
    try:
        traj = simulate(system, x, cfg.dt, cfg.horizon)
    except IntegrationError as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except ValueError as e:
        raise InputError(str(e)) from None
    V = v_along_trajectory(cert, traj).values if cert is not None else None
    _write(Path(cfg.out) / "simulation.csv", trajectory_csv(system, traj, V, _stride(cfg)))
    log.info("final |x| = %.3e", float(np.linalg.norm(traj.states[-1])))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        if args.command == "fit-aero":
            return cmd_fit_aero(cfg)
        if args.command == "certify":
            return cmd_certify(cfg)
        if args.command == "validate":
            return cmd_validate(cfg, args.certificate)
        return cmd_simulate(cfg, args.x0, args.certificate)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
