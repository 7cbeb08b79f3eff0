"""Command-line entry point: ``hypoheat <command> [options]``.

Commands
--------
analyze        stratified algebra report of a field system
lift           Carnot lift (group law, lifted fields) as JSON
distance       CC-distance estimates, CSV ``x,y,d_hat,converged``
ball           ball-volume table, CSV ``r,volume,stderr,samples,seed``
kernel         lifted constant-coefficient kernel grid (HYPK file)
kernel-var     variable-coefficient kernel by the Levi parametrix
verify-bounds  two-sided Gaussian bound fit for a constant matrix
reproduction   Chapman-Kolmogorov deviation of the projected kernel
harnack        empirical parabolic Harnack constants
verify-all     every invariant suite, consolidated pass/fail report

Systems are given as a path (JSON/YAML/TOML) or a built-in example name
(``euclidean``, ``grushin``, ``grushin2``, ``chain3``, ``power3``, ``power4``).
Invalid systems exit with status 2 and a diagnostic on stderr. The pool used
by ``verify-all`` is capped by the environment variable HYPOHEAT_THREADS.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .bounds import FitFailure, _clean, rng_for
from .fields import (
    EXAMPLES,
    FieldSystem,
    FieldSystemError,
    example,
    generate_algebra,
    hoermander_rank,
    load_field_system,
    random_rational_points,
    read_structured,
)

EXIT_INVALID_SYSTEM = 2
EXIT_SUITE_FAILED = 1


# -- helpers -------------------------------------------------------------------------

def resolve_system(arg: str) -> FieldSystem:
    """A field system from a file path or an example name."""
    path = Path(arg)
    if path.exists():
        return load_field_system(path)
    if arg in EXAMPLES:
        return example(arg)
    raise FileNotFoundError(f"{arg!r} is neither a file nor one of {sorted(EXAMPLES)}")


def parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def read_matrix(arg: str, m: int) -> np.ndarray:
    """Matrix from a JSON file ({"A": [[...]]} or [[...]]) or inline rows ``1,0;0,1``."""
    path = Path(arg)
    if path.exists():
        data = read_structured(path)
        rows = data["A"] if isinstance(data, dict) else data
    elif arg.lower() in ("i", "identity"):
        rows = np.eye(m)
    else:
        rows = [parse_floats(r) for r in arg.split(";")]
    A = np.asarray(rows, dtype=float)
    if A.shape != (m, m):
        raise ValueError(f"matrix must be {m}x{m}, got {A.shape}")
    return A


def dump(obj, out: Optional[str]) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def threads() -> int:
    env = os.environ.get("HYPOHEAT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


# -- single commands ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    system = resolve_system(args.system)
    alg = generate_algebra(system)
    report = alg.to_json()
    report["jacobi_defect"] = alg.jacobi_defect()
    report["grading_ok"] = alg.grading_ok()
    dump(report, args.out)
    return 0


def cmd_lift(args) -> int:
    from .lift import build_lift

    lift = build_lift(resolve_system(args.system))
    dump(lift.to_json(), args.out)
    return 0


def _metric(system, args):
    from .metric import MetricOracle

    return MetricOracle(system, segments=args.segments, restarts=args.restarts,
                        norm=args.norm, seed=args.seed)


def cmd_distance(args) -> int:
    import csv

    system = resolve_system(args.system)
    oracle = _metric(system, args)
    if args.pairs:
        data = np.loadtxt(args.pairs, delimiter=",", ndmin=2)
        xs, ys = data[:, : system.n], data[:, system.n: 2 * system.n]
    else:
        xs = np.array([parse_floats(args.x)])
        ys = np.array([parse_floats(args.y)])
    res = oracle.distances(xs, ys)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["x", "y", "d_hat", "converged"])
        for x, y, d, c in zip(xs, ys, res.d, res.converged):
            w.writerow([" ".join(map(repr, map(float, x))), " ".join(map(repr, map(float, y))),
                        repr(float(d)), bool(c)])
    finally:
        if args.out:
            fh.close()
    return 0


def cmd_ball(args) -> int:
    from .metric import volume_table

    system = resolve_system(args.system)
    oracle = _metric(system, args)
    table = volume_table(oracle, parse_floats(args.x), parse_floats(args.radii),
                         samples=args.samples, seed=args.seed)
    if args.out:
        table.to_csv(args.out)
    else:
        sys.stdout.write("r,volume,stderr,samples,seed\n")
        for e in table.rows:
            sys.stdout.write(f"{float(e.r)!r},{float(e.volume)!r},{float(e.stderr)!r},{e.samples},{e.seed}\n")
    return 0


def _kernel_config(args, levels=None):
    from .kernel import GridConfig

    kw = {}
    if levels is not None:
        kw["levels"] = tuple(levels)
    if getattr(args, "active_nodes", None):
        kw["active_nodes"] = args.active_nodes
    if getattr(args, "passive_nodes", None):
        kw["passive_nodes"] = tuple(int(v) for v in parse_floats(args.passive_nodes))
    return GridConfig(**kw)


def cmd_kernel(args) -> int:
    from .kernel import EllipticMatrix, solve_lifted_kernel, write_hypk
    from .lift import build_lift

    system = resolve_system(args.system)
    lift = build_lift(system)
    A = EllipticMatrix(read_matrix(args.A, system.m), args.Lambda)
    t = float(args.t)
    lk = solve_lifted_kernel(lift, A, _kernel_config(args, levels=(t,)), seed=args.seed)
    k = list(lk.levels).index(t)
    if args.out:
        write_hypk(args.out, lk.values[k], lk.spacing, [tuple(e) for e in lk.extent])
    dump({"t": t, "A": A.entries.tolist(), "dims": list(lk.values[k].shape),
          "spacing": lk.spacing.tolist(), "extent": lk.extent.tolist(), "mass": lk.mass(k),
          "edge_mass": lk.edge_mass(k), "method": lk.method, "file": args.out}, None)
    return 0


def cmd_kernel_var(args) -> int:
    from .parametrix import CoefficientField, LeviConfig, LeviEngine

    system = resolve_system(args.system)
    text = Path(args.coeffs).read_text() if Path(args.coeffs).exists() else args.coeffs.replace(";", "\n")
    coeff = CoefficientField.parse(text, system.m, system.n)
    engine = LeviEngine(system, coeff, T=args.T, cfg=LeviConfig(order=args.order), seed=args.seed)
    pole = parse_floats(args.pole)
    s, y = pole[0], pole[1:]
    vk = engine.kernel(s, y, order=args.order, strict=False)
    t = s + 0.5 * args.T
    rep = {"pole": [s] + list(vk.y), "order": args.order, "T": args.T,
           "coefficients": coeff.to_json(), "norms": vk.norms, "contraction": vk.contraction,
           "truncation_indicator": vk.truncation_indicator,
           "grid_mass": engine.grid.integrate(vk.grid_values(t)), "mass_time": t,
           "value_at_pole_point": float(vk(t, np.asarray(vk.y)[None])[0])}
    dump(rep, args.out)
    return 0


def cmd_verify_bounds(args) -> int:
    from .kernel import EllipticMatrix, ProjectedKernel, kernel_probes, solve_lifted_kernel, verify_gaussian_bounds
    from .lift import build_lift
    from .metric import GaussianE, MetricOracle, VolumeFunction

    system = resolve_system(args.system)
    lift = build_lift(system)
    oracle = MetricOracle(system, seed=args.seed)
    A = EllipticMatrix(read_matrix(args.A, system.m), args.Lambda)
    pk = ProjectedKernel(solve_lifted_kernel(lift, A, _kernel_config(args), seed=args.seed))
    E = GaussianE(oracle, VolumeFunction(oracle, seed=args.seed))
    tau, x, y = kernel_probes(oracle, parse_floats(args.times), args.probes, seed=args.seed)
    try:
        fit = verify_gaussian_bounds([pk], E, tau, x, y)
    except FitFailure as exc:
        dump({"family": "gaussian-bounds", "error": str(exc)}, args.out)
        return EXIT_SUITE_FAILED
    dump(fit.to_json(), args.out)
    return 0


def cmd_reproduction(args) -> int:
    from .kernel import EllipticMatrix, ProjectedKernel, kernel_probes, solve_lifted_kernel, verify_reproduction
    from .lift import build_lift
    from .metric import MetricOracle

    system = resolve_system(args.system)
    lift = build_lift(system)
    oracle = MetricOracle(system, seed=args.seed)
    A = EllipticMatrix(read_matrix(args.A, system.m), args.Lambda)
    pk = ProjectedKernel(solve_lifted_kernel(lift, A, _kernel_config(args), seed=args.seed))
    _, x, y = kernel_probes(oracle, [args.t - args.s], args.pairs, seed=args.seed, max_ratio=2.0)
    dev = verify_reproduction(pk, args.t, args.tau, args.s, x, y)
    dump({"t": args.t, "tau": args.tau, "s": args.s, "pairs": len(x), "max_deviation": float(np.max(dev))},
         args.out)
    return 0


def cmd_harnack(args) -> int:
    from .harnack import HarnackBox, harnack_study
    from .metric import MetricOracle

    system = resolve_system(args.system)
    oracle = MetricOracle(system, seed=args.seed)
    h1, h2, gamma = parse_floats(args.box)
    x0 = parse_floats(args.x0) if args.x0 else [0.0] * system.n
    box = HarnackBox(args.r0, h1, h2, gamma, 0.0, x0, args.r0)
    radii = [args.r0 / 2 ** k for k in range(args.radii)]
    rep = harnack_study(system, oracle, box, radii, poles=args.poles, samples=args.samples, seed=args.seed)
    dump(rep, args.out)
    return 0


# -- verify-all ---------------------------------------------------------------------

@dataclass
class LabConfig:
    """Configuration of ``verify-all`` (all keys optional in the config file)."""

    seed: int = 0
    systems: List[str] = field(default_factory=lambda: ["grushin", "chain3", "power3", "power4"])
    metric_system: str = "grushin"
    kernel_system: str = "grushin"
    output: str = "hypoheat-report"
    lift_samples: int = 200
    rank_points: int = 100
    metric_samples: int = 20000
    kernel_active_nodes: int = 97
    kernel_passive_nodes: List[int] = field(default_factory=lambda: [128, 32])
    kernel_width: float = 6.0
    kernel_probes: int = 4
    coefficients: str = "a11 = 1 + 0.2*sin(x2)\na22 = 1\na12 = 0"
    levi_active_nodes: int = 65
    levi_passive_nodes: int = 96
    levi_time_nodes: int = 8
    harnack_poles: int = 3
    harnack_samples: int = 200
    stationary_resolution: int = 65
    suites: List[str] = field(default_factory=lambda: list(SUITES))
    required: List[str] = field(default_factory=lambda: list(SUITES))

    @classmethod
    def load(cls, path: Optional[str], **overrides) -> "LabConfig":
        data = read_structured(path) if path else {}
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _row(suite, family, anchor, system, status, value=None, threshold=None, note=None) -> dict:
    row = {"suite": suite, "family": family, "anchor": anchor, "system": system, "status": status}
    if value is not None:
        row["value"] = value
    if threshold is not None:
        row["threshold"] = threshold
    if note:
        row["note"] = note
    return row


def _check(suite, family, anchor, system, value, ok: bool, threshold=None) -> dict:
    return _row(suite, family, anchor, system, "PASS" if ok else "FAIL", value, threshold)


def suite_symbolic(cfg: LabConfig) -> List[dict]:
    rows = []
    for name in cfg.systems:
        system = resolve_system(name)
        alg = generate_algebra(system)
        rows.append(_check("symbolic", "jacobi", "Jacobi identity of the bracket", name,
                           alg.jacobi_defect(), alg.jacobi_defect() == 0))
        rows.append(_check("symbolic", "grading", "stratification of Lie(X1..Xm)", name,
                           alg.grading_ok(), alg.grading_ok()))
        hom = all(f.is_homogeneous(system.sigma, 1) for f in system.fields)
        rows.append(_check("symbolic", "homogeneity", "(H.1) X_i are delta_lambda-homogeneous of degree 1",
                           name, hom, hom))
        pts = [[0] * system.n] + random_rational_points(system.n, cfg.rank_points, seed=cfg.seed)
        worst = min(hoermander_rank(system, p, alg) for p in pts)
        rows.append(_check("symbolic", "hoermander-rank", "(H.2) Hörmander rank condition at 0",
                           name, worst, worst == system.n, system.n))
    return rows


def suite_lifting(cfg: LabConfig) -> List[dict]:
    from .lift import build_lift, flow_commutation_error

    rows = []
    for name in cfg.systems:
        lift = build_lift(resolve_system(name))
        rng = rng_for(cfg.seed, "lift-samples", name)
        pts = [[int(v) for v in rng.integers(-5, 6, lift.N)] for _ in range(cfg.lift_samples)]
        triples = [(pts[i], pts[(i + 1) % len(pts)], pts[(i + 2) % len(pts)]) for i in range(len(pts))]
        a = "lifting theorem: homogeneous Carnot group on R^N"
        if pts:
            bad = lift.check_identity_inverse(pts)
            rows.append(_check("lifting", "identity-inverse", a, name, bad, bad == 0, 0))
            bad = lift.check_associativity(triples)
            rows.append(_check("lifting", "associativity", a, name, bad, bad == 0, 0))
        else:
            rows.append(_row("lifting", "identity-inverse", a, name, "SKIPPED", note="empty sample set"))
            rows.append(_row("lifting", "associativity", a, name, "SKIPPED", note="empty sample set"))
        rows.append(_check("lifting", "automorphism", "D_lambda are group automorphisms", name,
                           lift.check_dilation_automorphism(), lift.check_dilation_automorphism()))
        rows.append(_check("lifting", "projection", "lifted fields X^_i = X_i + R_i", name,
                           lift.check_projection(), lift.check_projection()))
        err = flow_commutation_error(lift, seed=cfg.seed)
        rows.append(_check("lifting", "flow-commutation", "pi(exp(t X^_i) z) = exp(t X_i)(pi z)", name,
                           err, err < 1e-8, 1e-8))
        rows.append(_check("lifting", "Q>q", "homogeneous dimension Q = q + sum s_i", name,
                           [lift.Q, lift.q], lift.Q >= lift.q and lift.Q == lift.q + sum(lift.s)))
    return rows


def suite_metric(cfg: LabConfig) -> List[dict]:
    from .metric import (
        Gauge,
        MetricOracle,
        exp_tail_integral,
        verify_doubling,
        verify_volume_lower_bound,
        volume_scaling_check,
    )

    name = cfg.metric_system
    system = resolve_system(name)
    oracle = MetricOracle(system, seed=cfg.seed)
    rows = []
    rng = rng_for(cfg.seed, "metric-homogeneity")
    x = rng.normal(size=(20, system.n))
    y = rng.normal(size=(20, system.n))
    d = oracle.distances(x, y).d
    worst = 0.0
    for lam in (0.5, 2.0, 4.0):
        dl = oracle.distances(system.dilation.apply(lam, x), system.dilation.apply(lam, y)).d
        worst = max(worst, float(np.max(np.abs(dl / (lam * d) - 1))))
    rows.append(_check("metric", "homogeneity", "d(delta_lambda x, delta_lambda y) = lambda d(x, y)",
                       name, worst, worst < 0.01, 0.01))
    if cfg.metric_samples <= 0:
        rows.append(_row("metric", "volume-scaling", "|B(0, lambda r)| = lambda^q |B(0, r)|", name,
                         "SKIPPED", note="no samples"))
        return rows
    gauge = Gauge(oracle)
    sc = volume_scaling_check(oracle, 1.0, 2.0, samples=cfg.metric_samples, seed=cfg.seed, gauge=gauge)
    rows.append(_check("metric", "volume-scaling", "|B(0, lambda r)| = lambda^q |B(0, r)|", name,
                       {"ratio": sc["ratio"], "z": sc["z"]}, sc["z"] <= 3.0, 3.0))
    probes = [(np.zeros(system.n), 1.0, 0.5), (np.ones(system.n) * 0.5, 2.0, 1.0)]
    try:
        fit = verify_doubling(oracle, probes, samples=4000, seed=cfg.seed)
        rows.append(_check("metric", "doubling", "doubling: |B(x, 2r)| <= c |B(x, r)|", name,
                           fit.to_json()["constant"], fit.ok))
    except FitFailure as exc:
        rows.append(_row("metric", "doubling", "doubling: |B(x, 2r)| <= c |B(x, r)|", name, "FAIL", note=str(exc)))
    try:
        fit = verify_volume_lower_bound(oracle, [(p[0], p[1]) for p in probes], samples=4000, seed=cfg.seed)
        rows.append(_check("metric", "volume-lower", "|B(x, r)| >= omega r^q", name,
                           fit.to_json()["constant"], fit.ok))
    except FitFailure as exc:
        rows.append(_row("metric", "volume-lower", "|B(x, r)| >= omega r^q", name, "FAIL", note=str(exc)))
    tail = exp_tail_integral(oracle, np.zeros(system.n), samples=4000, seed=cfg.seed, gauge=gauge)
    ok = bool(np.isfinite(tail["value"]) and tail["tail_bound"] < 1e-6)
    rows.append(_check("metric", "exp-tail", "int exp(-d(x,y)^2) dy < infinity", name,
                       {"value": tail["value"], "tail": tail["tail_bound"]}, ok, 1e-6))
    return rows


def suite_kernel(cfg: LabConfig) -> List[dict]:
    from .kernel import (
        EllipticMatrix,
        GridConfig,
        KernelError,
        ProjectedKernel,
        kernel_probes,
        mass,
        pde_residual,
        residual_admissible,
        solve_lifted_kernel,
        verify_scaling_law,
    )
    from .lift import build_lift
    from .metric import MetricOracle

    name = cfg.kernel_system
    system = resolve_system(name)
    lift = build_lift(system)
    oracle = MetricOracle(system, seed=cfg.seed)
    A = EllipticMatrix(np.eye(system.m), 4.0)
    gcfg = GridConfig(width=cfg.kernel_width, active_nodes=cfg.kernel_active_nodes,
                      passive_nodes=tuple(cfg.kernel_passive_nodes))
    families = ["mass", "symmetry", "scaling", "residual"]
    anchors = {"mass": "int Gamma_A(t,x;s,y) dy = 1",
               "symmetry": "Gamma_A(t,x;s,y) = Gamma_A(t,y;s,x)",
               "scaling": "Gamma_A(lambda^2 t, delta_lambda x; 0, delta_lambda y) = lambda^-q Gamma_A(t,x;0,y)",
               "residual": "H_A Gamma_A(.; s, y) = 0 away from the pole"}
    if cfg.kernel_probes <= 0:
        return [_row("kernel-const", f, anchors[f], name, "SKIPPED", note="empty probe set") for f in families]
    try:
        lk = solve_lifted_kernel(lift, A, gcfg, seed=cfg.seed)
    except KernelError as exc:
        return [_row("kernel-const", "mass", anchors["mass"], name, "FAIL", note=f"{type(exc).__name__}: {exc}")]
    pk = ProjectedKernel(lk)
    rows = []
    lifted = [lk.mass(k) for k in range(len(lk.levels))]
    x0 = np.zeros((1, system.n))
    try:
        proj = float(mass(pk, 0.5, 0.0, x0[0])[0]) if lift.p else lifted[-1]
    except KernelError as exc:
        proj = float("nan")
        rows.append(_row("kernel-const", "mass", anchors["mass"], name, "FAIL", note=str(exc)))
    worst = max(abs(v - 1) for v in lifted + [proj])
    rows.append(_check("kernel-const", "mass", anchors["mass"], name,
                       {"lifted": lifted, "projected": proj}, bool(worst <= 0.02), 0.02))
    tau, x, y = kernel_probes(oracle, (0.25, 0.5, 1.0), cfg.kernel_probes, seed=cfg.seed)
    sym = float(np.max(np.abs(pk(tau, x, 0, y) / pk(tau, y, 0, x) - 1)))
    rows.append(_check("kernel-const", "symmetry", anchors["symmetry"], name, sym, sym < 0.03, 0.03))
    k = min(5, len(tau))
    sel = tau <= 0.25
    scal = float(np.max(verify_scaling_law(pk, system.q, 2.0, tau[sel][:k], x[sel][:k], y[sel][:k])))
    rows.append(_check("kernel-const", "scaling", anchors["scaling"], name, scal, scal < 0.05, 0.05))
    d = oracle.light().distances(x, y).d
    ok = residual_admissible(pk, tau, d)
    res = float(np.max(pde_residual(pk, A, tau[ok], x[ok], y[ok]))) if ok.any() else float("nan")
    rows.append(_check("kernel-const", "residual", anchors["residual"], name, res, res < 0.05, 0.05))
    return rows


def suite_parametrix(cfg: LabConfig) -> List[dict]:
    from .kernel import GridConfig
    from .parametrix import CoefficientField, LeviConfig, LeviEngine

    name = cfg.kernel_system
    system = resolve_system(name)
    coeff = CoefficientField.parse(cfg.coefficients, system.m, system.n)
    lcfg = LeviConfig(time_nodes=cfg.levi_time_nodes, active_nodes=cfg.levi_active_nodes,
                      passive_nodes=(cfg.levi_passive_nodes,),
                      kernel=GridConfig(active_nodes=cfg.kernel_active_nodes,
                                        passive_nodes=tuple(cfg.kernel_passive_nodes)))
    engine = LeviEngine(system, coeff, T=1.0, cfg=lcfg, seed=cfg.seed)
    y = np.zeros(system.n)
    y[-1] = 0.5
    vk = engine.kernel(0.0, y, strict=False)
    rho = max(vk.contraction, default=0.0)
    rows = [_check("parametrix", "contraction", "Volterra series for Phi converges", name,
                   rho, rho < 1, 1)]
    gv = vk.grid_values(0.5)
    m = engine.grid.integrate(gv)
    rows.append(_check("parametrix", "mass", "int Gamma(t,x;s,y) dx = 1 (Cauchy problem with u = 1)",
                       name, m, abs(m - 1) <= 0.05, 0.05))
    probe = np.array([[0.0, 0.5], [0.5, 0.8], [-0.7, 0.0], [1.0, 1.5]])[:, : system.n]
    g = vk(0.5, probe)
    rows.append(_check("parametrix", "positivity", "Gamma > 0 for t > s", name,
                       float(g.min()), bool(np.all(g > 0))))
    sol = engine.cauchy(g=lambda X: np.ones(X.shape[:-1]), strict=False)
    dev = float(np.max(np.abs(sol(1.0, probe) - 1)))
    rows.append(_check("parametrix", "cauchy-constant", "u = int Gamma g dy solves Hu = 0, u(s) = g",
                       name, dev, dev <= 0.02, 0.02))
    return rows


def suite_harnack(cfg: LabConfig) -> List[dict]:
    from .harnack import (
        HarnackBox,
        euclidean_harnack_oracle,
        merge_reports,
        parabolic_harnack_check,
        pole_family,
        stationary_harnack_check,
    )
    from .metric import MetricOracle

    rows = []
    E = example("euclidean")
    oe = MetricOracle(E, seed=cfg.seed)
    box = HarnackBox(1.0, 0.3, 0.6, 0.5, 0.0, [0.0, 0.0], 1.0)
    s, y = -1.0, np.array([1.5, 0.0])
    u = lambda t, X: np.exp(-np.sum((X - y) ** 2, -1) / (4 * (t - s))) / (4 * np.pi * (t - s))  # noqa: E731
    ratio = parabolic_harnack_check(u, box, oe, cfg.harnack_samples, seed=cfg.seed).M_hat
    exact = euclidean_harnack_oracle(box, s, y)
    rows.append(_check("harnack", "euclidean-oracle", "parabolic Harnack: sup u <= M u(t0, x0)", "euclidean",
                       {"ratio": ratio, "oracle": exact}, abs(ratio / exact - 1) < 0.02, 0.02))
    st = stationary_harnack_check(E, oe, [0.0, 0.0], 1.0,
                                  lambda X: 1 + 0.5 * np.cos(np.arctan2(X[..., 1], X[..., 0])),
                                  resolution=2 * cfg.stationary_resolution - 1)
    poisson = (1 + 0.5 / 3) / (1 - 0.5 / 3)
    rows.append(_check("harnack", "poisson-control", "stationary Harnack: sup u <= c inf u", "euclidean",
                       {"ratio": st["ratio"], "oracle": poisson}, abs(st["ratio"] / poisson - 1) < 0.03, 0.03))
    name = cfg.kernel_system
    system = resolve_system(name)
    og = MetricOracle(system, seed=cfg.seed)
    if cfg.harnack_poles <= 0:
        rows.append(_row("harnack", "grushin-M", "parabolic Harnack: sup u <= M u(t0, x0)", name, "SKIPPED",
                         note="no poles"))
    else:
        gbox = HarnackBox(1.0, 0.3, 0.6, 0.5, 0.0, np.zeros(system.n), 1.0)
        fam = pole_family(system, og, gbox.x0, 1.0, cfg.harnack_poles, cfg.seed)
        rep = merge_reports([parabolic_harnack_check(v, gbox, og, cfg.harnack_samples, seed=cfg.seed)
                             for v in fam])
        rows.append(_check("harnack", "grushin-M", "parabolic Harnack: sup u <= M u(t0, x0)", name,
                           {"M_hat": rep.M_hat, "ratios": rep.ratios}, bool(np.isfinite(rep.M_hat))))
    st = stationary_harnack_check(system, og, np.zeros(system.n), 0.5,
                                  lambda X: 1 + 0.5 * np.cos(X[..., 0] + 2 * X[..., -1]),
                                  resolution=cfg.stationary_resolution)
    rows.append(_check("harnack", "stationary", "stationary Harnack: sup u <= c inf u", name,
                       st["ratio"], bool(np.isfinite(st["ratio"]))))
    return rows


SUITES: Dict[str, Callable[[LabConfig], List[dict]]] = {
    "symbolic": suite_symbolic,
    "lifting": suite_lifting,
    "metric": suite_metric,
    "kernel-const": suite_kernel,
    "parametrix": suite_parametrix,
    "harnack": suite_harnack,
}


def _run_suite(name: str, cfg: LabConfig) -> List[dict]:
    try:
        return SUITES[name](cfg)
    except Exception as exc:  # a crashing suite is a failed suite, not a crashed run
        return [_row(name, "suite", "suite execution", "-", "FAIL", note=f"{type(exc).__name__}: {exc}")]


def verify_all(cfg: LabConfig, out_dir: Optional[Path] = None, log=sys.stderr) -> dict:
    """Run the configured suites and return the consolidated report."""
    names = [s for s in SUITES if s in cfg.suites]
    results: Dict[str, List[dict]] = {}
    out_dir = Path(out_dir or cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "rows.jsonl"
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        futures = {name: pool.submit(_run_suite, name, cfg) for name in names}
        for name in names:
            start = time.perf_counter()
            results[name] = futures[name].result()
            print(f"[verify-all] {name}: {len(results[name])} rows (+{time.perf_counter() - start:.1f}s)",
                  file=log)
    rows = []
    for name in names:
        for row in results[name]:
            row["required"] = name in cfg.required
            rows.append(_clean(row))
    with open(jsonl, "a") as fh:
        fh.write(json.dumps({"run": {"seed": cfg.seed, "suites": names}}, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    matrix: Dict[str, Dict[str, str]] = {}
    for row in rows:
        key = f"{row['suite']}/{row['family']}"
        matrix.setdefault(key, {})[row["system"]] = row["status"]
    counts = {s: sum(r["status"] == s for r in rows) for s in ("PASS", "FAIL", "SKIPPED")}
    required_failed = sum(r["status"] == "FAIL" and r["required"] for r in rows)
    report = {
        "header": {"package": "hypoheat", "version": __version__, "seed": cfg.seed,
                   "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
                   "platform_note": "values are reproducible bit-for-bit on the same platform and library versions"},
        # the output location is not part of the result: reports of identical
        # runs written to different directories compare byte-for-byte
        "config": {k: v for k, v in cfg.to_json().items() if k != "output"},
        "rows": rows,
        "matrix": matrix,
        "summary": {**counts, "required_failed": required_failed},
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(format_table(rows))
    return report


def format_table(rows: Sequence[dict]) -> str:
    systems = sorted({r["system"] for r in rows})
    fams = []
    for r in rows:
        key = f"{r['suite']}/{r['family']}"
        if key not in fams:
            fams.append(key)
    width = max([len(f) for f in fams] + [10])
    lines = [" " * width + " | " + " | ".join(f"{s:>9}" for s in systems)]
    lines.append("-" * len(lines[0]))
    for f in fams:
        cells = []
        for s in systems:
            st = [r["status"] for r in rows if f"{r['suite']}/{r['family']}" == f and r["system"] == s]
            cells.append(f"{(st[0] if st else ''):>9}")
        lines.append(f"{f:<{width}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_verify_all(args) -> int:
    cfg = LabConfig.load(args.config, seed=args.seed_override, output=args.out)
    report = verify_all(cfg, Path(cfg.output))
    sys.stdout.write(format_table(report["rows"]))
    summ = report["summary"]
    if summ["SKIPPED"]:
        print(f"warning: {summ['SKIPPED']} suite rows SKIPPED (empty probe sets)", file=sys.stderr)
    return EXIT_SUITE_FAILED if summ["required_failed"] else 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypoheat", description=__doc__.split("\n")[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, system=True):
        sp = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        if system:
            sp.add_argument("--system", required=True, help="field-system file or example name")
        sp.add_argument("--seed", type=int, default=0, help="root seed")
        sp.add_argument("--out", default=None, help="output file (stdout if omitted)")
        sp.set_defaults(func=func)
        return sp

    add("analyze", cmd_analyze, "stratified algebra report")
    add("lift", cmd_lift, "Carnot lift as JSON")
    for name, func, text in (("distance", cmd_distance, "CC-distance estimates"),
                             ("ball", cmd_ball, "ball-volume table")):
        sp = add(name, func, text)
        sp.add_argument("--segments", type=int, default=16, help="piecewise-constant control segments")
        sp.add_argument("--restarts", type=int, default=8, help="Newton restarts")
        sp.add_argument("--norm", choices=("l2", "l1"), default="l2", help="control norm")
        if name == "distance":
            sp.add_argument("--x", default="0,0", help="start point")
            sp.add_argument("--y", default="1,0", help="end point")
            sp.add_argument("--pairs", default=None, help="CSV file of rows x_1..x_n,y_1..y_n")
        else:
            sp.add_argument("--x", default="0,0", help="centre")
            sp.add_argument("--radii", default="0.5,1,2", help="comma-separated radii")
            sp.add_argument("--samples", type=int, default=4000, help="Monte Carlo samples per radius")

    def kernel_flags(sp):
        sp.add_argument("--A", default="identity", help="matrix file (JSON/YAML/TOML) or rows '1,0;0,1'")
        sp.add_argument("--Lambda", type=float, default=4.0, help="ellipticity bound")
        sp.add_argument("--active-nodes", type=int, default=None, help="odd node count of the active axis")
        sp.add_argument("--passive-nodes", default=None, help="comma-separated passive node counts")

    sp = add("kernel", cmd_kernel, "lifted kernel grid (HYPK)")
    kernel_flags(sp)
    sp.add_argument("--t", type=float, default=1.0, help="time of the stored grid")
    sp = add("kernel-var", cmd_kernel_var, "variable-coefficient kernel")
    sp.add_argument("--coeffs", required=True, help="coefficient file ('a11 = ...' lines) or inline text with ';'")
    sp.add_argument("--order", type=int, default=3, help="Volterra series order J")
    sp.add_argument("--T", type=float, default=1.0, help="time horizon")
    sp.add_argument("--pole", default="0,0,0.5", help="pole s,y_1..y_n")
    sp = add("verify-bounds", cmd_verify_bounds, "two-sided Gaussian bound fit")
    kernel_flags(sp)
    sp.add_argument("--probes", type=int, default=20, help="probes per time")
    sp.add_argument("--times", default="0.25,0.5,1", help="comma-separated t - s values")
    sp = add("reproduction", cmd_reproduction, "reproduction (Chapman-Kolmogorov) deviation")
    kernel_flags(sp)
    sp.add_argument("--t", type=float, default=1.0)
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--s", type=float, default=0.0)
    sp.add_argument("--pairs", type=int, default=10)
    sp = add("harnack", cmd_harnack, "parabolic Harnack constants")
    sp.add_argument("--box", default="0.3,0.6,0.5", help="h1,h2,gamma")
    sp.add_argument("--r0", type=float, default=1.0, help="largest radius")
    sp.add_argument("--radii", type=int, default=3, help="number of radii r0, r0/2, ...")
    sp.add_argument("--poles", type=int, default=10, help="number of poles")
    sp.add_argument("--samples", type=int, default=400, help="Monte Carlo samples per refinement round")
    sp.add_argument("--x0", default=None, help="centre of the cylinder (default 0)")
    sp = sub.add_parser("verify-all", help="run every suite", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sp.add_argument("--config", default=None, help="LabConfig file (JSON/YAML/TOML)")
    sp.add_argument("--seed", dest="seed_override", type=int, default=None, help="override the config seed")
    sp.add_argument("--out", default=None, help="output directory (default from config)")
    sp.set_defaults(func=cmd_verify_all)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except FieldSystemError as exc:
        msg = str(exc)
        if not msg.startswith(type(exc).__name__):
            msg = f"{type(exc).__name__}: {msg}"
        print(msg, file=sys.stderr)
        return EXIT_INVALID_SYSTEM
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_SYSTEM if isinstance(exc, FileNotFoundError) else 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
