from __future__ import annotations

import asyncio
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

import dissipator.config as config
from dissipator import __version__
from dissipator.config import EVENT_LOG_NAME, OUT_DIR
from dissipator.schema import ExperimentSpec, FlowSpec, InitialSpec, LadderSpec, OperatorSpec
from services import metrics
from services.diagnostics import (
    band_selector,
    dissipation_time,
    eigenreport,
    h1_growth_average,
    nash_exponent_fit,
    nash_run,
    nearest_eigenvector,
    obstruction_certificate,
    rage_average,
    rough_selector,
    spectral_delta,
)
from services.engine import (
    EvolutionConfig,
    check_conditional_decay,
    check_dissipation_budget,
    check_monotone_decay,
    energy_identity_residual,
    estimate_bound_constant,
    evolve,
    free_vs_damped_gap,
)
from services.errors import (
    InvariantViolation,
    ParameterError,
    PreconditionError,
)
from services.export import (
    RAGE_COLUMNS,
    export_decay_curve,
    export_nash,
    export_quench,
    export_report,
    export_spectrum,
    export_trajectory,
    optional_float,
    run_id_for,
    write_csv,
    write_json,
    write_npy,
)
from services.flows import (
    RelabeledFlow,
    TimeChangedFlowSpec,
    liouville_alpha,
    relabel_to_lebesgue,
    solve_homology,
    stream_function_flow,
)
from services.operators import (
    JacobiOperator,
    OperatorHandle,
    ProjectedSystem,
    VelocityField,
    build_advection_generator,
    build_constant_flow_generator,
    build_free_jacobi,
    build_random_jacobi,
    build_wvn_schrodinger,
    project_out_band_exterior,
    prufer_trace,
    wvn_zero_mode,
)
from services.quench import (
    IgnitionNonlinearity,
    ReactionSystem,
    bump_temperature,
    compare_with_linear,
    critical_amplitude_search,
    l1_balance_residual,
    quench_detector,
    run_reaction,
)
from services.spectral import GammaLadder, SpectralState, basis_vector
from services.storage import RunRecord, RunStore
from services.torus import TorusLattice

logger = logging.getLogger(__name__)

ENERGY_RESIDUAL_TOL = 1e-6
ZERO_MODE_TOL = 1e-13


# ---------------------------------------------------------------------------
# Сиды: один 64-битный seed, поток Philox на точку
# ---------------------------------------------------------------------------


def point_rng(seed: int, index: int = 0) -> np.random.Generator:
    """
    Поток точки index. SeedSequence(seed, spawn_key=(index,)) совпадает с
    SeedSequence(seed).spawn(n)[index] при любом n ≥ index + 1.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def fixed_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------
# Сборка задачи из конфига
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Problem:
    L: OperatorHandle
    ladder: GammaLadder
    lattice: Optional[TorusLattice] = None
    jacobi: Optional[JacobiOperator] = None
    projected: Optional[ProjectedSystem] = None
    velocity: Optional[VelocityField] = None


@dataclass(frozen=True, eq=False)
class BuiltFlow:
    velocity: Optional[VelocityField]
    meta: Dict[str, Any]
    relabeled: Optional[RelabeledFlow] = None
    time_changed: Optional[TimeChangedFlowSpec] = None


def build_flow(flow: FlowSpec) -> BuiltFlow:
    if flow.kind == "still":
        return BuiltFlow(None, {"flow": "still", "K": flow.K})
    if flow.kind in ("shear", "cellular"):
        u = stream_function_flow(flow.kind, flow.K, grid=flow.grid)
        return BuiltFlow(u, {"flow": flow.kind, "K": flow.K})

    if flow.alpha is None:
        alpha, exact = liouville_alpha(flow.liouville_terms)
        alpha_exact: Optional[str] = f"{exact.numerator}/{exact.denominator}"
    else:
        alpha, alpha_exact = flow.alpha, None
    tc = TimeChangedFlowSpec.default(alpha, flow.m_fraction)
    relabeled = relabel_to_lebesgue(tc, flow.density_grid, flow.K)
    meta = {
        "flow": "time-changed",
        "K": flow.K,
        "alpha": alpha,
        "alpha_exact": alpha_exact,
        "density": tc.to_dict(),
        "density_grid": flow.density_grid,
    }
    return BuiltFlow(relabeled.velocity, meta, relabeled, tc)


def build_problem(op: OperatorSpec, ladder_spec: LadderSpec, rng: np.random.Generator) -> Problem:
    if op.type == "constant-flow":
        L = build_constant_flow_generator(op.alpha, op.K)
        return Problem(L, GammaLadder.torus(L.lattice), lattice=L.lattice)
    if op.type == "advection":
        built = build_flow(op.flow)
        if built.velocity is None:
            L = build_constant_flow_generator((0.0, 0.0), op.K)
        else:
            L = build_advection_generator(built.velocity, op.K)
        lattice = TorusLattice(op.K)
        return Problem(L, GammaLadder.torus(lattice), lattice=lattice, velocity=built.velocity)

    if op.type == "free-jacobi":
        jacobi = build_free_jacobi(op.N)
    elif op.type in ("wvn", "wvn-projected"):
        jacobi = build_wvn_schrodinger(op.N)
    else:
        op_rng = fixed_rng(op.seed) if op.seed is not None else rng
        jacobi = build_random_jacobi(op.N, op_rng)

    ladder = GammaLadder.diagonal(op.N, ladder_spec.power)
    if op.type == "wvn-projected":
        proj = project_out_band_exterior(jacobi, ladder, op.band)
        return Problem(proj.operator, proj.ladder, jacobi=jacobi, projected=proj)
    return Problem(jacobi.handle(), ladder, jacobi=jacobi)


def build_initial(init: InitialSpec, problem: Problem, rng: np.random.Generator) -> SpectralState:
    """Начальное состояние единичной нормы."""
    L = problem.L
    if init.type == "basis":
        return basis_vector(L.dim, init.j, L.basis)
    if init.type == "mode":
        if problem.lattice is None:
            raise PreconditionError("initial.type 'mode' needs a torus operator")
        return basis_vector(L.dim, problem.lattice.index_of(init.k) + 1, L.basis)
    if init.type == "delta":
        if problem.lattice is None:
            raise PreconditionError("initial.type 'delta' needs a torus operator")
        return spectral_delta(problem.lattice, init.center).normalized()
    if init.type == "random":
        c = rng.standard_normal(L.dim) + 1j * rng.standard_normal(L.dim)
        return SpectralState(c, L.basis).normalized()
    if init.type == "zero-mode":
        if problem.jacobi is None or not problem.jacobi.label.startswith("wvn"):
            raise PreconditionError("initial.type 'zero-mode' needs a WvN operator")
        u = wvn_zero_mode(problem.jacobi.size).normalized()
        if problem.projected is None:
            return SpectralState(u.coeffs, L.basis)
        return nearest_eigenvector(L, problem.projected.embed(u))
    # nearest-eigenvector: собственный вектор L, ближайший к e_j
    return nearest_eigenvector(L, basis_vector(L.dim, init.j, L.basis))


# ---------------------------------------------------------------------------
# Итог одного прогона
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    summary: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    sentinels: List[str] = field(default_factory=list)

    def check(self, name: str, passed: bool, value: Optional[float], detail: str = "") -> None:
        self.checks[name] = {"passed": bool(passed), "value": optional_float(value), "detail": detail}

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())


def _evolution_config(spec: ExperimentSpec, L: OperatorHandle) -> EvolutionConfig:
    ev = spec.evolution
    return EvolutionConfig(
        t_end=ev.t_end,
        dt=ev.dt,
        amplitude=ev.amplitude if ev.epsilon is None else None,
        epsilon=ev.epsilon,
        method=ev.method,
        sample_stride=ev.sample_stride,
        growth_bound=ev.growth_bound,
        growth_rate=float(L.growth_rate or 0.0),
        adaptive=ev.adaptive,
    )


def _t_max(spec: ExperimentSpec) -> float:
    return spec.diagnostics.t_max if spec.diagnostics.t_max is not None else spec.evolution.t_end


# ---------------------------------------------------------------------------
# Обработчики видов прогонов
# ---------------------------------------------------------------------------


def _run_simulate(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    rng = point_rng(spec.seed, 0)
    problem = build_problem(spec.operator, spec.ladder, rng)
    phi0 = build_initial(spec.initial, problem, rng)
    cfg = _evolution_config(spec, problem.L)
    out = Outcome()

    traj = evolve(problem.L, problem.ladder, cfg, phi0)
    residual = energy_identity_residual(traj.ledger)
    per_unit = residual / cfg.t_end if cfg.t_end > 0 else 0.0

    out.summary.update({
        "operator": problem.L.label,
        "N": problem.L.dim,
        "method": cfg.method,
        "dt": traj.dt,
        "t_end": cfg.t_end,
        "amplitude": optional_float(cfg.A),
        "epsilon": optional_float(cfg.eps),
        "final_norm": float(traj.norm_l2[-1]),
        "final_h1_norm": float(traj.norm_h1[-1]),
        "energy_residual": residual,
        "energy_residual_per_time": per_unit,
    })

    for check in (check_monotone_decay(traj), check_dissipation_budget(traj.ledger)):
        out.check(check.name, check.passed, check.value, check.detail)
    out.check("energy_identity", per_unit <= ENERGY_RESIDUAL_TOL, per_unit, "residual per unit time")
    if spec.diagnostics.n_bar is not None:
        cd = check_conditional_decay(traj, spec.diagnostics.n_bar)
        out.check(cd.name, cd.passed, cd.value, cd.detail)

    if cfg.primary == "amplitude" and _t_max(spec) > 0:
        dtime = dissipation_time(
            problem.L, problem.ladder, cfg.A, spec.diagnostics.delta, phi0, _t_max(spec), cfg.dt, cfg.method
        )
        out.summary.update({"delta": dtime.delta, "tau_delta": dtime.tau, "reached": dtime.reached})
        if not dtime.reached:
            out.sentinels.append(f"tau_delta not reached by t_max={dtime.t_max}")

    if spec.diagnostics.gap_epsilon is not None:
        try:
            gap = free_vs_damped_gap(
                problem.L, problem.ladder, spec.diagnostics.gap_epsilon, spec.diagnostics.gap_tau, phi0,
                growth_bound=cfg.growth_bound, dt=cfg.dt, method=cfg.method,
            )
            out.summary["gap"] = {"measured": gap.measured, "bound": gap.bound, "exact_bound": gap.exact_bound}
            out.check("free_damped_gap", gap.within_bound, gap.measured, f"bound {gap.bound:.6e}")
        except InvariantViolation as e:
            out.check("free_damped_gap", False, e.value, str(e))

    if problem.L.has_dense and problem.L.dim <= config.ORACLE_MAX_DIM:
        out.summary["bound_constant"] = estimate_bound_constant(problem.L, problem.ladder)

    out.artifacts["trajectory"] = export_trajectory(run_dir / "trajectory.csv", traj).name
    out.artifacts["final_state"] = write_json(run_dir / "final_state.json", traj.final.to_json()).name
    return out


def run_point(raw: Dict[str, Any], index: int, amplitude: float) -> Dict[str, Any]:
    """
    Одна точка свипа в отдельном процессе: собирает задачу заново из сырого конфига.
    Оператор и φ₀ строятся из потока 0, общего для всех точек: кривая — по одной задаче.
    Ошибки не пробрасываются, а попадают в результат точки.
    """
    try:
        spec = ExperimentSpec.from_dict(raw)
        shared = point_rng(spec.seed, 0)
        problem = build_problem(spec.operator, spec.ladder, shared)
        phi0 = build_initial(spec.initial, problem, shared)
        ev = spec.evolution
        dtime = dissipation_time(
            problem.L, problem.ladder, amplitude, spec.diagnostics.delta, phi0, _t_max(spec), ev.dt, ev.method
        )
        return {
            "index": index,
            "amplitude": float(amplitude),
            "status": "ok",
            "tau": dtime.tau,
            "reached": dtime.reached,
            "error": None,
        }
    except Exception as e:  # точка падает, свип продолжается
        logger.exception("Sweep point %d (A=%g) failed", index, amplitude)
        return {
            "index": index,
            "amplitude": float(amplitude),
            "status": "failed",
            "tau": None,
            "reached": False,
            "error": f"{type(e).__name__}: {e}",
        }


async def _gather_points(raw: Dict[str, Any], amplitudes: Tuple[float, ...], workers: int) -> List[Dict[str, Any]]:
    if workers <= 1 or len(amplitudes) <= 1:
        return [run_point(raw, i, A) for i, A in enumerate(amplitudes)]

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=min(workers, len(amplitudes))) as pool:
        futures = [loop.run_in_executor(pool, run_point, raw, i, A) for i, A in enumerate(amplitudes)]
        results = await asyncio.gather(*futures, return_exceptions=True)

    points = []
    for i, (A, res) in enumerate(zip(amplitudes, results)):
        if isinstance(res, BaseException):
            logger.error("Worker for sweep point %d crashed: %s", i, res)
            res = {"index": i, "amplitude": float(A), "status": "failed", "tau": None,
                   "reached": False, "error": f"{type(res).__name__}: {res}"}
        points.append(res)
    return points


def _nonincreasing(taus: List[Optional[float]]) -> bool:
    vals = [t for t in taus if t is not None]
    return all(b <= a * (1.0 + 1e-12) for a, b in zip(vals, vals[1:]))


async def _run_sweep(spec: ExperimentSpec, run_dir: Path, workers: int, run_id: str) -> Outcome:
    amplitudes = spec.diagnostics.amplitudes
    points = await _gather_points(spec.raw, amplitudes, workers)
    points.sort(key=lambda p: p["index"])

    point_store = RunStore(run_dir / "points")
    point_records = []
    for p in points:
        metrics.log_sweep_point(
            run_id=run_id, index=p["index"], amplitude=p["amplitude"], status=p["status"],
            tau=p["tau"], reached=p["reached"], error=p["error"],
        )
        point_record = RunRecord(
            run_id=f"{run_id}-{p['index']:03d}",
            kind="sweep-point",
            name=spec.name,
            seed=spec.seed,
            spec={"parent": run_id, "index": p["index"], "amplitude": p["amplitude"], "spawn_key": [p["index"]]},
            code_version=__version__,
            summary=p,
            passed=p["status"] == "ok",
            sentinel=p["status"] == "ok" and not p["reached"],
        )
        point_store.save(point_record)
        point_records.append(point_record)

    rows = [(p["amplitude"], p["tau"], int(p["reached"])) for p in points]
    out = Outcome()
    out.artifacts["decay_curve"] = export_decay_curve(run_dir / "decay.csv", rows).name
    report = export_report(point_records, run_dir, stem="report")
    out.artifacts["report"] = report["csv"].name
    out.artifacts["report_bundle"] = report["json"].name
    failed = [p["index"] for p in points if p["status"] != "ok"]
    taus = [p["tau"] if p["reached"] else None for p in points]
    out.summary.update({
        "delta": spec.diagnostics.delta,
        "t_max": _t_max(spec),
        "method": spec.evolution.method,
        "amplitudes": list(amplitudes),
        "taus": taus,
        "reached": [bool(p["reached"]) for p in points],
        "rows": [list(r) for r in rows],
        "failed_points": failed,
        "monotone_nonincreasing": _nonincreasing(taus),
    })
    out.check("points_completed", not failed, float(len(failed)), f"{len(failed)} failed point(s)")
    unreached = [p["amplitude"] for p in points if p["status"] == "ok" and not p["reached"]]
    if unreached:
        out.sentinels.append(f"tau_delta not reached for A in {unreached}")
    return out


def _run_spectrum(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    rng = point_rng(spec.seed, 0)
    op = spec.operator
    problem = build_problem(op, spec.ladder, rng)
    L = problem.L
    band = op.band if not op.on_torus else None
    report = eigenreport(L, problem.ladder, band=band, kappa=spec.diagnostics.kappa)
    out = Outcome()
    out.artifacts["spectrum"] = export_spectrum(run_dir / "spectrum.csv", report.rows()).name

    dense = L.dense
    out.summary.update({
        "operator": L.label,
        "N": L.dim,
        "n_eigenpairs": len(report.records),
        "n_groups": len(report.groups),
        "n_band_interior": int(report.mask("band_interior").sum()),
        "n_rough": int(report.mask("rough").sum()),
        "n_first_integrals": int(report.mask("first_integral").sum()),
        "roughness_threshold": report.roughness_threshold,
        "band": list(band) if band is not None else None,
    })
    defect = float(np.max(np.abs(dense - dense.conj().T)))
    out.check("hermitian", defect <= 1e-12 * max(1.0, float(np.max(np.abs(dense)))), defect)

    if spec.initial.type == "zero-mode" and problem.jacobi is not None and problem.projected is None:
        u = wvn_zero_mode(problem.jacobi.size)
        image = problem.jacobi.apply(np.asarray(u.coeffs.real))
        zero_residual = float(np.max(np.abs(image[:-2])))
        trace = prufer_trace(problem.jacobi, 0.0, u)
        out.summary["zero_mode"] = {"residual": zero_residual, "prufer_decay_constant": trace.decay_constant}
        out.check("zero_mode", zero_residual <= ZERO_MODE_TOL, zero_residual, "max |(Lu)_n|, n <= N-2")

    if spec.diagnostics.certificate_amplitudes:
        phi0 = build_initial(spec.initial, problem, rng)
        cert = obstruction_certificate(
            L, problem.ladder, phi0, spec.diagnostics.certificate_amplitudes, method=spec.evolution.method
        )
        out.summary["certificate"] = {
            "tau_star": cert.tau_star,
            "eigenvalue": cert.eigenvalue,
            "eigen_residual": cert.residual,
            "h1_norm": cert.h1_norm,
            "amplitudes": list(cert.amplitudes),
            "final_norms": list(cert.final_norms),
            "min_norm": cert.min_norm,
            "min_overlap": cert.min_overlap,
            "passed": cert.passed,
        }
        out.check("obstruction_certificate", cert.passed, cert.min_overlap, "min |<phi(t), phi0>| on [0, tau*]")
    return out


def _run_rage(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    rng = point_rng(spec.seed, 0)
    problem = build_problem(spec.operator, spec.ladder, rng)
    phi0 = build_initial(spec.initial, problem, rng)
    diag = spec.diagnostics
    L = problem.L

    if diag.selector == "band":
        lo, hi = spec.operator.band
        selector = band_selector(L, lo, hi)
    elif diag.selector == "rough":
        selector = rough_selector(eigenreport(L, problem.ladder, kappa=diag.kappa))
    else:
        selector = None

    out = Outcome()
    averages = []
    worst = 0.0
    for T in diag.averaging_times:
        rage = rage_average(L, phi0, diag.n_low, T, selector)
        h1 = h1_growth_average(L, problem.ladder, phi0, diag.n_low, T)
        averages.append({
            "T": T,
            "rage": rage,
            "h1_average": h1.value,
            "h1_limit": h1.limit,
            "h1_remainder": h1.remainder,
            "apriori_bound": h1.apriori_bound,
        })
        worst = max(worst, abs(h1.remainder) - h1.apriori_bound)

    out.summary.update({
        "operator": L.label,
        "N": L.dim,
        "n_low": diag.n_low,
        "selector": diag.selector,
        "averages": averages,
    })
    rows = [(a["T"], a["rage"], a["h1_average"], a["h1_limit"], a["h1_remainder"]) for a in averages]
    out.artifacts["rage"] = write_csv(run_dir / "rage.csv", RAGE_COLUMNS, rows).name
    out.check("h1_remainder_bound", worst <= 0.0, worst, "|remainder| - lambda_N * N * |phi|^2")
    return out


def _run_nash(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    rng = point_rng(spec.seed, 0)
    problem = build_problem(spec.operator, spec.ladder, rng)
    lattice = problem.lattice
    if spec.initial.type == "delta":
        phi0 = spectral_delta(lattice, spec.initial.center)
    else:
        phi0 = build_initial(spec.initial, problem, rng)
    diag = spec.diagnostics
    ev = spec.evolution
    A = _evolution_config(spec, problem.L).A
    if math.isinf(A):
        raise ParameterError("nash runs need a finite amplitude (epsilon > 0)")
    times = np.geomspace(diag.nash_window[0], diag.nash_window[1], diag.nash_samples)

    run = nash_run(problem.L, problem.ladder, lattice, A, phi0, times, ev.dt, ev.method)
    fit = nash_exponent_fit(run, diag.nash_window)

    out = Outcome()
    out.artifacts["nash"] = export_nash(run_dir / "nash.csv", run).name
    out.summary.update({
        "operator": problem.L.label,
        "K": lattice.K,
        "grid": run.grid,
        "amplitude": float(A),
        "l1_initial": run.l1_initial,
        "fit": {
            "power": fit.power,
            "constant": fit.constant,
            "envelope_constant": fit.envelope_constant,
            "max_excess": fit.max_excess,
            "window": list(fit.window),
            "n_points": fit.n_points,
        },
    })
    return out


def _reaction_system(spec: ExperimentSpec) -> Tuple[ReactionSystem, Dict[str, Any]]:
    q = spec.quench
    if spec.flow is None:
        return ReactionSystem.build(None, q.K, q.grid, q.method), {"flow": "still"}
    built = build_flow(spec.flow)
    return ReactionSystem.build(built.velocity, q.K, q.grid, q.method), built.meta


def _run_quench(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    q = spec.quench
    system, flow_meta = _reaction_system(spec)
    f = IgnitionNonlinearity(q.theta0, q.scale)
    T0 = bump_temperature(system, q.bump_center, q.bump_width, q.bump_amplitude, q.background, q.bump_axis)

    run = run_reaction(system, T0, q.amplitude, f, q.t_end, q.dt)
    verdict = quench_detector(run, q.theta0)
    out = Outcome()
    out.artifacts["quench"] = export_quench(run_dir / "quench.csv", run).name
    verdict_doc = {
        "quenched": verdict.quenched,
        "t_quench": verdict.t_quench,
        "t_max": verdict.t_max,
        "final": verdict.final,
        "theta0": q.theta0,
        "amplitude": q.amplitude,
    }
    out.artifacts["verdict"] = write_json(run_dir / "verdict.json", verdict_doc).name

    out.summary.update({
        "system": system.label,
        "flow": flow_meta,
        "K": system.lattice.K,
        "grid": system.grid,
        "method": system.method,
        "amplitude": q.amplitude,
        "theta0": q.theta0,
        "initial_heat": T0.mean,
        "final_heat": run.final.mean,
        "final_sup": run.final.sup,
        "l1_balance_residual": l1_balance_residual(run),
        "verdict": verdict_doc,
    })
    lo, hi = float(run.min_T.min()), float(run.sup_T.max())
    out.check("range", lo >= 0.0 and hi <= 1.0, max(-lo, hi - 1.0, 0.0), f"min {lo:.6g}, max {hi:.6g}")
    if verdict.quenched:
        out.check("quench_final", verdict.final, None, "sup T nonincreasing after quench")
    else:
        out.sentinels.append(f"no quench by t={verdict.t_max}")

    if q.comparison:
        cmp = compare_with_linear(system, T0, q.amplitude, f, q.t_end, q.dt)
        out.summary["comparison"] = {"c": cmp.c, "max_violation": cmp.max_violation}
        out.check("comparison_bound", cmp.passed, cmp.max_violation, f"T <= exp({cmp.c:.4g} t) phi")

    if q.search:
        found = critical_amplitude_search(system, f, T0, q.t_end, q.dt, q.A_max)
        out.summary["critical"] = {
            "found": found.found,
            "amplitude": found.amplitude,
            "burning_below": found.burning_below,
            "probes": [list(p) for p in found.probes],
        }
        if not found.found:
            out.sentinels.append(f"no quenching amplitude up to A_max={q.A_max}")
    return out


def _run_flow(spec: ExperimentSpec, run_dir: Path, workers: int) -> Outcome:
    flow = spec.flow
    built = build_flow(flow)
    if built.velocity is None:
        raise ParameterError("flow.kind 'still' has no velocity field to export")
    u = built.velocity
    lattice = TorusLattice(flow.K)
    M = lattice.grid_size(u.K, flow.grid)
    u1, u2 = u.grid(M)

    out = Outcome()
    out.artifacts["velocity"] = write_npy(run_dir / "velocity.npy", np.stack([u1.real, u2.real])).name
    divergence = u.divergence_norm()
    meta: Dict[str, Any] = dict(built.meta)
    meta.update({
        "grid": M,
        "lipschitz": u.lip,
        "divergence": divergence,
        "reality_defect": u.reality_defect(),
        "mean_flow": list(u.mean_flow()),
    })
    if built.relabeled is not None:
        rf = built.relabeled
        sol = solve_homology(built.time_changed.Q_hat, rf.alpha, max(built.time_changed.q_band, 1))
        meta.update({
            "divergence_before_projection": rf.divergence_before,
            "measure_defect": rf.zmap.measure_defect(4),
            "homology": {
                "min_denominator": sol.min_denominator,
                "min_denominator_k": sol.min_denominator_k,
                "h1_norm": sol.h1_norm,
                "residual": sol.residual(),
            },
        })
    out.artifacts["flow"] = write_json(run_dir / "flow.json", meta).name
    out.summary.update(meta)
    out.check("divergence_free", divergence <= 1e-10, divergence)
    return out


_HANDLERS: Dict[str, Callable[[ExperimentSpec, Path, int], Outcome]] = {
    "simulate": _run_simulate,
    "spectrum": _run_spectrum,
    "rage": _run_rage,
    "nash": _run_nash,
    "quench": _run_quench,
    "flow": _run_flow,
}


# ---------------------------------------------------------------------------
# Публичный вход
# ---------------------------------------------------------------------------


async def run_experiment_async(
    spec: ExperimentSpec, out_dir: Optional[Path] = None, workers: int = 1
) -> RunRecord:
    store = RunStore(Path(out_dir) if out_dir is not None else OUT_DIR)
    run_id = run_id_for(spec.raw)
    run_dir = store.run_dir(run_id)
    metrics.configure(run_dir / EVENT_LOG_NAME, run_id)
    metrics.log_run_started(run_id=run_id, kind=spec.kind, name=spec.name, seed=spec.seed)
    logger.info("Run %s (%s, %s) started with %d worker(s)", run_id, spec.kind, spec.name, workers)

    started = time.perf_counter()
    if spec.kind == "sweep":
        outcome = await _run_sweep(spec, run_dir, workers, run_id)
    else:
        outcome = _HANDLERS[spec.kind](spec, run_dir, workers)
    wall = time.perf_counter() - started

    for name, c in outcome.checks.items():
        metrics.log_invariant_check(run_id=run_id, name=name, passed=c["passed"], value=c["value"], detail=c["detail"])
    for reason in outcome.sentinels:
        metrics.log_sentinel(run_id=run_id, kind=spec.kind, reason=reason)

    summary = dict(outcome.summary)
    summary["checks"] = outcome.checks
    summary["sentinels"] = list(outcome.sentinels)
    record = RunRecord(
        run_id=run_id,
        kind=spec.kind,
        name=spec.name,
        seed=spec.seed,
        spec=spec.raw,
        code_version=__version__,
        artifacts=outcome.artifacts,
        summary=summary,
        passed=outcome.passed,
        sentinel=bool(outcome.sentinels),
        wall_time=wall,
    )
    record.artifacts["summary"] = "summary.json"
    store.save(record)
    metrics.log_run_finished(
        run_id=run_id, kind=spec.kind, passed=record.passed, sentinel=record.sentinel, wall_time=wall
    )
    logger.info("Run %s finished in %.2fs: passed=%s sentinel=%s", run_id, wall, record.passed, record.sentinel)
    return record


def run_experiment(spec: ExperimentSpec, out_dir: Optional[Path] = None, workers: int = 1) -> RunRecord:
    return asyncio.run(run_experiment_async(spec, out_dir, workers))

