"""Turning solved relaxations into counterfactuals.

Two independent extraction routes:

  * moment route: the counterfactual is the terminal measure's normalized
    first-order state moment, the arrival time its first time moment;
  * trajectory route: the dual polynomial gives the feedback law
    u*(x) = -(1/2) grad(v) . g(x); simulating the closed loop from the
    factual up to the recovered arrival time lands on the counterfactual.

A diagnostics record tracks whether the terminal measure looks like a single
atom (second-to-first singular value ratio of its moment matrix); when it
does not, the extracted point is a barycenter of several optimal endpoints
and is labeled accordingly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .momentlp import RelaxedProblem
from .ocp import OcpSpec, ScalingInfo
from .polyalg import Polynomial, StructuralError, lie_derivative
from .sdpsolve import SolverResult

ATOMIC_RATIO_THRESHOLD = 1e-3
MASS_WARN_TOL = 1e-3


class ExtractionError(RuntimeError):
    pass


@dataclass
class CounterfactualPair:
    """Factual/counterfactual pair in original physical units."""

    factual: tuple[float, ...]
    counterfactual: tuple[float, ...]
    tau_seconds: float
    cost_bound: float
    order: int
    mass_terminal: float
    atomicity_ratio: float
    method: str
    parameters: tuple[float, ...] = ()
    achieved_cost: float | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def atomic(self) -> bool:
        return self.atomicity_ratio < ATOMIC_RATIO_THRESHOLD

    CSV_PREFIX = ("method", "order", "tau_seconds", "cost_bound",
                  "mass_terminal", "atomicity_ratio")

    @staticmethod
    def csv_header(state_names: Sequence[str], param_names: Sequence[str] = ()) -> list[str]:
        cols = list(CounterfactualPair.CSV_PREFIX)
        cols += [f"factual_{n}" for n in state_names]
        cols += [f"counterfactual_{n}" for n in state_names]
        cols += [f"parameter_{n}" for n in param_names]
        return cols

    def csv_row(self) -> list[str]:
        row = [self.method, str(self.order), repr(self.tau_seconds),
               repr(self.cost_bound), repr(self.mass_terminal),
               repr(self.atomicity_ratio)]
        row += [repr(v) for v in self.factual]
        row += [repr(v) for v in self.counterfactual]
        row += [repr(v) for v in self.parameters]
        return row

    @classmethod
    def from_csv_row(cls, header: Sequence[str], row: Sequence[str]) -> "CounterfactualPair":
        values = dict(zip(header, row))
        fac = [float(values[h]) for h in header if h.startswith("factual_")]
        cf = [float(values[h]) for h in header if h.startswith("counterfactual_")]
        par = [float(values[h]) for h in header if h.startswith("parameter_")]
        return cls(
            factual=tuple(fac),
            counterfactual=tuple(cf),
            tau_seconds=float(values["tau_seconds"]),
            cost_bound=float(values["cost_bound"]),
            order=int(values["order"]),
            mass_terminal=float(values["mass_terminal"]),
            atomicity_ratio=float(values["atomicity_ratio"]),
            method=values["method"],
            parameters=tuple(par),
        )

    def to_json_dict(self) -> dict:
        return {
            "factual": list(self.factual),
            "counterfactual": list(self.counterfactual),
            "tau_seconds": self.tau_seconds,
            "cost_bound": self.cost_bound,
            "order": self.order,
            "mass_terminal": self.mass_terminal,
            "atomicity_ratio": self.atomicity_ratio,
            "atomic": self.atomic,
            "method": self.method,
            "parameters": list(self.parameters),
            "achieved_cost": self.achieved_cost,
            "warnings": self.warnings,
        }


@dataclass
class ControlLaw:
    """Feedback components u*_j over the scaled state space, together with
    the value-function subsolution they came from."""

    components: tuple[Polynomial, ...]
    value_function: Polynomial
    bound: float


@dataclass
class SimTrajectory:
    times_seconds: np.ndarray
    states: np.ndarray            # original units, rows follow times
    controls: np.ndarray          # original units
    achieved_cost_scaled: float
    saturated_fraction: float
    exited_path_set: bool
    exit_time_seconds: float | None


@dataclass
class CertificateReport:
    initial_worst: float
    initial_at: tuple[float, ...]
    running_worst: float
    running_at: tuple[float, ...]
    terminal_worst: float
    terminal_at: tuple[float, ...]
    samples: int

    @property
    def worst(self) -> float:
        return min(self.initial_worst, self.running_worst, self.terminal_worst)


# ---------------------------------------------------------------------- #
# moment route


def extract_counterfactual_moments(result: SolverResult, problem: RelaxedProblem,
                                   scaling: ScalingInfo,
                                   factual_original: Sequence[float] | None = None,
                                   ) -> CounterfactualPair:
    """Algorithmic readout of the terminal measure: normalized first moments
    give the counterfactual state; the first time moment gives the arrival
    instant, cross-checked against the occupation measure's mass."""
    if result.status != "optimal":
        raise ExtractionError(f"solver status is {result.status!r}, not optimal")
    spec = problem.spec
    y = result.y
    ter = problem.measures["terminal"]
    nvars_t = len(ter.var_indices)
    warnings = []

    mass = problem.moment(y, "terminal", (0,) * nvars_t)
    if abs(mass - 1.0) > MASS_WARN_TOL:
        warnings.append(f"terminal mass {mass:.6f} deviates from 1 beyond "
                        f"{MASS_WARN_TOL:g}; the single-atom readout is unreliable")
    safe_mass = mass if abs(mass) > 1e-12 else 1.0

    def first_moment(pos: int) -> float:
        mono = tuple(1 if k == pos else 0 for k in range(nvars_t))
        return problem.moment(y, "terminal", mono) / safe_mass

    tau_scaled = first_moment(0)
    occ_mass = problem.moment(y, "occupation",
                              (0,) * len(problem.measures["occupation"].var_indices))
    if abs(tau_scaled - occ_mass) > 1e-3:
        warnings.append(
            f"arrival-time readouts disagree: terminal time moment {tau_scaled:.6f} "
            f"vs occupation mass {occ_mass:.6f}"
        )

    dyn = spec.dynamic_indices
    scaled_state = [first_moment(1 + k) for k in range(len(dyn))]
    full = scaling.to_original(dyn, scaled_state)
    nstates = spec.state_dim
    counterfactual = tuple(float(v) for v in full[:nstates])
    parameters = tuple(float(v) for v in full[nstates:])

    M = problem.moment_matrix(y / safe_mass, measure="terminal")
    sv = np.linalg.svd(M, compute_uv=False)
    ratio = float(sv[1] / sv[0]) if len(sv) > 1 and sv[0] > 0 else 0.0

    if factual_original is None:
        factual_original = scaling.to_original(
            spec.space.state_indices, spec.factual
        )
    tau_seconds = tau_scaled * scaling.horizon * scaling.seconds_per_time_unit

    return CounterfactualPair(
        factual=tuple(float(v) for v in factual_original),
        counterfactual=counterfactual,
        tau_seconds=float(tau_seconds),
        cost_bound=float(result.objective),
        order=problem.order,
        mass_terminal=float(mass),
        atomicity_ratio=ratio,
        method="moment",
        parameters=parameters,
        warnings=warnings,
    )


# ---------------------------------------------------------------------- #
# dual route


def recover_control_law(v: Polynomial, spec: OcpSpec, bound: float = 0.0) -> ControlLaw:
    """First-order optimality for input-affine dynamics with quadratic
    effort: u*_j = -(1/2) sum_i dv/dx_i g_ij.

    Time-dependent terms of v (artifacts of the time-augmented test basis)
    are frozen at t = 0 so the law is a state feedback, matching the
    time-invariant value function of the free-time problem.
    """
    space = spec.space
    tidx = space.time_index
    if tidx is not None and v.degree_in(tidx) > 0:
        transforms = {i: (1.0, 0.0) for i in range(space.dim)}
        transforms[tidx] = (0.0, 0.0)
        v = v.affine_substitute(transforms)
    components = []
    dyn = spec.dynamic_indices
    for j in range(spec.control_dim):
        u_j = Polynomial.zero(space)
        for k, i in enumerate(dyn):
            g_ij = spec.input_matrix[k][j]
            if g_ij.is_zero():
                continue
            u_j = u_j + v.partial_derivative(i) * g_ij
        components.append(u_j * (-0.5))
    return ControlLaw(components=tuple(components), value_function=v, bound=bound)


def rk4_trajectory(field: Callable[[float, np.ndarray], np.ndarray],
                   x0: np.ndarray, duration: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step 4th-order integration; returns (times, states)."""
    x = np.asarray(x0, dtype=float).copy()
    ts = np.linspace(0.0, duration, steps + 1)
    out = np.empty((steps + 1, x.size))
    out[0] = x
    h = duration / steps if steps else 0.0
    for k in range(steps):
        t = ts[k]
        k1 = field(t, x)
        k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
        k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
        k4 = field(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return ts, out


def simulate_closed_loop(spec: OcpSpec, law: ControlLaw,
                         factual_original: Sequence[float],
                         tau_seconds: float, scaling: ScalingInfo,
                         steps: int = 4096,
                         parameters_scaled: Sequence[float] = (),
                         ) -> tuple[SimTrajectory, CounterfactualPair]:
    """Integrate the scaled closed loop from the factual up to the recovered
    arrival time; the endpoint is the trajectory-route counterfactual.

    Controls are clamped to the admissible box (clamping is recorded); if the
    state leaves the path set the exit time is reported.
    """
    if not spec.scaled:
        raise StructuralError("closed-loop simulation expects the scaled spec")
    space = spec.space
    tidx = space.time_index
    dyn = spec.dynamic_indices
    nstates = spec.state_dim
    ctrl = space.control_indices
    tau_scaled = tau_seconds / (scaling.horizon * scaling.seconds_per_time_unit)
    tau_scaled = min(max(tau_scaled, 0.0), 1.0)

    x0_scaled = scaling.to_scaled(space.state_indices, factual_original)
    x0 = np.concatenate([x0_scaled, np.asarray(parameters_scaled, dtype=float)])
    if x0.size != len(dyn):
        raise StructuralError("initial condition does not match the dynamic variables")

    u_lo = np.array([space.variables[j].bounds[0] for j in ctrl])
    u_hi = np.array([space.variables[j].bounds[1] for j in ctrl])
    evaluator = spec.field_evaluator()
    saturated = 0
    total_evals = 0

    def control_at(t: float, x: np.ndarray) -> np.ndarray:
        nonlocal saturated, total_evals
        pt = np.zeros(space.dim)
        if tidx is not None:
            pt[tidx] = t
        pt[list(dyn)] = x
        raw = np.array([u.evaluate(pt) for u in law.components])
        clamped = np.clip(raw, u_lo, u_hi)
        total_evals += 1
        if np.any(np.abs(clamped - raw) > 1e-12):
            saturated += 1
        return clamped

    def closed_field(t: float, x: np.ndarray) -> np.ndarray:
        u = control_at(t, x)
        return evaluator(np.array([t]), x[None, :], u[None, :])[0]

    ts, xs = rk4_trajectory(closed_field, x0, tau_scaled, steps)
    us = np.array([control_at(t, x) for t, x in zip(ts, xs)])

    cost_scaled = float(np.trapz((us**2).sum(axis=1), ts))

    exited = False
    exit_time = None
    for t, x in zip(ts, xs):
        pt = np.zeros(space.dim)
        if tidx is not None:
            pt[tidx] = t
        pt[list(dyn)] = x
        if spec.path_set.violation(pt) > 1e-7:
            exited = True
            exit_time = t * scaling.horizon * scaling.seconds_per_time_unit
            break

    states_orig = np.column_stack([
        scaling.to_original(dyn, row)[:nstates] for row in xs
    ]).T
    controls_orig = us * scaling.control_scale
    times_seconds = ts * scaling.horizon * scaling.seconds_per_time_unit

    end = xs[-1]
    end_orig = scaling.to_original(dyn, end)
    pair = CounterfactualPair(
        factual=tuple(float(v) for v in factual_original),
        counterfactual=tuple(float(v) for v in end_orig[:nstates]),
        tau_seconds=float(tau_seconds),
        cost_bound=float(law.bound),
        order=0,
        mass_terminal=1.0,
        atomicity_ratio=0.0,
        method="trajectory",
        parameters=tuple(float(v) for v in end_orig[nstates:]),
        achieved_cost=cost_scaled,
        warnings=(["control clamped to the admissible box during simulation"]
                  if saturated else []) + (["trajectory left the path set"] if exited else []),
    )
    traj = SimTrajectory(
        times_seconds=times_seconds,
        states=states_orig,
        controls=controls_orig,
        achieved_cost_scaled=cost_scaled,
        saturated_fraction=saturated / max(total_evals, 1),
        exited_path_set=exited,
        exit_time_seconds=exit_time,
    )
    return traj, pair


# ---------------------------------------------------------------------- #
# dual certificate audit


def _closed_form_control_min(running: float, linear: np.ndarray,
                             u_lo: np.ndarray, u_hi: np.ndarray) -> float:
    """min over the control box of  running + linear.u + |u|^2  (separable)."""
    u_star = np.clip(-0.5 * linear, u_lo, u_hi)
    return running + float(linear @ u_star + (u_star**2).sum())


def verify_dual_certificate(v: Polynomial, bound: float, spec: OcpSpec,
                            samples: int = 10_000, seed: int = 0) -> CertificateReport:
    """Sampled audit of the dual feasibility system.

    Checks, over quasirandom samples of the relevant supports:
      * the scalar bound does not exceed v at the initial support,
      * the transported v plus the control effort stays nonnegative over
        time x path-set x control box (control minimized in closed form),
      * v is nonpositive on the time-augmented terminal support.
    Nonnegative worst values mean the certificate holds at the samples.
    """
    if not spec.scaled:
        raise StructuralError("certificate verification expects the scaled spec")
    space = spec.space
    tidx = space.time_index
    dyn = spec.dynamic_indices
    nstates = spec.state_dim
    ctrl = space.control_indices
    u_lo = np.array([space.variables[j].bounds[0] for j in ctrl])
    u_hi = np.array([space.variables[j].bounds[1] for j in ctrl])

    # transported v split into control-free and control-linear parts
    fields = spec.full_field()
    drift_part = v.partial_derivative(tidx) if tidx is not None else Polynomial.zero(space)
    for k, i in enumerate(dyn):
        dv = v.partial_derivative(i)
        if not dv.is_zero() and not spec.drift[k].is_zero():
            drift_part = drift_part + dv * spec.drift[k]
    linear_parts = []
    for j in range(spec.control_dim):
        lp = Polynomial.zero(space)
        for k, i in enumerate(dyn):
            g = spec.input_matrix[k][j]
            if not g.is_zero():
                lp = lp + v.partial_derivative(i) * g
        linear_parts.append(lp)

    sob = qmc.Sobol(d=1 + len(dyn), scramble=False, seed=seed)
    raw = sob.random(samples)

    # initial support: t = 0, states at the factual, parameters across their box
    n_init = max(64, samples // 16)
    init_pts = np.zeros((n_init, space.dim))
    for k, i in enumerate(space.state_indices):
        init_pts[:, i] = spec.factual[k]
    nparams = len(dyn) - nstates
    if nparams:
        grid = qmc.Sobol(d=nparams, scramble=False, seed=seed).random(n_init)
        for k, i in enumerate(spec.space.parameter_indices):
            lo, hi = space.variables[i].bounds
            init_pts[:, i] = lo + (hi - lo) * grid[:, k]
    init_vals = v.evaluate_many(init_pts) - bound
    i_min = int(np.argmin(init_vals))
    initial_worst = float(init_vals[i_min])
    initial_at = tuple(init_pts[i_min, list(dyn)])

    # running inequality over [0,1] x path box x control box
    pts = np.zeros((samples, space.dim))
    if tidx is not None:
        pts[:, tidx] = raw[:, 0]
    for k, i in enumerate(dyn):
        lo, hi = space.variables[i].bounds
        pts[:, i] = lo + (hi - lo) * raw[:, 1 + k]
    inside = np.ones(samples, dtype=bool)
    for w in spec.path_set.inequalities:
        inside &= w.evaluate_many(pts) >= -1e-12
    run_pts = pts[inside]
    running = drift_part.evaluate_many(run_pts)
    lin = np.column_stack([lp.evaluate_many(run_pts) for lp in linear_parts])
    u_star = np.clip(-0.5 * lin, u_lo, u_hi)
    run_vals = running + (lin * u_star).sum(axis=1) + (u_star**2).sum(axis=1)
    r_min = int(np.argmin(run_vals))
    running_worst = float(run_vals[r_min])
    running_at = tuple(run_pts[r_min, list(dyn)])

    # terminal support: [0,1] x terminal set
    inside_t = np.ones(samples, dtype=bool)
    for w in spec.terminal_set.inequalities:
        inside_t &= w.evaluate_many(pts) >= -1e-12
    ter_pts = pts[inside_t]
    if len(ter_pts) == 0:
        terminal_worst, terminal_at = np.inf, ()
    else:
        ter_vals = -v.evaluate_many(ter_pts)
        t_min = int(np.argmin(ter_vals))
        terminal_worst = float(ter_vals[t_min])
        terminal_at = tuple(ter_pts[t_min, list(dyn)])

    return CertificateReport(
        initial_worst=initial_worst,
        initial_at=initial_at,
        running_worst=running_worst,
        running_at=running_at,
        terminal_worst=terminal_worst,
        terminal_at=terminal_at,
        samples=samples,
    )
