"""End-to-end drivers shared by the CLI and the test suite.

``prepare`` does the factual-independent work once (scaling, parameter
extension, relaxation assembly); ``solve_one`` handles a single factual;
``run_batch`` fans solve_one out over sampled factuals with a worker pool,
results ordered by sample index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import extraction, models, momentlp, ocp, sdpsolve
from .extraction import ControlLaw, CounterfactualPair
from .ocp import OcpSpec, ScalingInfo
from .polyalg import StructuralError


@dataclass
class RunConfig:
    model: str = "bergman-known"
    order: int = 4
    mode: str = "known"
    factual: tuple[float, ...] | None = None
    batch: int | None = None
    seed: int = 0
    out_dir: str | None = None
    method: str = "moment"
    tol_feas: float = 1e-7
    tol_gap: float = 1e-6
    max_iters: int = 200000
    workers: int = 1
    export_sdpa: str | None = None
    with_oracle: bool = False

    def __post_init__(self):
        if self.mode not in ("known", "uncertain"):
            raise StructuralError(f"mode must be known or uncertain, got {self.mode!r}")
        if self.method not in ("moment", "trajectory", "both"):
            raise StructuralError(f"unknown extraction method {self.method!r}")
        if self.batch is not None and self.batch < 1:
            raise StructuralError("batch count must be at least 1")

    def solver_config(self) -> sdpsolve.SolverConfig:
        return sdpsolve.SolverConfig(
            tol_feas=self.tol_feas,
            tol_gap=self.tol_gap,
            max_iterations=self.max_iters,
        )


@dataclass
class Prepared:
    """Factual-independent pipeline state for one (model, mode, order)."""

    original: OcpSpec
    scaled: OcpSpec
    scaling: ScalingInfo
    relaxed: momentlp.RelaxedProblem
    mode: str
    order: int

    def min_order(self) -> int:
        degs = [w.degree for s in (self.scaled.path_set, self.scaled.terminal_set,
                                   self.scaled.control_set, self.scaled.initial_set)
                for w in s.inequalities]
        return max(((dg + 1) // 2 for dg in degs), default=1)


def load_spec(model: str, mode: str) -> OcpSpec:
    """Resolve a preset name or a JSON model file path."""
    if model in models.PRESETS:
        spec = models.preset(model)
    else:
        path = Path(model)
        if not path.exists():
            raise FileNotFoundError(f"model file not found: {model}")
        spec = ocp.load_model(path)
    if mode == "uncertain" and not spec.parameter_box:
        raise StructuralError(
            f"model {model!r} declares no parameter box; cannot run uncertain mode"
        )
    return spec


def prepare(spec: OcpSpec, mode: str, order: int) -> Prepared:
    work = spec
    if mode == "uncertain":
        work = ocp.extend_with_parameters(work)
    elif work.parameter_box:
        work = ocp.pin_parameters(
            work, dict(zip((n for n, _, _ in work.parameter_box), work.parameter_nominal))
        )
    scaled, scaling = ocp.scale_to_unit_box(work)
    if mode == "uncertain":
        relaxed = momentlp.assemble_uncertain(scaled, order)
    else:
        relaxed = momentlp.assemble_known(scaled, order)
    return Prepared(original=spec, scaled=scaled, scaling=scaling,
                    relaxed=relaxed, mode=mode, order=order)


@dataclass
class SolveRecord:
    index: int
    factual: tuple[float, ...]
    status: str
    result: sdpsolve.SolverResult | None = None
    pairs: list[CounterfactualPair] = field(default_factory=list)
    law: ControlLaw | None = None
    trajectory: extraction.SimTrajectory | None = None
    error: str | None = None


def solve_one(prep: Prepared, factual_original, config: RunConfig,
              index: int = 0) -> SolveRecord:
    """Assemble-with-factual, solve, extract.  Never raises for solver
    non-convergence; the record carries the status."""
    factual_original = tuple(float(v) for v in factual_original)
    scaling = prep.scaling
    x_f_scaled = tuple(
        scaling.to_scaled(prep.scaled.space.state_indices, factual_original)
    )
    conic = momentlp.to_conic(prep.relaxed, x_f_scaled)
    try:
        result = sdpsolve.solve(conic, config.solver_config())
    except sdpsolve.SolverBreakdown as exc:
        return SolveRecord(index=index, factual=factual_original,
                           status="breakdown", error=str(exc))
    record = SolveRecord(index=index, factual=factual_original,
                         status=result.status, result=result)
    if result.status != "optimal":
        return record

    relaxed = _with_factual(prep, x_f_scaled)
    moment_pair = extraction.extract_counterfactual_moments(
        result, relaxed, scaling, factual_original
    )
    if config.method in ("moment", "both"):
        record.pairs.append(moment_pair)
    if config.method in ("trajectory", "both"):
        try:
            v, bound = sdpsolve.extract_dual_polynomial(relaxed, result)
            law = extraction.recover_control_law(v, prep.scaled, bound)
            params_scaled = ()
            if prep.mode == "uncertain":
                nstates = prep.scaled.state_dim
                params_orig = moment_pair.parameters
                params_scaled = scaling.to_scaled(
                    prep.scaled.space.parameter_indices, params_orig
                )
            traj, traj_pair = extraction.simulate_closed_loop(
                prep.scaled, law, factual_original, moment_pair.tau_seconds,
                scaling, parameters_scaled=params_scaled,
            )
            traj_pair.order = prep.order
            traj_pair.cost_bound = float(result.objective)
            record.pairs.append(traj_pair)
            record.law = law
            record.trajectory = traj
        except (sdpsolve.DualUnavailableError, StructuralError) as exc:
            record.error = f"trajectory extraction failed: {exc}"
    return record


def _with_factual(prep: Prepared, x_f_scaled) -> momentlp.RelaxedProblem:
    """The relaxation with the spec's factual replaced (bookkeeping only;
    the conic data is rebuilt separately)."""
    from dataclasses import replace
    if tuple(x_f_scaled) == tuple(prep.scaled.factual):
        return prep.relaxed
    relaxed = replace(prep.relaxed, spec=replace(prep.scaled, factual=tuple(x_f_scaled)))
    return relaxed


def run_batch(prep: Prepared, factuals: np.ndarray, config: RunConfig) -> list[SolveRecord]:
    """Solve every factual; per-factual failures are recorded, not raised.
    Output order follows the sample index regardless of completion order."""
    def task(item):
        i, xf = item
        return solve_one(prep, xf, config, index=i)

    items = list(enumerate([tuple(map(float, row)) for row in factuals]))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(task, items))
    else:
        records = [task(it) for it in items]
    return sorted(records, key=lambda r: r.index)


def sample_batch_factuals(spec: OcpSpec, count: int, seed: int) -> np.ndarray:
    return models.sample_factuals(spec, count, seed)
