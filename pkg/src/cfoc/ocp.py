"""Free-terminal-time minimum-energy control problem specifications.

An :class:`OcpSpec` bundles input-affine polynomial dynamics, the
semialgebraic sets (initial / path / terminal / control), the horizon and the
factual initial state.  Operations here validate a spec, rescale it onto the
unit box (states and time in [0,1], controls magnitude-normalized), and
extend the state space with box-bounded uncertain parameters that evolve with
zero dynamics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .polyalg import (
    Polynomial,
    StructuralError,
    Variable,
    VarSpace,
    format_polynomial,
    parse_polynomial,
)

MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True)
class SemialgebraicSet:
    """Set {v : w_k(v) >= 0 for all k} described by polynomial inequalities."""

    space: VarSpace
    inequalities: tuple[Polynomial, ...]

    def contains(self, point: Sequence[float], tol: float = MEMBERSHIP_TOL) -> bool:
        return self.violation(point) <= tol

    def violation(self, point: Sequence[float]) -> float:
        """Largest constraint violation at ``point`` (<= 0 means member)."""
        worst = 0.0
        for w in self.inequalities:
            worst = max(worst, -w.evaluate(point))
        return worst

    def transformed(self, transforms, target: VarSpace) -> "SemialgebraicSet":
        return SemialgebraicSet(
            target,
            tuple(w.affine_substitute(transforms, target) for w in self.inequalities),
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class ScalingInfo:
    """Affine maps x = a*x̂ + b taking unit-box variables back to originals."""

    transforms: dict[int, tuple[float, float]]
    horizon: float
    seconds_per_time_unit: float
    control_scale: float

    @property
    def horizon_seconds(self) -> float:
        return self.horizon * self.seconds_per_time_unit

    @property
    def cost_scale(self) -> float:
        """Multiplier turning the scaled objective into physical units
        (single common control scale assumed)."""
        return self.horizon * self.control_scale**2

    def to_original(self, indices: Sequence[int], scaled: Sequence[float]) -> np.ndarray:
        return np.array(
            [self.transforms[i][0] * v + self.transforms[i][1] for i, v in zip(indices, scaled)]
        )

    def to_scaled(self, indices: Sequence[int], original: Sequence[float]) -> np.ndarray:
        return np.array(
            [(v - self.transforms[i][1]) / self.transforms[i][0] for i, v in zip(indices, original)]
        )


@dataclass(frozen=True)
class OcpSpec:
    """Problem statement for the steering problem x' = h(x) + g(x) u.

    ``drift`` and ``input_matrix`` rows follow ``dynamic_indices`` order:
    states first, then (for parameter-extended specs) the uncertain
    parameters, whose rows are identically zero.
    """

    space: VarSpace
    drift: tuple[Polynomial, ...]
    input_matrix: tuple[tuple[Polynomial, ...], ...]
    initial_set: SemialgebraicSet
    path_set: SemialgebraicSet
    terminal_set: SemialgebraicSet
    control_set: SemialgebraicSet
    horizon: float
    factual: tuple[float, ...]
    seconds_per_time_unit: float = 1.0
    parameter_box: tuple[tuple[str, float, float], ...] = ()
    parameter_nominal: tuple[float, ...] = ()
    extended: bool = False
    scaled: bool = False
    name: str = "ocp"

    @property
    def state_dim(self) -> int:
        return len(self.space.state_indices)

    @property
    def control_dim(self) -> int:
        return len(self.space.control_indices)

    @property
    def dynamic_indices(self) -> tuple[int, ...]:
        idx = self.space.state_indices
        if self.extended:
            idx = idx + self.space.parameter_indices
        return idx

    def full_field(self) -> tuple[Polynomial, ...]:
        """Field entries h_i + sum_j g_ij u_j, one per dynamic variable."""
        u_polys = [Polynomial.variable(self.space, self.space.variables[j].name)
                   for j in self.space.control_indices]
        out = []
        for h_i, g_row in zip(self.drift, self.input_matrix):
            f_i = h_i
            for g_ij, u_j in zip(g_row, u_polys):
                if not g_ij.is_zero():
                    f_i = f_i + g_ij * u_j
            out.append(f_i)
        return tuple(out)

    def field_degree(self) -> int:
        return max((f.degree for f in self.full_field()), default=0)

    def field_evaluator(self) -> Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
        """Batched evaluator f(t, X, U) -> dX for (B,) times, (B, nd) dynamic
        variables and (B, m) controls."""
        space = self.space
        dyn = self.dynamic_indices
        ctrl = space.control_indices
        tidx = space.time_index
        fields = self.full_field()

        def evaluate(t: np.ndarray, X: np.ndarray, U: np.ndarray) -> np.ndarray:
            B = X.shape[0]
            pts = np.zeros((B, space.dim))
            if tidx is not None:
                pts[:, tidx] = t
            pts[:, list(dyn)] = X
            if len(ctrl):
                pts[:, list(ctrl)] = U
            out = np.empty((B, len(dyn)))
            for k, f in enumerate(fields):
                out[:, k] = f.evaluate_many(pts)
            return out

        return evaluate


# ---------------------------------------------------------------------- #
# validation


def _probe_point(spec: OcpSpec, overrides: Mapping[int, float]) -> list[float]:
    pt = [0.0] * spec.space.dim
    for i, v in enumerate(spec.space.variables):
        lo, hi = v.bounds
        pt[i] = 0.5 * (lo + hi)
    for i, v in overrides.items():
        pt[i] = v
    return pt


def validate(spec: OcpSpec, overlap_policy: str = "warn") -> ValidationReport:
    """Check structural assumptions; returns a report rather than raising.

    ``overlap_policy`` decides whether an initial set overlapping the
    terminal set is a warning or a violation (both readings are defensible,
    so it stays configurable).
    """
    rep = ValidationReport()
    space = spec.space

    if spec.horizon <= 0:
        rep.violations.append(f"horizon must be positive, got {spec.horizon}")

    ndyn = len(spec.dynamic_indices)
    if len(spec.drift) != ndyn:
        rep.violations.append(f"drift has {len(spec.drift)} entries for {ndyn} dynamic variables")
    if len(spec.input_matrix) != ndyn:
        rep.violations.append("input matrix row count does not match dynamic variables")
    for row in spec.input_matrix:
        if len(row) != spec.control_dim:
            rep.violations.append("input matrix column count does not match controls")
            break

    # dynamics must not depend on time or control (input-affine form).
    tidx = space.time_index
    for k, p in enumerate(spec.drift):
        if tidx is not None and p.degree_in(tidx) > 0:
            rep.violations.append(f"drift entry {k} depends on time")
        for j in space.control_indices:
            if p.degree_in(j) > 0:
                rep.violations.append(f"drift entry {k} depends on a control variable")
    for k, row in enumerate(spec.input_matrix):
        for g in row:
            for j in space.control_indices:
                if g.degree_in(j) > 0:
                    rep.violations.append(f"input matrix row {k} is not control-affine")

    # factual membership
    x0_point = _factual_full_point(spec)
    if not spec.initial_set.contains(x0_point, tol=1e-6):
        rep.violations.append(
            f"factual {tuple(spec.factual)} not in X0 "
            f"(violation {spec.initial_set.violation(x0_point):.3g})"
        )

    # control set boundedness: probe far outside the declared bounds.
    for j in space.control_indices:
        lo, hi = space.variables[j].bounds
        span = hi - lo
        for probe in (lo - 10 * span, hi + 10 * span):
            pt = _probe_point(spec, {j: probe})
            if spec.control_set.contains(pt):
                rep.violations.append(
                    f"control set unbounded in {space.variables[j].name!r}"
                )
                break

    # terminal set should sit inside the path set (sampled containment).
    rng = np.random.default_rng(20240801)
    samples = _sample_box(spec, rng, 256)
    inside_t = [p for p in samples if spec.terminal_set.contains(p, tol=1e-9)]
    for p in inside_t:
        if not spec.path_set.contains(p, tol=1e-7):
            rep.violations.append("terminal set not contained in path set (sampled)")
            break

    # initial/terminal overlap (safe vs unsafe separation)
    overlap = [p for p in samples
               if spec.initial_set.contains(p, 1e-9) and spec.terminal_set.contains(p, 1e-9)]
    if overlap:
        msg = "initial and terminal sets overlap (sampled witness)"
        if overlap_policy == "reject":
            rep.violations.append(msg)
        else:
            rep.warnings.append(msg)

    # declared uncertain parameters must act on the dynamics
    for pname, lo, hi in spec.parameter_box:
        if lo >= hi:
            rep.violations.append(f"parameter {pname!r} box is empty: [{lo}, {hi}]")
        idx = space.index(pname)
        used = any(p.degree_in(idx) > 0 for p in spec.drift) or any(
            g.degree_in(idx) > 0 for row in spec.input_matrix for g in row
        )
        if not used:
            rep.violations.append(f"parameter {pname!r} does not appear in the dynamics")

    return rep


def _factual_full_point(spec: OcpSpec) -> list[float]:
    pt = _probe_point(spec, {})
    for i, x in zip(spec.space.state_indices, spec.factual):
        pt[i] = x
    if spec.space.time_index is not None:
        pt[spec.space.time_index] = 0.0
    return pt


def _sample_box(spec: OcpSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    los = np.array([v.bounds[0] for v in spec.space.variables])
    his = np.array([v.bounds[1] for v in spec.space.variables])
    return rng.uniform(los, his, size=(n, spec.space.dim))


# ---------------------------------------------------------------------- #
# unit-box scaling


def scale_to_unit_box(spec: OcpSpec) -> tuple[OcpSpec, ScalingInfo]:
    """Return an equivalent spec over unit-box variables with time-scaled
    dynamics.

    States and parameters map affinely onto [0,1]; time maps onto [0,1] with
    every field entry multiplied by the horizon; controls are scaled by
    magnitude only so the running cost keeps the plain u^2 form.
    """
    if spec.scaled:
        return spec, _identity_scaling(spec)
    space = spec.space

    new_vars = []
    transforms: dict[int, tuple[float, float]] = {}
    inverse: dict[int, tuple[float, float]] = {}
    control_scale = 1.0
    for i, v in enumerate(space.variables):
        lo, hi = v.bounds
        if v.role == "time":
            a, b = spec.horizon, 0.0
            nb = (0.0, 1.0)
        elif v.role == "control":
            a, b = max(abs(lo), abs(hi)), 0.0
            control_scale = a
            nb = (lo / a, hi / a)
        else:
            a, b = hi - lo, lo
            nb = (0.0, 1.0)
        transforms[i] = (a, b)
        inverse[i] = (1.0 / a, -b / a)
        new_vars.append(Variable(v.name, v.role, v.unit, nb))
    new_space = VarSpace(new_vars)

    def to_scaled_poly(p: Polynomial) -> Polynomial:
        return p.affine_substitute(transforms, new_space)

    drift = []
    gmat = []
    for idx, h_i, g_row in zip(spec.dynamic_indices, spec.drift, spec.input_matrix):
        a_i = transforms[idx][0]
        factor = spec.horizon / a_i
        drift.append(to_scaled_poly(h_i) * factor)
        # control substitution u = s*û contributes its own factor
        gmat.append(tuple(to_scaled_poly(g) * (factor * control_scale) for g in g_row))

    factual = tuple(
        (x - transforms[i][1]) / transforms[i][0]
        for i, x in zip(space.state_indices, spec.factual)
    )
    pbox = tuple(
        (
            name,
            (lo - transforms[space.index(name)][1]) / transforms[space.index(name)][0],
            (hi - transforms[space.index(name)][1]) / transforms[space.index(name)][0],
        )
        for name, lo, hi in spec.parameter_box
    )
    pnom = tuple(
        (v - transforms[space.index(name)][1]) / transforms[space.index(name)][0]
        for (name, _, _), v in zip(spec.parameter_box, spec.parameter_nominal)
    )

    scaled = OcpSpec(
        space=new_space,
        drift=tuple(drift),
        input_matrix=tuple(gmat),
        initial_set=spec.initial_set.transformed(transforms, new_space),
        path_set=spec.path_set.transformed(transforms, new_space),
        terminal_set=spec.terminal_set.transformed(transforms, new_space),
        control_set=spec.control_set.transformed(transforms, new_space),
        horizon=1.0,
        factual=factual,
        seconds_per_time_unit=spec.seconds_per_time_unit,
        parameter_box=pbox,
        parameter_nominal=pnom,
        extended=spec.extended,
        scaled=True,
        name=spec.name,
    )
    info = ScalingInfo(
        transforms=transforms,
        horizon=spec.horizon,
        seconds_per_time_unit=spec.seconds_per_time_unit,
        control_scale=control_scale,
    )
    return scaled, info


def _identity_scaling(spec: OcpSpec) -> ScalingInfo:
    return ScalingInfo(
        transforms={i: (1.0, 0.0) for i in range(spec.space.dim)},
        horizon=spec.horizon,
        seconds_per_time_unit=spec.seconds_per_time_unit,
        control_scale=1.0,
    )


# ---------------------------------------------------------------------- #
# parameter extension


def extend_with_parameters(spec: OcpSpec) -> OcpSpec:
    """Promote every boxed parameter to a dynamic variable with zero
    derivative; the initial/path/terminal sets acquire the parameter box so
    their products with the uncertainty set stay semialgebraic."""
    if not spec.parameter_box:
        raise StructuralError("extend_with_parameters requires a nonempty parameter box")
    if spec.extended:
        return spec
    space = spec.space
    declared = {name for name, _, _ in spec.parameter_box}
    for name in declared:
        idx = space.index(name)
        if space.variables[idx].role != "parameter":
            raise StructuralError(f"{name!r} is not a parameter variable")
        used = any(p.degree_in(idx) > 0 for p in spec.drift) or any(
            g.degree_in(idx) > 0 for row in spec.input_matrix for g in row
        )
        if not used:
            raise StructuralError(f"parameter {name!r} does not appear in the dynamics")

    ordered = [name for name, _, _ in spec.parameter_box]
    zero = Polynomial.zero(space)
    drift = spec.drift + tuple(zero for _ in ordered)
    gmat = spec.input_matrix + tuple(
        tuple(zero for _ in range(spec.control_dim)) for _ in ordered
    )

    def with_box(s: SemialgebraicSet) -> SemialgebraicSet:
        ineqs = list(s.inequalities)
        for name, lo, hi in spec.parameter_box:
            z = Polynomial.variable(space, name)
            ineqs.append((z - lo) * (hi - z))
        return SemialgebraicSet(space, tuple(ineqs))

    return replace(
        spec,
        drift=drift,
        input_matrix=gmat,
        initial_set=with_box(spec.initial_set),
        path_set=with_box(spec.path_set),
        terminal_set=with_box(spec.terminal_set),
        extended=True,
    )


def pin_parameters(spec: OcpSpec, values: Mapping[str, float]) -> OcpSpec:
    """Substitute fixed numeric values for parameters, producing a fully
    parametrized spec over the reduced variable space."""
    space = spec.space
    pinned = {space.index(name): v for name, v in values.items()}
    keep = [i for i in range(space.dim) if i not in pinned]
    new_space = VarSpace([space.variables[i] for i in keep])
    index_map = {}
    for new_i, old_i in enumerate(keep):
        index_map[old_i] = new_i

    def convert(p: Polynomial) -> Polynomial:
        transforms = {i: (1.0, 0.0) for i in keep}
        transforms.update({i: (0.0, v) for i, v in pinned.items()})
        collapsed = p.affine_substitute(transforms)
        out = {}
        for mono, coeff in collapsed.terms.items():
            if any(mono[i] for i in pinned):
                raise StructuralError("pinning left a parameter exponent behind")
            key = tuple(mono[i] for i in keep)
            out[key] = out.get(key, 0.0) + coeff
        return Polynomial(new_space, out)

    def convert_set(s: SemialgebraicSet) -> SemialgebraicSet:
        kept = []
        for w in s.inequalities:
            cw = convert(w)
            if cw.degree == 0:
                # constant inequality: keep only if it is informative
                if cw.coefficient((0,) * new_space.dim) < 0:
                    kept.append(cw)
                continue
            kept.append(cw)
        return SemialgebraicSet(new_space, tuple(kept))

    ndyn_states = spec.state_dim
    return replace(
        spec,
        space=new_space,
        drift=tuple(convert(p) for p in spec.drift[:ndyn_states]),
        input_matrix=tuple(tuple(convert(g) for g in row) for row in spec.input_matrix[:ndyn_states]),
        initial_set=convert_set(spec.initial_set),
        path_set=convert_set(spec.path_set),
        terminal_set=convert_set(spec.terminal_set),
        control_set=convert_set(spec.control_set),
        parameter_box=(),
        parameter_nominal=(),
        extended=False,
    )


# ---------------------------------------------------------------------- #
# JSON model files


def to_model_dict(spec: OcpSpec) -> dict:
    space = spec.space
    dyn_names = [space.variables[i].name for i in spec.dynamic_indices]
    ctrl_names = [space.variables[j].name for j in space.control_indices]
    d = {
        "name": spec.name,
        "variables": [
            {"name": v.name, "role": v.role, "unit": v.unit, "bounds": list(v.bounds)}
            for v in space.variables
        ],
        "drift": {n: format_polynomial(p) for n, p in zip(dyn_names, spec.drift)},
        "input_matrix": {
            n: {c: format_polynomial(g) for c, g in zip(ctrl_names, row)}
            for n, row in zip(dyn_names, spec.input_matrix)
        },
        "sets": {
            "initial": [format_polynomial(w) for w in spec.initial_set.inequalities],
            "path": [format_polynomial(w) for w in spec.path_set.inequalities],
            "terminal": [format_polynomial(w) for w in spec.terminal_set.inequalities],
            "control": [format_polynomial(w) for w in spec.control_set.inequalities],
        },
        "horizon": spec.horizon,
        "seconds_per_time_unit": spec.seconds_per_time_unit,
        "factual": list(spec.factual),
    }
    if spec.parameter_box:
        d["parameter_box"] = [
            {"name": n, "lower": lo, "upper": hi, "nominal": nom}
            for (n, lo, hi), nom in zip(spec.parameter_box, spec.parameter_nominal)
        ]
    return d


def from_model_dict(d: dict) -> OcpSpec:
    space = VarSpace(
        Variable(v["name"], v["role"], v.get("unit", ""), tuple(v["bounds"]))
        for v in d["variables"]
    )
    state_names = [space.variables[i].name for i in space.state_indices]
    ctrl_names = [space.variables[j].name for j in space.control_indices]
    zero = Polynomial.zero(space)
    drift = tuple(
        parse_polynomial(d["drift"].get(n, "0"), space) if d["drift"].get(n) else zero
        for n in state_names
    )
    gmat = tuple(
        tuple(
            parse_polynomial(d["input_matrix"].get(n, {}).get(c, "0"), space)
            if d["input_matrix"].get(n, {}).get(c)
            else zero
            for c in ctrl_names
        )
        for n in state_names
    )

    def parse_set(key: str) -> SemialgebraicSet:
        return SemialgebraicSet(
            space, tuple(parse_polynomial(t, space) for t in d["sets"][key])
        )

    pbox = tuple(
        (e["name"], float(e["lower"]), float(e["upper"]))
        for e in d.get("parameter_box", [])
    )
    pnom = tuple(
        float(e.get("nominal", 0.5 * (e["lower"] + e["upper"])))
        for e in d.get("parameter_box", [])
    )
    return OcpSpec(
        space=space,
        drift=drift,
        input_matrix=gmat,
        initial_set=parse_set("initial"),
        path_set=parse_set("path"),
        terminal_set=parse_set("terminal"),
        control_set=parse_set("control"),
        horizon=float(d["horizon"]),
        factual=tuple(float(x) for x in d["factual"]),
        seconds_per_time_unit=float(d.get("seconds_per_time_unit", 1.0)),
        parameter_box=pbox,
        parameter_nominal=pnom,
        name=d.get("name", "ocp"),
    )


def save_model(spec: OcpSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_model_dict(spec), fh, indent=2)
        fh.write("\n")


def load_model(path) -> OcpSpec:
    with open(path, encoding="utf-8") as fh:
        return from_model_dict(json.load(fh))
