"""Preset problem instances.

``bergman_known`` / ``bergman_uncertain`` build the three-state
glucose-insulin regulation model with exogenous insulin input; the safe
(terminal) set is the normoglycemic band 80 <= G < 126 mg/dl and factuals
start hyperglycemic.  ``double_integrator`` and ``zero_dynamics_toy`` are
analytic fixtures with known optimal costs, used as test oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .ocp import OcpSpec, SemialgebraicSet
from .polyalg import Polynomial, StructuralError, Variable, VarSpace

_DEFAULTS = None


def _defaults() -> dict:
    global _DEFAULTS
    if _DEFAULTS is None:
        text = resources.files("cfoc.data").joinpath("bergman_defaults.json").read_text()
        _DEFAULTS = json.loads(text)
    return _DEFAULTS


@dataclass(frozen=True)
class BergmanParams:
    """Rate constants (per minute) and scale maxima for the minimal model.

    Defaults come from ``data/bergman_defaults.json``; p1, p4, n, G_b there
    are placeholders flagged as literature-sourced, not fitted values.
    """

    p1: float
    p2: float
    p3: float
    p4: float
    n: float
    G_b: float
    x1_max: float = 600.0
    x2_max: float = 1.0
    x3_max: float = 100.0
    u_max: float = 9.0
    horizon_minutes: float = 80.0

    def __post_init__(self):
        for key in ("p1", "p2", "p3", "p4", "n", "G_b", "u_max", "horizon_minutes"):
            if getattr(self, key) <= 0:
                raise StructuralError(f"Bergman parameter {key} must be positive")

    @classmethod
    def nominal(cls, **overrides) -> "BergmanParams":
        d = {k: v for k, v in _defaults().items() if k != "comment"}
        d["horizon_minutes"] = d.pop("horizon_minutes")
        d.update(overrides)
        return cls(**d)


def _box(space: VarSpace, name: str, lo: float, hi: float) -> Polynomial:
    z = Polynomial.variable(space, name)
    return (z - lo) * (hi - z)


def _bergman_space(params: BergmanParams, with_parameters: bool) -> VarSpace:
    variables = [
        Variable("t", "time", "min", (0.0, params.horizon_minutes)),
        Variable("x1", "state", "mg/dl", (0.0, params.x1_max)),
        Variable("x2", "state", "uU/ml", (0.0, params.x2_max)),
        Variable("x3", "state", "uU/ml", (0.0, params.x3_max)),
    ]
    if with_parameters:
        variables.append(Variable("p2", "parameter", "1/min", (0.049, 0.051)))
        variables.append(Variable("p3", "parameter", "1/min", (2.7e-5, 3.0e-5)))
    variables.append(Variable("u", "control", "uU/ml/min", (0.0, params.u_max)))
    return VarSpace(variables)


def _bergman_sets(space: VarSpace, params: BergmanParams,
                  terminal_margin: float) -> tuple[SemialgebraicSet, ...]:
    path = SemialgebraicSet(space, (
        _box(space, "x1", 0.0, params.x1_max),
        _box(space, "x2", 0.0, params.x2_max),
        _box(space, "x3", 0.0, params.x3_max),
    ))
    initial = SemialgebraicSet(space, (
        _box(space, "x1", 126.0, 260.0),
        _box(space, "x3", 0.0, 30.0),
    ))
    terminal = SemialgebraicSet(space, (
        _box(space, "x1", 80.0, 126.0 - terminal_margin),
        _box(space, "x2", 0.0, params.x2_max),
        _box(space, "x3", 0.0, params.x3_max),
    ))
    control = SemialgebraicSet(space, (_box(space, "u", 0.0, params.u_max),))
    return initial, path, terminal, control


def bergman_known(params: BergmanParams | None = None,
                  factual=(250.0, 0.0, 0.0),
                  terminal_margin: float = 0.0,
                  **overrides) -> OcpSpec:
    """Fully parametrized glucose-insulin steering problem.

    Dynamics (per minute):
        x1' = -p1*x1 - x2*x1 + p1*G_b
        x2' = -p2*x2 + p3*x3
        x3' = -n*x3  + p4*u
    """
    p = params if params is not None else BergmanParams.nominal(**overrides)
    space = _bergman_space(p, with_parameters=False)
    x1 = Polynomial.variable(space, "x1")
    x2 = Polynomial.variable(space, "x2")
    x3 = Polynomial.variable(space, "x3")
    drift = (
        -p.p1 * x1 - x2 * x1 + p.p1 * p.G_b,
        -p.p2 * x2 + p.p3 * x3,
        -p.n * x3,
    )
    zero = Polynomial.zero(space)
    gmat = ((zero,), (zero,), (Polynomial.constant(space, p.p4),))
    initial, path, terminal, control = _bergman_sets(space, p, terminal_margin)
    return OcpSpec(
        space=space,
        drift=drift,
        input_matrix=gmat,
        initial_set=initial,
        path_set=path,
        terminal_set=terminal,
        control_set=control,
        horizon=p.horizon_minutes,
        factual=tuple(float(x) for x in factual),
        seconds_per_time_unit=60.0,
        name="bergman-known",
    )


def bergman_uncertain(params: BergmanParams | None = None,
                      factual=(250.0, 0.0, 0.0),
                      p2_range: tuple[float, float] = (0.049, 0.051),
                      p3_range: tuple[float, float] = (2.7e-5, 3.0e-5),
                      terminal_margin: float = 0.0,
                      **overrides) -> OcpSpec:
    """Bergman problem with (p2, p3) unknown inside a box; nominal values sit
    at the interval midpoints."""
    p = params if params is not None else BergmanParams.nominal(**overrides)
    space = _bergman_space(p, with_parameters=True)
    # widen declared variable bounds to the requested ranges
    variables = list(space.variables)
    variables[4] = Variable("p2", "parameter", "1/min", p2_range)
    variables[5] = Variable("p3", "parameter", "1/min", p3_range)
    space = VarSpace(variables)

    x1 = Polynomial.variable(space, "x1")
    x2 = Polynomial.variable(space, "x2")
    x3 = Polynomial.variable(space, "x3")
    zp2 = Polynomial.variable(space, "p2")
    zp3 = Polynomial.variable(space, "p3")
    drift = (
        -p.p1 * x1 - x2 * x1 + p.p1 * p.G_b,
        -(zp2 * x2) + zp3 * x3,
        -p.n * x3,
    )
    zero = Polynomial.zero(space)
    gmat = ((zero,), (zero,), (Polynomial.constant(space, p.p4),))
    initial, path, terminal, control = _bergman_sets(space, p, terminal_margin)
    return OcpSpec(
        space=space,
        drift=drift,
        input_matrix=gmat,
        initial_set=initial,
        path_set=path,
        terminal_set=terminal,
        control_set=control,
        horizon=p.horizon_minutes,
        factual=tuple(float(x) for x in factual),
        seconds_per_time_unit=60.0,
        parameter_box=(
            ("p2", p2_range[0], p2_range[1]),
            ("p3", p3_range[0], p3_range[1]),
        ),
        parameter_nominal=(
            0.5 * (p2_range[0] + p2_range[1]),
            0.5 * (p3_range[0] + p3_range[1]),
        ),
        name="bergman-uncertain",
    )


def double_integrator(x_f: float = 0.2,
                      target: tuple[float, float] = (0.5, 1.0),
                      horizon: float = 1.0,
                      control_bounds: tuple[float, float] = (-1.0, 1.0)) -> OcpSpec:
    """Single-state x' = u fixture.

    The minimum-energy cost to reach the nearest target boundary b within
    time T is (b - x_f)^2 / T, attained by the constant control (b - x_f)/T.
    """
    lo, hi = target
    if not (0.0 <= lo < hi <= 1.0):
        raise StructuralError(f"target interval {target} must sit inside [0, 1]")
    space = VarSpace([
        Variable("t", "time", "s", (0.0, horizon)),
        Variable("x", "state", "", (0.0, 1.0)),
        Variable("u", "control", "", control_bounds),
    ])
    zero = Polynomial.zero(space)
    one = Polynomial.constant(space, 1.0)
    initial = SemialgebraicSet(space, (_box(space, "x", 0.0, lo),))
    path = SemialgebraicSet(space, (_box(space, "x", 0.0, 1.0),))
    terminal = SemialgebraicSet(space, (_box(space, "x", lo, hi),))
    control = SemialgebraicSet(space, (_box(space, "u", *control_bounds),))
    return OcpSpec(
        space=space,
        drift=(zero,),
        input_matrix=((one,),),
        initial_set=initial,
        path_set=path,
        terminal_set=terminal,
        control_set=control,
        horizon=horizon,
        factual=(float(x_f),),
        name="double-integrator",
    )


def zero_dynamics_toy(factual: float = 0.7,
                      target: tuple[float, float] = (0.5, 1.0)) -> OcpSpec:
    """Motionless single state with a decoupled control; the factual already
    sits in the target set, so the optimal effort is exactly zero."""
    lo, hi = target
    space = VarSpace([
        Variable("t", "time", "s", (0.0, 1.0)),
        Variable("x", "state", "", (0.0, 1.0)),
        Variable("u", "control", "", (0.0, 1.0)),
    ])
    zero = Polynomial.zero(space)
    initial = SemialgebraicSet(space, (_box(space, "x", 0.0, 1.0),))
    path = SemialgebraicSet(space, (_box(space, "x", 0.0, 1.0),))
    terminal = SemialgebraicSet(space, (_box(space, "x", lo, hi),))
    control = SemialgebraicSet(space, (_box(space, "u", 0.0, 1.0),))
    return OcpSpec(
        space=space,
        drift=(zero,),
        input_matrix=((zero,),),
        initial_set=initial,
        path_set=path,
        terminal_set=terminal,
        control_set=control,
        horizon=1.0,
        factual=(float(factual),),
        name="zero-dynamics",
    )


PRESETS = {
    "bergman-known": bergman_known,
    "bergman-uncertain": bergman_uncertain,
    "double-integrator": double_integrator,
    "zero-dynamics": zero_dynamics_toy,
}


def preset(name: str, **kwargs) -> OcpSpec:
    try:
        builder = PRESETS[name]
    except KeyError:
        raise StructuralError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None
    return builder(**kwargs)


# ---------------------------------------------------------------------- #
# factual sampling over the initial set


def initial_box(spec: OcpSpec) -> list[tuple[float, float]]:
    """Per-state sampling interval for the initial set.

    States constrained by univariate initial-set inequalities get the
    interval those inequalities carve out; unconstrained states collapse to
    the spec's factual component (the presets leave remote insulin pinned at
    its factual value, matching how factual subjects are posed).
    """
    space = spec.space
    out = []
    for k, i in enumerate(space.state_indices):
        lo, hi = space.variables[i].bounds
        constrained = False
        for w in spec.initial_set.inequalities:
            involved = {j for mono in w.terms for j, e in enumerate(mono) if e > 0}
            if involved != {i}:
                continue
            deg = w.degree_in(i)
            coeffs = np.zeros(deg + 1)
            for mono, c in w.terms.items():
                coeffs[deg - mono[i]] += c
            roots = np.roots(coeffs)
            real = sorted(r.real for r in roots if abs(r.imag) < 1e-9)
            if deg == 2 and coeffs[0] < 0 and len(real) == 2:
                lo, hi = max(lo, real[0]), min(hi, real[1])
                constrained = True
            elif deg == 1 and len(real) == 1:
                if coeffs[0] > 0:
                    lo = max(lo, real[0])
                else:
                    hi = min(hi, real[0])
                constrained = True
        if constrained:
            out.append((lo, hi))
        else:
            out.append((spec.factual[k], spec.factual[k]))
    return out


def sample_factuals(spec: OcpSpec, count: int, seed: int) -> np.ndarray:
    """Uniform factual samples over the initial box (seeded, deterministic)."""
    box = initial_box(spec)
    rng = np.random.default_rng(seed)
    los = np.array([b[0] for b in box])
    his = np.array([b[1] for b in box])
    return rng.uniform(los, his, size=(count, len(box)))
