"""Assembly of the finite-dimensional moment relaxation.

The measure-space steering problem (initial Dirac, occupation measure,
free-time terminal measure linked by the transport identity) is truncated at
relaxation order d: each measure becomes a vector of moments up to degree 2d,
the transport identity becomes one linear equality per polynomial test
function, and measure support is enforced through positive semidefinite
moment and localizing matrices.  The objective selects the second-order
moment of the control with respect to the occupation measure.

Measures and their variables:

  ``occupation``  over (t, states[, parameters], controls)
  ``terminal``    over (t, states[, parameters]) -- time is kept so the
                  arrival instant can be read off the first time moment
  ``initial``     (uncertain problems only) over the parameters; the state
                  components are pinned to the factual by substitution

Known-system problems substitute the factual directly into the equality
right-hand sides; parameter-uncertain problems keep the initial measure as a
decision object with unit mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .ocp import OcpSpec
from .polyalg import Polynomial, StructuralError, grlex_key


class ConfigurationError(ValueError):
    """Relaxation order too small for the requested sets/dynamics."""


def monomial_basis(nvars: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples with total degree <= ``degree`` in graded-lex
    order (the constant monomial sits at index 0)."""
    if degree < 0:
        raise ConfigurationError("basis degree must be nonnegative")
    out: list[tuple[int, ...]] = []

    def rec(prefix: list[int], remaining: int, slot: int):
        if slot == nvars - 1:
            prefix.append(remaining)
            out.append(tuple(prefix))
            prefix.pop()
            return
        for e in range(remaining + 1):
            prefix.append(e)
            rec(prefix, remaining - e, slot + 1)
            prefix.pop()

    if nvars == 0:
        return [()]
    for total in range(degree + 1):
        rec([], total, 0)
    out.sort(key=grlex_key)
    return out


@dataclass
class MeasureBlock:
    """Bookkeeping for one measure's moment vector inside the concatenated
    decision vector."""

    name: str
    var_indices: tuple[int, ...]      # indices into the scaled spec's space
    var_names: tuple[str, ...]
    monomials: list[tuple[int, ...]]  # exponents over var_indices, degree <= 2d
    offset: int

    def __post_init__(self):
        self.index = {m: k for k, m in enumerate(self.monomials)}

    @property
    def size(self) -> int:
        return len(self.monomials)

    def global_index(self, mono: tuple[int, ...]) -> int:
        try:
            return self.offset + self.index[mono]
        except KeyError:
            raise ConfigurationError(
                f"moment {mono} of measure {self.name!r} exceeds the truncation"
            ) from None


@dataclass
class MomentMatrixSpec:
    """One PSD block: M(y) entries are linear combinations of moments.

    ``entry_pos`` holds flattened positions i*side+j for both triangles;
    parallel arrays give the referenced moment (global index) and its
    coefficient.  ``multiplier`` records the localizing polynomial (None for
    a plain moment matrix).
    """

    measure: str
    side: int
    basis: list[tuple[int, ...]]
    multiplier_label: str
    entry_pos: np.ndarray
    var_idx: np.ndarray
    coefs: np.ndarray


@dataclass
class LiouvilleRow:
    test: tuple[int, ...]          # exponents over the terminal measure variables
    time_degree: int
    state_part: tuple[int, ...]    # exponents over states only (for the rhs)
    param_part: tuple[int, ...]    # exponents over parameters (uncertain case)


@dataclass
class AssemblyReport:
    test_cap: int
    skipped_tests: int
    notes: list[str] = field(default_factory=list)


@dataclass
class RelaxedProblem:
    """Finite-dimensional relaxation: min c'y s.t. A y = b, blocks PSD."""

    spec: OcpSpec
    order: int
    measures: dict[str, MeasureBlock]
    blocks: list[MomentMatrixSpec]
    rows: list[LiouvilleRow]
    extra_row_labels: list[str]
    nvars: int
    objective_index: int
    report: AssemblyReport
    _static_entries: tuple[np.ndarray, np.ndarray, np.ndarray]
    _pin_entries: list[tuple[int, int, tuple[int, ...]]]  # (row, y0 col, state exponents)

    @property
    def is_uncertain(self) -> bool:
        return "initial" in self.measures

    def factual_scaled(self) -> tuple[float, ...]:
        return self.spec.factual

    def equality_system(self, factual=None) -> tuple[sp.csr_matrix, np.ndarray]:
        """Equality matrix and right-hand side for a given scaled factual
        (defaults to the spec's).  Known problems only change b; uncertain
        problems re-fill the initial-measure pinning coefficients."""
        x_f = tuple(self.spec.factual if factual is None else factual)
        nrows = len(self.rows) + len(self.extra_row_labels)
        rows_i, cols_i, vals_i = self._static_entries
        add_r, add_c, add_v = [], [], []
        b = np.zeros(nrows)
        if not self.is_uncertain:
            for r, row in enumerate(self.rows):
                if row.time_degree == 0:
                    b[r] = _power_product(x_f, row.state_part)
        else:
            for r, col, alpha in self._pin_entries:
                add_r.append(r)
                add_c.append(col)
                add_v.append(-_power_product(x_f, alpha))
            # unit-mass row for the initial measure
            mass_row = len(self.rows) + self.extra_row_labels.index("initial-mass")
            b[mass_row] = 1.0
        r = np.concatenate([rows_i, np.array(add_r, dtype=np.int64)])
        c = np.concatenate([cols_i, np.array(add_c, dtype=np.int64)])
        v = np.concatenate([vals_i, np.array(add_v, dtype=float)])
        A = sp.coo_matrix((v, (r, c)), shape=(nrows, self.nvars)).tocsr()
        A.sum_duplicates()
        return A, b

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.nvars)
        c[self.objective_index] = 1.0
        return c

    def moment(self, y: np.ndarray, measure: str, mono: tuple[int, ...]) -> float:
        return float(y[self.measures[measure].global_index(mono)])

    def moment_matrix(self, y: np.ndarray, spec_index: int = None,
                      measure: str = "terminal") -> np.ndarray:
        """Materialize a PSD block at the solved moment vector.  By default
        returns the terminal measure's main moment matrix."""
        if spec_index is None:
            for k, blk in enumerate(self.blocks):
                if blk.measure == measure and blk.multiplier_label == "1":
                    spec_index = k
                    break
        blk = self.blocks[spec_index]
        M = np.zeros(blk.side * blk.side)
        np.add.at(M, blk.entry_pos, blk.coefs * y[blk.var_idx])
        return M.reshape(blk.side, blk.side)


def _power_product(values: Sequence[float], exps: Sequence[int]) -> float:
    out = 1.0
    for v, e in zip(values, exps):
        if e:
            out *= v**e
    return out


def _poly_to_local(p: Polynomial, var_indices: tuple[int, ...],
                   what: str) -> dict[tuple[int, ...], float]:
    """Re-index a polynomial over the full space onto a measure's variables."""
    positions = {v: k for k, v in enumerate(var_indices)}
    out: dict[tuple[int, ...], float] = {}
    for mono, coeff in p.terms.items():
        local = [0] * len(var_indices)
        for i, e in enumerate(mono):
            if e == 0:
                continue
            if i not in positions:
                raise StructuralError(
                    f"{what} involves variable {p.space.variables[i].name!r} "
                    "outside the measure's variables"
                )
            local[positions[i]] = e
        key = tuple(local)
        out[key] = out.get(key, 0.0) + coeff
    return out


def build_moment_matrix_spec(measure: MeasureBlock, d: int) -> MomentMatrixSpec:
    """Plain moment matrix M_d(y) for one measure."""
    return _build_matrix_spec(measure, d, None, "1")


def build_localizing_specs(measure: MeasureBlock, inequalities, labels,
                           d: int) -> list[MomentMatrixSpec]:
    """Localizing matrices M_{d-d_k}(w_k y), d_k = ceil(deg w_k / 2)."""
    specs = []
    for w, label in zip(inequalities, labels):
        deg = max(sum(m) for m in w)
        d_k = (deg + 1) // 2
        if d < d_k:
            raise ConfigurationError(
                f"relaxation order {d} too small for constraint {label!r} "
                f"of degree {deg} (needs d >= {d_k})"
            )
        specs.append(_build_matrix_spec(measure, d - d_k, w, label))
    return specs


def _build_matrix_spec(measure: MeasureBlock, basis_degree: int,
                       multiplier: dict[tuple[int, ...], float] | None,
                       label: str) -> MomentMatrixSpec:
    basis = monomial_basis(len(measure.var_indices), basis_degree)
    side = len(basis)
    pos, var, coef = [], [], []
    for i in range(side):
        for j in range(i, side):
            prod = tuple(a + b for a, b in zip(basis[i], basis[j]))
            refs = []
            if multiplier is None:
                refs.append((measure.global_index(prod), 1.0))
            else:
                for gmono, gcoef in multiplier.items():
                    shifted = tuple(a + b for a, b in zip(prod, gmono))
                    refs.append((measure.global_index(shifted), gcoef))
            for gidx, c in refs:
                pos.append(i * side + j)
                var.append(gidx)
                coef.append(c)
                if i != j:
                    pos.append(j * side + i)
                    var.append(gidx)
                    coef.append(c)
    return MomentMatrixSpec(
        measure=measure.name,
        side=side,
        basis=basis,
        multiplier_label=label,
        entry_pos=np.array(pos, dtype=np.int64),
        var_idx=np.array(var, dtype=np.int64),
        coefs=np.array(coef, dtype=float),
    )


def _time_box_local(nvars_local: int) -> dict[tuple[int, ...], float]:
    """t*(1-t) over a measure whose first variable is time."""
    lin = tuple([1] + [0] * (nvars_local - 1))
    quad = tuple([2] + [0] * (nvars_local - 1))
    return {lin: 1.0, quad: -1.0}


def assemble_liouville(spec: OcpSpec, d: int, occupation: MeasureBlock,
                       terminal: MeasureBlock) -> tuple[list[LiouvilleRow], AssemblyReport]:
    """One equality row per polynomial test function t^beta * kappa^alpha.

    The transport of the test function along the controlled field must stay
    inside the truncated basis, so tests are capped at total degree
    2d - max(deg f, 1); tests between the cap and 2d are counted as skipped.
    """
    space = spec.space
    deg_f = max(spec.field_degree(), 1)
    cap = 2 * d - deg_f
    if cap < 0:
        raise ConfigurationError(
            f"relaxation order {d} too small for dynamics of degree {deg_f}"
        )
    nvars_t = len(terminal.var_indices)
    all_tests = monomial_basis(nvars_t, 2 * d)
    kept = [m for m in all_tests if sum(m) <= cap]
    report = AssemblyReport(test_cap=cap, skipped_tests=len(all_tests) - len(kept))

    nstates = spec.state_dim
    rows = []
    for test in kept:
        beta = test[0]
        state_part = test[1:1 + nstates]
        param_part = test[1 + nstates:]
        rows.append(LiouvilleRow(test=test, time_degree=beta,
                                 state_part=state_part, param_part=param_part))
    return rows, report


def _assemble(spec: OcpSpec, d: int, uncertain: bool) -> RelaxedProblem:
    if not spec.scaled:
        raise StructuralError("assembly requires a unit-box scaled spec")
    space = spec.space
    tidx = space.time_index
    if tidx is None:
        raise StructuralError("assembly requires a time variable")
    dyn = spec.dynamic_indices
    ctrl = space.control_indices
    params = space.parameter_indices

    occ_vars = (tidx,) + dyn + ctrl
    ter_vars = (tidx,) + dyn

    measures: dict[str, MeasureBlock] = {}
    offset = 0

    def add_measure(name: str, var_indices: tuple[int, ...]) -> MeasureBlock:
        nonlocal offset
        names = tuple(space.variables[i].name for i in var_indices)
        block = MeasureBlock(name, var_indices, names,
                             monomial_basis(len(var_indices), 2 * d), offset)
        measures[name] = block
        offset += block.size
        return block

    occupation = add_measure("occupation", occ_vars)
    terminal = add_measure("terminal", ter_vars)
    initial = add_measure("initial", params) if uncertain else None

    # objective: second moment of the control under the occupation measure
    if len(ctrl) == 0:
        raise StructuralError("problem needs at least one control variable")
    u2 = [0] * len(occ_vars)
    for j in ctrl:
        u2[occ_vars.index(j)] = 2
        break  # single-control form; extra controls handled below
    if len(ctrl) > 1:
        raise StructuralError("multi-input problems are not supported yet")
    objective_index = occupation.global_index(tuple(u2))

    # --- transport equality rows ------------------------------------- #
    rows, report = assemble_liouville(spec, d, occupation, terminal)
    fields = spec.full_field()
    rows_i, cols_i, vals_i = [], [], []
    pin_entries: list[tuple[int, int, tuple[int, ...]]] = []

    var_names = space.names()
    test_cache: dict[tuple[int, ...], Polynomial] = {}

    for r, row in enumerate(rows):
        # terminal side
        rows_i.append(r)
        cols_i.append(terminal.global_index(row.test))
        vals_i.append(1.0)

        # occupation side: -<L(test), mu>
        test_poly = Polynomial(space, {_expand_mono(row.test, ter_vars, space.dim): 1.0})
        transported = test_poly.partial_derivative(tidx)
        for k, i in enumerate(dyn):
            dv = test_poly.partial_derivative(i)
            if not dv.is_zero() and not fields[k].is_zero():
                transported = transported + dv * fields[k]
        local = _poly_to_local(transported, occ_vars, "transported test function")
        for mono, coeff in local.items():
            rows_i.append(r)
            cols_i.append(occupation.global_index(mono))
            vals_i.append(-coeff)

        # initial side: Dirac in time at 0, so only time-free tests
        if row.time_degree == 0 and uncertain:
            pin_entries.append((r, initial.global_index(row.param_part), row.state_part))
        # known case: handled through the right-hand side

    extra_rows = ["initial-mass"] if uncertain else []
    if uncertain:
        rows_i.append(len(rows) + 0)
        cols_i.append(initial.global_index((0,) * len(params)))
        vals_i.append(1.0)

    static = (
        np.array(rows_i, dtype=np.int64),
        np.array(cols_i, dtype=np.int64),
        np.array(vals_i, dtype=float),
    )

    # --- PSD blocks --------------------------------------------------- #
    blocks: list[MomentMatrixSpec] = []

    def add_support(measure: MeasureBlock, inequalities, labels, with_time_box: bool):
        blocks.append(build_moment_matrix_spec(measure, d))
        local_ineqs, local_labels = [], []
        if with_time_box:
            local_ineqs.append(_time_box_local(len(measure.var_indices)))
            local_labels.append("time-box")
        for w, lab in zip(inequalities, labels):
            local_ineqs.append(_poly_to_local(w, measure.var_indices, f"support {lab!r}"))
            local_labels.append(lab)
        blocks.extend(build_localizing_specs(measure, local_ineqs, local_labels, d))

    occ_ineqs = list(spec.path_set.inequalities) + list(spec.control_set.inequalities)
    occ_labels = [f"path[{k}]" for k in range(len(spec.path_set.inequalities))] + [
        f"control[{k}]" for k in range(len(spec.control_set.inequalities))
    ]
    add_support(occupation, occ_ineqs, occ_labels, with_time_box=True)

    ter_ineqs = list(spec.terminal_set.inequalities)
    ter_labels = [f"terminal[{k}]" for k in range(len(ter_ineqs))]
    add_support(terminal, ter_ineqs, ter_labels, with_time_box=True)

    if uncertain:
        init_ineqs, init_labels = [], []
        for name, lo, hi in spec.parameter_box:
            z = Polynomial.variable(space, name)
            init_ineqs.append((z - lo) * (hi - z))
            init_labels.append(f"uncertainty[{name}]")
        add_support(initial, init_ineqs, init_labels, with_time_box=False)

    report.notes.append(
        f"measures: " + ", ".join(f"{m.name}({m.size})" for m in measures.values())
    )
    report.notes.append(f"time-dependent test functions included (cap {report.test_cap})")

    return RelaxedProblem(
        spec=spec,
        order=d,
        measures=measures,
        blocks=blocks,
        rows=rows,
        extra_row_labels=extra_rows,
        nvars=offset,
        objective_index=objective_index,
        report=report,
        _static_entries=static,
        _pin_entries=pin_entries,
    )


def _expand_mono(local: tuple[int, ...], var_indices: tuple[int, ...], dim: int) -> tuple[int, ...]:
    full = [0] * dim
    for i, e in zip(var_indices, local):
        full[i] = e
    return tuple(full)


def assemble_known(spec: OcpSpec, d: int) -> RelaxedProblem:
    """Relaxation for a fully parametrized system: the initial measure is the
    Dirac at the factual, substituted into the equality right-hand sides."""
    if spec.parameter_box:
        raise StructuralError(
            "spec carries a parameter box; use assemble_uncertain or pin the parameters"
        )
    return _assemble(spec, d, uncertain=False)


def assemble_uncertain(spec: OcpSpec, d: int) -> RelaxedProblem:
    """Relaxation for a parameter-extended system: the initial measure's
    parameter marginal is free over the uncertainty box with unit mass, while
    its state components stay pinned to the factual."""
    if not spec.extended or not spec.parameter_box:
        raise StructuralError("assemble_uncertain needs a parameter-extended spec")
    return _assemble(spec, d, uncertain=True)


def to_conic(problem: RelaxedProblem, factual=None):
    """Lower the relaxation into the solver-neutral conic form."""
    from .sdpsolve import BlockSpec, ConicProblem

    A, b = problem.equality_system(factual)
    blocks = [
        BlockSpec(
            side=blk.side,
            entry_pos=blk.entry_pos,
            var_idx=blk.var_idx,
            coefs=blk.coefs,
            label=f"{blk.measure}:{blk.multiplier_label}",
        )
        for blk in problem.blocks
    ]
    return ConicProblem(c=problem.objective_vector(), A=A, b=b, blocks=blocks)


# ---------------------------------------------------------------------- #
# empirical moments of a simulated trajectory (assembly correctness oracle)


def trajectory_moment_vector(problem: RelaxedProblem, ts: np.ndarray, xs: np.ndarray,
                             us: np.ndarray, params: Sequence[float] = ()) -> np.ndarray:
    """Moment vector induced by one admissible trajectory.

    Occupation moments integrate monomials along (t, x(t)[, zeta], u(t)) by
    trapezoidal quadrature; terminal moments evaluate at the endpoint; the
    initial measure (uncertain case) is the Dirac at the supplied parameters.
    Feeding the result into the equality system should give residuals at
    quadrature accuracy: that is the assembly's strongest correctness check.
    """
    y = np.zeros(problem.nvars)
    occ = problem.measures["occupation"]
    ter = problem.measures["terminal"]
    npts = len(ts)
    cols = np.zeros((npts, len(occ.var_indices)))
    cols[:, 0] = ts
    nd = xs.shape[1]
    cols[:, 1:1 + nd] = xs
    if params is not None and len(params) and nd == xs.shape[1]:
        pass  # parameters ride inside xs for extended specs
    cols[:, 1 + nd:] = us.reshape(npts, -1)
    for mono, k in occ.index.items():
        vals = np.prod(cols ** np.array(mono), axis=1)
        y[occ.offset + k] = np.trapz(vals, ts)
    end = np.concatenate([[ts[-1]], xs[-1]])
    for mono, k in ter.index.items():
        y[ter.offset + k] = _power_product(end, mono)
    if problem.is_uncertain:
        init = problem.measures["initial"]
        for mono, k in init.index.items():
            y[init.offset + k] = _power_product(params, mono)
    return y
