"""Sparse multivariate polynomial arithmetic over a declared variable space.

Polynomials are stored as maps from exponent tuples to float coefficients.
All dynamics, cost functionals, set descriptions and value functions in this
package are instances of :class:`Polynomial` over a shared :class:`VarSpace`.

Conventions:
  * variables are referenced by index after construction; names are for I/O,
  * monomials are ordered graded-lexicographically (degree first, then lex),
  * coefficients with magnitude below ``COEFF_DROP`` are pruned after every
    arithmetic operation so term maps never accumulate rounding residue.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

# Magnitude below which a coefficient is treated as an exact zero.
COEFF_DROP = 1e-14

ROLES = ("time", "state", "control", "parameter")


class StructuralError(ValueError):
    """Raised for malformed inputs: mismatched spaces, unknown variables,
    inconsistent dimensions."""


@dataclass(frozen=True)
class Variable:
    """A named scalar variable with a role and physical scale bounds."""

    name: str
    role: str
    unit: str = ""
    bounds: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.role not in ROLES:
            raise StructuralError(f"unknown role {self.role!r} for variable {self.name!r}")
        lo, hi = self.bounds
        if not lo < hi:
            raise StructuralError(f"variable {self.name!r} needs bounds lo < hi, got {self.bounds}")


class VarSpace:
    """Ordered collection of variables shared by a family of polynomials."""

    def __init__(self, variables: Iterable[Variable]):
        self.variables: tuple[Variable, ...] = tuple(variables)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate variable names in {names}")
        times = [i for i, v in enumerate(self.variables) if v.role == "time"]
        if len(times) > 1:
            raise StructuralError("at most one variable may have role 'time'")
        self._index = {v.name: i for i, v in enumerate(self.variables)}
        self.time_index: int | None = times[0] if times else None

    @property
    def dim(self) -> int:
        return len(self.variables)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise StructuralError(f"unknown variable {name!r}") from None

    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def indices_with_role(self, role: str) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.variables) if v.role == role)

    @property
    def state_indices(self) -> tuple[int, ...]:
        return self.indices_with_role("state")

    @property
    def control_indices(self) -> tuple[int, ...]:
        return self.indices_with_role("control")

    @property
    def parameter_indices(self) -> tuple[int, ...]:
        return self.indices_with_role("parameter")

    def __eq__(self, other) -> bool:
        return isinstance(other, VarSpace) and self.variables == other.variables

    def __hash__(self) -> int:
        return hash(self.variables)

    def __repr__(self) -> str:
        return "VarSpace(" + ", ".join(f"{v.name}:{v.role}" for v in self.variables) + ")"


def grlex_key(mono: tuple[int, ...]) -> tuple:
    """Sort key for graded lexicographic order (degree, then lex with the
    earlier variable ranked higher)."""
    return (sum(mono), tuple(-e for e in mono))


def monomial_mul(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(x + y for x, y in zip(a, b))


class Polynomial:
    """Sparse polynomial: map from exponent tuple to coefficient."""

    __slots__ = ("space", "terms", "_eval_cache")

    def __init__(self, space: VarSpace, terms: Mapping[tuple[int, ...], float] | None = None):
        self.space = space
        clean: dict[tuple[int, ...], float] = {}
        if terms:
            for mono, coeff in terms.items():
                if len(mono) != space.dim:
                    raise StructuralError(
                        f"monomial {mono} has {len(mono)} exponents, space has {space.dim} variables"
                    )
                c = float(coeff)
                if abs(c) > COEFF_DROP:
                    clean[tuple(int(e) for e in mono)] = c
        self.terms = clean
        self._eval_cache = None

    # ------------------------------------------------------------------ #
    # constructors

    @classmethod
    def zero(cls, space: VarSpace) -> "Polynomial":
        return cls(space, {})

    @classmethod
    def constant(cls, space: VarSpace, value: float) -> "Polynomial":
        return cls(space, {(0,) * space.dim: value})

    @classmethod
    def variable(cls, space: VarSpace, name: str) -> "Polynomial":
        exps = [0] * space.dim
        exps[space.index(name)] = 1
        return cls(space, {tuple(exps): 1.0})

    # ------------------------------------------------------------------ #
    # basic queries

    @property
    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def degree_in(self, var_index: int) -> int:
        if not self.terms:
            return 0
        return max((m[var_index] for m in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, mono: tuple[int, ...]) -> float:
        return self.terms.get(tuple(mono), 0.0)

    # ------------------------------------------------------------------ #
    # arithmetic

    def _check_space(self, other: "Polynomial"):
        if self.space != other.space:
            raise StructuralError("polynomials live in different variable spaces")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.space, other)
        self._check_space(other)
        out = dict(self.terms)
        for mono, coeff in other.terms.items():
            out[mono] = out.get(mono, 0.0) + coeff
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.space, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.space, {m: c * other for m, c in self.terms.items()})
        self._check_space(other)
        out: dict[tuple[int, ...], float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                mono = monomial_mul(m1, m2)
                out[mono] = out.get(mono, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise StructuralError("polynomial powers must be nonnegative integers")
        result = Polynomial.constant(self.space, 1.0)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    # ------------------------------------------------------------------ #
    # calculus

    def partial_derivative(self, var: str | int) -> "Polynomial":
        idx = var if isinstance(var, int) else self.space.index(var)
        if not 0 <= idx < self.space.dim:
            raise StructuralError(f"variable index {idx} out of range")
        out: dict[tuple[int, ...], float] = {}
        for mono, coeff in self.terms.items():
            e = mono[idx]
            if e == 0:
                continue
            new = list(mono)
            new[idx] = e - 1
            key = tuple(new)
            out[key] = out.get(key, 0.0) + coeff * e
        return Polynomial(self.space, out)

    # ------------------------------------------------------------------ #
    # evaluation

    def _compiled(self):
        if self._eval_cache is None:
            if self.terms:
                monos = np.array(list(self.terms.keys()), dtype=np.int64)
                coeffs = np.array(list(self.terms.values()), dtype=float)
            else:
                monos = np.zeros((0, self.space.dim), dtype=np.int64)
                coeffs = np.zeros(0)
            self._eval_cache = (monos, coeffs)
        return self._eval_cache

    def evaluate(self, point: Sequence[float]) -> float:
        if len(point) != self.space.dim:
            raise StructuralError(
                f"point has dimension {len(point)}, space has {self.space.dim}"
            )
        total = 0.0
        for mono, coeff in self.terms.items():
            value = coeff
            for x, e in zip(point, mono):
                if e:
                    value *= x**e
            total += value
        return total

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on an (npoints, dim) array."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.space.dim:
            raise StructuralError(f"expected (n, {self.space.dim}) array, got {points.shape}")
        monos, coeffs = self._compiled()
        if coeffs.size == 0:
            return np.zeros(points.shape[0])
        # (n, nterms): product over variables of point**exponent
        powers = points[:, None, :] ** monos[None, :, :]
        return powers.prod(axis=2) @ coeffs

    # ------------------------------------------------------------------ #
    # substitution

    def affine_substitute(self, transforms: Mapping[int, tuple[float, float]],
                          target: VarSpace | None = None) -> "Polynomial":
        """Substitute ``x_i = a_i * x̂_i + b_i`` for every variable.

        ``transforms`` maps variable index to ``(a, b)`` and must cover every
        variable appearing in the polynomial.  The result lives in ``target``
        (same dimension) or in the original space when omitted.
        """
        space = target if target is not None else self.space
        if space.dim != self.space.dim:
            raise StructuralError("target space dimension mismatch")
        for mono in self.terms:
            for i, e in enumerate(mono):
                if e and i not in transforms:
                    raise StructuralError(
                        f"no affine transform supplied for variable {self.space.variables[i].name!r}"
                    )
        result = Polynomial.zero(space)
        for mono, coeff in self.terms.items():
            term = Polynomial.constant(space, coeff)
            for i, e in enumerate(mono):
                if e == 0:
                    continue
                a, b = transforms[i]
                exps = [0] * space.dim
                exps[i] = 1
                factor = Polynomial(space, {tuple(exps): a, (0,) * space.dim: b})
                term = term * factor**e
            result = result + term
        return result

    def rebased(self, target: VarSpace, index_map: Sequence[int]) -> "Polynomial":
        """Re-express over ``target`` where ``index_map[i]`` gives the target
        index of this space's variable ``i``."""
        out: dict[tuple[int, ...], float] = {}
        for mono, coeff in self.terms.items():
            exps = [0] * target.dim
            for i, e in enumerate(mono):
                if e:
                    exps[index_map[i]] = e
            key = tuple(exps)
            out[key] = out.get(key, 0.0) + coeff
        return Polynomial(target, out)

    # ------------------------------------------------------------------ #
    # text format:  coeff*name^exp*name^exp + ...

    def __str__(self) -> str:
        return format_polynomial(self)

    def __repr__(self) -> str:
        return f"Polynomial({format_polynomial(self)!r})"


def lie_derivative(v: Polynomial, field: Sequence[Polynomial],
                   field_indices: Sequence[int], include_time: bool = False) -> Polynomial:
    """Derivative of ``v`` along a vector field.

    ``field[k]`` is the time derivative of the variable at ``field_indices[k]``
    (states first, then any appended parameters with identically zero
    entries).  With ``include_time`` the formal d/dt term is added, which is
    the transport operator used in the measure-space dynamics constraint.
    """
    if len(field) != len(field_indices):
        raise StructuralError(
            f"field has {len(field)} entries for {len(field_indices)} variables"
        )
    out = Polynomial.zero(v.space)
    for idx, f_i in zip(field_indices, field):
        if f_i.space != v.space:
            raise StructuralError("field entry lives in a different variable space")
        df = v.partial_derivative(idx)
        if not df.is_zero() and not f_i.is_zero():
            out = out + df * f_i
    if include_time:
        if v.space.time_index is None:
            raise StructuralError("include_time requires a time variable in the space")
        out = out + v.partial_derivative(v.space.time_index)
    return out


# ---------------------------------------------------------------------- #
# text parsing / formatting

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>[*^+-]))"
)


def _fmt_coeff(c: float) -> str:
    if c == int(c) and abs(c) < 1e16:
        return str(int(c))
    return repr(c)


def format_polynomial(p: Polynomial) -> str:
    """Render in the config-file text format, e.g. ``-0.05*x2 + 2.85e-05*x3``."""
    if not p.terms:
        return "0"
    names = p.space.names()
    pieces = []
    for mono in sorted(p.terms, key=grlex_key):
        coeff = p.terms[mono]
        factors = [f"{names[i]}^{e}" if e > 1 else names[i]
                   for i, e in enumerate(mono) if e > 0]
        if not factors:
            body = _fmt_coeff(abs(coeff))
        elif abs(abs(coeff) - 1.0) < 1e-300:
            body = "*".join(factors)
        else:
            body = "*".join([_fmt_coeff(abs(coeff))] + factors)
        sign = "-" if coeff < 0 else "+"
        pieces.append((sign, body))
    first_sign, first_body = pieces[0]
    text = ("-" if first_sign == "-" else "") + first_body
    for sign, body in pieces[1:]:
        text += f" {sign} {body}"
    return text


def parse_polynomial(text: str, space: VarSpace) -> Polynomial:
    """Parse the text format: sum of terms ``coeff*name^exp*...``."""
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise StructuralError(f"cannot parse polynomial near {text[pos:pos+20]!r}")
            break
        tokens.append((m.lastgroup, m.group(m.lastgroup)))
        pos = m.end()

    terms: dict[tuple[int, ...], float] = {}
    i = 0
    n = len(tokens)

    def flush(coeff, exps):
        key = tuple(exps)
        terms[key] = terms.get(key, 0.0) + coeff

    while i < n:
        sign = 1.0
        while i < n and tokens[i][0] == "op" and tokens[i][1] in "+-":
            if tokens[i][1] == "-":
                sign = -sign
            i += 1
        if i >= n:
            if sign != 1.0:
                raise StructuralError("dangling sign in polynomial text")
            break
        coeff = sign
        exps = [0] * space.dim
        expect_factor = True
        while i < n:
            kind, val = tokens[i]
            if kind == "num":
                coeff *= float(val)
                i += 1
            elif kind == "name":
                idx = space.index(val)
                power = 1
                i += 1
                if i < n and tokens[i] == ("op", "^"):
                    if i + 1 >= n or tokens[i + 1][0] != "num":
                        raise StructuralError(f"expected exponent after '^' in {text!r}")
                    power = int(float(tokens[i + 1][1]))
                    i += 2
                exps[idx] += power
            elif kind == "op" and val == "*":
                i += 1
                continue
            else:
                break
            expect_factor = False
        if expect_factor:
            raise StructuralError(f"empty term in polynomial text {text!r}")
        flush(coeff, exps)
    return Polynomial(space, terms)
