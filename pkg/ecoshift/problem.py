"""
Solver-neutral mixed-integer problem representation for ecoshift.

A ``ProblemSpec`` holds named variables (continuous or binary) with bounds,
linear rows, SOS2 sets, a linear objective and convex piecewise-linear
objective terms. It serialises to a line-oriented text format for offline
debugging and cross-checking against external solvers::

    # ecoshift problem v1
    var <name> <lb> <ub> <C|B>
    row <name> <<=|>=|==> <rhs> <var>:<coef> ...
    sos2 <name> <var>:<reference> ...
    obj <var> <coef>
    pwl <name> <var> <weight> <x>:<y> ...
    const <value>

``compile()`` lowers the spec to a ``LinearProgram`` relaxation; each convex
piecewise-linear term becomes an epigraph column bounded below by one secant
row per segment.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .lp_solver import LinearProgram

logger = logging.getLogger(__name__)

HEADER = "# ecoshift problem v1"
SENSES = ("<=", ">=", "==")


class ProblemFormatError(ValueError):
    """Exception for malformed problem specs or problem text."""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class Variable(NamedTuple):
    name: str
    lb: float
    ub: float
    binary: bool = False


class Row(NamedTuple):
    name: str
    coeffs: Tuple[Tuple[int, float], ...]
    sense: str
    rhs: float


class Sos2Set(NamedTuple):
    """Ordered weights of which at most two adjacent may be nonzero."""

    name: str
    members: Tuple[int, ...]
    reference: Tuple[float, ...]


class PiecewiseCost(NamedTuple):
    """``weight * f(x)`` with ``f`` convex and piecewise linear through (x, y)."""

    name: str
    var: int
    weight: float
    x: Tuple[float, ...]
    y: Tuple[float, ...]

    def value(self, at: float) -> float:
        """Evaluate the term, extending the end segments linearly."""
        xs, ys = np.asarray(self.x), np.asarray(self.y)
        if at <= xs[0]:
            slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
            return self.weight * float(ys[0] + slope * (at - xs[0]))
        if at >= xs[-1]:
            slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            return self.weight * float(ys[-1] + slope * (at - xs[-1]))
        return self.weight * float(np.interp(at, xs, ys))


@dataclass(eq=False)
class CompiledProblem:
    """LP relaxation plus the discrete structure needed for branching.

    Columns ``[0, n_structural)`` are the spec's variables in declaration
    order; the remaining columns are epigraph variables.
    """

    lp: LinearProgram
    n_structural: int
    binaries: np.ndarray
    sos2: List[np.ndarray]
    constant: float = 0.0

    def objective(self, x: np.ndarray) -> float:
        return float(self.lp.c @ x) + self.constant


def _check_name(name: str) -> str:
    if not name or any(ch.isspace() for ch in name) or ":" in name:
        raise ProblemFormatError(f"Invalid name {name!r}: no whitespace or ':' allowed")
    return name


def _fmt(value: float) -> str:
    return repr(float(value))


@dataclass(eq=False)
class ProblemSpec:
    """Mutable builder for a mixed-integer linear program."""

    variables: List[Variable] = field(default_factory=list)
    rows: List[Row] = field(default_factory=list)
    sos2: List[Sos2Set] = field(default_factory=list)
    linear: Dict[int, float] = field(default_factory=dict)
    piecewise: List[PiecewiseCost] = field(default_factory=list)
    constant: float = 0.0
    _index: Dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def binaries(self) -> List[int]:
        return [j for j, var in enumerate(self.variables) if var.binary]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ProblemFormatError(f"Unknown variable {name!r}") from None

    def add_variable(self, name: str, lb: float = 0.0, ub: float = np.inf, binary: bool = False) -> int:
        """Declare a variable and return its column index."""
        _check_name(name)
        if name in self._index:
            raise ProblemFormatError(f"Duplicate variable {name!r}")
        if binary:
            lb, ub = max(float(lb), 0.0), min(float(ub), 1.0)
        if np.isnan(lb) or np.isnan(ub) or lb > ub:
            raise ProblemFormatError(f"Invalid bounds [{lb}, {ub}] for {name!r}")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, float(lb), float(ub), bool(binary)))
        return self._index[name]

    def add_row(
        self,
        name: str,
        coeffs: Union[Mapping[int, float], Iterable[Tuple[int, float]]],
        sense: str,
        rhs: float,
    ) -> None:
        """Add ``sum coef * x[j] <sense> rhs``; repeated indices are summed."""
        _check_name(name)
        if sense not in SENSES:
            raise ProblemFormatError(f"Unknown sense {sense!r} in row {name!r}")
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        merged: Dict[int, float] = {}
        for j, coef in items:
            if not 0 <= j < self.n_vars:
                raise ProblemFormatError(f"Row {name!r} references undeclared column {j}")
            merged[j] = merged.get(j, 0.0) + float(coef)
        if not np.isfinite(rhs) or not all(np.isfinite(list(merged.values()))):
            raise ProblemFormatError(f"Row {name!r} has non-finite data")
        self.rows.append(Row(name, tuple(merged.items()), sense, float(rhs)))

    def add_sos2(self, name: str, members: Sequence[int], reference: Sequence[float]) -> None:
        _check_name(name)
        if len(members) != len(reference) or len(members) < 2:
            raise ProblemFormatError(f"SOS2 set {name!r} needs matching members and references")
        if np.any(np.diff(reference) <= 0):
            raise ProblemFormatError(f"SOS2 set {name!r} references must increase")
        for j in members:
            if not 0 <= j < self.n_vars:
                raise ProblemFormatError(f"SOS2 set {name!r} references undeclared column {j}")
        self.sos2.append(Sos2Set(name, tuple(members), tuple(float(r) for r in reference)))

    def add_objective(self, j: int, coef: float) -> None:
        if not 0 <= j < self.n_vars:
            raise ProblemFormatError(f"Objective references undeclared column {j}")
        self.linear[j] = self.linear.get(j, 0.0) + float(coef)

    def add_piecewise_cost(
        self, name: str, j: int, x: Sequence[float], y: Sequence[float], weight: float = 1.0
    ) -> None:
        """Add ``weight * f(x[j])`` for a convex breakpoint curve."""
        _check_name(name)
        xs, ys = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if xs.size < 2 or xs.size != ys.size or np.any(np.diff(xs) <= 0):
            raise ProblemFormatError(f"Piecewise term {name!r} needs increasing breakpoints")
        if weight < 0:
            raise ProblemFormatError(f"Piecewise term {name!r} needs a non-negative weight")
        slopes = np.diff(ys) / np.diff(xs)
        if np.any(np.diff(slopes) < -1e-9 * max(1.0, float(np.max(np.abs(slopes))))):
            raise ProblemFormatError(f"Piecewise term {name!r} is not convex")
        if not 0 <= j < self.n_vars:
            raise ProblemFormatError(f"Piecewise term {name!r} references undeclared column {j}")
        self.piecewise.append(PiecewiseCost(name, j, float(weight), tuple(xs), tuple(ys)))

    def objective_value(self, x: np.ndarray) -> float:
        """Exact objective of a structural assignment."""
        total = self.constant + sum(coef * x[j] for j, coef in self.linear.items())
        return float(total + sum(term.value(x[term.var]) for term in self.piecewise))

    def max_violation(self, x: np.ndarray) -> float:
        """Largest row or bound violation of a structural assignment."""
        worst = 0.0
        for var, value in zip(self.variables, x):
            worst = max(worst, var.lb - value, value - var.ub)
        for row in self.rows:
            lhs = sum(coef * x[j] for j, coef in row.coeffs)
            if row.sense == "<=":
                worst = max(worst, lhs - row.rhs)
            elif row.sense == ">=":
                worst = max(worst, row.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - row.rhs))
        return float(worst)

    def dumps(self) -> str:
        names = [var.name for var in self.variables]
        lines = [HEADER]
        for var in self.variables:
            lines.append(f"var {var.name} {_fmt(var.lb)} {_fmt(var.ub)} {'B' if var.binary else 'C'}")
        for row in self.rows:
            terms = " ".join(f"{names[j]}:{_fmt(c)}" for j, c in row.coeffs)
            lines.append(f"row {row.name} {row.sense} {_fmt(row.rhs)} {terms}".rstrip())
        for sos in self.sos2:
            terms = " ".join(f"{names[j]}:{_fmt(r)}" for j, r in zip(sos.members, sos.reference))
            lines.append(f"sos2 {sos.name} {terms}")
        for j, coef in self.linear.items():
            lines.append(f"obj {names[j]} {_fmt(coef)}")
        for term in self.piecewise:
            points = " ".join(f"{_fmt(a)}:{_fmt(b)}" for a, b in zip(term.x, term.y))
            lines.append(f"pwl {term.name} {names[term.var]} {_fmt(term.weight)} {points}")
        if self.constant:
            lines.append(f"const {_fmt(self.constant)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ProblemSpec":
        """Parse the text format.

        Raises:
            ProblemFormatError: naming the offending line
        """
        spec = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind, *fields = line.split()
            try:
                if kind == "var":
                    name, lb, ub, flag = fields
                    if flag not in ("C", "B"):
                        raise ProblemFormatError(f"Unknown variable kind {flag!r}")
                    spec.add_variable(name, float(lb), float(ub), binary=flag == "B")
                elif kind == "row":
                    name, sense, rhs, *terms = fields
                    pairs = [term.split(":") for term in terms]
                    spec.add_row(name, [(spec.index(v), float(c)) for v, c in pairs], sense, float(rhs))
                elif kind == "sos2":
                    name, *terms = fields
                    pairs = [term.split(":") for term in terms]
                    spec.add_sos2(name, [spec.index(v) for v, _ in pairs], [float(r) for _, r in pairs])
                elif kind == "obj":
                    name, coef = fields
                    spec.add_objective(spec.index(name), float(coef))
                elif kind == "pwl":
                    name, var, weight, *points = fields
                    pairs = [point.split(":") for point in points]
                    spec.add_piecewise_cost(
                        name,
                        spec.index(var),
                        [float(a) for a, _ in pairs],
                        [float(b) for _, b in pairs],
                        float(weight),
                    )
                elif kind == "const":
                    (value,) = fields
                    spec.constant = float(value)
                else:
                    raise ProblemFormatError(f"Unknown declaration {kind!r}")
            except ProblemFormatError as e:
                raise ProblemFormatError(str(e), number) from e
            except ValueError as e:
                raise ProblemFormatError(f"Malformed {kind} declaration: {e}", number) from e
        return spec

    def compile(self) -> CompiledProblem:
        """Lower to a sparse LP relaxation with epigraph columns."""
        n_struct = self.n_vars
        n_total = n_struct + len(self.piecewise)
        c = np.zeros(n_total)
        for j, coef in self.linear.items():
            c[j] += coef
        lb = np.array([v.lb for v in self.variables] + [-np.inf] * len(self.piecewise))
        ub = np.array([v.ub for v in self.variables] + [np.inf] * len(self.piecewise))

        ub_rows: List[Tuple[List[int], List[float], float]] = []
        eq_rows: List[Tuple[List[int], List[float], float]] = []
        for row in self.rows:
            cols = [j for j, _ in row.coeffs]
            vals = [coef for _, coef in row.coeffs]
            if row.sense == "<=":
                ub_rows.append((cols, vals, row.rhs))
            elif row.sense == ">=":
                ub_rows.append((cols, [-v for v in vals], -row.rhs))
            else:
                eq_rows.append((cols, vals, row.rhs))

        for k, term in enumerate(self.piecewise):
            z = n_struct + k
            c[z] = term.weight
            xs, ys = np.asarray(term.x), np.asarray(term.y)
            slopes = np.diff(ys) / np.diff(xs)
            # z >= y_i + s_i (x - x_i)
            for i, slope in enumerate(slopes):
                ub_rows.append(([term.var, z], [float(slope), -1.0], float(slope * xs[i] - ys[i])))

        lp = LinearProgram(
            c=c,
            A_ub=_assemble(ub_rows, n_total),
            b_ub=np.array([rhs for *_, rhs in ub_rows]),
            A_eq=_assemble(eq_rows, n_total),
            b_eq=np.array([rhs for *_, rhs in eq_rows]),
            lb=lb,
            ub=ub,
        )
        logger.debug(
            "Compiled problem: %d columns, %d inequality rows, %d equality rows, %d SOS2 sets",
            n_total,
            len(ub_rows),
            len(eq_rows),
            len(self.sos2),
        )
        return CompiledProblem(
            lp=lp,
            n_structural=n_struct,
            binaries=np.asarray(self.binaries, dtype=int),
            sos2=[np.asarray(s.members, dtype=int) for s in self.sos2],
            constant=self.constant,
        )


def _assemble(rows: List[Tuple[List[int], List[float], float]], n_cols: int) -> sp.csr_matrix:
    indptr = [0]
    indices: List[int] = []
    data: List[float] = []
    for cols, vals, _ in rows:
        indices.extend(cols)
        data.extend(vals)
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=float), np.asarray(indices, dtype=int), np.asarray(indptr)),
        shape=(len(rows), n_cols),
    )
