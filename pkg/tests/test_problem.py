"""Problem builder tests: validation, evaluation, the text format and compilation."""

import numpy as np
import pytest

from ecoshift.lp_solver import solve_lp
from ecoshift.problem import PiecewiseCost, ProblemFormatError, ProblemSpec


@pytest.fixture
def small_spec() -> ProblemSpec:
    spec = ProblemSpec()
    x = spec.add_variable("x", 0.0, 10.0)
    y = spec.add_variable("y", -5.0, 5.0)
    g = spec.add_variable("g", binary=True)
    lam = [spec.add_variable(f"lam[{i}]", 0.0, 1.0) for i in range(3)]
    spec.add_row("cap", {x: 1.0, y: 1.0}, "<=", 8.0)
    spec.add_row("floor", [(x, 1.0), (g, -2.0)], ">=", 1.0)
    spec.add_row("lam_sum", {j: 1.0 for j in lam}, "==", 1.0)
    spec.add_sos2("lam", lam, [0.0, 1.0, 2.0])
    spec.add_objective(y, -1.0)
    spec.add_objective(g, 3.0)
    spec.add_piecewise_cost("x_cost", x, [0.0, 2.0, 4.0], [0.0, 1.0, 4.0], weight=2.0)
    spec.constant = 1.5
    return spec


class TestBuilder:
    def test_indices_follow_declaration(self, small_spec):
        assert small_spec.index("x") == 0
        assert small_spec.index("lam[2]") == 5
        assert small_spec.binaries == [2]
        assert small_spec.n_vars == 6

    def test_binary_bounds_are_clipped(self):
        spec = ProblemSpec()
        spec.add_variable("b", -3.0, 7.0, binary=True)
        assert spec.variables[0][1:3] == (0.0, 1.0)

    @pytest.mark.parametrize("name", ["", "has space", "a:b"])
    def test_invalid_names(self, name):
        with pytest.raises(ProblemFormatError, match="Invalid name"):
            ProblemSpec().add_variable(name)

    def test_duplicate_variable(self):
        spec = ProblemSpec()
        spec.add_variable("x")
        with pytest.raises(ProblemFormatError, match="Duplicate"):
            spec.add_variable("x")

    def test_crossed_bounds(self):
        with pytest.raises(ProblemFormatError, match="bounds"):
            ProblemSpec().add_variable("x", 2.0, 1.0)

    def test_repeated_row_coefficients_are_summed(self):
        spec = ProblemSpec()
        x = spec.add_variable("x")
        spec.add_row("r", [(x, 1.0), (x, 2.0)], "<=", 3.0)
        assert spec.rows[0].coeffs == ((0, 3.0),)

    def test_row_checks(self):
        spec = ProblemSpec()
        x = spec.add_variable("x")
        with pytest.raises(ProblemFormatError, match="sense"):
            spec.add_row("r", {x: 1.0}, "<", 1.0)
        with pytest.raises(ProblemFormatError, match="undeclared"):
            spec.add_row("r", {4: 1.0}, "<=", 1.0)
        with pytest.raises(ProblemFormatError, match="non-finite"):
            spec.add_row("r", {x: 1.0}, "<=", np.inf)

    def test_non_convex_piecewise_rejected(self):
        spec = ProblemSpec()
        x = spec.add_variable("x")
        with pytest.raises(ProblemFormatError, match="convex"):
            spec.add_piecewise_cost("f", x, [0.0, 1.0, 2.0], [0.0, 2.0, 3.0])

    def test_sos2_references_must_increase(self):
        spec = ProblemSpec()
        cols = [spec.add_variable(f"l{i}") for i in range(3)]
        with pytest.raises(ProblemFormatError, match="increase"):
            spec.add_sos2("s", cols, [0.0, 2.0, 1.0])


class TestEvaluation:
    def test_objective_value(self, small_spec):
        x = np.array([3.0, 2.0, 1.0, 0.0, 1.0, 0.0])
        # 1.5 - 2 + 3 + 2 * 2.5
        assert small_spec.objective_value(x) == pytest.approx(7.5)

    def test_piecewise_extends_end_segments(self):
        term = PiecewiseCost("f", 0, 1.0, (0.0, 2.0, 4.0), (0.0, 1.0, 4.0))
        assert term.value(5.0) == pytest.approx(5.5)
        assert term.value(-2.0) == pytest.approx(-1.0)

    def test_max_violation(self, small_spec):
        feasible = np.array([3.0, 2.0, 1.0, 0.0, 1.0, 0.0])
        assert small_spec.max_violation(feasible) == 0.0
        broken = np.array([3.0, 6.0, 1.0, 0.5, 1.0, 0.0])
        # cap row off by 1, y bound off by 1, lam_sum off by 0.5
        assert small_spec.max_violation(broken) == pytest.approx(1.0)


class TestTextFormat:
    def test_dump_load_dump_is_stable(self, small_spec):
        text = small_spec.dumps()
        assert text.startswith("# ecoshift problem v1\n")
        again = ProblemSpec.loads(text)
        assert again.dumps() == text
        assert again.constant == 1.5
        assert again.sos2[0].reference == (0.0, 1.0, 2.0)

    def test_infinite_bounds_survive(self):
        spec = ProblemSpec()
        spec.add_variable("z", -np.inf, np.inf)
        again = ProblemSpec.loads(spec.dumps())
        assert again.variables[0].lb == -np.inf
        assert again.variables[0].ub == np.inf

    def test_error_names_line(self):
        text = "# ecoshift problem v1\nvar x 0.0 1.0 C\nrow r <= 1.0 y:1.0\n"
        with pytest.raises(ProblemFormatError) as excinfo:
            ProblemSpec.loads(text)
        assert excinfo.value.line == 3
        assert "Unknown variable 'y'" in str(excinfo.value)

    @pytest.mark.parametrize(
        "line",
        ["var x 0.0 1.0 Q", "var x zero 1.0 C", "bogus x", "const 1 2"],
    )
    def test_malformed_declarations(self, line):
        with pytest.raises(ProblemFormatError) as excinfo:
            ProblemSpec.loads(line + "\n")
        assert excinfo.value.line == 1


class TestCompile:
    def test_epigraph_and_row_split(self, small_spec):
        compiled = small_spec.compile()
        lp = compiled.lp
        assert compiled.n_structural == 6
        assert lp.n == 7
        # cap, floor and one secant row per piecewise segment
        assert lp.A_ub.shape == (4, 7)
        assert lp.A_eq.shape == (1, 7)
        assert compiled.binaries.tolist() == [2]
        assert compiled.sos2[0].tolist() == [3, 4, 5]
        assert lp.c[6] == 2.0
        assert lp.lb[6] == -np.inf

    def test_relaxation_prices_piecewise_exactly(self, small_spec):
        compiled = small_spec.compile()
        result = solve_lp(compiled.lp)
        assert result.optimal
        x = result.x[: compiled.n_structural]
        assert compiled.objective(result.x) == pytest.approx(small_spec.objective_value(x), abs=1e-7)
        assert small_spec.max_violation(x) <= 1e-7
