"""Sum expansion, independent components, naming and scalar lowering."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorc.tensor_ir import (
    DOWN,
    Expr,
    Index,
    SymbolTable,
    parse_expression,
    substitute_literal,
    unparse,
)
from tensorc.component_expander import (
    ComponentEquation,
    ExpansionError,
    TensorEquation,
    component_canonical,
    component_name,
    constant_component_value,
    derivative_name,
    eval_scalar,
    expand_sums,
    independent_components,
    layout_for,
    scalar_names,
    scalar_text,
    scalarize,
    to_component_equations,
)

from oracle import (
    array_from_values,
    eval_expr,
    random_array,
    scalar_env_from_arrays,
)
from genexpr import make_table, random_equation


@pytest.fixture
def table():
    return make_table()


class TestIndependentComponents:
    def test_symmetric_rank2(self, table):
        assert independent_components(table.lookup("E")) == [
            (1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3),
        ]

    def test_antisymmetric_rank2(self, table):
        assert independent_components(table.lookup("F")) == [
            (2, 1), (3, 1), (3, 2),
        ]

    def test_plain_rank2(self, table):
        assert len(independent_components(table.lookup("T"))) == 9

    def test_vector_and_scalar(self, table):
        assert independent_components(table.lookup("v")) == [(1,), (2,), (3,)]
        assert independent_components(table.lookup("phi")) == [()]

    def test_spacetime_range(self):
        t = SymbolTable()
        t.declare_tensor("u", ["spacetime"])
        assert independent_components(t.lookup("u")) == [(0,), (1,), (2,), (3,)]

    def test_layout_resolve(self, table):
        lay = layout_for(table.lookup("F"))
        assert lay.components == ((2, 1), (3, 1), (3, 2))
        assert lay.resolve((1, 2)) == ((2, 1), -1)
        assert lay.resolve((1, 1))[1] == 0


class TestNaming:
    def test_symmetric_access(self, table):
        E = table.lookup("E")
        assert component_name(E, (1, 1)) == ("E11", 1)
        assert component_name(E, (1, 2)) == ("E21", 1)
        assert component_name(E, (2, 1)) == ("E21", 1)

    def test_antisymmetric_access(self, table):
        F = table.lookup("F")
        assert component_name(F, (1, 2)) == ("F21", -1)
        assert component_name(F, (2, 1)) == ("F21", 1)
        assert component_name(F, (3, 3)) == (None, 0)

    def test_scalar_name(self, table):
        assert component_name(table.lookup("phi"), ()) == ("phi", 1)

    def test_out_of_range(self, table):
        with pytest.raises(ExpansionError):
            component_name(table.lookup("E"), (0, 1))

    def test_derivative_name(self):
        assert derivative_name(1, "B12") == "D1B12"
        assert derivative_name(3, "phi") == "D3phi"

    def test_derivative_direction_checked(self):
        with pytest.raises(ExpansionError):
            derivative_name(0, "E11")
        with pytest.raises(ExpansionError):
            derivative_name(4, "E11")

    def test_canonical_descending(self, table):
        canon, sign = component_canonical(table.lookup("E"), (1, 3))
        assert canon == (3, 1) and sign == 1


class TestConstantValues:
    def test_levicivita(self, table):
        eps = table.lookup("eps")
        assert constant_component_value(eps, (1, 2, 3)) == 1
        assert constant_component_value(eps, (2, 1, 3)) == -1
        assert constant_component_value(eps, (3, 1, 2)) == 1
        assert constant_component_value(eps, (1, 1, 2)) == 0

    def test_kronecker(self, table):
        d = table.lookup("delta")
        assert constant_component_value(d, (2, 2)) == 1
        assert constant_component_value(d, (1, 3)) == 0

    def test_user_values_resolve_through_symmetry(self):
        t = SymbolTable()
        t.declare_tensor(
            "s", ["spatial", "spatial"], symmetries=[(0, 1, -1)],
            values={(1, 2): Fraction(5)},
        )
        s = t.lookup("s")
        assert constant_component_value(s, (1, 2)) == 5
        assert constant_component_value(s, (2, 1)) == -5
        assert constant_component_value(s, (1, 1)) == 0


class TestExpandSums:
    def test_trace(self, table):
        e = parse_expression(table, "E[l_i, u_i]")
        out = unparse(expand_sums(e))
        assert out == "E[1, u_1] + E[2, u_2] + E[3, u_3]"

    def test_mixed_spacetime_trace(self):
        t = SymbolTable()
        t.declare_tensor("T", ["spacetime", "spacetime"])
        e = parse_expression(t, "T[u_a, l_a]")
        out = expand_sums(e)
        assert len(out.terms) == 4
        assert "T[u_0, 0]" in unparse(out)

    def test_no_dummies_is_stable(self, table):
        e = parse_expression(table, "E[1, 2] * v[3]")
        assert expand_sums(e) == expand_sums(expand_sums(e))

    def test_operand_dummy_expands(self, table):
        e = parse_expression(table, "OD(E[l_k, u_k], l_i)")
        out = expand_sums(e)
        # three operand components under one derivative index each, summed
        assert len(out.terms) == 3

    def test_free_indices_survive(self, table):
        e = parse_expression(table, "E[l_i, l_j] * v[u_j]")
        out = expand_sums(e)
        labels = {i.label for t in out.terms for f in t.factors
                  for i in f.indices if not i.is_literal}
        assert labels == {"i"}


class TestScalarize:
    def test_curl_component(self, table):
        rhs = parse_expression(table, "eps[u_i, u_j, u_k] * OD(w[l_k], l_j)")
        rhs1 = Expr(tuple(substitute_literal(t, {"i": 1}) for t in rhs.terms))
        sc = scalarize(expand_sums(rhs1))
        assert scalar_text(sc) == "D2w3 - D3w2"

    def test_signs_fold_into_coefficients(self, table):
        e = parse_expression(table, "F[1, 2] + F[2, 1]")
        assert scalarize(expand_sums(e)) == ()

    def test_antisymmetric_diagonal_drops(self, table):
        e = parse_expression(table, "F[1, 1] * v[2]")
        assert scalarize(expand_sums(e)) == ()

    def test_powers_and_params(self, table):
        e = parse_expression(table, "phi^2 * v[1]")
        sc = scalarize(expand_sums(e))
        assert scalar_text(sc) == "phi^2*v1"
        assert scalar_names(sc) == {"phi", "v1"}

    def test_derivative_of_constant_drops(self, table):
        e = parse_expression(table, "OD(eps[1, 2, 3], l_i) * v[u_i]")
        assert scalarize(expand_sums(e)) == ()

    def test_unexpanded_index_rejected(self, table):
        e = parse_expression(table, "v[l_i]")
        with pytest.raises(ExpansionError):
            scalarize(e)

    def test_covariant_derivative_rejected(self, table):
        e = parse_expression(table, "CD(v[1], 2)")
        with pytest.raises(ExpansionError) as exc:
            scalarize(e)
        assert "CD" in str(exc.value)

    def test_lie_derivative_rejected(self, table):
        e = parse_expression(table, "LD(w; v[1])")
        with pytest.raises(ExpansionError) as exc:
            scalarize(e)
        assert "LD" in str(exc.value)

    def test_scalar_text_forms(self, table):
        e = parse_expression(table, "-3/2 * v[1] * w[2] + v[3]")
        sc = scalarize(expand_sums(e))
        assert scalar_text(sc) == "-3/2*v1*w2 + v3"
        assert scalar_text(()) == "0"


class TestComponentEquations:
    def test_curl_equation(self, table):
        eq = TensorEquation(
            table.lookup("v"),
            (Index(DOWN, table.kind("spatial"), "i"),),
            parse_expression(table, "eps[l_i, u_j, u_k] * OD(w[l_k], l_j)"),
        )
        out = to_component_equations(eq)
        assert [c.lhs_name for c in out] == ["v1rhs", "v2rhs", "v3rhs"]
        assert scalar_text(out[0].rhs) == "D2w3 - D3w2"
        assert scalar_text(out[1].rhs) == "-D1w3 + D3w1"
        assert scalar_text(out[2].rhs) == "D1w2 - D2w1"

    def test_symmetric_lhs_components(self, table):
        eq = TensorEquation(
            table.lookup("E"),
            (
                Index(DOWN, table.kind("spatial"), "i"),
                Index(DOWN, table.kind("spatial"), "j"),
            ),
            parse_expression(table, "E[l_i, l_j] * phi"),
        )
        out = to_component_equations(eq)
        assert [c.lhs_name for c in out] == [
            "E11rhs", "E21rhs", "E22rhs", "E31rhs", "E32rhs", "E33rhs",
        ]
        assert scalar_text(out[1].rhs) == "E21*phi"

    def test_scalar_lhs(self, table):
        eq = TensorEquation(
            table.lookup("phi"), (), parse_expression(table, "v[l_i] * v[u_i]")
        )
        out = to_component_equations(eq)
        assert out[0].lhs_name == "phirhs"
        assert scalar_text(out[0].rhs) == "v1^2 + v2^2 + v3^2"

    def test_free_mismatch_rejected(self, table):
        eq = TensorEquation(
            table.lookup("v"),
            (Index(DOWN, table.kind("spatial"), "i"),),
            parse_expression(table, "w[l_j]"),
        )
        with pytest.raises(ExpansionError):
            to_component_equations(eq)

    def test_literal_lhs_rejected(self, table):
        eq = TensorEquation(
            table.lookup("v"),
            (Index(DOWN, table.kind("spatial"), value=2),),
            parse_expression(table, "w[l_i]"),
        )
        with pytest.raises(ExpansionError):
            to_component_equations(eq)


class TestOracleAgreement:
    """The generated-equation cross-check at unit-test size."""

    def test_randomized_agreement(self, table):
        rng = np.random.default_rng(42)
        syms = [table.lookup(n) for n in ("E", "F", "T", "v", "w", "phi")]
        arrays = {s.name: random_array(s, rng) for s in syms}
        arrays["eps"] = array_from_values(table.lookup("eps"))
        arrays["delta"] = array_from_values(table.lookup("delta"))
        deriv_arrays = {
            (d, s.name): random_array(s, rng)
            for s in syms
            for d in (1, 2, 3)
        }
        env = scalar_env_from_arrays(syms, arrays, deriv_arrays)
        for n in range(40):
            rank = int(rng.integers(0, 3))
            free, expr = random_equation(rng, table, rank)
            if rank == 0:
                combos = [()]
            elif rank == 1:
                combos = [(1,), (2,), (3,)]
            else:
                combos = [(a, b) for a in (1, 2, 3) for b in (1, 2, 3)]
            for combo in combos:
                binding = dict(zip([i.label for i in free], combo))
                lit = Expr(
                    tuple(substitute_literal(t, binding) for t in expr.terms)
                )
                got = eval_scalar(scalarize(expand_sums(lit)), env)
                want = eval_expr(expr, arrays, deriv_arrays, binding)
                assert abs(want - got) <= 1e-12 * max(1.0, abs(want)), unparse(expr)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_expand_preserves_value(self, seed):
        """expand_sums alone never changes the number an expression stands
        for; checked on dummy-free slices of generated equations."""
        table = make_table()
        rng = np.random.default_rng(seed)
        syms = [table.lookup(n) for n in ("E", "F", "T", "v", "w", "phi")]
        arrays = {s.name: random_array(s, rng) for s in syms}
        arrays["eps"] = array_from_values(table.lookup("eps"))
        arrays["delta"] = array_from_values(table.lookup("delta"))
        deriv_arrays = {
            (d, s.name): random_array(s, rng)
            for s in syms
            for d in (1, 2, 3)
        }
        rank = int(rng.integers(0, 3))
        free, expr = random_equation(rng, table, rank)
        combo = tuple(int(rng.integers(1, 4)) for _ in free)
        binding = dict(zip([i.label for i in free], combo))
        lit = Expr(tuple(substitute_literal(t, binding) for t in expr.terms))
        expanded = expand_sums(lit)
        a = eval_expr(lit, arrays, deriv_arrays)
        b = eval_expr(expanded, arrays, deriv_arrays)
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))
