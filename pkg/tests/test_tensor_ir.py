"""Symbol table, expression IR, parser and canonical form."""

import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorc.tensor_ir import (
    DOWN,
    UP,
    DeclarationError,
    Deriv,
    Expr,
    ExpressionError,
    Index,
    SymbolTable,
    Term,
    TensorFactor,
    canonicalize,
    free_indices,
    parse_expression,
    substitute_literal,
    symmetry_images,
    unparse,
    validate_expr,
)

from genexpr import make_table, random_equation


@pytest.fixture
def table():
    t = SymbolTable()
    t.declare_tensor("E", ["spatial", "spatial"], symmetries=[(0, 1, 1)])
    t.declare_tensor("F", ["spatial", "spatial"], symmetries=[(0, 1, -1)])
    t.declare_tensor("v", ["spatial"])
    t.declare_tensor("w", ["spatial"])
    t.declare_tensor("z", ["spatial"])
    t.declare_tensor("phi", [])
    t.declare_tensor("alpha", [], is_param=True)
    t.declare_tensor("eps", ["spatial"] * 3, values="levicivita")
    t.declare_tensor("delta", ["spatial", "spatial"], values="kronecker")
    return t


# ---------------------------------------------------------------------------
# kinds and declarations


class TestKinds:
    def test_default_kinds(self):
        t = SymbolTable()
        assert t.kind("spacetime").range() == range(0, 4)
        assert t.kind("spatial").range() == range(1, 4)
        assert t.kind_for_label("a").name == "spacetime"
        assert t.kind_for_label("i").name == "spatial"
        assert t.kind_for_label("x").name == "spatial"

    def test_user_kind(self):
        t = SymbolTable()
        t.declare_kind("frame", 1, 3, "pqrs")
        assert t.kind_for_label("q").name == "frame"

    def test_duplicate_kind_name(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_kind("spatial", 1, 3, "pq")

    def test_duplicate_letter(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_kind("frame", 1, 3, "ip")

    def test_unknown_label_letter(self):
        t = SymbolTable()
        with pytest.raises(ExpressionError):
            t.kind_for_label("p")

    def test_empty_range(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_kind("bad", 3, 1, "p")

    def test_literal_default_kind(self):
        t = SymbolTable()
        assert t.literal_default_kind().name == "spatial"
        t2 = SymbolTable(include_default_kinds=False)
        t2.declare_kind("spacetime", 0, 3, "abc")
        assert t2.literal_default_kind().name == "spacetime"


class TestDeclarations:
    def test_duplicate_tensor(self, table):
        with pytest.raises(DeclarationError):
            table.declare_tensor("E", ["spatial"])

    def test_symmetry_out_of_range(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor("A", ["spatial", "spatial"], symmetries=[(0, 2, 1)])

    def test_symmetry_kind_mismatch(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor(
                "A", ["spacetime", "spatial"], symmetries=[(0, 1, 1)]
            )

    def test_param_must_be_scalar(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor("p", ["spatial"], is_param=True)

    def test_levicivita_shape(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor("e2", ["spatial", "spatial"], values="levicivita")

    def test_levicivita_values(self, table):
        eps = table.lookup("eps")
        assert eps.values[(1, 2, 3)] == 1
        assert eps.values[(2, 1, 3)] == -1
        assert len(eps.values) == 6
        assert eps.is_constant

    def test_kronecker_values(self, table):
        delta = table.lookup("delta")
        assert delta.values == {(1, 1): 1, (2, 2): 1, (3, 3): 1}

    def test_explicit_values_validated(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor("s", ["spatial"], values={(7,): 1})
        t.declare_tensor("s", ["spatial"], values={(3,): Fraction(1)})
        assert t.lookup("s").values[(3,)] == 1

    def test_values_and_param_exclusive(self):
        t = SymbolTable()
        with pytest.raises(DeclarationError):
            t.declare_tensor("q", [], values={(): 1}, is_param=True)


# ---------------------------------------------------------------------------
# parsing


class TestParser:
    @pytest.mark.parametrize(
        "src",
        [
            "v[l_i]",
            "E[l_i, l_j]",
            "E[1, 2]",
            "E[1, u_2]",
            "3/2*v[l_i]",
            "-v[l_i] + 2*w[l_i]",
            "phi^2*v[l_i]",
            "alpha^-1*v[l_i]",
            "eps[u_i, u_j, u_k]*v[l_j]*w[l_k]",
            "OD(v[l_i], l_j)",
            "OD(v[l_i], 2)",
            "CD(v[l_i], l_j)",
            "LD(w; v[l_i])",
            "OD(E[l_i, l_j] + F[l_i, l_j], l_k)",
        ],
    )
    def test_round_trip(self, table, src):
        e = parse_expression(table, src)
        again = parse_expression(table, unparse(e))
        assert canonicalize(again) == canonicalize(e)

    def test_literal_is_down(self, table):
        e = parse_expression(table, "v[2]")
        idx = e.terms[0].factors[0].indices[0]
        assert idx.is_literal and idx.value == 2 and idx.variance == DOWN

    def test_up_literal(self, table):
        e = parse_expression(table, "v[u_2]")
        assert e.terms[0].factors[0].indices[0].variance == UP

    def test_comment_and_whitespace(self, table):
        e = parse_expression(table, "v[l_i]  # trailing note\n + w[l_i]")
        assert len(e.terms) == 2

    def test_unknown_symbol(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "nope[l_i]")

    def test_wrong_arity(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i, l_j]")

    def test_zero_power(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "phi^0")

    def test_power_needs_literal_indices(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i]^2")

    def test_unbalanced(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "OD(v[l_i], l_j")

    def test_trailing_garbage(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i] )")

    def test_wildcard_needs_flag(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[w_i]")
        e = parse_expression(table, "v[w_i] * w[w_i]", allow_wildcards=True)
        assert e.terms[0].factors[0].indices[0].variance == "w"

    def test_literal_out_of_range(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[0]")

    def test_triple_label(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i] * w[l_i] * z[l_i]")

    def test_same_variance_pair(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i] * w[l_i]")

    def test_inconsistent_free_indices(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_i] + w[l_j]")

    def test_kind_mismatch_in_slot(self, table):
        with pytest.raises(ExpressionError):
            parse_expression(table, "v[l_a]")


# ---------------------------------------------------------------------------
# canonical form


def canon_text(table, src):
    return unparse(canonicalize(parse_expression(table, src)))


class TestCanonicalize:
    @pytest.mark.parametrize(
        "src,want",
        [
            ("E[2,1]", "E[1, 2]"),
            ("F[2,1]", "-F[1, 2]"),
            ("F[1,1]", "0"),
            ("E[l_i, u_i] - E[u_j, l_j]", "0"),
            ("v[l_i]*w[u_i] - w[u_k]*v[l_k]", "0"),
            ("phi*phi", "phi^2"),
            ("2*v[l_i] - v[l_i] - v[l_i]", "0"),
            ("OD(v[l_i] + w[l_i], l_j) - OD(v[l_i], l_j) - OD(w[l_i], l_j)", "0"),
            ("v[u_i]*v[u_j]*E[l_i,l_j] - v[u_j]*v[u_i]*E[l_j,l_i]", "0"),
            ("eps[1,2,3] - 1*eps[1,2,3]", "0"),
        ],
    )
    def test_examples(self, table, src, want):
        assert canon_text(table, src) == want

    def test_antisymmetric_dummy_pair_collapses(self, table):
        # eps is antisymmetric in (j, k); E symmetric: contraction dies
        assert canon_text(table, "eps[u_i, u_j, u_k]*E[l_j, l_k]") == "0"

    def test_idempotent_on_fixture(self, table):
        e = parse_expression(
            table, "v[u_i]*E[l_i,l_j]*w[u_j]*z[l_k]*v[u_k] + 3*F[l_m,l_x]*v[u_m]*w[u_x]"
        )
        c = canonicalize(e)
        assert canonicalize(c) == c

    def test_factor_shuffle_invariance(self, table):
        e = parse_expression(
            table,
            "v[u_i]*E[l_i,l_j]*w[u_j]*z[l_k]*v[u_k] + 3*F[l_m,l_x]*v[u_m]*w[u_x]",
        )
        base = canonicalize(e)
        rng = random.Random(11)
        for _ in range(25):
            ts = []
            for tm in e.terms:
                fs = list(tm.factors)
                rng.shuffle(fs)
                ts.append(Term(tm.coeff, tuple(fs)))
            rng.shuffle(ts)
            assert canonicalize(Expr(tuple(ts))) == base

    def test_dummy_relabel_invariance(self, table):
        a = canonicalize(parse_expression(table, "E[l_i, l_j]*v[u_i]*w[u_j]"))
        b = canonicalize(parse_expression(table, "E[l_m, l_k]*v[u_m]*w[u_k]"))
        assert a == b

    def test_derivative_of_zero_drops(self, table):
        e = parse_expression(table, "OD(v[l_i] - v[l_i], l_j)")
        assert canonicalize(e) == Expr(())

    def test_operand_coefficient_pullout(self, table):
        a = canonicalize(parse_expression(table, "OD(2*v[l_i], l_j)"))
        b = canonicalize(parse_expression(table, "2*OD(v[l_i], l_j)"))
        assert a == b

    def test_operand_scope_shadowing_merges(self, table):
        # same mathematical content under different operand dummy names
        a = canonicalize(
            parse_expression(table, "OD(E[l_k, u_k], l_i) * v[u_i]")
        )
        b = canonicalize(
            parse_expression(table, "OD(E[l_m, u_m], l_x) * v[u_x]")
        )
        assert a == b


class TestFreeIndices:
    def test_free_set(self, table):
        e = parse_expression(table, "E[l_i, l_j]*v[u_j]")
        labels = {i.label for i in free_indices(e)}
        assert labels == {"i"}

    def test_deriv_index_participates(self, table):
        e = parse_expression(table, "OD(v[l_i], l_j) * w[u_j]")
        labels = {i.label for i in free_indices(e)}
        assert labels == {"i"}

    def test_operand_local_dummy_hidden(self, table):
        e = parse_expression(table, "OD(E[l_k, u_k], l_i)")
        labels = {i.label for i in free_indices(e)}
        assert labels == {"i"}


class TestSubstitution:
    def test_literal_substitution(self, table):
        e = parse_expression(table, "E[l_i, l_j]*v[u_j]")
        t2 = substitute_literal(e.terms[0], {"i": 2})
        assert unparse(Expr((t2,))) == "E[2, l_j]*v[u_j]"
        assert free_indices(Expr((t2,))) == frozenset()

    def test_substitution_follows_into_operand(self, table):
        e = parse_expression(table, "OD(v[l_i], l_j)*w[u_j]")
        t2 = substitute_literal(e.terms[0], {"i": 3})
        assert "v[3]" in unparse(Expr((t2,)))


class TestSymmetryImages:
    def test_symmetric_pair(self, table):
        f = parse_expression(table, "E[l_i, l_j]").terms[0].factors[0]
        images = symmetry_images(f)
        assert len(images) == 2
        assert images[0][0] == f.indices and images[0][1] == 1
        assert images[1][1] == 1

    def test_antisymmetric_sign(self, table):
        f = parse_expression(table, "F[l_i, l_j]").terms[0].factors[0]
        images = symmetry_images(f)
        signs = {im[1] for im in images}
        assert signs == {1, -1}

    def test_no_symmetry(self, table):
        f = parse_expression(table, "v[l_i]").terms[0].factors[0]
        assert len(symmetry_images(f)) == 1


# ---------------------------------------------------------------------------
# property tests over generated equations


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.integers(0, 2))
def test_canonicalize_idempotent(seed, rank):
    table = make_table()
    rng = np.random.default_rng(seed)
    _, expr = random_equation(rng, table, rank)
    c = canonicalize(expr)
    assert canonicalize(c) == c


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.integers(0, 2))
def test_canonicalize_preserves_free_signature(seed, rank):
    table = make_table()
    rng = np.random.default_rng(seed)
    _, expr = random_equation(rng, table, rank)
    c = canonicalize(expr)
    if c.terms:
        assert free_indices(c) == free_indices(expr)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.integers(0, 2))
def test_unparse_parse_round_trip(seed, rank):
    table = make_table()
    rng = np.random.default_rng(seed)
    _, expr = random_equation(rng, table, rank)
    c = canonicalize(expr)
    again = parse_expression(table, unparse(c))
    assert canonicalize(again) == c


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rank=st.integers(0, 2))
def test_term_shuffle_invariance(seed, rank):
    table = make_table()
    rng = np.random.default_rng(seed)
    _, expr = random_equation(rng, table, rank)
    base = canonicalize(expr)
    pyrng = random.Random(seed)
    ts = []
    for tm in expr.terms:
        fs = list(tm.factors)
        pyrng.shuffle(fs)
        ts.append(Term(tm.coeff, tuple(fs)))
    pyrng.shuffle(ts)
    assert canonicalize(Expr(tuple(ts))) == base
