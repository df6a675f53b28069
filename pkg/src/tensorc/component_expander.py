"""Scalar component expansion.

Turns dummy-free-after-expansion tensor equations into scalar component
equations: dummy indices are summed over their kind's range, tensors with
index symmetries collapse onto an independent component set, and every
surviving access becomes a flat name (E21, D1B12, ...).  Signs from
non-canonical accesses fold into coefficients; constant-valued tensors
fold away entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import Iterable, Mapping, Optional, Sequence

from .tensor_ir import (
    Deriv,
    Expr,
    ExpressionError,
    Index,
    TensorError,
    TensorFactor,
    TensorSymbol,
    Term,
    canonicalize,
    free_indices,
    substitute_literal,
    unparse_factor,
    validate_expr,
)


class ExpansionError(TensorError):
    """An expression cannot be lowered to scalar component form."""


# ---------------------------------------------------------------------------
# sum expansion


def expand_sums(expr: Expr) -> Expr:
    """Replace every dummy index by the explicit sum over its kind's range.

    Works scope by scope: derivative operands expand internally first, then
    this scope's dummies (including pairs spanning into operands) are
    enumerated.  The result is canonical and contains no dummy indices.
    """
    expr = canonicalize(expr)
    out = []
    for term in expr.terms:
        out.extend(_expand_term(term))
    return canonicalize(Expr(tuple(out)))


def _expand_term(term: Term) -> list:
    # operand scopes first
    factors = []
    for f in term.factors:
        if isinstance(f, Deriv):
            inner = []
            for t in f.operand.terms:
                inner.extend(_expand_term(t))
            from dataclasses import replace as _replace
            f = _replace(f, operand=Expr(tuple(inner)))
        factors.append(f)
    term = Term(term.coeff, tuple(factors))
    from .tensor_ir import _scope_analysis
    _, dummies = _scope_analysis(term)
    if not dummies:
        return [term]
    labels = sorted(dummies)
    ranges = [list(dummies[l][0].kind.range()) for l in labels]
    out = []
    for combo in product(*ranges):
        out.append(substitute_literal(term, dict(zip(labels, combo))))
    return out


# ---------------------------------------------------------------------------
# component layout


def component_canonical(symbol: TensorSymbol, values: Sequence[int]):
    """Map a literal index tuple to its canonical (independent) tuple and
    the sign relating the two; antisymmetric diagonals give sign 0.

    The canonical tuple sorts each related slot pair descending, which
    makes the independent list lower-triangular (11, 21, 22, 31, 32, 33
    for a symmetric pair).
    """
    vals = list(values)
    if len(vals) != symbol.rank:
        raise ExpansionError(
            f"{symbol.name!r} takes {symbol.rank} indices, got {len(vals)}"
        )
    for v, slot in zip(vals, symbol.slots):
        if not (slot.lo <= v <= slot.hi):
            raise ExpansionError(
                f"component index {v} out of range for {symbol.name!r}"
            )
    sign = 1
    changed = True
    while changed:
        changed = False
        for s in symbol.symmetries:
            if vals[s.first] < vals[s.second]:
                vals[s.first], vals[s.second] = vals[s.second], vals[s.first]
                sign *= s.sign
                changed = True
            elif vals[s.first] == vals[s.second] and s.sign < 0:
                return tuple(values), 0
    return tuple(vals), sign


def independent_components(symbol: TensorSymbol) -> list:
    """Ordered independent component tuples: the canonical representatives,
    enumerated in lexicographic order over the full index range."""
    out = []
    ranges = [list(k.range()) for k in symbol.slots]
    for combo in product(*ranges):
        canon, sign = component_canonical(symbol, combo)
        if sign == 1 and canon == combo:
            out.append(combo)
    return out


@dataclass(frozen=True, slots=True)
class ComponentLayout:
    """Independent components of one symbol plus the total resolve map."""

    symbol: TensorSymbol
    components: tuple

    def resolve(self, values: Sequence[int]):
        return component_canonical(self.symbol, values)


def layout_for(symbol: TensorSymbol) -> ComponentLayout:
    return ComponentLayout(symbol, tuple(independent_components(symbol)))


# ---------------------------------------------------------------------------
# naming


def component_name(symbol: TensorSymbol, values: Sequence[int]):
    """Flat name of a component access: symbol name plus the digits of the
    canonical tuple, with the sign relating the access to it.

    Returns (name, sign); an antisymmetric diagonal access returns
    (None, 0), standing for the literal zero.
    """
    canon, sign = component_canonical(symbol, values)
    if sign == 0:
        return None, 0
    for v in canon:
        if not (0 <= v <= 9):
            raise ExpansionError(
                f"component value {v} of {symbol.name!r} is not a single digit"
            )
    return symbol.name + "".join(str(v) for v in canon), sign


def derivative_name(direction: int, comp_name: str) -> str:
    """Name of a precomputed spatial derivative, D<direction><component>."""
    if direction not in (1, 2, 3):
        raise ExpansionError(
            f"derivative direction must be 1, 2 or 3, got {direction}"
        )
    return f"D{direction}{comp_name}"


def constant_component_value(symbol: TensorSymbol, values: Sequence[int]) -> Fraction:
    """Component value of a constant-valued tensor at a literal tuple,
    resolved through its symmetries."""
    canon_q, sign_q = component_canonical(symbol, values)
    if sign_q == 0:
        return Fraction(0)
    for key, val in symbol.values.items():
        ck, sk = component_canonical(symbol, key)
        if ck == canon_q:
            return Fraction(sign_q * sk) * val
    return Fraction(0)


# ---------------------------------------------------------------------------
# scalar expressions


@dataclass(frozen=True, slots=True)
class ScalarTerm:
    coeff: Fraction
    factors: tuple  # of (name, exponent), sorted by name


ScalarExpr = tuple


@dataclass(frozen=True, slots=True)
class ComponentEquation:
    lhs_name: str
    rhs: ScalarExpr


def _scalarize_term(term: Term) -> Optional[ScalarTerm]:
    """One canonical literal-only term to a scalar term, or None when a
    sign map or constant zeroes it."""
    coeff = term.coeff
    powers: dict[str, int] = {}
    for f in term.factors:
        if isinstance(f, TensorFactor):
            vals = []
            for idx in f.indices:
                if not idx.is_literal:
                    raise ExpansionError(
                        f"unexpanded index on {unparse_factor(f)}"
                    )
                vals.append(idx.value)
            if f.symbol.is_constant:
                value = constant_component_value(f.symbol, vals)
                if value == 0:
                    if f.power < 0:
                        raise ExpansionError(
                            f"zero constant {unparse_factor(f)} to a negative power"
                        )
                    return None
                coeff *= value ** f.power
                continue
            name, sign = component_name(f.symbol, vals)
            if sign == 0:
                return None
            coeff *= Fraction(sign) ** f.power
            powers[name] = powers.get(name, 0) + f.power
        else:
            if f.op != "OD":
                raise ExpansionError(
                    f"cannot lower {f.op} factor {unparse_factor(f)}; "
                    "only plain partial derivatives reach component form"
                )
            if f.index is None or not f.index.is_literal:
                raise ExpansionError(
                    f"unexpanded derivative index on {unparse_factor(f)}"
                )
            if len(f.operand.terms) != 1:
                raise ExpansionError(
                    f"derivative operand is not a single term: {unparse_factor(f)}"
                )
            t0 = f.operand.terms[0]
            if t0.coeff != 1 or len(t0.factors) != 1 or not isinstance(
                t0.factors[0], TensorFactor
            ):
                raise ExpansionError(
                    f"derivative of a non-component operand: {unparse_factor(f)}"
                )
            inner = t0.factors[0]
            vals = []
            for idx in inner.indices:
                if not idx.is_literal:
                    raise ExpansionError(
                        f"unexpanded index on {unparse_factor(f)}"
                    )
                vals.append(idx.value)
            if inner.power != 1:
                raise ExpansionError(
                    f"derivative of a power: {unparse_factor(f)}"
                )
            if inner.symbol.is_constant or inner.symbol.is_param:
                # spatially constant, so the derivative vanishes
                return None
            name, sign = component_name(inner.symbol, vals)
            if sign == 0:
                return None
            coeff *= Fraction(sign) ** f.power
            dname = derivative_name(f.index.value, name)
            powers[dname] = powers.get(dname, 0) + f.power
    factors = tuple(sorted((n, p) for n, p in powers.items() if p != 0))
    return ScalarTerm(coeff, factors)


def scalarize(expr: Expr) -> ScalarExpr:
    """Lower a fully expanded (dummy-free, literal-index) expression to a
    scalar expression over component and derivative names."""
    merged: dict[tuple, Fraction] = {}
    order: list[tuple] = []
    for term in expr.terms:
        st = _scalarize_term(term)
        if st is None:
            continue
        if st.factors not in merged:
            merged[st.factors] = Fraction(0)
            order.append(st.factors)
        merged[st.factors] += st.coeff
    out = [
        ScalarTerm(merged[fs], fs) for fs in sorted(order) if merged[fs] != 0
    ]
    return tuple(out)


def scalar_names(scalar: ScalarExpr) -> set:
    names = set()
    for t in scalar:
        for n, _ in t.factors:
            names.add(n)
    return names


def eval_scalar(scalar: ScalarExpr, env: Mapping[str, float]):
    """Evaluate a scalar expression over an environment of name values.
    Values may be floats or numpy arrays; broadcasting falls out."""
    total = None
    for t in scalar:
        acc = float(t.coeff)
        for name, exp in t.factors:
            acc = acc * env[name] ** exp
        total = acc if total is None else total + acc
    return 0.0 if total is None else total


def scalar_text(scalar: ScalarExpr) -> str:
    """Stable text form, used by printing and the emitted kernels."""
    if not scalar:
        return "0"
    pieces = []
    for pos, t in enumerate(scalar):
        mag = abs(t.coeff)
        parts = []
        if mag != 1 or not t.factors:
            parts.append(_coeff_text(mag))
        for name, exp in t.factors:
            parts.append(name if exp == 1 else f"{name}^{exp}")
        body = "*".join(parts)
        if pos == 0:
            pieces.append(("-" if t.coeff < 0 else "") + body)
        else:
            pieces.append(("- " if t.coeff < 0 else "+ ") + body)
    return " ".join(pieces)


def _coeff_text(c: Fraction) -> str:
    return str(c)


# ---------------------------------------------------------------------------
# equations


@dataclass(frozen=True, slots=True)
class TensorEquation:
    """One tensor-level equation: an evolved (or diagnosed) symbol with its
    abstract left-side indices, and the right-side expression."""

    lhs_symbol: TensorSymbol
    lhs_indices: tuple
    rhs: Expr
    suffix: str = "rhs"


def to_component_equations(equation: TensorEquation, post_expand=None) -> list:
    """One scalar equation per independent left-side component.

    The left side's free indices are assigned each independent tuple in
    turn; the right side is expanded, lowered, and named.  `post_expand`,
    if given, maps Expr -> Expr between summation expansion and lowering;
    it is the hook for literal-index rewrite passes (trace elimination and
    similar) that only make sense once the dummies are spelled out.
    """
    sym = equation.lhs_symbol
    labels = []
    for idx in equation.lhs_indices:
        if idx.is_literal:
            raise ExpansionError("left-side indices must be abstract labels")
        labels.append(idx.label)
    if len(labels) != sym.rank:
        raise ExpansionError(
            f"{sym.name!r} takes {sym.rank} indices, got {len(labels)}"
        )
    lhs_sig = {(i.label, i.kind.name, i.variance) for i in equation.lhs_indices}
    rhs_sig = {(i.label, i.kind.name, i.variance) for i in free_indices(equation.rhs)}
    if equation.rhs.terms and rhs_sig != lhs_sig:
        raise ExpansionError(
            f"free indices of the right side {sorted(l for l, _, _ in rhs_sig)} "
            f"do not match the left side {sorted(labels)}"
        )
    out = []
    for combo in independent_components(sym):
        name, sign = component_name(sym, combo)
        assignment = dict(zip(labels, combo))
        rhs = Expr(tuple(
            substitute_literal(t, assignment) for t in equation.rhs.terms
        ))
        expanded = expand_sums(rhs)
        if post_expand is not None:
            expanded = post_expand(expanded)
        scalar = scalarize(expanded)
        out.append(ComponentEquation(name + equation.suffix, scalar))
    return out
