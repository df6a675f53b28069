"""Pattern-based rewriting over tensor expressions.

Rules are single-term patterns with an expression template on the right.
Abstract pattern indices are variables within their kind: a concrete
variance matches only itself, the w_ wildcard binds whatever variance it
finds.  Matching works on canonical subjects, tries declared slot
symmetries of each subject factor (tracking signs), and descends into
derivative operands so rules can rewrite inside OD/CD/LD.  Dummy labels
introduced by a replacement are freshened at every application.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Iterator, Optional, Sequence

from .tensor_ir import (
    DOWN,
    UP,
    WILD,
    DeclarationError,
    Deriv,
    Expr,
    ExpressionError,
    Index,
    IndexKind,
    SymbolTable,
    TensorError,
    TensorFactor,
    Term,
    TensorSymbol,
    apply_label_map_scoped,
    canonicalize,
    free_indices,
    labels_in_expr,
    labels_in_term,
    multiply_exprs,
    parse_expression,
    symmetry_images,
    unparse,
    validate_expr,
)


class RuleError(TensorError):
    """A rule definition violates the pattern restrictions."""


class NonConvergenceError(TensorError):
    """Rule application failed to reach a fixpoint.

    Carries the last expression reached so callers can report it.
    """

    def __init__(self, message: str, last: Expr):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True, slots=True)
class RewriteRule:
    name: str
    lhs: Term
    rhs: Expr


@dataclass(frozen=True, slots=True)
class RuleSet:
    rules: tuple
    max_passes: int = 64


def ruleset(*parts, max_passes: int = 64) -> RuleSet:
    """Collect rules and rule sets, in order, into one RuleSet."""
    rules = []
    for p in parts:
        if isinstance(p, RuleSet):
            rules.extend(p.rules)
        elif isinstance(p, RewriteRule):
            rules.append(p)
        else:
            rules.extend(p)
    return RuleSet(tuple(rules), max_passes)


# ---------------------------------------------------------------------------
# rule definition


def _check_pattern_term(term: Term) -> None:
    if term.coeff != 1:
        raise RuleError("pattern coefficient must be 1; put signs on the right side")
    for f in term.factors:
        if isinstance(f, Deriv):
            _check_pattern_deriv(f)


def _check_pattern_deriv(f: Deriv) -> None:
    if len(f.operand.terms) != 1:
        raise RuleError("derivative operands in patterns must be a single term")
    t = f.operand.terms[0]
    if t.coeff != 1:
        raise RuleError("derivative operands in patterns must have coefficient 1")
    for ff in t.factors:
        if isinstance(ff, Deriv):
            _check_pattern_deriv(ff)


def make_rule(name: str, lhs: Expr, rhs: Expr) -> RewriteRule:
    """Build a rule from parsed sides, enforcing the pattern restrictions:
    single-term left side with unit coefficient, single-term derivative
    operands, and right-side free indices covered by the left.  A label
    may repeat across or within factors (a contraction pattern); the
    matcher binds it consistently."""
    if len(lhs.terms) != 1:
        raise RuleError(f"rule {name!r}: pattern must be a single term")
    pattern = lhs.terms[0]
    _check_pattern_term(pattern)
    lhs_free = {i.label for i in free_indices(lhs)}
    rhs_free = {i.label for i in free_indices(rhs)} if rhs.terms else set()
    leaked = rhs_free - lhs_free
    if leaked:
        raise RuleError(
            f"rule {name!r}: right side frees {sorted(leaked)} not bound on the left"
        )
    return RewriteRule(name, pattern, rhs)


def define_rule(table: SymbolTable, lhs_text: str, rhs_text: str, name: str) -> RewriteRule:
    lhs = parse_expression(table, lhs_text, allow_wildcards=True)
    rhs = parse_expression(table, rhs_text, allow_wildcards=True)
    return make_rule(name, lhs, rhs)


# ---------------------------------------------------------------------------
# matching


def _bind_index(p: Index, s: Index, bindings: dict) -> Optional[dict]:
    if p.is_literal:
        if not s.is_literal:
            return None
        if p.value != s.value or p.variance != s.variance:
            return None
        if p.kind.name != s.kind.name:
            return None
        return bindings
    if s.is_literal:
        return None
    if p.kind.name != s.kind.name:
        return None
    if p.variance != WILD and p.variance != s.variance:
        return None
    bound = bindings.get(p.label)
    if bound is not None:
        if bound.label != s.label:
            return None
        return bindings
    out = dict(bindings)
    out[p.label] = Index(s.variance, s.kind, label=s.label)
    return out


def _match_indices(pidx: tuple, sidx: tuple, bindings: dict) -> Optional[dict]:
    if len(pidx) != len(sidx):
        return None
    for p, s in zip(pidx, sidx):
        bindings = _bind_index(p, s, bindings)
        if bindings is None:
            return None
    return bindings


def _match_factor(pf, sf, bindings: dict) -> Iterator[tuple]:
    """Yield (bindings, sign) for every way pf matches sf."""
    if isinstance(pf, TensorFactor):
        if not isinstance(sf, TensorFactor):
            return
        if pf.symbol is not sf.symbol or pf.power != sf.power:
            return
        for arrangement, sign in symmetry_images(sf):
            b = _match_indices(pf.indices, arrangement, bindings)
            if b is not None:
                yield b, sign
        return
    if not isinstance(sf, Deriv):
        return
    if pf.op != sf.op or pf.power != sf.power:
        return
    if (pf.vector is None) != (sf.vector is None):
        return
    if pf.vector is not None and pf.vector is not sf.vector:
        return
    if (pf.index is None) != (sf.index is None):
        return
    start = bindings
    if pf.index is not None:
        start = _bind_index(pf.index, sf.index, start)
        if start is None:
            return
    if len(sf.operand.terms) != 1:
        return
    pterm = pf.operand.terms[0]
    sterm = sf.operand.terms[0]
    if sterm.coeff != 1 or len(pterm.factors) != len(sterm.factors):
        return
    yield from _match_cover(pterm.factors, sterm.factors, start)


def _match_cover(pfactors: tuple, sfactors: tuple, bindings: dict) -> Iterator[tuple]:
    """Perfect matchings of pattern factors onto all subject factors."""
    if not pfactors:
        yield bindings, 1
        return
    pf = pfactors[0]
    for si, sf in enumerate(sfactors):
        for b, sign in _match_factor(pf, sf, bindings):
            rest = sfactors[:si] + sfactors[si + 1 :]
            for b2, sign2 in _match_cover(pfactors[1:], rest, b):
                yield b2, sign * sign2


def _match_subset(pfactors: Sequence, sfactors: tuple, used: frozenset,
                  bindings: dict) -> Iterator[tuple]:
    """Injective matchings of pattern factors into a subset of subject
    factors; yields (positions tuple, bindings, sign)."""
    if not pfactors:
        yield (), bindings, 1
        return
    pf = pfactors[0]
    for si in range(len(sfactors)):
        if si in used:
            continue
        for b, sign in _match_factor(pf, sfactors[si], bindings):
            for pos, b2, sign2 in _match_subset(
                pfactors[1:], sfactors, used | {si}, b
            ):
                yield (si,) + pos, b2, sign * sign2


def _first_match(rule: RewriteRule, factors: tuple) -> Optional[tuple]:
    for pos, bindings, sign in _match_subset(rule.lhs.factors, factors, frozenset(), {}):
        return pos, bindings, sign
    return None


# ---------------------------------------------------------------------------
# replacement


def _fresh_label(kind: IndexKind, used: set) -> str:
    letter = kind.letters[0]
    n = 0
    while f"{letter}{n}" in used:
        n += 1
    label = f"{letter}{n}"
    used.add(label)
    return label


def _instantiate(rule: RewriteRule, bindings: dict, used: set) -> list:
    """Instantiated replacement terms: template dummies freshened, then
    pattern labels substituted with their bindings."""
    out = []
    bound_labels = set(bindings)
    for t in rule.rhs.terms:
        local = labels_in_term(t) - bound_labels
        freshen = {}
        for label in sorted(local):
            # locate any occurrence to learn the kind
            kind = _label_kind_in_term(t, label)
            freshen[label] = Index(WILD, kind, label=_fresh_label(kind, used))
        nt = apply_label_map_scoped(t, freshen) if freshen else t
        nt = apply_label_map_scoped(nt, bindings)
        out.append(nt)
    return out


def _label_kind_in_term(term: Term, label: str) -> IndexKind:
    for f in term.factors:
        if isinstance(f, TensorFactor):
            for i in f.indices:
                if not i.is_literal and i.label == label:
                    return i.kind
        else:
            if f.index is not None and not f.index.is_literal and f.index.label == label:
                return f.index.kind
            for t in f.operand.terms:
                try:
                    return _label_kind_in_term(t, label)
                except KeyError:
                    continue
    raise KeyError(label)


def _sites(term: Term):
    """Rewrite sites inside a term, innermost first: every derivative
    operand term (recursively), then the term itself.  A site is (path,
    term) with path = ((factor_pos, operand_term_pos), ...)."""
    for pos, f in enumerate(term.factors):
        if isinstance(f, Deriv):
            for ti, t2 in enumerate(f.operand.terms):
                for path, site in _sites(t2):
                    yield ((pos, ti),) + path, site
    yield (), term


def _rebuild(term: Term, path: tuple, new_terms: list) -> list:
    if not path:
        return new_terms
    (pos, ti), rest = path[0], path[1:]
    f = term.factors[pos]
    inner = f.operand.terms[ti]
    replaced = _rebuild(inner, rest, new_terms)
    operand = Expr(f.operand.terms[:ti] + tuple(replaced) + f.operand.terms[ti + 1 :])
    nf = replace(f, operand=operand)
    return [Term(term.coeff, term.factors[:pos] + (nf,) + term.factors[pos + 1 :])]


def _apply_rule_once(rule: RewriteRule, expr: Expr) -> Optional[Expr]:
    """Rewrite the first match of rule in expr, or None when it has none.
    Sites are scanned per term, innermost operands first."""
    for t_i, term in enumerate(expr.terms):
        for path, site in _sites(term):
            hit = _first_match(rule, site.factors)
            if hit is None:
                continue
            positions, bindings, sign = hit
            used = labels_in_term(term) | {i.label for i in bindings.values()}
            repl = _instantiate(rule, bindings, used)
            leftover = tuple(
                f for q, f in enumerate(site.factors) if q not in positions
            )
            new_site_terms = [
                Term(site.coeff * sign * rt.coeff, leftover + rt.factors)
                for rt in repl
            ]
            rebuilt = _rebuild(term, path, new_site_terms)
            terms = expr.terms[:t_i] + tuple(rebuilt) + expr.terms[t_i + 1 :]
            return Expr(terms)
    return None


_REWRITES_PER_RULE_CAP = 2000


def apply_rules(expr: Expr, rules: RuleSet) -> Expr:
    """Apply a rule set to a fixpoint.

    Each pass runs the rules in order; each rule rewrites its first match
    (innermost sites first) and the expression is recanonicalized, until
    that rule stops matching.  Passes repeat until nothing changes; hitting
    max_passes, an oscillation, or the per-rule rewrite cap raises
    NonConvergenceError carrying the last expression.
    """
    expr = canonicalize(expr)
    for _ in range(rules.max_passes):
        before = expr
        for rule in rules.rules:
            seen = {expr}
            for _count in range(_REWRITES_PER_RULE_CAP):
                nxt = _apply_rule_once(rule, expr)
                if nxt is None:
                    break
                nxt = canonicalize(nxt)
                if nxt == expr:
                    break
                if nxt in seen:
                    raise NonConvergenceError(
                        f"rule {rule.name!r} oscillates", nxt
                    )
                seen.add(nxt)
                expr = nxt
            else:
                raise NonConvergenceError(
                    f"rule {rule.name!r} exceeded the rewrite cap", expr
                )
        if expr == before:
            return expr
    raise NonConvergenceError("rule set did not reach a fixpoint", expr)


# ---------------------------------------------------------------------------
# generated rule families


def _wild(kind: IndexKind, label: str) -> Index:
    return Index(WILD, kind, label=label)


def projection_rules(table: SymbolTable, symbol_name: str,
                     projector: str = "h", normal: str = "n") -> RuleSet:
    """Per slot of a spatial tensor: the projector-contraction identity
    rule and the normal-contraction-to-zero rule.

    Wildcard variances make each rule cover both the up and down form of
    the contraction, so a slot always yields exactly two rules.
    """
    sym = table.lookup(symbol_name)
    if sym.attribute != "spatial":
        raise DeclarationError(
            f"projection rules need the spatial attribute on {symbol_name!r}"
        )
    h = table.lookup(projector)
    n = table.lookup(normal)
    kind = n.slots[0]
    rules = []
    for s in range(sym.rank):
        others = [
            _wild(sym.slots[q], f"{sym.slots[q].letters[0]}z{q}")
            for q in range(sym.rank)
        ]
        contracted = list(others)
        contracted[s] = _wild(kind, "c_")
        kept = list(others)
        kept[s] = _wild(kind, "x_")
        proj_lhs = Term(Fraction(1), (
            TensorFactor(h, (_wild(kind, "x_"), _wild(kind, "c_"))),
            TensorFactor(sym, tuple(contracted)),
        ))
        proj_rhs = Expr((Term(Fraction(1), (TensorFactor(sym, tuple(kept)),)),))
        rules.append(make_rule(
            f"proj_{symbol_name}_{s + 1}", Expr((proj_lhs,)), proj_rhs
        ))
        orth_lhs = Term(Fraction(1), (
            TensorFactor(n, (_wild(kind, "c_"),)),
            TensorFactor(sym, tuple(contracted)),
        ))
        rules.append(make_rule(
            f"orth_{symbol_name}_{s + 1}", Expr((orth_lhs,)), Expr(())
        ))
    return RuleSet(tuple(rules))


def metric_split_rule(table: SymbolTable, metric: str = "g",
                      projector: str = "h", normal: str = "n") -> RewriteRule:
    """Rewrite any metric factor into projector minus normal-normal."""
    g = table.lookup(metric)
    h = table.lookup(projector)
    n = table.lookup(normal)
    kind = g.slots[0]
    a = _wild(kind, "a_")
    b = _wild(kind, "b_")
    lhs = Expr((Term(Fraction(1), (TensorFactor(g, (a, b)),)),))
    rhs = Expr((
        Term(Fraction(1), (TensorFactor(h, (a, b)),)),
        Term(Fraction(-1), (TensorFactor(n, (a,)), TensorFactor(n, (b,)))),
    ))
    return make_rule("metric_split", lhs, rhs)


def normal_split_rule(table: SymbolTable, normal: str = "n", time: str = "t",
                      lapse: str = "alpha", shift: str = "beta") -> RewriteRule:
    """Split the up-variance normal into (time vector - shift) / lapse."""
    n = table.lookup(normal)
    t = table.lookup(time)
    alpha = table.lookup(lapse)
    beta = table.lookup(shift)
    kind = n.slots[0]
    a = Index(UP, kind, label="a_")
    lhs = Expr((Term(Fraction(1), (TensorFactor(n, (a,)),)),))
    inv = TensorFactor(alpha, (), power=-1)
    rhs = Expr((
        Term(Fraction(1), (inv, TensorFactor(t, (a,)))),
        Term(Fraction(-1), (inv, TensorFactor(beta, (a,)))),
    ))
    return make_rule("normal_split", lhs, rhs)


def frame_conversion_rules(table: SymbolTable, frame: str = "e",
                           coframe: str = "b", connection: str = "gamma",
                           frame_kind: str = "frame") -> RuleSet:
    """Index conversion for every spatial-attribute tensor (up spacetime
    slots contract with the frame, down slots with the co-frame) plus the
    rule that collapses a frame-projected covariant frame derivative into
    the connection coefficients."""
    e = table.lookup(frame)
    b = table.lookup(coframe)
    gamma = table.lookup(connection)
    fkind = table.kind(frame_kind)
    skind = e.slots[1]
    rules = []
    skip = {frame, coframe, connection}
    for name in table.symbols:
        sym = table.symbols[name]
        if sym.attribute != "spatial" or name in skip:
            continue
        for s in range(sym.rank):
            if sym.slots[s].name != skind.name:
                continue
            others = [
                _wild(sym.slots[q], f"{sym.slots[q].letters[0]}z{q}")
                for q in range(sym.rank)
            ]
            for variance, carrier, cvar in (
                (UP, e, (DOWN, UP)), (DOWN, b, (UP, DOWN)),
            ):
                before = list(others)
                before[s] = Index(variance, skind, label="a_")
                after = list(others)
                after[s] = Index(variance, fkind, label="i_")
                lhs = Expr((Term(Fraction(1), (TensorFactor(sym, tuple(before)),)),))
                rhs = Expr((Term(Fraction(1), (
                    TensorFactor(sym, tuple(after)),
                    TensorFactor(carrier, (
                        Index(cvar[0], fkind, label="i_"),
                        Index(cvar[1], skind, label="a_"),
                    )),
                )),))
                tag = "up" if variance == UP else "down"
                rules.append(make_rule(f"frame_{name}_{s + 1}_{tag}", lhs, rhs))
    # b(u j, l a) e(l k, u c) CD(e(l i, u a), l c) -> gamma(l k, u j, l i)
    ja = Index(UP, fkind, label="j_")
    ka = Index(DOWN, fkind, label="k_")
    ia = Index(DOWN, fkind, label="i_")
    aa = Index(DOWN, skind, label="a_")
    au = Index(UP, skind, label="a_")
    cu = Index(UP, skind, label="c_")
    cd = Index(DOWN, skind, label="c_")
    lhs = Expr((Term(Fraction(1), (
        TensorFactor(b, (ja, aa)),
        TensorFactor(e, (ka, cu)),
        Deriv("CD", Expr((Term(Fraction(1), (TensorFactor(e, (ia, au)),)),)), index=cd),
    )),))
    rhs = Expr((Term(Fraction(1), (TensorFactor(gamma, (ka, ja, ia)),)),))
    rules.append(make_rule("frame_connection", lhs, rhs))
    return RuleSet(tuple(rules))


# ---------------------------------------------------------------------------
# decomposition by projection


def decompose(equation: Expr, normal: TensorSymbol, projector: TensorSymbol,
              rules: RuleSet) -> list:
    """Project an equation (an expression equated to zero) on every free
    index: contraction with minus the normal, or the tangential projector.

    Returns the 2**k projections for k free indices, ordered by binary
    mask with bit 1 meaning the normal part and the all-tangential part
    first.  Each output has the rule set applied to a fixpoint.
    """
    free = sorted(free_indices(equation), key=lambda i: i.label)
    kind = normal.slots[0]
    for idx in free:
        if idx.kind.name != kind.name:
            raise ExpressionError(
                f"free index {idx.label!r} has kind {idx.kind.name!r}; "
                f"decomposition projects {kind.name!r} indices"
            )
    k = len(free)
    out = []
    for mask in range(1 << k):
        part = equation
        for bit, idx in enumerate(free):
            flip = DOWN if idx.variance == UP else UP
            if mask & (1 << bit):
                # normal part: contract the free index with -n
                contraction = Expr((Term(Fraction(-1), (
                    TensorFactor(normal, (Index(flip, idx.kind, label=idx.label),)),
                )),))
                part = multiply_exprs(part, contraction)
            else:
                # tangential part: route the free index through the projector
                used = labels_in_expr(part) | {i.label for i in free}
                fresh = _fresh_label(idx.kind, set(used))
                relabel = {idx.label: Index(WILD, idx.kind, label=fresh)}
                part = Expr(tuple(
                    apply_label_map_scoped(t, relabel) for t in part.terms
                ))
                proj = Expr((Term(Fraction(1), (
                    TensorFactor(projector, (
                        Index(idx.variance, idx.kind, label=idx.label),
                        Index(flip, idx.kind, label=fresh),
                    )),
                )),))
                part = multiply_exprs(part, proj)
        out.append(apply_rules(part, rules))
    return out
