"""Core expression representation for abstract-index tensor algebra.

Index kinds, tensor declarations with symmetries and attributes, a small
expression DSL, and a deterministic canonical form.

Expressions are sums of terms; a term is an exact rational coefficient
times a product of factors.  A factor is either an indexed tensor or a
symbolic derivative (partial OD, covariant CD, or Lie LD along a vector).
Dummy index pairs may span into derivative operands; each operand also
opens its own dummy scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

UP = "u"
DOWN = "l"
WILD = "w"

_VARIANCE_ORDER = {DOWN: 0, UP: 1, WILD: 2}

DERIV_OPS = ("OD", "CD", "LD")

_RESERVED_NAMES = set(DERIV_OPS)


class TensorError(Exception):
    """Base class for every error raised by this package."""


class DeclarationError(TensorError):
    """Invalid kind or tensor declaration, or a name clash."""


class ExpressionError(TensorError):
    """Malformed expression: parse failure or an index-rule violation."""


# ---------------------------------------------------------------------------
# index kinds and indices


@dataclass(frozen=True, slots=True)
class IndexKind:
    """A family of indices with an inclusive integer component range.

    ``letters`` lists the label initials this kind owns in the DSL; an
    abstract label resolves to its kind through its first character.
    """

    name: str
    lo: int
    hi: int
    letters: str

    def __post_init__(self) -> None:
        if self.hi < self.lo:
            raise DeclarationError(
                f"index kind {self.name!r} has an empty range {self.lo}..{self.hi}"
            )

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def range(self) -> range:
        return range(self.lo, self.hi + 1)


@dataclass(frozen=True, slots=True)
class Index:
    """One index occurrence: either an abstract label or a literal value.

    variance is "u" (up), "l" (down), or "w" (pattern wildcard that binds
    whatever variance it matches; only valid inside rule patterns).
    """

    variance: str
    kind: IndexKind
    label: Optional[str] = None
    value: Optional[int] = None

    def __post_init__(self) -> None:
        if self.variance not in (UP, DOWN, WILD):
            raise ExpressionError(f"bad variance tag {self.variance!r}")
        if (self.label is None) == (self.value is None):
            raise ExpressionError("index needs exactly one of label or value")
        if self.value is not None and self.variance == WILD:
            raise ExpressionError("a literal index cannot have wildcard variance")

    @property
    def is_literal(self) -> bool:
        return self.value is not None


# hashing dominates canonicalization (seen sets, merge grouping); flat
# hashes over primitives keep it cheap.  Kinds are unique per name, so a
# name-only hash stays consistent with field equality.
IndexKind.__hash__ = lambda self: hash(self.name)  # type: ignore[assignment]
Index.__hash__ = lambda self: hash(  # type: ignore[assignment]
    (self.variance, self.kind.name, self.label, self.value)
)


def index_sort_key(idx: Index) -> tuple:
    """Total order on indices: literals first (by value), then labels; down
    before up at equal position."""
    if idx.is_literal:
        return (0, "", idx.value, _VARIANCE_ORDER[idx.variance])
    return (1, idx.label, 0, _VARIANCE_ORDER[idx.variance])


# ---------------------------------------------------------------------------
# tensor symbols


@dataclass(frozen=True, slots=True)
class Symmetry:
    """A pairwise slot relation; sign +1 for symmetric, -1 for antisymmetric.

    Slot positions are zero-based.
    """

    first: int
    second: int
    sign: int


class TensorSymbol:
    """A declared tensor: slot kinds, pairwise symmetries, an optional
    spatial/timelike attribute, optional constant component values, and an
    optional runtime-parameter marking.

    Symbols compare by identity; all factors referring to one declaration
    share the same object, handed out by the SymbolTable.
    """

    __slots__ = ("name", "slots", "symmetries", "attribute", "values", "is_param")

    def __init__(
        self,
        name: str,
        slots: Sequence[IndexKind],
        symmetries: Sequence[Symmetry] = (),
        attribute: Optional[str] = None,
        values: Optional[Mapping[tuple, Fraction]] = None,
        is_param: bool = False,
    ) -> None:
        self.name = name
        self.slots = tuple(slots)
        self.symmetries = tuple(symmetries)
        self.attribute = attribute
        self.values = dict(values) if values is not None else None
        self.is_param = bool(is_param)
        for s in self.symmetries:
            ok = (
                0 <= s.first < len(self.slots)
                and 0 <= s.second < len(self.slots)
                and s.first != s.second
            )
            if not ok:
                raise DeclarationError(f"symmetry slots out of range on {name!r}")
            if self.slots[s.first].name != self.slots[s.second].name:
                raise DeclarationError(
                    f"symmetry on {name!r} relates slots of different kinds"
                )
            if s.sign not in (1, -1):
                raise DeclarationError(f"symmetry sign must be +1 or -1 on {name!r}")
        if self.attribute not in (None, "spatial", "timelike"):
            raise DeclarationError(f"unknown attribute {self.attribute!r} on {name!r}")
        if self.is_param and self.slots:
            raise DeclarationError(f"parameter {name!r} must be a scalar")
        if self.is_param and self.values is not None:
            raise DeclarationError(f"parameter {name!r} cannot carry constant values")

    @property
    def rank(self) -> int:
        return len(self.slots)

    @property
    def is_constant(self) -> bool:
        return self.values is not None

    def __repr__(self) -> str:
        kinds = ", ".join(k.name for k in self.slots)
        return f"<tensor {self.name}({kinds})>"


def _levi_civita_values(kind: IndexKind) -> dict:
    if kind.size != 3:
        raise DeclarationError("levicivita needs an index kind of size 3")
    base = list(kind.range())
    vals = {}
    for perm, sign in (
        ((0, 1, 2), 1), ((1, 2, 0), 1), ((2, 0, 1), 1),
        ((0, 2, 1), -1), ((2, 1, 0), -1), ((1, 0, 2), -1),
    ):
        vals[tuple(base[p] for p in perm)] = Fraction(sign)
    return vals


def _kronecker_values(kind: IndexKind) -> dict:
    return {(v, v): Fraction(1) for v in kind.range()}


class SymbolTable:
    """Registry of index kinds and tensor declarations.

    Ships with two default kinds: spacetime (0..3, labels starting with
    a..h) and spatial (1..3, labels starting with i..n or x..z).  Systems
    may declare further kinds owning the remaining letters.
    """

    _DEFAULT_KINDS = (
        ("spacetime", 0, 3, "abcdefgh"),
        ("spatial", 1, 3, "ijklmnxyz"),
    )

    def __init__(self, include_default_kinds: bool = True) -> None:
        self.kinds: dict[str, IndexKind] = {}
        self.symbols: dict[str, TensorSymbol] = {}
        self._letter_kind: dict[str, IndexKind] = {}
        if include_default_kinds:
            for nm, lo, hi, letters in self._DEFAULT_KINDS:
                self.declare_kind(nm, lo, hi, letters)

    # -- kinds

    def declare_kind(self, name: str, lo: int, hi: int, letters: str) -> IndexKind:
        if name in self.kinds:
            raise DeclarationError(f"index kind {name!r} already declared")
        if not letters:
            raise DeclarationError(f"kind {name!r} needs at least one label letter")
        for ch in letters:
            if not (ch.isalpha() and ch.islower()):
                raise DeclarationError(f"bad label letter {ch!r} for kind {name!r}")
            if ch in self._letter_kind:
                other = self._letter_kind[ch].name
                raise DeclarationError(
                    f"label letter {ch!r} already owned by kind {other!r}"
                )
        kind = IndexKind(name, lo, hi, letters)
        self.kinds[name] = kind
        for ch in letters:
            self._letter_kind[ch] = kind
        return kind

    def kind(self, name: str) -> IndexKind:
        try:
            return self.kinds[name]
        except KeyError:
            raise DeclarationError(f"unknown index kind {name!r}") from None

    def kind_for_label(self, label: str) -> IndexKind:
        ch = label[0]
        if ch not in self._letter_kind:
            raise ExpressionError(f"no index kind owns labels starting with {ch!r}")
        return self._letter_kind[ch]

    def literal_default_kind(self) -> IndexKind:
        """Kind assumed for a literal derivative direction: spatial when
        declared, else spacetime."""
        if "spatial" in self.kinds:
            return self.kinds["spatial"]
        if "spacetime" in self.kinds:
            return self.kinds["spacetime"]
        raise DeclarationError("no kind available for literal indices")

    # -- tensors

    def declare_tensor(
        self,
        name: str,
        slots: Sequence[Union[IndexKind, str]] = (),
        symmetries: Sequence[Union[Symmetry, tuple]] = (),
        attribute: Optional[str] = None,
        values=None,
        is_param: bool = False,
    ) -> TensorSymbol:
        if name in self.symbols:
            raise DeclarationError(f"tensor {name!r} already declared")
        if name in _RESERVED_NAMES:
            raise DeclarationError(f"{name!r} is a reserved operator name")
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name):
            raise DeclarationError(f"bad tensor name {name!r}")
        kinds = tuple(self.kind(s) if isinstance(s, str) else s for s in slots)
        syms = tuple(
            s if isinstance(s, Symmetry) else Symmetry(*s) for s in symmetries
        )
        if values == "levicivita":
            if len(kinds) != 3 or len({k.name for k in kinds}) != 1:
                raise DeclarationError(
                    f"levicivita {name!r} needs three slots of one kind"
                )
            values = _levi_civita_values(kinds[0])
            if not syms:
                syms = (Symmetry(0, 1, -1), Symmetry(1, 2, -1))
        elif values == "kronecker":
            if len(kinds) != 2 or kinds[0].name != kinds[1].name:
                raise DeclarationError(
                    f"kronecker {name!r} needs two slots of one kind"
                )
            values = _kronecker_values(kinds[0])
            if not syms:
                syms = (Symmetry(0, 1, 1),)
        elif values is not None:
            norm = {}
            for key, val in dict(values).items():
                key = tuple(int(v) for v in (key if isinstance(key, tuple) else (key,)))
                if len(key) != len(kinds):
                    raise DeclarationError(f"value tuple arity mismatch on {name!r}")
                for v, k in zip(key, kinds):
                    if not (k.lo <= v <= k.hi):
                        raise DeclarationError(
                            f"value index {v} out of range for kind {k.name!r}"
                        )
                norm[key] = Fraction(val)
            values = norm
        sym = TensorSymbol(name, kinds, syms, attribute, values, is_param)
        self.symbols[name] = sym
        return sym

    def lookup(self, name: str) -> TensorSymbol:
        try:
            return self.symbols[name]
        except KeyError:
            raise ExpressionError(f"unknown symbol {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self.symbols


# ---------------------------------------------------------------------------
# expression trees


@dataclass(frozen=True, slots=True)
class TensorFactor:
    symbol: TensorSymbol
    indices: tuple
    power: int = 1


@dataclass(frozen=True, slots=True)
class Deriv:
    """Symbolic derivative factor.

    op "OD" and "CD" carry a derivative index; "LD" differentiates along a
    declared vector instead.  The operand is a full expression; OD and CD
    are linear and get distributed over operand sums during
    canonicalization, LD likewise.  CD and LD are otherwise inert: only
    rewrite rules may transform them.
    """

    op: str
    operand: "Expr"
    index: Optional[Index] = None
    vector: Optional[TensorSymbol] = None
    power: int = 1


Factor = Union[TensorFactor, Deriv]


@dataclass(frozen=True, slots=True)
class Term:
    coeff: Fraction
    factors: tuple


@dataclass(frozen=True, slots=True)
class Expr:
    terms: tuple


def expr_zero() -> Expr:
    return Expr(())


def rational_expr(value) -> Expr:
    c = Fraction(value)
    if c == 0:
        return expr_zero()
    return Expr((Term(c, ()),))


def add_exprs(*exprs: Expr) -> Expr:
    terms = []
    for e in exprs:
        terms.extend(e.terms)
    return Expr(tuple(terms))


def scale_expr(e: Expr, c) -> Expr:
    c = Fraction(c)
    if c == 0:
        return expr_zero()
    return Expr(tuple(Term(t.coeff * c, t.factors) for t in e.terms))


def multiply_exprs(a: Expr, b: Expr) -> Expr:
    terms = []
    for ta in a.terms:
        for tb in b.terms:
            terms.append(Term(ta.coeff * tb.coeff, ta.factors + tb.factors))
    return Expr(tuple(terms))


# ---------------------------------------------------------------------------
# occurrence analysis

def free_indices(expr: Expr) -> frozenset:
    """Free indices of an expression, as a frozenset of Index objects.

    Assumes a well-formed expression (all terms agree); computed from the
    first term.  The zero expression has an empty free set.
    """
    if not expr.terms:
        return frozenset()
    free, _ = _scope_analysis(expr.terms[0])
    return frozenset(free.values())


def free_labels(expr: Expr) -> frozenset:
    return frozenset(i.label for i in free_indices(expr))


def _scope_occurrences(term: Term) -> Iterator[Index]:
    """Abstract index occurrences at this term's scope, in tree order.

    A derivative contributes its own index plus one occurrence for each
    index free in its operand; operand-internal dummies stay hidden in
    their own scope.
    """
    for f in term.factors:
        if isinstance(f, TensorFactor):
            for idx in f.indices:
                if not idx.is_literal:
                    yield idx
        else:
            if f.index is not None and not f.index.is_literal:
                yield f.index
            if f.operand.terms:
                inner_free = {}
                for idx in _scope_occurrences(f.operand.terms[0]):
                    if idx.label not in inner_free:
                        inner_free[idx.label] = [idx, 0]
                    inner_free[idx.label][1] += 1
                for idx, count in inner_free.values():
                    if count == 1:
                        yield idx


def _scope_analysis(term: Term):
    """Split this scope's abstract labels into free and dummy.

    Returns (free: {label: Index}, dummies: {label: (Index, Index)}).
    Raises ExpressionError when a label occurs more than twice, twice with
    the same concrete variance, or twice with different kinds.
    """
    occs: dict[str, list] = {}
    for idx in _scope_occurrences(term):
        occs.setdefault(idx.label, []).append(idx)
    free = {}
    dummies = {}
    for label, found in occs.items():
        if len(found) == 1:
            free[label] = found[0]
        elif len(found) == 2:
            a, b = found
            if a.kind.name != b.kind.name:
                raise ExpressionError(
                    f"index {label!r} used with two different kinds"
                )
            if WILD not in (a.variance, b.variance) and a.variance == b.variance:
                raise ExpressionError(
                    f"index {label!r} appears twice with the same variance"
                )
            dummies[label] = (a, b)
        else:
            raise ExpressionError(
                f"index {label!r} appears {len(found)} times in one term"
            )
    return free, dummies


def labels_in_term(term: Term) -> set:
    out = set()
    for f in term.factors:
        if isinstance(f, TensorFactor):
            out.update(i.label for i in f.indices if not i.is_literal)
        else:
            if f.index is not None and not f.index.is_literal:
                out.add(f.index.label)
            for t in f.operand.terms:
                out.update(labels_in_term(t))
    return out


def labels_in_expr(expr: Expr) -> set:
    out = set()
    for t in expr.terms:
        out.update(labels_in_term(t))
    return out


def _free_signature(free: Mapping[str, Index]) -> frozenset:
    return frozenset((i.label, i.kind.name, i.variance) for i in free.values())


def validate_expr(expr: Expr, allow_wildcards: bool = False) -> frozenset:
    """Check well-formedness; returns the free-index signature.

    Rules: factor index counts match declared ranks; literal values lie in
    their kind's range; slot kinds match (symbols with the spatial
    attribute accept any kind, which frame conversion relies on); powers
    are nonzero, with nontrivial powers only on factors without abstract
    indices; per term, a label occurs at most twice and twice only as an
    up/down pair of one kind; all terms share one free-index set.
    """
    signature = None
    for term in expr.terms:
        for f in term.factors:
            _validate_factor(f, allow_wildcards)
        free, _ = _scope_analysis(term)
        if not allow_wildcards:
            for idx in free.values():
                if idx.variance == WILD:
                    raise ExpressionError(
                        f"wildcard variance on {idx.label!r} outside a rule"
                    )
        sig = _free_signature(free)
        if signature is None:
            signature = sig
        elif sig != signature:
            raise ExpressionError("terms have inconsistent free indices")
    return signature if signature is not None else frozenset()


def _validate_factor(f: Factor, allow_wildcards: bool) -> None:
    if isinstance(f, TensorFactor):
        sym = f.symbol
        if len(f.indices) != sym.rank:
            raise ExpressionError(
                f"{sym.name!r} takes {sym.rank} indices, got {len(f.indices)}"
            )
        for idx, slot in zip(f.indices, sym.slots):
            if idx.variance == WILD and not allow_wildcards:
                raise ExpressionError(
                    f"wildcard index on {sym.name!r} outside a rule"
                )
            if idx.is_literal:
                if not (idx.kind.lo <= idx.value <= idx.kind.hi):
                    raise ExpressionError(
                        f"literal index {idx.value} out of range for kind "
                        f"{idx.kind.name!r} on {sym.name!r}"
                    )
            if idx.kind.name != slot.name and sym.attribute != "spatial":
                raise ExpressionError(
                    f"index of kind {idx.kind.name!r} in a {slot.name!r} slot "
                    f"of {sym.name!r}"
                )
        if f.power == 0:
            raise ExpressionError(f"zero power on {sym.name!r}")
        if f.power != 1 and any(not i.is_literal for i in f.indices):
            raise ExpressionError(
                f"power {f.power} on {sym.name!r} with abstract indices"
            )
    else:
        if f.op not in DERIV_OPS:
            raise ExpressionError(f"unknown derivative operator {f.op!r}")
        if f.op == "LD":
            if f.vector is None or f.index is not None:
                raise ExpressionError("LD takes a vector and no index")
            if f.vector.rank != 1:
                raise ExpressionError(
                    f"LD vector {f.vector.name!r} must have rank 1"
                )
        else:
            if f.index is None or f.vector is not None:
                raise ExpressionError(f"{f.op} takes a derivative index")
            if f.index.variance == WILD and not allow_wildcards:
                raise ExpressionError("wildcard derivative index outside a rule")
            if f.index.is_literal and not (
                f.index.kind.lo <= f.index.value <= f.index.kind.hi
            ):
                raise ExpressionError(
                    f"literal derivative direction {f.index.value} out of range"
                )
        if f.power < 1:
            raise ExpressionError("derivative factors need a positive power")
        validate_expr(f.operand, allow_wildcards)


# ---------------------------------------------------------------------------
# label substitution

def apply_label_map_scoped(term: Term, mapping: Mapping[str, Index]) -> Term:
    """Rename abstract occurrences of the mapped labels at this term's
    scope, following them into derivative operands wherever the label is
    free there (operand-local dummies shadow outer labels)."""
    if not mapping:
        return term
    factors = tuple(_map_factor(f, mapping) for f in term.factors)
    return Term(term.coeff, factors)


def _map_index(idx: Index, mapping) -> Index:
    if idx.is_literal or idx.label not in mapping:
        return idx
    target = mapping[idx.label]
    # a wildcard occurrence takes the target's variance; a concrete
    # occurrence keeps its own (rule templates may pin a variance)
    variance = target.variance if idx.variance == WILD else idx.variance
    if target.is_literal:
        return Index(variance, target.kind, value=target.value)
    return Index(variance, target.kind, label=target.label)


def _map_factor(f: Factor, mapping) -> Factor:
    if isinstance(f, TensorFactor):
        return replace(f, indices=tuple(_map_index(i, mapping) for i in f.indices))
    new_index = f.index
    if f.index is not None and not f.index.is_literal and f.index.label in mapping:
        new_index = _map_index(f.index, mapping)
    inner = free_labels(f.operand)
    sub = {k: v for k, v in mapping.items() if k in inner}
    operand = f.operand
    if sub:
        operand = Expr(tuple(apply_label_map_scoped(t, sub) for t in operand.terms))
    if new_index is f.index and operand is f.operand:
        return f
    return replace(f, index=new_index, operand=operand)


def substitute_literal(term: Term, assignment: Mapping[str, int]) -> Term:
    """Replace labels at this term's scope by literal values, keeping each
    occurrence's own variance and kind.  Follows labels into derivative
    operands where they are free; operand-local dummies shadow."""
    if not assignment:
        return term
    return _substitute_literal_term(term, dict(assignment))


def _substitute_literal_term(term: Term, assignment: Mapping[str, int]) -> Term:
    factors = []
    for f in term.factors:
        if isinstance(f, TensorFactor):
            idx = tuple(
                Index(i.variance, i.kind, value=assignment[i.label])
                if (not i.is_literal and i.label in assignment)
                else i
                for i in f.indices
            )
            factors.append(replace(f, indices=idx))
        else:
            new_index = f.index
            if (
                f.index is not None
                and not f.index.is_literal
                and f.index.label in assignment
            ):
                new_index = Index(
                    f.index.variance, f.index.kind, value=assignment[f.index.label]
                )
            inner = free_labels(f.operand)
            sub = {k: v for k, v in assignment.items() if k in inner}
            operand = f.operand
            if sub:
                operand = Expr(
                    tuple(_substitute_literal_term(t, sub) for t in operand.terms)
                )
            factors.append(replace(f, index=new_index, operand=operand))
    return Term(term.coeff, tuple(factors))


# ---------------------------------------------------------------------------
# symmetry image enumeration (used by the pattern matcher)

def symmetry_images(f: TensorFactor) -> list:
    """All index arrangements reachable through the declared slot
    symmetries, as (indices tuple, sign) pairs.  The identity arrangement
    comes first."""
    seen = {f.indices: 1}
    order = [f.indices]
    frontier = [(f.indices, 1)]
    while frontier:
        nxt = []
        for idx, sign in frontier:
            for s in f.symbol.symmetries:
                li = list(idx)
                li[s.first], li[s.second] = li[s.second], li[s.first]
                ti = tuple(li)
                tsign = sign * s.sign
                if ti not in seen:
                    seen[ti] = tsign
                    order.append(ti)
                    nxt.append((ti, tsign))
        frontier = nxt
    return [(ti, seen[ti]) for ti in order]


# ---------------------------------------------------------------------------
# canonicalization

def canonicalize(expr: Expr) -> Expr:
    """Deterministic normal form.

    Distributes derivatives over operand sums and pulls operand
    coefficients out; sorts symmetric slot pairs ascending (antisymmetric
    swaps flip the sign, an antisymmetric pair on equal literals kills the
    term); merges repeated factors into powers; sorts factors by a
    rename-invariant structural key; renames dummy labels to a canonical
    per-kind sequence, scope by scope; merges like terms, drops zeros, and
    orders the terms.  Idempotent on well-formed input.
    """
    flat: list[Term] = []
    for t in expr.terms:
        flat.extend(_distribute_term(t))
    out = []
    for t in flat:
        ct = _canonical_term(t)
        if ct.coeff != 0:
            out.append(ct)
    merged: dict[tuple, Fraction] = {}
    for t in out:
        merged[t.factors] = merged.get(t.factors, Fraction(0)) + t.coeff
    final = [Term(c, fs) for fs, c in merged.items() if c != 0]
    final.sort(key=lambda t: (_term_body_text(t), t.coeff))
    return Expr(tuple(final))


def _distribute_term(term: Term) -> list:
    """Push derivative factors down to single-term, coefficient-one
    operands, splitting the enclosing term as needed."""
    if term.coeff == 0:
        return []
    for pos, f in enumerate(term.factors):
        if not isinstance(f, Deriv):
            continue
        sub: list[Term] = []
        for t in f.operand.terms:
            sub.extend(_distribute_term(t))
        if len(sub) == 0:
            return []  # derivative of zero
        if f.power > 1 and (len(sub) > 1 or sub[0].coeff != 1):
            copies = tuple(replace(f, power=1) for _ in range(f.power))
            nf = term.factors[:pos] + copies + term.factors[pos + 1 :]
            return _distribute_term(Term(term.coeff, nf))
        if len(sub) > 1 or sub[0].coeff != 1:
            results = []
            for st in sub:
                nd = replace(f, operand=Expr((Term(Fraction(1), st.factors),)))
                nt = Term(
                    term.coeff * st.coeff,
                    term.factors[:pos] + (nd,) + term.factors[pos + 1 :],
                )
                results.extend(_distribute_term(nt))
            return results
        clean = Expr((sub[0],))
        if clean != f.operand:
            nf = term.factors[:pos] + (replace(f, operand=clean),) + term.factors[pos + 1 :]
            return _distribute_term(Term(term.coeff, nf))
    return [term]


def _canonical_term(term: Term) -> Term:
    """Per-term normalization: iterate the deterministic pass to a
    fixpoint, then minimize over the orbit of dummy-label transpositions.

    The orbit walk resolves pairings the plain pass cannot see (which of a
    symmetric factor's slots holds which dummy), and a body recurring in
    the orbit with both signs means the term equals its own negative, so
    it is zero; that is what kills symmetric-against-antisymmetric
    contractions."""
    if not _has_abstract(term):
        # no labels anywhere: pairsort, merge and sort are content-based
        # and idempotent, renaming is a no-op, so one pass lands on the
        # fixpoint directly
        return _canon_pass(term)
    base = _fixpoint_term(term)
    if base.coeff == 0 or not base.factors or not _orbit_can_matter(base):
        return base
    try:
        _, dummies = _scope_analysis(base)
    except ExpressionError:
        return base
    labels = sorted(dummies)
    pairs = [
        (a, b)
        for i, a in enumerate(labels)
        for b in labels[i + 1 :]
        if dummies[a][0].kind.name == dummies[b][0].kind.name
    ]
    # the skip is keyed on the (rename-invariant) dummy count, so repeated
    # canonicalization makes the same choice and stays idempotent
    if not pairs or len(labels) > 5:
        return base
    seen = {base}
    by_body: dict[tuple, Fraction] = {base.factors: base.coeff}
    frontier = [base]
    while frontier and len(seen) < 400:
        cur = frontier.pop()
        try:
            _, cur_dummies = _scope_analysis(cur)
        except ExpressionError:
            continue
        labs = sorted(cur_dummies)
        for i, a in enumerate(labs):
            for b in labs[i + 1 :]:
                ka = cur_dummies[a][0].kind
                kb = cur_dummies[b][0].kind
                if ka.name != kb.name:
                    continue
                swapped = apply_label_map_scoped(
                    cur,
                    {a: Index(WILD, kb, label=b), b: Index(WILD, ka, label=a)},
                )
                cand = _fixpoint_term(swapped)
                if cand in seen:
                    continue
                prev = by_body.get(cand.factors)
                if prev is not None and prev != cand.coeff:
                    return Term(Fraction(0), ())
                by_body[cand.factors] = cand.coeff
                seen.add(cand)
                frontier.append(cand)
    return min(seen, key=lambda t: (_term_body_text(t), t.coeff))


def _fixpoint_term(term: Term) -> Term:
    seen = {term: 0}
    seq = [term]
    while True:
        nxt = _canon_pass(term)
        if nxt == term:
            return term
        if nxt in seen:
            cycle = seq[seen[nxt]:]
            return min(cycle, key=lambda t: (_term_body_text(t), t.coeff))
        seen[nxt] = len(seq)
        seq.append(nxt)
        term = nxt


def _orbit_can_matter(term: Term) -> bool:
    """Transposing dummy labels can only change the canonical form when a
    factor has slot symmetries or the same symbol occurs more than once;
    otherwise every pairing is already pinned by the factor sort."""
    names = []

    def scan(t: Term) -> bool:
        for f in t.factors:
            if isinstance(f, TensorFactor):
                if f.symbol.symmetries:
                    return True
                names.append(f.symbol.name)
            else:
                names.append(f.op)
                for sub in f.operand.terms:
                    if scan(sub):
                        return True
        return False

    if scan(term):
        return True
    return len(names) != len(set(names))


def _has_abstract(term: Term) -> bool:
    for f in term.factors:
        if isinstance(f, TensorFactor):
            for idx in f.indices:
                if idx.label is not None:
                    return True
        else:
            if f.index is not None and f.index.label is not None:
                return True
            for t in f.operand.terms:
                if _has_abstract(t):
                    return True
    return False


def _canon_pass(term: Term) -> Term:
    coeff, factors = _pairsort_factors(term.coeff, term.factors)
    if coeff == 0:
        return Term(Fraction(0), ())
    factors = _merge_factor_powers(factors)
    free, _ = _scope_analysis(Term(coeff, factors))
    visible = set(free)
    factors = _sort_factors(factors, visible)
    renamed = _rename_dummies(Term(coeff, factors))
    return renamed


def _pairsort_factors(coeff: Fraction, factors: tuple):
    out = []
    for f in factors:
        nf, mult = _pairsort_factor(f)
        coeff *= mult
        if coeff == 0:
            return Fraction(0), ()
        out.append(nf)
    return coeff, tuple(out)


def _pairsort_factor(f: Factor):
    if isinstance(f, TensorFactor):
        if not f.symbol.symmetries or len(f.indices) < 2:
            return f, Fraction(1)
        idx = list(f.indices)
        mult = Fraction(1)
        changed = True
        while changed:
            changed = False
            for s in f.symbol.symmetries:
                a, b = idx[s.first], idx[s.second]
                if s.sign < 0 and a.label == b.label and a.value == b.value:
                    # an antisymmetric pair traced on one label (or equal
                    # literals) vanishes whatever the variances are
                    return f, Fraction(0)
                ka = index_sort_key(a)
                kb = index_sort_key(b)
                if ka > kb:
                    idx[s.first], idx[s.second] = idx[s.second], idx[s.first]
                    if s.sign < 0:
                        mult = -mult
                    changed = True
        return replace(f, indices=tuple(idx)), mult ** f.power
    # derivative: recurse into the operand terms
    mult = Fraction(1)
    new_terms = []
    for t in f.operand.terms:
        c, fs = _pairsort_factors(t.coeff, t.factors)
        if c == 0:
            return f, Fraction(0)
        # keep the operand at coefficient one; signs surface out here
        mult *= c ** f.power
        new_terms.append(Term(Fraction(1), fs))
    nf = replace(f, operand=Expr(tuple(new_terms)))
    return nf, mult


def _merge_factor_powers(factors: tuple) -> tuple:
    order = []
    powers = {}
    bases = {}
    for f in factors:
        if isinstance(f, Deriv):
            new_terms = tuple(
                Term(t.coeff, _merge_factor_powers(t.factors)) for t in f.operand.terms
            )
            f = replace(f, operand=Expr(new_terms))
        base = f if f.power == 1 else replace(f, power=1)
        if base not in powers:
            powers[base] = 0
            bases[base] = base
            order.append(base)
        powers[base] += f.power
    out = []
    for base in order:
        p = powers[base]
        if p == 0:
            continue
        out.append(base if p == 1 else replace(base, power=p))
    return tuple(out)


# -- factor ordering keys.  Dummy labels never appear in a key: a dummy
# index contributes only its variance plus a shallow description of the
# factor holding its partner occurrence, so the order is stable under the
# renaming step that follows.

def _coarse_index_key(idx: Optional[Index]) -> tuple:
    if idx is None:
        return (-1, "", 0, 0)
    if idx.is_literal:
        return (0, "", idx.value, _VARIANCE_ORDER[idx.variance])
    return (1, "", 0, _VARIANCE_ORDER[idx.variance])


def _shallow_factor_key(f: Factor) -> tuple:
    if isinstance(f, TensorFactor):
        return (0, f.symbol.name, f.power,
                tuple(_coarse_index_key(i) for i in f.indices))
    names = []
    for t in f.operand.terms:
        for ff in t.factors:
            names.append(ff.symbol.name if isinstance(ff, TensorFactor) else ff.op)
    return (1, f.op, f.power,
            (f.vector.name if f.vector else "", tuple(sorted(names)),
             _coarse_index_key(f.index)))


def _partner_descriptors(factors: tuple):
    """Map (position, label) -> descriptor of the partner occurrence of
    each label that is dummy at this scope."""
    occ: dict[str, list] = {}
    for pos, f in enumerate(factors):
        if isinstance(f, TensorFactor):
            for q, idx in enumerate(f.indices):
                if not idx.is_literal:
                    occ.setdefault(idx.label, []).append((pos, 1, q))
        else:
            if f.index is not None and not f.index.is_literal:
                occ.setdefault(f.index.label, []).append((pos, 2, -1))
            if f.operand.terms:
                inner = {}
                for idx in _scope_occurrences(f.operand.terms[0]):
                    inner[idx.label] = inner.get(idx.label, 0) + 1
                for label, count in inner.items():
                    if count == 1:
                        occ.setdefault(label, []).append((pos, 3, -1))
    desc = {}
    for label, places in occ.items():
        if len(places) != 2:
            continue
        for mine, other in ((places[0], places[1]), (places[1], places[0])):
            opos, ocode, oslot = other
            if opos == mine[0]:
                desc[(mine[0], label, mine[1], mine[2])] = (0, (), oslot)
            else:
                desc[(mine[0], label, mine[1], mine[2])] = (
                    ocode, _shallow_factor_key(factors[opos]), oslot
                )
    return desc


def _full_index_key(idx: Optional[Index], pos: int, code: int, slot: int,
                    visible: set, desc: dict) -> tuple:
    if idx is None:
        return (-1, "", 0, 0, ())
    if idx.is_literal:
        return (0, "", idx.value, _VARIANCE_ORDER[idx.variance], ())
    if idx.label in visible:
        return (1, idx.label, 0, _VARIANCE_ORDER[idx.variance], ())
    d = desc.get((pos, idx.label, code, slot))
    if d is None:
        # bound in an enclosing scope; nothing stable to say beyond variance
        return (2, "", 0, _VARIANCE_ORDER[idx.variance], (4, (), -1))
    return (2, "", 0, _VARIANCE_ORDER[idx.variance], d)


def _full_factor_key(f: Factor, pos: int, visible: set, desc: dict) -> tuple:
    if isinstance(f, TensorFactor):
        idxkeys = tuple(
            _full_index_key(i, pos, 1, q, visible, desc)
            for q, i in enumerate(f.indices)
        )
        return (0, f.symbol.name, idxkeys, f.power)
    operand_keys = []
    for t in f.operand.terms:
        sorted_inner = _sort_factors(t.factors, visible)
        inner_desc = _partner_descriptors(sorted_inner)
        operand_keys.append(tuple(
            _full_factor_key(ff, q, visible, inner_desc)
            for q, ff in enumerate(sorted_inner)
        ))
    return (1, f.op,
            (f.vector.name if f.vector else "",
             tuple(operand_keys),
             _full_index_key(f.index, pos, 2, -1, visible, desc)),
            f.power)


def _sort_factors(factors: tuple, visible: set) -> tuple:
    # sort operand interiors first so the outer keys are well defined
    prepared = []
    for f in factors:
        if isinstance(f, Deriv):
            new_terms = tuple(
                Term(t.coeff, _sort_factors(t.factors, visible))
                for t in f.operand.terms
            )
            f = replace(f, operand=Expr(new_terms))
        prepared.append(f)
    prepared = tuple(prepared)
    desc = _partner_descriptors(prepared)
    keyed = [
        (_full_factor_key(f, pos, visible, desc), pos, f)
        for pos, f in enumerate(prepared)
    ]
    keyed.sort(key=lambda kpf: (kpf[0], kpf[1]))
    return tuple(f for _, _, f in keyed)


# -- dummy renaming: first pass retags every dummy with a unique internal
# label, second pass hands out canonical names per scope in tree order.

def _rename_dummies(term: Term) -> Term:
    counter = [0]
    term = _retag_term(term, counter)
    return _assign_canonical(term)


def _retag_term(term: Term, counter: list) -> Term:
    _, dummies = _scope_analysis(term)
    mapping = {}
    for label in dummies:
        kind = dummies[label][0].kind
        mapping[label] = Index(WILD, kind, label=f"~{counter[0]}")
        counter[0] += 1
    if mapping:
        term = apply_label_map_scoped(term, mapping)
    factors = []
    for f in term.factors:
        if isinstance(f, Deriv):
            new_terms = tuple(_retag_term(t, counter) for t in f.operand.terms)
            f = replace(f, operand=Expr(new_terms))
        factors.append(f)
    return Term(term.coeff, tuple(factors))


def _assign_canonical(term: Term) -> Term:
    fixed = {l for l in labels_in_term(term) if not l.startswith("~")}
    counters: dict[str, int] = {}
    mapping = {}
    for idx in _scope_occurrences(term):
        label = idx.label
        if not label.startswith("~") or label in mapping:
            continue
        kind = idx.kind
        letter = kind.letters[0]
        n = counters.get(kind.name, 0)
        while f"{letter}{n}" in fixed:
            n += 1
        counters[kind.name] = n + 1
        new = f"{letter}{n}"
        fixed.add(new)
        mapping[label] = Index(WILD, kind, label=new)
    if mapping:
        term = apply_label_map_scoped(term, mapping)
    factors = []
    for f in term.factors:
        if isinstance(f, Deriv):
            new_terms = tuple(_assign_canonical(t) for t in f.operand.terms)
            f = replace(f, operand=Expr(new_terms))
        factors.append(f)
    return Term(term.coeff, tuple(factors))


# ---------------------------------------------------------------------------
# unparsing

def unparse_index(idx: Index) -> str:
    if idx.is_literal:
        if idx.variance == DOWN:
            return str(idx.value)
        return f"{idx.variance}_{idx.value}"
    return f"{idx.variance}_{idx.label}"


def unparse_factor(f: Factor) -> str:
    if isinstance(f, TensorFactor):
        if f.indices:
            body = f"{f.symbol.name}[{', '.join(unparse_index(i) for i in f.indices)}]"
        else:
            body = f.symbol.name
    elif f.op == "LD":
        body = f"LD({f.vector.name}; {unparse(f.operand)})"
    else:
        body = f"{f.op}({unparse(f.operand)}, {unparse_index(f.index)})"
    if f.power != 1:
        body += f"^{f.power}"
    return body


def _term_body_text(term: Term) -> str:
    return "*".join(unparse_factor(f) for f in term.factors)


def unparse_term(term: Term) -> str:
    mag = abs(term.coeff)
    parts = []
    if mag != 1 or not term.factors:
        parts.append(str(mag))
    parts.extend(unparse_factor(f) for f in term.factors)
    return "*".join(parts)


def unparse(expr: Expr) -> str:
    if not expr.terms:
        return "0"
    pieces = []
    for pos, t in enumerate(expr.terms):
        if pos == 0:
            pieces.append(("-" if t.coeff < 0 else "") + unparse_term(t))
        else:
            pieces.append(("- " if t.coeff < 0 else "+ ") + unparse_term(t))
    return " ".join(pieces)


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>\d+)|(?P<sym>[\[\](),;*+\-^/]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ExpressionError(f"cannot tokenize near {rest[:20]!r}")
        if m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        elif m.group("int") is not None:
            tokens.append(("int", m.group("int"), m.start("int")))
        else:
            tokens.append(("sym", m.group("sym"), m.start("sym")))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, table: SymbolTable, tokens, text: str, allow_wildcards: bool):
        self.table = table
        self.tokens = tokens
        self.text = text
        self.pos = 0
        self.allow_wildcards = allow_wildcards

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise ExpressionError(f"unexpected end of expression in {self.text!r}")
        self.pos += 1
        return tok

    def expect(self, value: str):
        tok = self.next()
        if tok[1] != value:
            raise ExpressionError(
                f"expected {value!r} but found {tok[1]!r} in {self.text!r}"
            )

    def at(self, value: str) -> bool:
        tok = self.peek()
        return tok is not None and tok[1] == value

    # expr := ['-'] term (('+'|'-') term)*
    def parse_expr(self) -> Expr:
        terms = []
        sign = 1
        if self.at("-"):
            self.next()
            sign = -1
        elif self.at("+"):
            self.next()
        terms.append(self.parse_term(sign))
        while self.peek() is not None and self.peek()[1] in ("+", "-"):
            sign = 1 if self.next()[1] == "+" else -1
            terms.append(self.parse_term(sign))
        return Expr(tuple(terms))

    # term := factor ('*' factor)*
    def parse_term(self, sign: int) -> Term:
        coeff = Fraction(sign)
        factors = []
        while True:
            c, f = self.parse_factor()
            coeff *= c
            if f is not None:
                factors.append(f)
            if self.at("*"):
                self.next()
                continue
            break
        return Term(coeff, tuple(factors))

    # factor := rational | tensor-or-deriv ['^' ['-'] int]
    def parse_factor(self):
        tok = self.peek()
        if tok is None:
            raise ExpressionError(f"unexpected end of expression in {self.text!r}")
        if tok[0] == "int":
            self.next()
            num = int(tok[1])
            if self.at("/"):
                self.next()
                den_tok = self.next()
                if den_tok[0] != "int":
                    raise ExpressionError("expected an integer denominator")
                return Fraction(num, int(den_tok[1])), None
            return Fraction(num), None
        if tok[0] != "name":
            raise ExpressionError(f"unexpected {tok[1]!r} in {self.text!r}")
        self.next()
        name = tok[1]
        if name in ("OD", "CD"):
            self.expect("(")
            operand = self.parse_expr()
            self.expect(",")
            idx = self.parse_index(deriv=True)
            self.expect(")")
            factor = Deriv(name, operand, index=idx)
        elif name == "LD":
            self.expect("(")
            vec_tok = self.next()
            if vec_tok[0] != "name":
                raise ExpressionError("LD needs a vector name")
            vector = self.table.lookup(vec_tok[1])
            self.expect(";")
            operand = self.parse_expr()
            self.expect(")")
            factor = Deriv("LD", operand, vector=vector)
        else:
            sym = self.table.lookup(name)
            indices = []
            if self.at("["):
                self.next()
                while True:
                    slot = sym.slots[len(indices)] if len(indices) < sym.rank else None
                    indices.append(self.parse_index(slot=slot))
                    if self.at(","):
                        self.next()
                        continue
                    break
                self.expect("]")
            factor = TensorFactor(sym, tuple(indices))
        power = 1
        if self.at("^"):
            self.next()
            psign = 1
            if self.at("-"):
                self.next()
                psign = -1
            ptok = self.next()
            if ptok[0] != "int":
                raise ExpressionError("expected an integer exponent")
            power = psign * int(ptok[1])
            if power == 0:
                raise ExpressionError("zero exponent")
            factor = replace(factor, power=power)
        return Fraction(1), factor

    def parse_index(self, slot: Optional[IndexKind] = None, deriv: bool = False) -> Index:
        tok = self.next()
        if tok[0] == "int":
            kind = slot if slot is not None else self.table.literal_default_kind()
            return Index(DOWN, kind, value=int(tok[1]))
        if tok[0] != "name":
            raise ExpressionError(f"bad index token {tok[1]!r} in {self.text!r}")
        body = tok[1]
        if "_" not in body:
            raise ExpressionError(
                f"index {body!r} needs a u_/l_/w_ variance prefix"
            )
        prefix, rest = body.split("_", 1)
        if prefix not in (UP, DOWN, WILD) or not rest:
            raise ExpressionError(f"bad index {body!r} in {self.text!r}")
        if prefix == WILD and not self.allow_wildcards:
            raise ExpressionError(
                f"wildcard index {body!r} is only allowed in rules"
            )
        if rest.isdigit():
            if prefix == WILD:
                raise ExpressionError("a literal index cannot be a wildcard")
            kind = slot if slot is not None else self.table.literal_default_kind()
            return Index(prefix, kind, value=int(rest))
        kind = self.table.kind_for_label(rest)
        return Index(prefix, kind, label=rest)


def parse_expression(table: SymbolTable, text: str, allow_wildcards: bool = False) -> Expr:
    """Parse the expression DSL against a symbol table.

    Returns a validated, uncanonicalized expression; '#' starts a comment
    that runs to the end of its line.
    """
    body = "\n".join(line.split("#", 1)[0] for line in text.splitlines())
    body = body.strip()
    if not body:
        raise ExpressionError("empty expression")
    parser = _Parser(table, _tokenize(body), body, allow_wildcards)
    expr = parser.parse_expr()
    if parser.peek() is not None:
        raise ExpressionError(
            f"trailing input {parser.peek()[1]!r} in {text!r}"
        )
    validate_expr(expr, allow_wildcards)
    return expr
