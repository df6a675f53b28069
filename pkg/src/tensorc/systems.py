"""System definition files and the pipeline stages behind the CLI.

A system file is sectioned text: ``[kinds]``, ``[tensors]``, ``[rules]``,
``[equations]``, ``[evolution]``, ``[constraints]``, ``[setters]``,
``[params]``.  Sections may appear in any order, each at most once; ``#``
starts a comment and a trailing backslash continues a line.

    [tensors]
    E : spatial
    eps : spatial spatial spatial constant=levicivita

    [evolution]
    E[u_i] = eps[u_i, u_j, u_k] * OD(B[l_k], l_j)

The functions here turn a parsed definition into printed equation listings,
scalar component equations, grid kernels, and a runnable evolution, in that
order of commitment.  Everything downstream of parsing works on one
SystemDefinition instance and never re-reads the file.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .tensor_ir import (
    Deriv,
    Expr,
    SymbolTable,
    TensorError,
    TensorFactor,
    Term,
    canonicalize,
    free_indices,
    parse_expression,
    unparse,
)
from .rewrite_engine import (
    RuleSet,
    apply_rules,
    decompose,
    define_rule,
    frame_conversion_rules,
    metric_split_rule,
    normal_split_rule,
    projection_rules,
    ruleset,
)
from .component_expander import (
    ComponentEquation,
    TensorEquation,
    component_name,
    expand_sums,
    independent_components,
    scalar_text,
    scalarize,
    to_component_equations,
)
from .kernel_codegen import KernelIR, StencilConfig, build_kernel, emit_c
from .mol_engine import (
    Evaluator,
    EvolutionSystem,
    Grid,
    Integrator,
    MolError,
    Setter,
    courant_dt,
    run,
)


class SystemFileError(TensorError):
    """A system or parameter file failed to parse or validate."""


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")
_SECTION = re.compile(r"\[([a-z_]+)\]$")
_SECTIONS = (
    "kinds",
    "tensors",
    "rules",
    "equations",
    "evolution",
    "constraints",
    "setters",
    "params",
)
_KIND_LINE = re.compile(r"(\w+)\s*=\s*(-?\d+)\s*\.\.\s*(-?\d+)\s+([a-z]+)$")
_SYM_OPT = re.compile(r"sym\((\d+),(\d+),([+-]?1)\)$")
_VALUE_OPT = re.compile(r"value\(([-\d,]+)\)=(-?\d+(?:/\d+)?)$")


@dataclass
class SystemDefinition:
    """A fully parsed system: declarations, rules, and equations."""

    name: str
    table: SymbolTable
    rules: Optional[RuleSet]
    equations: list          # (name, Expr) pairs, symbolic stage only
    evolution: list          # TensorEquation per evolved symbol
    constraints: list        # (name, Expr) pairs, rank 0
    setters: list            # (TensorEquation, schedule) pairs
    params: dict             # declared parameter defaults, name -> float


# ---------------------------------------------------------------------------
# file parsing


def _logical_lines(text: str, src: str):
    """Comment-stripped, continuation-joined (lineno, line) pairs."""
    out = []
    buf = ""
    buf_ln = 0
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].rstrip()
        if buf:
            line = line.lstrip()
        if not line:
            continue
        if line.endswith("\\"):
            if not buf:
                buf_ln = ln
            buf += line[:-1].rstrip() + " "
            continue
        if buf:
            out.append((buf_ln, buf + line))
            buf = ""
        else:
            out.append((ln, line))
    if buf:
        raise SystemFileError(f"{src}:{buf_ln}: dangling line continuation")
    return out


def _split_sections(text: str, src: str) -> dict:
    sections: dict = {}
    current = None
    for ln, line in _logical_lines(text, src):
        m = _SECTION.fullmatch(line)
        if m:
            name = m.group(1)
            if name not in _SECTIONS:
                raise SystemFileError(
                    f"{src}:{ln}: unknown section [{name}]; expected one of "
                    + ", ".join(f"[{s}]" for s in _SECTIONS)
                )
            if name in sections:
                raise SystemFileError(f"{src}:{ln}: duplicate section [{name}]")
            sections[name] = []
            current = name
            continue
        if current is None:
            raise SystemFileError(f"{src}:{ln}: content before any [section]")
        sections[current].append((ln, line))
    return sections


def _parse_kinds(table: SymbolTable, lines, src: str) -> None:
    for ln, line in lines:
        m = _KIND_LINE.fullmatch(line)
        if not m:
            raise SystemFileError(
                f"{src}:{ln}: expected 'name = lo..hi letters', got {line!r}"
            )
        name, lo, hi, letters = m.groups()
        try:
            table.declare_kind(name, int(lo), int(hi), letters)
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e


def _parse_tensors(table: SymbolTable, lines, src: str) -> None:
    for ln, line in lines:
        name, _, rest = line.partition(":")
        name = name.strip()
        if not _IDENT.fullmatch(name):
            raise SystemFileError(f"{src}:{ln}: bad tensor name {name!r}")
        slots = []
        symmetries = []
        values = None
        attribute = None
        is_param = False
        for tok in rest.split():
            m = _SYM_OPT.fullmatch(tok)
            if m:
                symmetries.append((int(m.group(1)), int(m.group(2)), int(m.group(3))))
                continue
            m = _VALUE_OPT.fullmatch(tok)
            if m:
                if isinstance(values, str):
                    raise SystemFileError(
                        f"{src}:{ln}: {name!r} mixes value(...) with constant="
                    )
                if values is None:
                    values = {}
                key = tuple(int(v) for v in m.group(1).split(","))
                values[key] = Fraction(m.group(2))
                continue
            if tok.startswith("constant="):
                if values is not None:
                    raise SystemFileError(
                        f"{src}:{ln}: {name!r} mixes constant= with value(...)"
                    )
                values = tok[len("constant="):]
                if values not in ("levicivita", "kronecker"):
                    raise SystemFileError(
                        f"{src}:{ln}: unknown constant family {values!r}"
                    )
                continue
            if tok.startswith("attribute="):
                attribute = tok[len("attribute="):]
                continue
            if tok == "param":
                is_param = True
                continue
            if tok in table.kinds:
                slots.append(tok)
                continue
            raise SystemFileError(
                f"{src}:{ln}: unknown index kind or option {tok!r}"
            )
        try:
            table.declare_tensor(
                name, slots, symmetries=symmetries, attribute=attribute,
                values=values, is_param=is_param,
            )
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e


_BUILTIN_RULES = {
    "projection": ((1, 3), projection_rules),
    "metric_split": ((0, 3), metric_split_rule),
    "normal_split": ((0, 4), normal_split_rule),
    "frame_conversion": ((0, 4), frame_conversion_rules),
}


def _parse_rules(table: SymbolTable, lines, src: str):
    parts = []
    seen = set()
    for ln, line in lines:
        if line.startswith("use "):
            toks = line.split()
            kind = toks[1] if len(toks) > 1 else ""
            if kind not in _BUILTIN_RULES:
                raise SystemFileError(
                    f"{src}:{ln}: unknown builtin rule family {kind!r}; "
                    "expected one of " + ", ".join(sorted(_BUILTIN_RULES))
                )
            (lo, hi), fn = _BUILTIN_RULES[kind]
            args = toks[2:]
            if not (lo <= len(args) <= hi):
                raise SystemFileError(
                    f"{src}:{ln}: 'use {kind}' takes {lo} to {hi} names, "
                    f"got {len(args)}"
                )
            try:
                parts.append(fn(table, *args))
            except TensorError as e:
                raise SystemFileError(f"{src}:{ln}: {e}") from e
            continue
        name, colon, rest = line.partition(":")
        name = name.strip()
        if not colon or not _IDENT.fullmatch(name):
            raise SystemFileError(
                f"{src}:{ln}: expected 'name: lhs => rhs' or 'use <family>'"
            )
        if name in seen:
            raise SystemFileError(f"{src}:{ln}: duplicate rule name {name!r}")
        seen.add(name)
        lhs, arrow, rhs = rest.partition("=>")
        if not arrow:
            raise SystemFileError(f"{src}:{ln}: rule {name!r} is missing '=>'")
        try:
            parts.append(define_rule(table, lhs.strip(), rhs.strip(), name))
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e
    return ruleset(*parts) if parts else None


def _parse_named_exprs(table, lines, src, *, rank0=False):
    out = []
    seen = set()
    for ln, line in lines:
        if rank0:
            name, sep, body = line.partition("=")
        else:
            name, sep, body = line.partition(":")
        name = name.strip()
        if not sep or not _IDENT.fullmatch(name):
            kind = "'name = expr'" if rank0 else "'name: expr'"
            raise SystemFileError(f"{src}:{ln}: expected {kind}, got {line!r}")
        if name in seen:
            raise SystemFileError(f"{src}:{ln}: duplicate name {name!r}")
        seen.add(name)
        try:
            expr = parse_expression(table, body.strip())
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e
        if rank0 and free_indices(expr):
            frees = ", ".join(i.label for i in free_indices(expr))
            raise SystemFileError(
                f"{src}:{ln}: constraint {name!r} must be rank 0 "
                f"(free indices: {frees})"
            )
        out.append((name, expr))
    return out


def _destructure_lhs(table, text, src, ln):
    """A left side is one bare tensor factor with abstract indices."""
    try:
        expr = parse_expression(table, text)
    except TensorError as e:
        raise SystemFileError(f"{src}:{ln}: {e}") from e
    if len(expr.terms) != 1:
        raise SystemFileError(f"{src}:{ln}: left side {text!r} must be one term")
    term = expr.terms[0]
    if term.coeff != 1 or len(term.factors) != 1:
        raise SystemFileError(
            f"{src}:{ln}: left side {text!r} must be a bare tensor"
        )
    f = term.factors[0]
    if isinstance(f, Deriv) or f.power != 1:
        raise SystemFileError(
            f"{src}:{ln}: left side {text!r} must be a bare tensor"
        )
    for idx in f.indices:
        if idx.is_literal:
            raise SystemFileError(
                f"{src}:{ln}: left side {text!r} must use abstract indices"
            )
    return f.symbol, f.indices


def _parse_evolution(table, lines, src):
    out = []
    evolved = set()
    for ln, line in lines:
        lhs, eq, rhs = line.partition("=")
        if not eq:
            raise SystemFileError(f"{src}:{ln}: expected 'lhs = rhs'")
        sym, indices = _destructure_lhs(table, lhs.strip(), src, ln)
        if sym.name in evolved:
            raise SystemFileError(
                f"{src}:{ln}: {sym.name!r} already has an evolution equation"
            )
        evolved.add(sym.name)
        try:
            expr = parse_expression(table, rhs.strip())
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e
        out.append(TensorEquation(sym, indices, expr))
    return out


_SCHEDULES = ("initial", "every_step")


def _parse_setters(table, lines, src):
    out = []
    for ln, line in lines:
        schedule = "initial"
        body = line
        if "@" in line:
            body, _, tail = line.rpartition("@")
            schedule = tail.strip()
            if schedule not in _SCHEDULES:
                raise SystemFileError(
                    f"{src}:{ln}: unknown schedule {schedule!r}; expected "
                    + " or ".join(_SCHEDULES)
                )
        lhs, eq, rhs = body.partition("=")
        if not eq:
            raise SystemFileError(f"{src}:{ln}: expected 'lhs = rhs [@ schedule]'")
        sym, indices = _destructure_lhs(table, lhs.strip(), src, ln)
        try:
            expr = parse_expression(table, rhs.strip())
        except TensorError as e:
            raise SystemFileError(f"{src}:{ln}: {e}") from e
        out.append((TensorEquation(sym, indices, expr, suffix=""), schedule))
    return out


def _parse_params(table, lines, src):
    out = {}
    for ln, line in lines:
        name, eq, value = line.partition("=")
        name = name.strip()
        if not eq or not _IDENT.fullmatch(name):
            raise SystemFileError(f"{src}:{ln}: expected 'name = value'")
        sym = table.symbols.get(name)
        if sym is None or not sym.is_param:
            raise SystemFileError(
                f"{src}:{ln}: {name!r} is not a declared 'param' tensor"
            )
        try:
            out[name] = float(value.strip())
        except ValueError:
            raise SystemFileError(
                f"{src}:{ln}: bad numeric value {value.strip()!r}"
            ) from None
    return out


def parse_system(text: str, name: str = "system") -> SystemDefinition:
    src = name
    sections = _split_sections(text, src)
    table = SymbolTable()
    _parse_kinds(table, sections.get("kinds", ()), src)
    _parse_tensors(table, sections.get("tensors", ()), src)
    rules = _parse_rules(table, sections.get("rules", ()), src)
    equations = _parse_named_exprs(table, sections.get("equations", ()), src)
    evolution = _parse_evolution(table, sections.get("evolution", ()), src)
    constraints = _parse_named_exprs(
        table, sections.get("constraints", ()), src, rank0=True
    )
    setters = _parse_setters(table, sections.get("setters", ()), src)
    params = _parse_params(table, sections.get("params", ()), src)

    gf_names = set(grid_function_names_from(table, evolution, (), setters))
    for cname, _ in constraints:
        if cname in gf_names:
            raise SystemFileError(
                f"{src}: constraint name {cname!r} collides with a grid function"
            )
    return SystemDefinition(
        _sanitize_name(name), table, rules, equations, evolution,
        constraints, setters, params,
    )


def _sanitize_name(name: str) -> str:
    out = re.sub(r"[^A-Za-z0-9_]", "_", name)
    if not out or out[0].isdigit():
        out = "s_" + out
    return out


def load_system(path) -> SystemDefinition:
    p = Path(path)
    return parse_system(p.read_text(), p.stem)


def bundled_system_names() -> list:
    root = resources.files("tensorc") / "systems"
    return sorted(
        f.name[: -len(".system")]
        for f in root.iterdir()
        if f.name.endswith(".system")
    )


def resolve_system(arg: str) -> SystemDefinition:
    """A CLI system argument: a file path, or a bundled system's name."""
    p = Path(arg)
    if p.exists():
        return load_system(p)
    bundle = resources.files("tensorc") / "systems" / f"{arg}.system"
    if bundle.is_file():
        return parse_system(bundle.read_text(), arg)
    raise SystemFileError(
        f"no such system file {arg!r}; bundled systems: "
        + ", ".join(bundled_system_names())
    )


# ---------------------------------------------------------------------------
# symbolic stage


def _maybe_apply(expr: Expr, rules: Optional[RuleSet]) -> Expr:
    return apply_rules(expr, rules) if rules is not None else canonicalize(expr)


def _part_tag(mask: int, rank: int) -> str:
    return "".join("n" if mask >> b & 1 else "t" for b in range(rank))


def decomposed_lines(sysdef: SystemDefinition) -> list:
    """The symbolic stage as printable text, one equation per line.

    Entries from ``[equations]`` split against a declared normal ``n`` and
    projector ``h`` when they carry spacetime free indices; otherwise the
    rule fixpoint is echoed.  Evolution and constraint entries echo.
    """
    table = sysdef.table
    n = table.symbols.get("n")
    h = table.symbols.get("h")
    spacetime = table.kinds.get("spacetime")
    lines = []
    for name, expr in sysdef.equations:
        frees = free_indices(expr)
        splittable = (
            n is not None and h is not None and frees
            and all(i.kind is spacetime for i in frees)
        )
        if splittable:
            rules = sysdef.rules or ruleset()
            parts = decompose(expr, n, h, rules)
            rank = len(frees)
            for mask, part in enumerate(parts):
                tag = _part_tag(mask, rank)
                lines.append(f"{name}.{tag}: {unparse(part)} = 0")
        else:
            lines.append(f"{name}: {unparse(_maybe_apply(expr, sysdef.rules))} = 0")
    for teq in sysdef.evolution:
        one = Term(Fraction(1), (TensorFactor(teq.lhs_symbol, teq.lhs_indices),))
        lhs = unparse(Expr((one,)))
        lines.append(f"d/dt {lhs} = {unparse(_maybe_apply(teq.rhs, sysdef.rules))}")
    for name, expr in sysdef.constraints:
        lines.append(f"{name}: {unparse(_maybe_apply(expr, sysdef.rules))} = 0")
    return lines


# ---------------------------------------------------------------------------
# component stage


def _replay_hook(sysdef: SystemDefinition):
    """Rules run again on each expanded component so literal-index rules
    (trace elimination and friends) can fire; abstract patterns never bind
    literal indices, so this is idempotent for purely abstract rule sets."""
    if sysdef.rules is None:
        return None
    rules = sysdef.rules
    return lambda expr: apply_rules(expr, rules)


def rhs_component_equations(sysdef: SystemDefinition) -> list:
    hook = _replay_hook(sysdef)
    out = []
    for teq in sysdef.evolution:
        fixed = TensorEquation(
            teq.lhs_symbol, teq.lhs_indices,
            _maybe_apply(teq.rhs, sysdef.rules), teq.suffix,
        )
        out.extend(to_component_equations(fixed, post_expand=hook))
    return out


def constraint_component_equations(sysdef: SystemDefinition) -> list:
    hook = _replay_hook(sysdef)
    out = []
    for name, expr in sysdef.constraints:
        expanded = expand_sums(_maybe_apply(expr, sysdef.rules))
        if hook is not None:
            expanded = hook(expanded)
        out.append(ComponentEquation(name, scalarize(expanded)))
    return out


def setter_component_equations(sysdef: SystemDefinition) -> list:
    """(schedule, ComponentEquation) pairs in declaration order."""
    hook = _replay_hook(sysdef)
    out = []
    for teq, schedule in sysdef.setters:
        fixed = TensorEquation(
            teq.lhs_symbol, teq.lhs_indices,
            _maybe_apply(teq.rhs, sysdef.rules), teq.suffix,
        )
        for ceq in to_component_equations(fixed, post_expand=hook):
            out.append((schedule, ceq))
    return out


def expanded_lines(sysdef: SystemDefinition) -> list:
    """The component stage as printable text."""
    lines = []
    for ceq in rhs_component_equations(sysdef):
        lines.append(f"{ceq.lhs_name} = {scalar_text(ceq.rhs)}")
    for ceq in constraint_component_equations(sysdef):
        lines.append(f"{ceq.lhs_name} = {scalar_text(ceq.rhs)}")
    for schedule, ceq in setter_component_equations(sysdef):
        lines.append(f"{ceq.lhs_name} = {scalar_text(ceq.rhs)} @ {schedule}")
    return lines


# ---------------------------------------------------------------------------
# kernel stage


def _expr_symbol_names(expr: Expr, out: set) -> None:
    for term in expr.terms:
        for f in term.factors:
            if isinstance(f, TensorFactor):
                out.add(f.symbol.name)
            else:
                if f.vector is not None:
                    out.add(f.vector.name)
                _expr_symbol_names(f.operand, out)


def grid_function_names_from(table, evolution, constraints, setters=()) -> list:
    """Grid functions the system allocates: every independent component of
    each non-constant, non-parameter symbol that the evolution equations,
    constraints, or setters reference (declaration order), then the RHS
    names and the constraint names.  Symbols used only in display
    equations stay symbolic and get no storage."""
    used = set()
    for teq in evolution:
        used.add(teq.lhs_symbol.name)
        _expr_symbol_names(teq.rhs, used)
    for _, expr in constraints:
        _expr_symbol_names(expr, used)
    for teq, _ in setters:
        used.add(teq.lhs_symbol.name)
        _expr_symbol_names(teq.rhs, used)
    names = []
    for sym in table.symbols.values():
        if sym.values is not None or sym.is_param:
            continue
        if sym.name not in used:
            continue
        for combo in independent_components(sym):
            names.append(component_name(sym, combo)[0])
    for teq in evolution:
        for combo in independent_components(teq.lhs_symbol):
            names.append(component_name(teq.lhs_symbol, combo)[0] + teq.suffix)
    for cname, _ in constraints:
        names.append(cname)
    return names


def grid_function_names(sysdef: SystemDefinition) -> list:
    return grid_function_names_from(
        sysdef.table, sysdef.evolution, sysdef.constraints, sysdef.setters
    )


def parameter_names(sysdef: SystemDefinition) -> list:
    return [s.name for s in sysdef.table.symbols.values() if s.is_param]


def evolved_component_names(sysdef: SystemDefinition) -> list:
    names = []
    for teq in sysdef.evolution:
        for combo in independent_components(teq.lhs_symbol):
            names.append(component_name(teq.lhs_symbol, combo)[0])
    return names


def build_system_kernels(sysdef: SystemDefinition,
                         stencil: Optional[StencilConfig] = None) -> dict:
    """KernelIR per pipeline role: 'rhs', 'constraints', and one setter
    kernel per schedule ('initial_setters', 'step_setters')."""
    stencil = stencil or StencilConfig()
    gfs = grid_function_names(sysdef)
    params = parameter_names(sysdef)
    kernels = {}
    rhs_eqs = rhs_component_equations(sysdef)
    if rhs_eqs:
        kernels["rhs"] = build_kernel(rhs_eqs, stencil, gfs, params)
    con_eqs = constraint_component_equations(sysdef)
    if con_eqs:
        kernels["constraints"] = build_kernel(con_eqs, stencil, gfs, params)
    by_schedule: dict = {"initial": [], "every_step": []}
    for schedule, ceq in setter_component_equations(sysdef):
        by_schedule[schedule].append(ceq)
    if by_schedule["initial"]:
        kernels["initial_setters"] = build_kernel(
            by_schedule["initial"], stencil, gfs, params
        )
    if by_schedule["every_step"]:
        kernels["step_setters"] = build_kernel(
            by_schedule["every_step"], stencil, gfs, params
        )
    return kernels


_KERNEL_FILES = (
    ("rhs", "{}_rhs"),
    ("constraints", "{}_constraints"),
    ("initial_setters", "{}_initial_setters"),
    ("step_setters", "{}_step_setters"),
)


def generated_files(sysdef: SystemDefinition,
                    stencil: Optional[StencilConfig] = None) -> list:
    """(filename, content) pairs for the emit stage, manifest last.

    Regeneration is byte-identical for an unchanged definition; the
    manifest carries the grid function and parameter inventory.
    """
    import json

    kernels = build_system_kernels(sysdef, stencil)
    files = []
    for key, pattern in _KERNEL_FILES:
        ir = kernels.get(key)
        if ir is None:
            continue
        fn = pattern.format(sysdef.name)
        files.append((fn + ".c-syntax", emit_c(ir, fn)))
    manifest = {
        "system": sysdef.name,
        "grid_functions": grid_function_names(sysdef),
        "parameters": {n: sysdef.params.get(n) for n in parameter_names(sysdef)},
        "evolved": evolved_component_names(sysdef),
        "constraints": [name for name, _ in sysdef.constraints],
        "files": [fn for fn, _ in files],
    }
    files.append(("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n"))
    return files


# ---------------------------------------------------------------------------
# analytic solutions for initial data and error norms

_TWO_PI = 2.0 * math.pi


def _pw_trans(x, y, z, t):
    return np.sin(_TWO_PI * (x - t)) + 0.0 * (y + z)


# Oblique wave: k = 2*pi*(2,1,1), so no field is constant along its own
# component direction and both discrete divergences carry an O(h^2)
# truncation residue worth measuring.  Polarizations are unit transverse
# vectors with b = khat x e.
_ROOT5 = math.sqrt(5.0)
_ROOT30 = math.sqrt(30.0)
_PWO_OMEGA = _TWO_PI * math.sqrt(6.0)


def _pwo_phase(x, y, z, t):
    return _TWO_PI * (2.0 * x + y + z) - _PWO_OMEGA * t


def _pwo_field(coef):
    def fn(x, y, z, t):
        return coef * np.sin(_pwo_phase(x, y, z, t))
    return fn


# Names map evolved grid functions to fields of (x, y, z, t); any evolved
# function a solution does not list is zero.  Both waves close on the
# periodic unit box.
ANALYTIC_SOLUTIONS = {
    "plane_wave": {"E2": _pw_trans, "B3": _pw_trans},
    "plane_wave_oblique": {
        "E1": _pwo_field(1.0 / _ROOT5),
        "E2": _pwo_field(-2.0 / _ROOT5),
        "B1": _pwo_field(2.0 / _ROOT30),
        "B2": _pwo_field(1.0 / _ROOT30),
        "B3": _pwo_field(-5.0 / _ROOT30),
    },
    "static_zero": {},
}


def analytic_fields(name: str) -> Mapping[str, Callable]:
    try:
        return ANALYTIC_SOLUTIONS[name]
    except KeyError:
        raise SystemFileError(
            f"unknown analytic solution {name!r}; have "
            + ", ".join(sorted(ANALYTIC_SOLUTIONS))
        ) from None


def analytic_setter(evolved: Sequence[str], fields: Mapping) -> Callable:
    def fill(grid, arrays, t):
        x, y, z = grid.mesh()
        for name in evolved:
            fn = fields.get(name)
            arrays[name][...] = fn(x, y, z, t) if fn else 0.0
    return fill


def solution_errors(evolved, fields, grid, arrays, t) -> list:
    """Interior error norms against an analytic solution: (name, l2, linf)."""
    x, y, z = grid.mesh()
    core = grid.core
    out = []
    for name in evolved:
        fn = fields.get(name)
        want = fn(x, y, z, t) if fn else 0.0
        diff = (arrays[name] - want)[core]
        l2 = float(np.sqrt(np.mean(diff * diff)))
        linf = float(np.max(np.abs(diff)))
        out.append((name, l2, linf))
    return out


# ---------------------------------------------------------------------------
# run configuration

_INT_KEYS = ("nx", "ny", "nz", "ghost", "icn_iterations",
             "constraint_every", "output_every")
_FLOAT_KEYS = ("dx", "dy", "dz", "courant", "dt", "t_final")
_STR_KEYS = ("integrator", "analytic_solution", "output_dir")
_INTEGRATORS = ("rk2", "rk4", "icn")


@dataclass
class RunConfig:
    """Validated run parameters: grid, stepping, and output cadence."""

    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    t_final: float
    ghost: int = 1
    integrator: str = "rk4"
    icn_iterations: int = 3
    courant: Optional[float] = None
    dt: Optional[float] = None
    constraint_every: int = 1
    output_every: int = 0
    output_dir: Optional[str] = None
    analytic_solution: Optional[str] = None
    system_params: dict = field(default_factory=dict)

    def grid(self) -> Grid:
        g = self.ghost
        return Grid(
            (self.nx + 2 * g, self.ny + 2 * g, self.nz + 2 * g),
            (self.dx, self.dy, self.dz),
            g,
        )

    def step_size(self, grid: Grid) -> float:
        if self.dt is not None:
            return self.dt
        return courant_dt(grid, self.courant)


def parse_run_config(text: str, sysdef: SystemDefinition,
                     src: str = "params") -> RunConfig:
    """Parse 'key = value' lines; every key must be a run key or a declared
    system parameter, anything else is an error naming the key."""
    raw: dict = {}
    sys_params = dict(sysdef.params)
    declared = set(parameter_names(sysdef))
    seen: set = set()
    for ln, line in _logical_lines(text, src):
        key, eq, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not eq:
            raise SystemFileError(f"{src}:{ln}: expected 'key = value'")
        if key in seen:
            raise SystemFileError(f"{src}:{ln}: duplicate key {key!r}")
        seen.add(key)
        if key in _INT_KEYS:
            try:
                raw[key] = int(value)
            except ValueError:
                raise SystemFileError(
                    f"{src}:{ln}: {key} wants an integer, got {value!r}"
                ) from None
        elif key in _FLOAT_KEYS:
            try:
                raw[key] = float(value)
            except ValueError:
                raise SystemFileError(
                    f"{src}:{ln}: {key} wants a number, got {value!r}"
                ) from None
        elif key in _STR_KEYS:
            raw[key] = value
        elif key in declared:
            try:
                sys_params[key] = float(value)
            except ValueError:
                raise SystemFileError(
                    f"{src}:{ln}: {key} wants a number, got {value!r}"
                ) from None
        else:
            raise SystemFileError(f"{src}:{ln}: unknown parameter {key!r}")

    for req in ("nx", "ny", "nz", "dx", "t_final"):
        if req not in raw:
            raise SystemFileError(f"{src}: missing required key {req!r}")
    if ("dt" in raw) == ("courant" in raw):
        raise SystemFileError(f"{src}: give exactly one of dt or courant")
    integrator = raw.get("integrator", "rk4")
    if integrator not in _INTEGRATORS:
        raise SystemFileError(
            f"{src}: unknown integrator {integrator!r}; have "
            + ", ".join(_INTEGRATORS)
        )
    if raw.get("analytic_solution"):
        analytic_fields(raw["analytic_solution"])
    missing = [n for n in declared if n not in sys_params]
    if missing:
        raise SystemFileError(
            f"{src}: no value for system parameter(s) {', '.join(sorted(missing))}"
        )
    cfg = RunConfig(
        nx=raw["nx"], ny=raw["ny"], nz=raw["nz"],
        dx=raw["dx"], dy=raw.get("dy", raw["dx"]), dz=raw.get("dz", raw["dx"]),
        t_final=raw["t_final"],
        ghost=raw.get("ghost", 1),
        integrator=integrator,
        icn_iterations=raw.get("icn_iterations", 3),
        courant=raw.get("courant"),
        dt=raw.get("dt"),
        constraint_every=raw.get("constraint_every", 1),
        output_every=raw.get("output_every", 0),
        output_dir=raw.get("output_dir"),
        analytic_solution=raw.get("analytic_solution"),
        system_params=sys_params,
    )
    if min(cfg.nx, cfg.ny, cfg.nz) < 1 or cfg.ghost < 1:
        raise SystemFileError(f"{src}: grid extents and ghost must be positive")
    if cfg.constraint_every < 1 or cfg.output_every < 0:
        raise SystemFileError(f"{src}: bad output cadence")
    return cfg


def load_run_config(path, sysdef: SystemDefinition) -> RunConfig:
    p = Path(path)
    return parse_run_config(p.read_text(), sysdef, p.stem)


# ---------------------------------------------------------------------------
# run assembly


def assemble_evolution(sysdef: SystemDefinition, config: RunConfig):
    """EvolutionSystem plus grid, integrator, and step size for a config."""
    if not sysdef.evolution:
        raise SystemFileError(f"system {sysdef.name!r} has no [evolution]")
    kernels = build_system_kernels(sysdef)
    evolved = evolved_component_names(sysdef)
    setters = []
    if "initial_setters" in kernels:
        setters.append(Setter(kernels["initial_setters"], "initial"))
    if "step_setters" in kernels:
        setters.append(Setter(kernels["step_setters"], "every_step"))
    fields = None
    if config.analytic_solution:
        fields = analytic_fields(config.analytic_solution)
        setters.append(Setter(analytic_setter(evolved, fields), "initial"))
    evaluators = []
    if "constraints" in kernels:
        evaluators.append(
            Evaluator("constraints", kernels["constraints"],
                      config.constraint_every)
        )
    system = EvolutionSystem(
        evolved=tuple(evolved),
        rhs_kernels=(kernels["rhs"],),
        setters=tuple(setters),
        evaluators=tuple(evaluators),
        parameters=dict(config.system_params),
    )
    grid = config.grid()
    integrator = Integrator(config.integrator, config.icn_iterations)
    return system, grid, integrator, config.step_size(grid), fields


def _write_snapshot(path: Path, grid: Grid, arr: np.ndarray) -> None:
    # header: three u32 interior extents; payload doubles, x fastest
    with open(path, "wb") as f:
        f.write(np.asarray(grid.interior_extents, dtype=np.uint32).tobytes())
        f.write(np.ascontiguousarray(arr[grid.core]).tobytes(order="F"))


def run_system(sysdef: SystemDefinition, config: RunConfig, out_dir) -> dict:
    """Evolve to t_final, writing norms.csv, optional snapshots, and
    errors.csv when an analytic solution is registered.

    Returns {"rows": norm rows, "errors": (name, l2, linf) list or None,
    "files": written file names}.
    """
    out = Path(config.output_dir or out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system, grid, integrator, dt, fields = assemble_evolution(sysdef, config)
    evolved = list(system.evolved)

    written = []
    hooks = {}
    if config.output_every > 0:
        def snapshot(step, t, arrays):
            if step % config.output_every:
                return
            for name in evolved:
                fn = out / f"{name}_{step:06d}.bin"
                _write_snapshot(fn, grid, arrays[name])
                written.append(fn.name)
        hooks["after_step"] = snapshot

    arrays, rows = run(system, grid, integrator, dt, config.t_final, hooks)

    norms = out / "norms.csv"
    with open(norms, "w") as f:
        f.write("step,time,name,l2,linf\n")
        for step, time, name, l2, linf in rows:
            f.write(f"{step},{time:.17g},{name},{l2:.17g},{linf:.17g}\n")
    written.append(norms.name)

    errors = None
    if fields is not None:
        errors = solution_errors(evolved, fields, grid, arrays, config.t_final)
        epath = out / "errors.csv"
        with open(epath, "w") as f:
            f.write("name,l2,linf\n")
            for name, l2, linf in errors:
                f.write(f"{name},{l2:.17g},{linf:.17g}\n")
        written.append(epath.name)
    return {"rows": rows, "errors": errors, "files": written, "arrays": arrays}


def _rescaled_config(config: RunConfig, resolution: int) -> RunConfig:
    """Same physical box and courant factor at a different resolution."""
    lx = config.nx * config.dx
    ly = config.ny * config.dy
    lz = config.nz * config.dz
    return RunConfig(
        nx=resolution, ny=resolution, nz=resolution,
        dx=lx / resolution, dy=ly / resolution, dz=lz / resolution,
        t_final=config.t_final, ghost=config.ghost,
        integrator=config.integrator, icn_iterations=config.icn_iterations,
        courant=config.courant, dt=None,
        constraint_every=config.constraint_every, output_every=0,
        output_dir=None, analytic_solution=config.analytic_solution,
        system_params=dict(config.system_params),
    )


def convergence_table(sysdef: SystemDefinition, config: RunConfig,
                      resolutions: Sequence[int]) -> list:
    """Run at each resolution and report observed order per adjacent pair.

    The error measure is the largest interior L-inf solution error over the
    evolved functions at the final time.  Zero error at both ends of a pair
    reports the order as "exact".
    """
    if len(resolutions) < 2:
        raise SystemFileError("converge needs at least 2 resolutions")
    if sorted(set(resolutions)) != sorted(resolutions):
        raise SystemFileError("resolutions must be distinct")
    if config.analytic_solution is None:
        raise SystemFileError("converge needs analytic_solution in the params")
    if config.courant is None:
        raise SystemFileError(
            "converge needs courant (a fixed dt cannot scale across resolutions)"
        )
    fields = analytic_fields(config.analytic_solution)
    errs = []
    for r in resolutions:
        cfg = _rescaled_config(config, r)
        system, grid, integrator, dt, _ = assemble_evolution(sysdef, cfg)
        arrays, _ = run(system, grid, integrator, dt, cfg.t_final)
        per = solution_errors(list(system.evolved), fields, grid, arrays,
                              cfg.t_final)
        errs.append(max(e for _, _, e in per))

    lines = ["resolution error_linf"]
    for r, e in zip(resolutions, errs):
        lines.append(f"{r} {e:.6e}")
    for (r0, e0), (r1, e1) in zip(zip(resolutions, errs),
                                  zip(resolutions[1:], errs[1:])):
        if e0 == 0.0 and e1 == 0.0:
            order = "exact"
        elif e1 == 0.0 or e0 == 0.0:
            order = "inf"
        else:
            order = f"{math.log(e0 / e1) / math.log(r1 / r0):.2f}"
        lines.append(f"order {r0}->{r1}: {order}")
    return lines
