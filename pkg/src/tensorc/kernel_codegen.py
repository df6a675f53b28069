"""Lowering of component equations to grid-loop kernels.

A kernel reads grid functions at one time level, precomputes centered
finite differences, evaluates the component right hand sides pointwise
and writes the results back to the grid. One intermediate form drives
both the C-syntax emitter and the in-process numpy executor, so the
tests exercise exactly the logic that would be compiled.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .tensor_ir import TensorError
from .component_expander import (
    ComponentEquation,
    ScalarTerm,
    eval_scalar,
)


class KernelError(TensorError):
    pass


@dataclass(frozen=True, slots=True)
class StencilConfig:
    """Finite differencing setup. Order 2 is the only stencil implemented;
    the field exists so higher orders slot in without an interface break."""

    fd_order: int = 2
    ghost_width: int = 1

    def __post_init__(self):
        if self.fd_order <= 0 or self.fd_order % 2 != 0:
            raise KernelError(
                f"finite difference order must be a positive even integer, "
                f"got {self.fd_order}"
            )
        if self.fd_order != 2:
            raise KernelError("only 2nd order stencils are implemented")
        if self.ghost_width < self.fd_order // 2:
            raise KernelError(
                f"ghost width {self.ghost_width} does not cover the "
                f"stencil radius {self.fd_order // 2}"
            )


_DERIV_NAME = re.compile(r"^D([123])(.+)$")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

# identifiers the emitted function claims for itself
_RESERVED = (
    "i", "j", "k", "index",
    "istart", "jstart", "kstart", "iend", "jend", "kend",
    "dx", "dy", "dz", "dxi", "dyi", "dzi", "hdxi", "hdyi", "hdzi",
    "nx", "ny", "nz", "nghost", "deltas",
    "INITVALUE", "GFINDEX3D", "DELTA_SPACE",
)


@dataclass(frozen=True, slots=True)
class KernelIR:
    """One pointwise update pass over the grid interior.

    assignments hold (grid function name, scalar expression) in dependency
    order; expressions refer to bare input names, D<dir><name> derivative
    locals, parameter names, and earlier assignment targets.
    """

    inputs: tuple          # grid functions read, sorted
    assignments: tuple     # (output name, scalar expr), dependency order
    derivative_precomputes: tuple  # (local name, direction, source gf)
    local_copies: tuple    # input gfs referenced undifferentiated, sorted
    params: tuple          # scalar parameter names, sorted
    ghost_width: int
    fd_order: int

    @property
    def outputs(self) -> tuple:
        return tuple(name for name, _ in self.assignments)


def build_kernel(
    equations: Sequence[ComponentEquation],
    stencil: StencilConfig,
    grid_functions: Iterable[str],
    params: Iterable[str] = (),
) -> KernelIR:
    """Classify every name the equations touch and order the assignments.

    grid_functions must list every component array the kernel may read or
    write; names of the form D<1|2|3><grid function> are centered
    derivatives of that function. Anything else must be a parameter.
    """
    gfs = set(grid_functions)
    pset = set(params)
    clash = sorted(gfs & pset)
    if clash:
        raise KernelError(
            f"names declared both grid function and parameter: {clash}"
        )

    out_order = []
    by_name = {}
    for eq in equations:
        if eq.lhs_name in by_name:
            raise KernelError(f"'{eq.lhs_name}' is assigned more than once")
        if eq.lhs_name not in gfs:
            raise KernelError(
                f"output '{eq.lhs_name}' is not a declared grid function"
            )
        by_name[eq.lhs_name] = eq
        out_order.append(eq.lhs_name)
    out_set = set(out_order)

    bare_reads = set()
    deriv_refs = set()
    deps = {name: set() for name in out_order}
    for eq in equations:
        for term in eq.rhs:
            for name, _ in term.factors:
                if name in pset:
                    continue
                if name in out_set:
                    deps[eq.lhs_name].add(name)
                    continue
                if name in gfs:
                    bare_reads.add(name)
                    continue
                m = _DERIV_NAME.match(name)
                if m and m.group(2) in gfs:
                    src = m.group(2)
                    if src in out_set:
                        raise KernelError(
                            f"'{eq.lhs_name}' takes the derivative "
                            f"'{name}' of a value computed in the same "
                            f"kernel"
                        )
                    deriv_refs.add((int(m.group(1)), src))
                    continue
                raise KernelError(
                    f"unknown name '{name}' in the equation for "
                    f"'{eq.lhs_name}': not a declared grid function, "
                    f"parameter or derivative of one"
                )

    # stable topological order over intra-kernel dependencies
    ordered = []
    placed = set()
    pending = list(out_order)
    while pending:
        progress = False
        rest = []
        for name in pending:
            if deps[name] <= placed:
                ordered.append(name)
                placed.add(name)
                progress = True
            else:
                rest.append(name)
        if not progress:
            raise KernelError(
                f"cyclic dependency among computed values: {sorted(rest)}"
            )
        pending = rest

    precomputes = tuple(
        (f"D{d}{src}", d, src)
        for src, d in sorted((src, d) for d, src in deriv_refs)
    )
    return KernelIR(
        inputs=tuple(sorted(bare_reads | {s for _, s in deriv_refs})),
        assignments=tuple((n, by_name[n].rhs) for n in ordered),
        derivative_precomputes=precomputes,
        local_copies=tuple(sorted(bare_reads)),
        params=tuple(sorted(pset)),
        ghost_width=stencil.ghost_width,
        fd_order=stencil.fd_order,
    )


# ---------------------------------------------------------------------------
# C-syntax emission


def _num(c: Fraction) -> str:
    if c.denominator == 1:
        return str(c.numerator)
    return repr(float(c))


def _c_term(term: ScalarTerm, rename) -> str:
    parts = []
    mag = abs(term.coeff)
    if mag != 1 or not term.factors:
        parts.append(_num(mag))
    for name, exp in term.factors:
        ident = rename(name)
        parts.append(ident if exp == 1 else f"pow({ident}, {exp})")
    return "*".join(parts)


def _c_expr(scalar, rename) -> str:
    if not scalar:
        return "0"
    pieces = []
    for pos, term in enumerate(scalar):
        body = _c_term(term, rename)
        if pos == 0:
            pieces.append(("-" if term.coeff < 0 else "") + body)
        else:
            pieces.append(("- " if term.coeff < 0 else "+ ") + body)
    return " ".join(pieces)


_DERIV_STENCILS = {
    1: ("GFINDEX3D(i + 1, j, k)", "GFINDEX3D(i - 1, j, k)", "hdxi"),
    2: ("GFINDEX3D(i, j + 1, k)", "GFINDEX3D(i, j - 1, k)", "hdyi"),
    3: ("GFINDEX3D(i, j, k + 1)", "GFINDEX3D(i, j, k - 1)", "hdzi"),
}


def emit_c(ir: KernelIR, function_name: str) -> str:
    """Render the kernel as one self-contained C-syntax function.

    The output is a pure function of the IR: identical IR gives identical
    bytes. Section comments and the finite differencing constant lines are
    part of the stable surface that golden tests pin down.
    """
    if not _IDENT.match(function_name):
        raise KernelError(f"invalid function name '{function_name}'")
    claimed = {name: "reserved word" for name in _RESERVED}
    claimed[function_name] = "function name"

    def claim(name, what):
        if not _IDENT.match(name):
            raise KernelError(f"'{name}' is not a valid identifier")
        if name in claimed:
            raise KernelError(
                f"identifier collision: '{name}' is both {claimed[name]} "
                f"and {what}"
            )
        claimed[name] = what

    for name in ir.inputs:
        claim(name, "input grid function")
    for name in ir.outputs:
        claim(name, "output grid function")
    for name in ir.local_copies:
        claim(f"{name}L", "local copy")
    for name, _, _ in ir.derivative_precomputes:
        claim(name, "derivative local")
    for name in ir.outputs:
        claim(f"{name}L", "output local")
    for name in ir.params:
        claim(name, "parameter")

    out_set = set(ir.outputs)
    pset = set(ir.params)
    dnames = {name for name, _, _ in ir.derivative_precomputes}

    def rename(name: str) -> str:
        if name in pset or name in dnames:
            return name
        if name in out_set or name in ir.local_copies:
            return f"{name}L"
        raise KernelError(f"expression references unclassified name '{name}'")

    sig = ["int nx", "int ny", "int nz", "int nghost", "const double *deltas"]
    sig += [f"const double *{name}" for name in ir.inputs]
    sig += [f"double *{name}" for name in ir.outputs]
    sig += [f"double {name}" for name in ir.params]

    top = [
        "/* Define macros used in calculations */",
        "#define INITVALUE (42)",
        "#define GFINDEX3D(i, j, k) ((i) + nx * ((j) + ny * (k)))",
        "#define DELTA_SPACE(d) (deltas[(d)])",
        "",
        f"void {function_name}({', '.join(sig)})",
        "{",
    ]

    decl_loop = [" /* Declare the variables used for looping over grid points */"]
    decl_loop += [
        f" int {v} = INITVALUE;"
        for v in ("i", "j", "k", "index",
                  "istart", "jstart", "kstart", "iend", "jend", "kend")
    ]

    decl_fd = [" /* Declare finite differencing variables */"]
    decl_fd += [
        f" double {v} = INITVALUE;"
        for v in ("dx", "dy", "dz", "dxi", "dyi", "dzi",
                  "hdxi", "hdyi", "hdzi")
    ]

    decl_locals = [" /* Declare local copies of grid functions */"]
    decl_locals += [f" double {name}L = INITVALUE;" for name in ir.local_copies]
    decl_locals += [
        f" double {name} = INITVALUE;"
        for name, _, _ in ir.derivative_precomputes
    ]
    decl_locals += [f" double {name}L = INITVALUE;" for name in ir.outputs]

    init_fd = [
        " /* Initialize finite differencing variables */",
        " dx = DELTA_SPACE(0);",
        " dy = DELTA_SPACE(1);",
        " dz = DELTA_SPACE(2);",
        " dxi = 1 / dx;",
        " dyi = 1 / dy;",
        " dzi = 1 / dz;",
        " hdxi = 0.5 * dxi;",
        " hdyi = 0.5 * dyi;",
        " hdzi = 0.5 * dzi;",
    ]

    bounds = [
        " /* Set up variables used in the grid loop */",
        " istart = nghost;",
        " jstart = nghost;",
        " kstart = nghost;",
        " iend = nx - nghost;",
        " jend = ny - nghost;",
        " kend = nz - nghost;",
    ]

    assign = ["    /* Assign local copies of grid functions */"]
    assign += [f"    {name}L = {name}[index];" for name in ir.local_copies]

    derivs = ["    /* Precompute derivatives */"]
    for name, d, src in ir.derivative_precomputes:
        plus, minus, hdi = _DERIV_STENCILS[d]
        derivs.append(f"    {name} = ({src}[{plus}] - {src}[{minus}]) * {hdi};")

    calc = ["    /* Calculate grid functions */"]
    calc += [
        f"    {name}L = {_c_expr(rhs, rename)};"
        for name, rhs in ir.assignments
    ]

    copyback = ["    /* Copy local copies back to grid functions */"]
    copyback += [f"    {name}[index] = {name}L;" for name in ir.outputs]

    body = [
        " /* Loop over the grid points */",
        " for (k = kstart; k < kend; k++)",
        " {",
        "  for (j = jstart; j < jend; j++)",
        "  {",
        "   for (i = istart; i < iend; i++)",
        "   {",
        "    index = GFINDEX3D(i, j, k);",
        "",
        "\n".join(assign),
        "",
        "\n".join(derivs),
        "",
        "\n".join(calc),
        "",
        "\n".join(copyback),
        "   }",
        "  }",
        " }",
        "}",
    ]

    sections = [top, decl_loop, decl_fd, decl_locals, init_fd, bounds, body]
    return "\n\n".join("\n".join(s) for s in sections) + "\n"


# ---------------------------------------------------------------------------
# in-process execution


def execute_kernel(
    ir: KernelIR,
    arrays: Mapping[str, np.ndarray],
    spacing: Sequence[float],
    params: Optional[Mapping[str, float]] = None,
) -> Mapping[str, np.ndarray]:
    """Run the kernel over the grid interior, writing outputs in place.

    Ghost zones of the outputs are never touched. Derivatives use the
    same centered stencil the emitted source spells out, so the two
    backends agree to rounding.
    """
    given = dict(params or {})
    g = ir.ghost_width

    shape = None
    for name in list(ir.inputs) + list(ir.outputs):
        arr = arrays.get(name)
        if arr is None:
            raise KernelError(f"missing grid function '{name}'")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise KernelError(
                f"grid function '{name}' has shape {arr.shape}, "
                f"expected {shape}"
            )
    if shape is None:
        return arrays
    if len(shape) != 3:
        raise KernelError(f"grid functions must be 3D, got shape {shape}")
    for n in shape:
        if n < 2 * g + 1:
            raise KernelError(
                f"extent {n} is too small for ghost width {g}"
            )

    nx, ny, nz = shape
    core = (slice(g, nx - g), slice(g, ny - g), slice(g, nz - g))
    half = [0.5 / float(spacing[ax]) for ax in range(3)]

    env: dict = {}
    for name in ir.params:
        if name not in given:
            raise KernelError(f"missing parameter '{name}'")
        env[name] = float(given[name])
    for name in ir.local_copies:
        env[name] = arrays[name][core]
    for name, d, src in ir.derivative_precomputes:
        ax = d - 1
        plus = list(core)
        minus = list(core)
        plus[ax] = slice(core[ax].start + 1, core[ax].stop + 1)
        minus[ax] = slice(core[ax].start - 1, core[ax].stop - 1)
        env[name] = (arrays[src][tuple(plus)] - arrays[src][tuple(minus)]) * half[ax]

    for name, rhs in ir.assignments:
        arrays[name][core] = eval_scalar(rhs, env)
        env[name] = arrays[name][core]
    return arrays
