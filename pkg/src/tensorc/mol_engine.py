"""Structured-grid method-of-lines runtime.

Grid functions live on a 3D box with ghost layers; boundaries are
periodic. An evolution system couples right-hand-side kernels to an
explicit integrator, with setter kernels scheduled initially or every
substage and evaluator kernels producing norm time series at a fixed
step cadence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .tensor_ir import TensorError
from .kernel_codegen import KernelIR, execute_kernel


class MolError(TensorError):
    pass


@dataclass(frozen=True, slots=True)
class Grid:
    """Box geometry. Extents count every point, ghost layers included;
    interior point (0,0,0) sits at the origin."""

    extents: tuple
    spacing: tuple
    ghost_width: int
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.extents) != 3 or len(self.spacing) != 3:
            raise MolError("extents and spacing must have three axes")
        if self.ghost_width < 1:
            raise MolError("ghost width must be at least 1")
        for n in self.extents:
            if n < 2 * self.ghost_width + 1:
                raise MolError(
                    f"extent {n} is too small for ghost width "
                    f"{self.ghost_width}"
                )
        for h in self.spacing:
            if not (h > 0):
                raise MolError(f"spacing must be positive, got {h}")

    @classmethod
    def periodic_unit(cls, shape, ghost_width=1):
        """Interior shape points per axis covering [0,1) periodically."""
        if isinstance(shape, int):
            shape = (shape, shape, shape)
        extents = tuple(n + 2 * ghost_width for n in shape)
        spacing = tuple(1.0 / n for n in shape)
        return cls(extents, spacing, ghost_width)

    @property
    def interior_extents(self) -> tuple:
        g = self.ghost_width
        return tuple(n - 2 * g for n in self.extents)

    @property
    def core(self) -> tuple:
        g = self.ghost_width
        return tuple(slice(g, n - g) for n in self.extents)

    def coordinates(self, axis: int) -> np.ndarray:
        """Full-extent coordinate vector along an axis, ghosts included."""
        g = self.ghost_width
        i = np.arange(self.extents[axis], dtype=float) - g
        return self.origin[axis] + i * self.spacing[axis]

    def mesh(self):
        """Broadcastable x, y, z coordinate arrays over the full box."""
        x = self.coordinates(0)[:, None, None]
        y = self.coordinates(1)[None, :, None]
        z = self.coordinates(2)[None, None, :]
        return x, y, z

    def allocate(self) -> np.ndarray:
        return np.zeros(self.extents, dtype=np.float64)


def apply_periodic_bc(grid: Grid, arr: np.ndarray) -> np.ndarray:
    """Fill ghost layers by wrapping the interior, axis by axis. Corner
    ghosts come out right because later axes copy already-wrapped data."""
    g = grid.ghost_width
    for ax, n in enumerate(grid.extents):
        if n - 2 * g < g:
            raise MolError(
                f"interior extent {n - 2 * g} along axis {ax} is smaller "
                f"than the ghost width {g}"
            )
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        src_lo = [slice(None)] * 3
        src_hi = [slice(None)] * 3
        lo[ax] = slice(0, g)
        src_lo[ax] = slice(n - 2 * g, n - g)
        hi[ax] = slice(n - g, n)
        src_hi[ax] = slice(g, 2 * g)
        arr[tuple(lo)] = arr[tuple(src_lo)]
        arr[tuple(hi)] = arr[tuple(src_hi)]
    return arr


def fd_derivative(grid: Grid, arr: np.ndarray, direction: int) -> np.ndarray:
    """Centered 2nd-order derivative over the interior. Ghosts must be
    filled; the result has interior shape."""
    if direction not in (1, 2, 3):
        raise MolError(f"direction must be 1, 2 or 3, got {direction}")
    ax = direction - 1
    core = list(grid.core)
    plus = list(core)
    minus = list(core)
    plus[ax] = slice(core[ax].start + 1, core[ax].stop + 1)
    minus[ax] = slice(core[ax].start - 1, core[ax].stop - 1)
    half = 0.5 / grid.spacing[ax]
    return (arr[tuple(plus)] - arr[tuple(minus)]) * half


# ---------------------------------------------------------------------------
# systems and scheduling

SetterFn = Callable[[Grid, dict, float], None]


@dataclass(frozen=True, slots=True)
class Setter:
    """Assigns non-integrated data. Kernel setters write interiors and get
    their ghosts wrapped afterwards; callables receive (grid, arrays, t)
    and are expected to fill the full box themselves."""

    action: Union[KernelIR, SetterFn]
    schedule: str = "initial"

    def __post_init__(self):
        if self.schedule not in ("initial", "every_step"):
            raise MolError(
                f"setter schedule must be 'initial' or 'every_step', "
                f"got '{self.schedule}'"
            )


@dataclass(frozen=True, slots=True)
class Evaluator:
    """Diagnostic kernel run every `every` steps; L2 and Linf norms of
    each output are recorded."""

    name: str
    kernel: KernelIR
    every: int = 1

    def __post_init__(self):
        if self.every < 1:
            raise MolError(f"evaluator cadence must be >= 1, got {self.every}")


@dataclass(frozen=True, slots=True)
class Integrator:
    kind: str = "rk4"
    icn_iterations: int = 3

    def __post_init__(self):
        if self.kind not in ("rk2", "rk4", "icn"):
            raise MolError(f"unknown integrator '{self.kind}'")
        if self.icn_iterations < 1:
            raise MolError("icn_iterations must be >= 1")


@dataclass(frozen=True, slots=True)
class EvolutionSystem:
    evolved: tuple
    rhs_kernels: tuple
    setters: tuple = ()
    evaluators: tuple = ()
    parameters: Mapping[str, float] = field(default_factory=dict)
    rhs_suffix: str = "rhs"

    def __post_init__(self):
        if len(set(self.evolved)) != len(self.evolved):
            raise MolError("evolved function names must be unique")
        owners = {}
        for kern in self.rhs_kernels:
            for out in kern.outputs:
                if out in owners:
                    raise MolError(f"'{out}' is written by two kernels")
                owners[out] = kern
        for name in self.evolved:
            if name + self.rhs_suffix not in owners:
                raise MolError(f"no right hand side computes '{name}'")
        wanted = {name + self.rhs_suffix for name in self.evolved}
        for out in owners:
            if out not in wanted:
                raise MolError(
                    f"right hand side output '{out}' matches no evolved "
                    f"function"
                )
        evolved = set(self.evolved)
        for s in self.setters:
            if s.schedule == "every_step" and isinstance(s.action, KernelIR):
                hit = sorted(set(s.action.outputs) & evolved)
                if hit:
                    raise MolError(
                        f"every-step setter writes evolved functions: {hit}"
                    )
        for ev in self.evaluators:
            hit = sorted(set(ev.kernel.outputs) & evolved)
            if hit:
                raise MolError(
                    f"evaluator '{ev.name}' writes evolved functions: {hit}"
                )

    def boundary_functions(self) -> tuple:
        """Grid functions whose ghosts must track the interior."""
        names = set(self.evolved)
        for s in self.setters:
            if isinstance(s.action, KernelIR):
                names.update(s.action.outputs)
        return tuple(sorted(names))

    def storage_names(self) -> tuple:
        names = set(self.evolved)
        names.update(n + self.rhs_suffix for n in self.evolved)
        kernels = list(self.rhs_kernels)
        kernels += [s.action for s in self.setters
                    if isinstance(s.action, KernelIR)]
        kernels += [ev.kernel for ev in self.evaluators]
        for kern in kernels:
            names.update(kern.inputs)
            names.update(kern.outputs)
        return tuple(sorted(names))


def allocate_state(system: EvolutionSystem, grid: Grid) -> dict:
    return {name: grid.allocate() for name in system.storage_names()}


def _run_setters(system, grid, arrays, t, schedule):
    for s in system.setters:
        if s.schedule != schedule:
            continue
        if isinstance(s.action, KernelIR):
            execute_kernel(s.action, arrays, grid.spacing, system.parameters)
        else:
            s.action(grid, arrays, t)


def prepare_state(system: EvolutionSystem, grid: Grid, arrays: dict,
                  t: float) -> None:
    """Every-step setters, then ghost fill: the state a stencil may read."""
    _run_setters(system, grid, arrays, t, "every_step")
    for name in system.boundary_functions():
        apply_periodic_bc(grid, arrays[name])


def _rhs(system, grid, arrays, u, t):
    core = grid.core
    for name, vals in u.items():
        arrays[name][core] = vals
    prepare_state(system, grid, arrays, t)
    for kern in system.rhs_kernels:
        execute_kernel(kern, arrays, grid.spacing, system.parameters)
    return {
        name: arrays[name + system.rhs_suffix][core].copy()
        for name in system.evolved
    }


def _lincomb(u, pieces):
    # u + sum(c * k) over evolved functions
    out = {}
    for name, base in u.items():
        acc = base.copy()
        for c, k in pieces:
            acc += c * k[name]
        out[name] = acc
    return out


def mol_step(system: EvolutionSystem, grid: Grid, arrays: dict,
             integrator: Integrator, dt: float, t: float,
             step: int) -> float:
    """Advance every evolved function by dt. Raises on non-finite data."""
    if not (dt > 0):
        raise MolError(f"dt must be positive, got {dt}")
    core = grid.core
    u = {name: arrays[name][core].copy() for name in system.evolved}

    def F(state, at):
        return _rhs(system, grid, arrays, state, at)

    if integrator.kind == "rk4":
        k1 = F(u, t)
        k2 = F(_lincomb(u, [(dt / 2, k1)]), t + dt / 2)
        k3 = F(_lincomb(u, [(dt / 2, k2)]), t + dt / 2)
        k4 = F(_lincomb(u, [(dt, k3)]), t + dt)
        unew = _lincomb(u, [(dt / 6, k1), (dt / 3, k2),
                            (dt / 3, k3), (dt / 6, k4)])
    elif integrator.kind == "rk2":
        k1 = F(u, t)
        k2 = F(_lincomb(u, [(dt / 2, k1)]), t + dt / 2)
        unew = _lincomb(u, [(dt, k2)])
    else:  # icn
        d0 = F(u, t)
        fk = d0
        unew = u
        for it in range(integrator.icn_iterations):
            unew = _lincomb(u, [(dt / 2, d0), (dt / 2, fk)])
            if it < integrator.icn_iterations - 1:
                fk = F(unew, t + dt)

    for name in system.evolved:
        vals = unew[name]
        if not np.all(np.isfinite(vals)):
            raise MolError(
                f"non-finite values in '{name}' after step {step}"
            )
        arrays[name][core] = vals
    return t + dt


def courant_dt(grid: Grid, courant: float) -> float:
    return courant * min(grid.spacing)


def _norms(grid, arr):
    vals = arr[grid.core]
    l2 = float(np.sqrt(np.mean(vals * vals)))
    linf = float(np.max(np.abs(vals))) if vals.size else 0.0
    return l2, linf


def evaluate_diagnostics(system: EvolutionSystem, grid: Grid, arrays: dict,
                         t: float, step: int, rows: list) -> None:
    """Run every due evaluator and append (step, time, name, l2, linf)."""
    due = [ev for ev in system.evaluators if step % ev.every == 0]
    if not due:
        return
    prepare_state(system, grid, arrays, t)
    for ev in due:
        execute_kernel(ev.kernel, arrays, grid.spacing, system.parameters)
        for out in ev.kernel.outputs:
            l2, linf = _norms(grid, arrays[out])
            rows.append((step, t, out, l2, linf))


def run(system: EvolutionSystem, grid: Grid, integrator: Integrator,
        dt: float, t_final: float,
        hooks: Optional[Mapping[str, Callable]] = None):
    """Initial setters, then the step loop with evaluator cadence.

    Returns (arrays, rows): final state plus the norm time series as
    (step, time, name, l2, linf) tuples. The last step shortens so the
    final time is hit exactly.
    """
    if not (dt > 0):
        raise MolError(f"dt must be positive, got {dt}")
    if t_final < 0:
        raise MolError(f"t_final must be nonnegative, got {t_final}")
    hooks = dict(hooks or {})
    arrays = allocate_state(system, grid)

    t = 0.0
    _run_setters(system, grid, arrays, t, "initial")
    prepare_state(system, grid, arrays, t)

    rows: list = []
    evaluate_diagnostics(system, grid, arrays, t, 0, rows)
    after_step = hooks.get("after_step")
    if after_step is not None:
        after_step(0, t, arrays)

    step = 0
    eps = 1e-12 * max(1.0, abs(t_final))
    while t_final - t > eps:
        h = min(dt, t_final - t)
        t = mol_step(system, grid, arrays, integrator, h, t, step + 1)
        step += 1
        evaluate_diagnostics(system, grid, arrays, t, step, rows)
        if after_step is not None:
            after_step(step, t, arrays)
    prepare_state(system, grid, arrays, t)
    return arrays, rows
