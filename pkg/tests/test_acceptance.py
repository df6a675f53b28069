"""End-to-end acceptance checks.

One test per advertised guarantee, each printing a single PASS/FAIL line
with the measured quantity and its tolerance.  Run with `-s` (or read the
captured output) to see the lines.  The Maxwell convergence check is the
long pole at tens of seconds; everything else is sub-second.
"""

import math
import re
import time
from fractions import Fraction

import numpy as np
import pytest

from tensorc.tensor_ir import (
    DOWN,
    Expr,
    SymbolTable,
    free_indices,
    parse_expression,
    substitute_literal,
    unparse,
)
from tensorc.rewrite_engine import (
    apply_rules,
    decompose,
    define_rule,
    metric_split_rule,
    projection_rules,
    ruleset,
)
from tensorc.component_expander import (
    component_name,
    derivative_name,
    eval_scalar,
    expand_sums,
    independent_components,
    scalarize,
)
from tensorc.mol_engine import run
from tensorc.systems import (
    assemble_evolution,
    generated_files,
    parse_run_config,
    parse_system,
    resolve_system,
    run_system,
)

from genexpr import make_table, make_spacetime_table, random_equation
from oracle import (
    array_from_values,
    eval_expr,
    random_array,
    scalar_env_from_arrays,
)


def report(num, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {num} ({title}): {detail}"
    print(line, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. expansion agrees with brute-force index summation


def _oracle_batch(table, rng, count, kind_name, free_labels, names,
                  wrap_prob, const_names=()):
    syms = [table.lookup(n) for n in names]
    arrays = {s.name: random_array(s, rng) for s in syms}
    for cname in const_names:
        arrays[cname] = array_from_values(table.lookup(cname))
    deriv_arrays = None
    if wrap_prob > 0:
        deriv_arrays = {
            (d, s.name): random_array(s, rng)
            for s in syms for d in (1, 2, 3)
        }
    env = scalar_env_from_arrays(syms, arrays, deriv_arrays)
    kind = table.kind(kind_name)
    values = list(range(kind.lo, kind.hi + 1))
    worst = 0.0
    for _ in range(count):
        rank = int(rng.integers(0, 3))
        free, expr = random_equation(rng, table, rank, kind_name=kind_name,
                                     free_labels=free_labels,
                                     wrap_prob=wrap_prob)
        if rank == 0:
            combos = [()]
        elif rank == 1:
            combos = [(v,) for v in values]
        else:
            combos = [(a, b) for a in values for b in values]
        for combo in combos:
            binding = dict(zip([i.label for i in free], combo))
            lit = Expr(
                tuple(substitute_literal(t, binding) for t in expr.terms)
            )
            got = eval_scalar(scalarize(expand_sums(lit)), env)
            want = eval_expr(expr, arrays, deriv_arrays or {}, binding)
            worst = max(worst, abs(want - got) / max(1.0, abs(want)))
    return worst


def test_criterion_1_expansion_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(20260819)
    worst_spatial = _oracle_batch(
        make_table(), rng, 120, "spatial", ("i", "j"),
        ("E", "F", "T", "v", "w", "phi"), wrap_prob=0.3,
        const_names=("eps", "delta"))
    worst_spacetime = _oracle_batch(
        make_spacetime_table(), rng, 80, "spacetime", ("a", "b"),
        ("G", "A", "M", "u", "z", "psi"), wrap_prob=0.0,
        const_names=("delta4",))
    elapsed = time.perf_counter() - start
    worst = max(worst_spatial, worst_spacetime)
    report(1, "expansion oracle equivalence",
           worst <= 1e-12 and elapsed < 10.0,
           f"200 random equations, max relative deviation {worst:.2e} "
           f"(tol 1e-12) in {elapsed:.1f}s (limit 10s)")


# ---------------------------------------------------------------------------
# 2. component ordering and naming


def test_criterion_2_component_ordering_and_naming():
    t = SymbolTable()
    t.declare_tensor("E", ["spatial"] * 2, symmetries=[(0, 1, 1)])
    t.declare_tensor("B", ["spatial"] * 2)
    combos = [tuple(c) for c in independent_components(t.lookup("E"))]
    want = [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]
    name = component_name(t.lookup("E"), (1, 1))[0]
    dname = derivative_name(1, component_name(t.lookup("B"), (1, 2))[0])
    ok = combos == want and name == "E11" and dname == "D1B12"
    report(2, "component ordering and naming", ok,
           f"independent components {combos}, names {name!r}, {dname!r}")


# ---------------------------------------------------------------------------
# 3. projection / orthogonality / metric-split fixtures


def test_criterion_3_rewrite_fixtures():
    t = SymbolTable()
    t.declare_tensor("g", ["spacetime"] * 2, symmetries=[(0, 1, 1)])
    t.declare_tensor("h", ["spacetime"] * 2, symmetries=[(0, 1, 1)],
                     attribute="spatial")
    t.declare_tensor("n", ["spacetime"], attribute="timelike")
    t.declare_tensor("v", ["spacetime"], attribute="spatial")
    rules = ruleset(
        projection_rules(t, "v"),
        projection_rules(t, "h"),
        [metric_split_rule(t)],
        [define_rule(t, "n[u_a_] * n[l_a_]", "-1", name="nn")],
        max_passes=5,
    )
    norm = apply_rules(
        parse_expression(t, "g[l_a, l_b] * n[u_a] * n[u_b]"), rules)
    proj = apply_rules(parse_expression(t, "h[u_a, l_b] * v[u_b]"), rules)
    ok = unparse(norm) == "-1" and unparse(proj) == "v[u_a]"
    report(3, "rewrite fixtures",
           ok, f"g_ab n^a n^b -> {unparse(norm)}, h^a_b v^b -> {unparse(proj)}"
           " at fixpoint within 5 passes")


# ---------------------------------------------------------------------------
# 4. decomposition part count and recombination


def test_criterion_4_decomposition_recombination():
    t = SymbolTable()
    t.declare_tensor("T", ["spacetime"] * 2)
    t.declare_tensor("u", ["spacetime"])
    t.declare_tensor("phi", [])
    t.declare_tensor("n", ["spacetime"], attribute="timelike")
    t.declare_tensor("h", ["spacetime"] * 2, attribute="spatial")
    n, h = t.lookup("n"), t.lookup("h")
    rng = np.random.default_rng(11)

    n_up = rng.uniform(-1.5, 1.5, size=4)
    n_dn = rng.uniform(-1.5, 1.5, size=4)
    n_dn *= -1.0 / float(n_up @ n_dn)
    h_ul = np.eye(4) + np.outer(n_up, n_dn)
    arrays = {
        "T": rng.uniform(-2, 2, size=(4, 4)),
        "u": rng.uniform(-2, 2, size=4),
        "phi": np.asarray(rng.uniform(-2, 2)),
        ("n", "u"): n_up,
        ("n", "l"): n_dn,
        ("h", "ul"): h_ul,
        ("h", "lu"): h_ul.T,
    }

    counts = {}
    worst = 0.0
    for src, rank in [("phi", 0), ("u[l_a]", 1), ("T[l_a, l_b]", 2)]:
        expr = parse_expression(t, src)
        frees = sorted(free_indices(expr), key=lambda i: i.label)
        parts = decompose(expr, n, h, ruleset([]))
        counts[rank] = len(parts)
        combos = [()] if rank == 0 else (
            [(v,) for v in range(4)] if rank == 1 else
            [(a, b) for a in range(4) for b in range(4)])
        for combo in combos:
            binding = dict(zip([i.label for i in frees], combo))
            want = eval_expr(expr, arrays, {}, binding)
            got = 0.0
            for mask, part in enumerate(parts):
                weight = 1.0
                inner = dict(binding)
                for pos, idx in enumerate(frees):
                    if mask >> pos & 1:
                        arr = n_dn if idx.variance == DOWN else n_up
                        weight *= arr[combo[pos]]
                        inner.pop(idx.label)
                got += weight * eval_expr(part, arrays, {}, inner)
            worst = max(worst, abs(want - got) / max(1.0, abs(want)))
    ok = counts == {0: 1, 1: 2, 2: 4} and worst <= 1e-12
    report(4, "decomposition recombination", ok,
           f"part counts {counts} (want 2^k), recombination deviation "
           f"{worst:.2e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# 5. emitted kernel structure and determinism


_SECTION_COMMENTS = [
    "/* Declare local copies of grid functions */",
    "/* Precompute derivatives */",
    "/* Calculate grid functions */",
    "/* Copy local copies back to grid functions */",
]


def test_criterion_5_codegen_golden_structure():
    first = dict(generated_files(resolve_system("maxwell")))
    second = dict(generated_files(resolve_system("maxwell")))
    ok = first == second
    checked = 0
    for name in ("maxwell_rhs.c-syntax", "maxwell_constraints.c-syntax"):
        src = first[name]
        positions = [src.find(s) for s in _SECTION_COMMENTS]
        ok = ok and all(p >= 0 for p in positions)
        ok = ok and positions == sorted(positions)
        ok = ok and "dxi = 1 / dx;" in src and "hdxi = 0.5 * dxi;" in src
        checked += 1
    report(5, "codegen golden structure", ok and checked == 2,
           "four section comments in order, dxi/hdxi lines present, "
           "re-emission byte-identical")


# ---------------------------------------------------------------------------
# 6. Maxwell plane-wave convergence


def _maxwell_params(n, analytic, constraint_every):
    return (
        f"nx = {n}\nny = {n}\nnz = {n}\ndx = {1.0 / n!r}\n"
        "courant = 0.25\nt_final = 1.0\nintegrator = rk4\n"
        f"analytic_solution = {analytic}\n"
        f"constraint_every = {constraint_every}\n"
    )


def _run_maxwell(n, analytic, constraint_every, out):
    sysdef = resolve_system("maxwell")
    cfg = parse_run_config(
        _maxwell_params(n, analytic, constraint_every), sysdef, "p")
    return run_system(sysdef, cfg, out)


def _final_l2(rows):
    last = {}
    for step, _, name, l2, _ in rows:
        last[name] = (step, l2)
    return {name: l2 for name, (_, l2) in last.items()}


def test_criterion_6_maxwell_convergence(tmp_path):
    start = time.perf_counter()

    # solution error against the exact travelling wave
    linf = {}
    for n in (32, 64):
        result = _run_maxwell(n, "plane_wave", 10**6, tmp_path / f"s{n}")
        linf[n] = max(e for _, _, e in result["errors"])
    ratio = linf[32] / linf[64]

    # constraint decay needs a wave oblique to the grid so the discrete
    # divergences carry truncation error in every direction
    div = {}
    for n in (16, 32):
        result = _run_maxwell(n, "plane_wave_oblique", 4 * n,
                              tmp_path / f"d{n}")
        div[n] = _final_l2(result["rows"])
    order_e = math.log2(div[16]["divE"] / div[32]["divE"])
    order_b = math.log2(div[16]["divB"] / div[32]["divB"])

    elapsed = time.perf_counter() - start
    ok = (3.5 <= ratio <= 4.5
          and abs(order_e - 2.0) <= 0.3
          and abs(order_b - 2.0) <= 0.3
          and elapsed < 60.0)
    report(6, "Maxwell plane-wave convergence", ok,
           f"Linf ratio 32/64 = {ratio:.3f} (want [3.5, 4.5]), "
           f"div orders E {order_e:.2f} / B {order_b:.2f} (want 2.0 +- 0.3), "
           f"{elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------------------
# 7. integrator orders in ODE mode


_ROTATION = """
[tensors]
u :
v :

[evolution]
u = -v
v = u

[setters]
u = 1 @ initial
"""


def _rotation_error(integrator, dt, t_final, tmp_path, tag):
    sysdef = parse_system(_ROTATION, "rotation")
    text = (f"nx = 2\nny = 2\nnz = 2\ndx = 1.0\ndt = {dt!r}\n"
            f"t_final = {t_final!r}\nintegrator = {integrator}\n")
    cfg = parse_run_config(text, sysdef, "p")
    result = run_system(sysdef, cfg, tmp_path / tag)
    g = cfg.grid()
    u = float(result["arrays"]["u"][g.core][0, 0, 0])
    v = float(result["arrays"]["v"][g.core][0, 0, 0])
    return math.hypot(u - math.cos(t_final), v - math.sin(t_final))


def test_criterion_7_integrator_orders(tmp_path):
    ratios = {}
    for integ in ("rk4", "rk2"):
        errs = [
            _rotation_error(integ, dt, 1.0, tmp_path, f"{integ}{i}")
            for i, dt in enumerate((0.1, 0.05))
        ]
        ratios[integ] = errs[0] / errs[1]

    # two-component rotation through the full stack for 1000 ICN steps
    sysdef = parse_system(_ROTATION, "rotation")
    cfg = parse_run_config(
        "nx = 2\nny = 2\nnz = 2\ndx = 1.0\ncourant = 0.25\n"
        "t_final = 250.0\nintegrator = icn\n", sysdef, "p")
    system, grid, integrator, dt, _ = assemble_evolution(sysdef, cfg)
    peak = 0.0
    steps = 0

    def track(step, t, arrays):
        nonlocal peak, steps
        steps = step
        peak = max(peak, math.hypot(arrays["u"][1, 1, 1],
                                    arrays["v"][1, 1, 1]))

    run(system, grid, integrator, dt, 250.0, {"after_step": track})

    ok = (12.0 <= ratios["rk4"] <= 20.0
          and 3.5 <= ratios["rk2"] <= 4.5
          and steps >= 1000 and peak <= 1.01)
    report(7, "integrator orders", ok,
           f"halving ratios rk4 {ratios['rk4']:.1f} (want [12, 20]), "
           f"rk2 {ratios['rk2']:.2f} (want [3.5, 4.5]); icn(3) peak "
           f"amplitude {peak:.4f} over {steps} steps (want <= 1.01)")


# ---------------------------------------------------------------------------
# 8. frame-transport golden kernel


_B11_TARGET_TERMS = {
    ("B11L", "chi11L"): 2, ("B31L", "chi13L"): 2, ("B21L", "chi21L"): 1,
    ("B22L", "chi22L"): -1, ("B32L", "chi23L"): -1, ("B31L", "chi31L"): 1,
    ("B32L", "chi32L"): -1, ("B11L", "chi33L"): 1, ("B22L", "chi33L"): 1,
    ("B11L", "trKL"): -2,
    ("El21L", "gamma131L"): -1, ("El32L", "gamma221L"): -1,
    ("El11L", "gamma231L"): 2, ("El22L", "gamma231L"): 1,
    ("El11L", "gamma321L"): -1, ("El22L", "gamma321L"): 1,
    ("El32L", "gamma331L"): 1, ("El31L", "gamma332L"): 1,
    ("D1El21", "e31L"): -1, ("D1El31", "e21L"): 1,
    ("D2El21", "e32L"): -1, ("D2El31", "e22L"): 1, ("D3El21", "e33L"): -1,
}


def _parse_assignment_terms(line):
    """'x = 2*a*b - c*d;' -> {sorted factor tuple: signed coefficient}."""
    rhs = line.split("=", 1)[1].strip().rstrip(";")
    out = {}
    for sign, body in re.findall(r"([+-]?)\s*([^+\s-][^+-]*)", rhs):
        coeff = Fraction(-1 if sign == "-" else 1)
        factors = []
        for tok in body.strip().split("*"):
            tok = tok.strip()
            if re.fullmatch(r"\d+(/\d+)?", tok):
                coeff *= Fraction(tok)
            else:
                factors.append(tok)
        key = tuple(sorted(factors))
        out[key] = out.get(key, Fraction(0)) + coeff
    return out


def test_criterion_8_frame_golden_kernel():
    files = dict(generated_files(resolve_system("frame_weyl")))
    src = files["frame_weyl_rhs.c-syntax"]
    line = next(
        l for l in src.splitlines()
        if l.lstrip().startswith("B11rhsL = ")
    )
    got = _parse_assignment_terms(line)
    missing = {
        key: want for key, want in _B11_TARGET_TERMS.items()
        if got.get(tuple(sorted(key)), Fraction(0)) != want
    }
    ok = not missing
    report(8, "frame transport golden kernel", ok,
           f"all {len(_B11_TARGET_TERMS)} printed terms present with exact "
           f"coefficients" if ok else f"missing or wrong: {missing}")
