"""Tensor equation compiler and method-of-lines runtime.

Turns abstract-index tensor evolution equations into scalar component
equations and executable finite-difference kernels.
"""

from .tensor_ir import (
    TensorError,
    DeclarationError,
    ExpressionError,
    IndexKind,
    Index,
    Symmetry,
    TensorSymbol,
    SymbolTable,
    TensorFactor,
    Deriv,
    Term,
    Expr,
    canonicalize,
    free_indices,
    unparse,
    parse_expression,
)
from .rewrite_engine import (
    NonConvergenceError,
    RewriteRule,
    RuleError,
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
from .systems import (
    SystemDefinition,
    SystemFileError,
    build_system_kernels,
    bundled_system_names,
    convergence_table,
    decomposed_lines,
    expanded_lines,
    generated_files,
    grid_function_names,
    load_run_config,
    load_system,
    parse_run_config,
    resolve_system,
    run_system,
)

__all__ = [
    "TensorError",
    "DeclarationError",
    "ExpressionError",
    "IndexKind",
    "Index",
    "Symmetry",
    "TensorSymbol",
    "SymbolTable",
    "TensorFactor",
    "Deriv",
    "Term",
    "Expr",
    "canonicalize",
    "free_indices",
    "unparse",
    "parse_expression",
    "NonConvergenceError",
    "RewriteRule",
    "RuleError",
    "RuleSet",
    "apply_rules",
    "decompose",
    "define_rule",
    "frame_conversion_rules",
    "metric_split_rule",
    "normal_split_rule",
    "projection_rules",
    "ruleset",
    "ComponentEquation",
    "TensorEquation",
    "component_name",
    "expand_sums",
    "independent_components",
    "scalar_text",
    "scalarize",
    "to_component_equations",
    "KernelIR",
    "StencilConfig",
    "build_kernel",
    "emit_c",
    "Evaluator",
    "EvolutionSystem",
    "Grid",
    "Integrator",
    "MolError",
    "Setter",
    "courant_dt",
    "run",
    "SystemDefinition",
    "SystemFileError",
    "build_system_kernels",
    "bundled_system_names",
    "convergence_table",
    "decomposed_lines",
    "expanded_lines",
    "generated_files",
    "grid_function_names",
    "load_run_config",
    "load_system",
    "parse_run_config",
    "resolve_system",
    "run_system",
]
