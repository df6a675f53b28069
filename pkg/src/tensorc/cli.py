"""Command-line driver: decompose, expand, generate, run, converge.

Every command exits 0 on success.  Failures print a single line
``error: <ExceptionName>: <message>`` on stderr and exit 1, so wrappers can
parse outcomes without scraping multi-line tracebacks.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .tensor_ir import TensorError
from .systems import (
    SystemFileError,
    convergence_table,
    decomposed_lines,
    expanded_lines,
    generated_files,
    load_run_config,
    resolve_system,
    run_system,
)


class UsageError(TensorError):
    """A command invoked without an argument it needs."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorc",
        description="Tensor evolution systems: symbolic split, component "
        "expansion, kernel generation, and finite-difference runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("decompose", "print the symbolic equations at the rule fixpoint"),
        ("expand", "print the scalar component equations"),
        ("generate", "emit kernel sources and the manifest"),
        ("run", "evolve a system and write norm/error tables"),
        ("converge", "run at several resolutions and report observed order"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("system", help="system file path or bundled system name")
        p.add_argument("--params", help="run parameter file")
        p.add_argument("--out", default=".", help="output directory")
        if name == "converge":
            p.add_argument(
                "--resolutions",
                help="comma-separated grid sizes, e.g. 16,32,64",
            )
    return parser


def _require_params(args) -> str:
    if not args.params:
        raise UsageError(f"{args.command} needs --params <file>")
    return args.params


def cmd_decompose(args) -> int:
    for line in decomposed_lines(resolve_system(args.system)):
        print(line)
    return 0


def cmd_expand(args) -> int:
    for line in expanded_lines(resolve_system(args.system)):
        print(line)
    return 0


def cmd_generate(args) -> int:
    sysdef = resolve_system(args.system)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, content in generated_files(sysdef):
        (out / name).write_text(content)
        print(f"wrote {out / name}")
    return 0


def cmd_run(args) -> int:
    sysdef = resolve_system(args.system)
    config = load_run_config(_require_params(args), sysdef)
    result = run_system(sysdef, config, args.out)
    last_step = result["rows"][-1][0] if result["rows"] else 0
    print(f"ran {sysdef.name} for {last_step} steps")
    for name in result["files"]:
        print(f"wrote {name}")
    if result["errors"]:
        for name, l2, linf in result["errors"]:
            print(f"error_norm {name} l2={l2:.6e} linf={linf:.6e}")
    return 0


def cmd_converge(args) -> int:
    sysdef = resolve_system(args.system)
    config = load_run_config(_require_params(args), sysdef)
    if not args.resolutions:
        raise UsageError("converge needs --resolutions a,b,...")
    try:
        resolutions = [int(r) for r in args.resolutions.split(",") if r.strip()]
    except ValueError:
        raise UsageError(
            f"bad --resolutions {args.resolutions!r}; want integers like 16,32,64"
        ) from None
    for line in convergence_table(sysdef, config, resolutions):
        print(line)
    return 0


_COMMANDS = {
    "decompose": cmd_decompose,
    "expand": cmd_expand,
    "generate": cmd_generate,
    "run": cmd_run,
    "converge": cmd_converge,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (TensorError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
