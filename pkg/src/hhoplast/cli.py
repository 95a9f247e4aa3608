"""Command line interface.

Exit codes: 0 success, 1 input error, 2 Newton non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .driver import run_benchmark
from .export import ExportError, write_results
from .mesh import MeshError, validate_mesh
from .mesh_io import load_msh

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def cmd_run(args) -> int:
    text = _read(args.config)
    cfg = parse_config(text)
    if args.no_fields:
        from dataclasses import replace
        cfg = replace(cfg, write_fields=False)
    out = Path(args.output or cfg.output_directory)
    bundle = run_benchmark(cfg, keep_fields=cfg.write_fields)
    write_results(bundle, out, text)
    h = bundle.history
    print(f"{cfg.benchmark} HHO({cfg.k};{cfg.l}) beta0={cfg.beta0:g}: "
          f"{len(bundle.curve) - 1} steps, {h.total_iterations} Newton iterations, "
          f"final t={h.final_time:g}, results in {out}")
    if not bundle.converged:
        print(f"non-convergence: {h.failure}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    text = _read(args.config)
    base = parse_config(text)
    out = Path(args.output or base.output_directory)
    rows = ["beta0,converged,total_iterations,final_time"]
    status = EXIT_OK
    for beta0 in args.beta0:
        if beta0 <= 0:
            raise ConfigError(f"--beta0: values must be positive, got {beta0}")
        cfg = base.with_beta0(beta0)
        bundle = run_benchmark(cfg, keep_fields=False)
        write_results(bundle, out / f"beta0_{beta0:g}", text)
        h = bundle.history
        rows.append(f"{beta0:.17g},{str(h.converged).lower()},{h.total_iterations},{h.final_time:.17g}")
        print(f"beta0={beta0:g}: converged={h.converged} iterations={h.total_iterations} final t={h.final_time:g}")
        if not h.converged:
            status = EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    return status


def cmd_validate(args) -> int:
    mesh = load_msh(args.mesh)
    report = validate_mesh(mesh)
    print(f"{args.mesh}: {mesh.dimension}D, {mesh.n_cells} cells, {mesh.n_faces} faces, "
          f"tags: {', '.join(sorted({f.tag for f in mesh.faces if f.tag})) or 'none'}")
    for issue in report.issues:
        print(f"  {issue.kind} {issue.entity} {issue.index}: {issue.message}")
    return EXIT_OK if report.ok else EXIT_INPUT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hhoplast", description="HHO finite-strain plasticity solver")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every load step")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured problem")
    run.add_argument("config", help="YAML configuration file")
    run.add_argument("-o", "--output", help="output directory (overrides the configuration)")
    run.add_argument("--no-fields", action="store_true", help="skip VTK field snapshots")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="repeat a run over stabilization parameters")
    sweep.add_argument("config", help="YAML configuration file")
    sweep.add_argument("--beta0", type=float, nargs="+", required=True, help="stabilization parameters")
    sweep.add_argument("-o", "--output", help="output directory")
    sweep.set_defaults(func=cmd_sweep)

    val = sub.add_parser("validate", help="check a Gmsh MSH 2.2 mesh file")
    val.add_argument("mesh", help="mesh file")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
