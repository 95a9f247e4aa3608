"""Result export: VTK point clouds, load curves and run manifests."""

from __future__ import annotations

import hashlib
import platform
import sys
from pathlib import Path

import numpy as np

from .driver import ResultBundle, Snapshot

CURVE_COLUMNS = ("step", "time", "control", "reaction", "iterations", "theta_min")


class ExportError(OSError):
    pass


def _g(x: float) -> str:
    return f"{x:.17g}"


def format_vtk_snapshot(snap: Snapshot, title: str = "quadrature point fields") -> str:
    """Legacy ASCII VTK unstructured grid with one vertex cell per quadrature point."""
    n, d = snap.points.shape
    pts = np.zeros((n, 3))
    pts[:, :d] = snap.points
    out = ["# vtk DataFile Version 3.0", f"{title}, step {snap.step}, t={_g(snap.time)}", "ASCII",
           "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    out += [" ".join(map(_g, p)) for p in pts]
    out.append(f"CELLS {n} {2 * n}")
    out += [f"1 {i}" for i in range(n)]
    out.append(f"CELL_TYPES {n}")
    out += ["1"] * n
    out.append(f"POINT_DATA {n}")
    for name, values in (("p", snap.p), ("trace_sigma", snap.trace_sigma)):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_g(v) for v in values]
    return "\n".join(out) + "\n"


def export_fields(bundle: ResultBundle, directory: str | Path, prefix: str = "fields") -> list[Path]:
    """Write one VTK file per snapshot; returns the written paths."""
    if not bundle.snapshots:
        raise ExportError("result bundle holds no field snapshots")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for snap in bundle.snapshots:
            path = directory / f"{prefix}_{snap.step:04d}.vtk"
            path.write_text(format_vtk_snapshot(snap, bundle.benchmark.name))
            paths.append(path)
    except OSError as exc:
        raise ExportError(f"cannot write fields to {directory}: {exc}") from None
    return paths


def export_curves(bundle: ResultBundle) -> str:
    """Comma-separated load curve with 17 significant digits."""
    lines = [",".join(CURVE_COLUMNS)]
    for s in bundle.curve:
        lines.append(",".join([str(s.step), _g(s.time), _g(s.control), _g(s.reaction),
                               str(s.iterations), _g(s.theta_min)]))
    return "\n".join(lines) + "\n"


def read_curves(text: str) -> dict[str, np.ndarray]:
    rows = [line.split(",") for line in text.strip().splitlines()]
    header, data = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    return {name: data[:, i] for i, name in enumerate(header)}


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def format_manifest(bundle: ResultBundle, config_text: str) -> str:
    import scipy

    from . import __version__

    h = bundle.history
    lines = [
        f"config_sha256: {config_hash(config_text)}",
        f"package_version: {__version__}",
        f"python: {sys.version.split()[0]}",
        f"numpy: {np.__version__}",
        f"scipy: {scipy.__version__}",
        f"platform: {platform.platform()}",
        f"benchmark: {bundle.benchmark.name}",
        f"k: {bundle.config.k}",
        f"l: {bundle.config.l}",
        f"beta0: {_g(bundle.config.beta0)}",
        f"k_Q: {bundle.config.k_Q}",
        f"cells: {bundle.benchmark.mesh.n_cells}",
        f"converged: {str(h.converged).lower()}",
        f"accepted_steps: {len(bundle.curve) - 1}",
        f"final_time: {_g(h.final_time)}",
        f"total_newton_iterations: {h.total_iterations}",
        f"failed_attempts: {h.failed_attempts}",
    ]
    if h.failure:
        lines.append(f"failure: {h.failure}")
    return "\n".join(lines) + "\n"


def write_results(bundle: ResultBundle, directory: str | Path, config_text: str) -> list[Path]:
    """Curves, manifest and (if enabled) field snapshots into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        curve = directory / "curve.csv"
        curve.write_text(export_curves(bundle))
        manifest = directory / "manifest.txt"
        manifest.write_text(format_manifest(bundle, config_text))
    except OSError as exc:
        raise ExportError(f"cannot write results to {directory}: {exc}") from None
    paths = [curve, manifest]
    if bundle.config.write_fields and bundle.snapshots:
        paths += export_fields(bundle, directory)
    return paths
