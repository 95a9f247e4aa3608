"""YAML problem configuration with unit-aware values.

Internal units are N, mm and MPa.  Quantities may be given as plain numbers
(already in internal units) or as strings such as ``"206.9 GPa"`` or ``"5 kN"``.

Minimal example::

    benchmark: cook
    discretization: {k: 1, l: 2}
    material:
      E: 206.9 GPa
      nu: 0.29
      H: 129.2 MPa
      sigma_y0: 450 MPa
      sigma_yinf: 715 MPa
      delta: 16.93
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from typing import Any

import yaml

from .hho_core import HHOError, check_degrees
from .material import MaterialError, MaterialParams
from .solver import SolverOptions


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_UNITS = {
    "stress": {"Pa": 1e-6, "kPa": 1e-3, "MPa": 1.0, "GPa": 1e3, "N/mm2": 1.0, "N/mm^2": 1.0},
    "force": {"N": 1.0, "kN": 1e3, "MN": 1e6},
    "length": {"mm": 1.0, "cm": 10.0, "m": 1e3, "um": 1e-3},
}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-z/^0-9]*)\s*$")

BENCHMARKS = ("cook", "necking", "sphere", "manufactured", "file")
REQUIRED_KEYS = ("benchmark", "discretization", "material")
_TOP_KEYS = set(REQUIRED_KEYS) | {"mesh", "loading", "solver", "output"}
_MATERIAL_KEYS = {"E": "stress", "nu": None, "H": "stress", "sigma_y0": "stress",
                  "sigma_yinf": "stress", "delta": None}
_MESH_KEYS = {"n", "nx", "ny", "layers", "merge_fraction", "seed", "path"}
_DISC_KEYS = {"k", "l", "beta0", "quadrature_order", "experimental"}
_LOAD_KEYS = {"steps", "load", "displacement", "pressure", "follower", "boundary"}
_SOLVER_KEYS = {"rtol", "atol", "max_iterations", "max_cuts", "divergence_factor"}
_OUTPUT_KEYS = {"directory", "fields"}
_BC_KEYS = {"tag", "type", "components", "value", "traction", "pressure", "follower"}


def parse_quantity(value: Any, kind: str | None, key: str) -> float:
    """Convert a number or a ``"<number> <unit>"`` string to internal units."""
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a number or a quantity string, got {value!r}")
    m = _QUANTITY.match(value)
    if m is None:
        raise ConfigError(f"{key}: cannot parse quantity {value!r}")
    number, unit = float(m.group(1)), m.group(2)
    if not unit:
        return number
    if kind is None:
        raise ConfigError(f"{key}: dimensionless value must not carry a unit, got {value!r}")
    factor = _UNITS[kind].get(unit)
    if factor is None:
        raise ConfigError(f"{key}: unknown {kind} unit {unit!r} (allowed: {', '.join(_UNITS[kind])})")
    return number * factor


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary condition on a tagged boundary of a file mesh; values ramp linearly in t."""

    tag: str
    type: str                          # dirichlet | neumann | pressure
    components: tuple[int, ...] = ()
    value: tuple[float, ...] = ()      # dirichlet displacement or neumann traction at t=1
    pressure: float = 0.0
    follower: bool = False


@dataclass(frozen=True)
class ProblemConfig:
    benchmark: str
    k: int
    l: int
    material: MaterialParams
    beta0: float = 1.0
    quadrature_order: int | None = None
    experimental: bool = False
    mesh: dict = field(default_factory=dict)
    steps: int | None = None
    load: float | None = None          # cook: total force; necking: displacement; sphere: pressure
    follower: bool = False
    boundary: tuple[BoundarySpec, ...] = ()
    solver: SolverOptions = SolverOptions()
    output_directory: str = "results"
    write_fields: bool = True

    @property
    def k_Q(self) -> int:
        return 2 * self.k if self.quadrature_order is None else self.quadrature_order

    def with_beta0(self, beta0: float) -> "ProblemConfig":
        return replace(self, beta0=float(beta0))


def _check_keys(block: Any, allowed: set[str], where: str) -> dict:
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(block).__name__}")
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))} "
                          f"(allowed: {', '.join(sorted(allowed))})")
    return block


def _int(value: Any, key: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {value}")
    return value


def _bool(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{key}: expected true or false, got {value!r}")
    return value


def _material(block: Any) -> MaterialParams:
    block = _check_keys(block, set(_MATERIAL_KEYS), "material")
    missing = [k for k in _MATERIAL_KEYS if k not in block]
    if missing:
        raise ConfigError(f"material: missing key(s) {', '.join(missing)}")
    values = {k: parse_quantity(block[k], kind, f"material.{k}") for k, kind in _MATERIAL_KEYS.items()}
    if not -1.0 < values["nu"] < 0.5:
        raise ConfigError(f"material.nu: must lie in (-1, 0.5), got {values['nu']}")
    try:
        return MaterialParams(**values)
    except (MaterialError, ValueError) as exc:
        raise ConfigError(f"material: {exc}") from None


def _boundary(items: Any) -> tuple[BoundarySpec, ...]:
    if not isinstance(items, list):
        raise ConfigError("loading.boundary: expected a list of boundary conditions")
    out = []
    for i, item in enumerate(items):
        where = f"loading.boundary[{i}]"
        item = _check_keys(item, _BC_KEYS, where)
        if "tag" not in item or "type" not in item:
            raise ConfigError(f"{where}: 'tag' and 'type' are required")
        kind = item["type"]
        if kind == "dirichlet":
            comps = item.get("components")
            if not isinstance(comps, list) or not comps or not all(isinstance(c, int) and 0 <= c < 3 for c in comps):
                raise ConfigError(f"{where}.components: expected a non-empty list of axis indices")
            value = tuple(parse_quantity(v, "length", f"{where}.value") for v in item.get("value", []))
            out.append(BoundarySpec(str(item["tag"]), kind, tuple(comps), value))
        elif kind == "neumann":
            if "traction" not in item:
                raise ConfigError(f"{where}.traction: required for a neumann condition")
            value = tuple(parse_quantity(v, "stress", f"{where}.traction") for v in item["traction"])
            out.append(BoundarySpec(str(item["tag"]), kind, (), value))
        elif kind == "pressure":
            if "pressure" not in item:
                raise ConfigError(f"{where}.pressure: required for a pressure condition")
            out.append(BoundarySpec(str(item["tag"]), kind, (), (),
                                    parse_quantity(item["pressure"], "stress", f"{where}.pressure"),
                                    _bool(item.get("follower", False), f"{where}.follower")))
        else:
            raise ConfigError(f"{where}.type: expected dirichlet, neumann or pressure, got {kind!r}")
    return tuple(out)


def config_from_dict(data: Any) -> ProblemConfig:
    if data is None or data == {}:
        raise ConfigError(f"empty configuration; required keys: {', '.join(REQUIRED_KEYS)}")
    data = _check_keys(data, _TOP_KEYS, "configuration")
    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    bench = data["benchmark"]
    if bench not in BENCHMARKS:
        raise ConfigError(f"benchmark: expected one of {', '.join(BENCHMARKS)}, got {bench!r}")

    disc = _check_keys(data["discretization"], _DISC_KEYS, "discretization")
    if "k" not in disc or "l" not in disc:
        raise ConfigError("discretization: 'k' and 'l' are required")
    k, l = _int(disc["k"], "discretization.k"), _int(disc["l"], "discretization.l")
    experimental = _bool(disc.get("experimental", False), "discretization.experimental")
    try:
        check_degrees(k, l, experimental)
    except HHOError as exc:
        raise ConfigError(f"discretization: invalid (k, l) = ({k}, {l}): {exc}") from None
    beta0 = parse_quantity(disc.get("beta0", 1.0), None, "discretization.beta0")
    if beta0 <= 0:
        raise ConfigError(f"discretization.beta0: must be positive, got {beta0}")
    kq = disc.get("quadrature_order")
    if kq is not None:
        kq = _int(kq, "discretization.quadrature_order")
        if kq < 2 * k:
            raise ConfigError(f"discretization.quadrature_order: must be >= 2k = {2 * k}, got {kq}")

    material = _material(data["material"])

    mesh = dict(_check_keys(data.get("mesh"), _MESH_KEYS, "mesh"))
    for key in ("n", "nx", "ny", "layers"):
        if key in mesh:
            _int(mesh[key], f"mesh.{key}", 1)
    if "seed" in mesh:
        _int(mesh["seed"], "mesh.seed", 0)
    if "merge_fraction" in mesh:
        frac = parse_quantity(mesh["merge_fraction"], None, "mesh.merge_fraction")
        if not 0.0 <= frac <= 1.0:
            raise ConfigError(f"mesh.merge_fraction: must lie in [0, 1], got {frac}")
        mesh["merge_fraction"] = frac
    if bench == "file" and "path" not in mesh:
        raise ConfigError("mesh.path: required when benchmark is 'file'")

    loading = _check_keys(data.get("loading"), _LOAD_KEYS, "loading")
    steps = _int(loading["steps"], "loading.steps", 0) if "steps" in loading else None
    load = None
    for key, kind in (("load", "force"), ("displacement", "length"), ("pressure", "stress")):
        if key in loading:
            if load is not None:
                raise ConfigError("loading: give only one of load, displacement, pressure")
            load = parse_quantity(loading[key], kind, f"loading.{key}")
    follower = _bool(loading.get("follower", False), "loading.follower")
    boundary = _boundary(loading["boundary"]) if "boundary" in loading else ()
    if bench == "file" and not boundary:
        raise ConfigError("loading.boundary: required when benchmark is 'file'")

    sblock = _check_keys(data.get("solver"), _SOLVER_KEYS, "solver")
    defaults = SolverOptions()
    options = SolverOptions(
        rtol=parse_quantity(sblock.get("rtol", defaults.rtol), None, "solver.rtol"),
        atol=parse_quantity(sblock.get("atol", defaults.atol), None, "solver.atol"),
        max_iter=_int(sblock.get("max_iterations", defaults.max_iter), "solver.max_iterations", 1),
        max_cuts=_int(sblock.get("max_cuts", defaults.max_cuts), "solver.max_cuts", 0),
        divergence_factor=parse_quantity(sblock.get("divergence_factor", defaults.divergence_factor),
                                         None, "solver.divergence_factor"),
    )
    if options.rtol <= 0 or options.atol < 0:
        raise ConfigError("solver: rtol must be positive and atol non-negative")

    out = _check_keys(data.get("output"), _OUTPUT_KEYS, "output")
    return ProblemConfig(
        benchmark=bench, k=k, l=l, material=material, beta0=beta0, quadrature_order=kq,
        experimental=experimental, mesh=mesh, steps=steps, load=load, follower=follower,
        boundary=boundary, solver=options,
        output_directory=str(out.get("directory", "results")),
        write_fields=_bool(out.get("fields", True), "output.fields"),
    )


def parse_config(text: str) -> ProblemConfig:
    """Parse and validate a YAML configuration, applying defaults."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    return config_from_dict(data)


def config_fields() -> list[str]:
    return [f.name for f in fields(ProblemConfig)]
